import subprocess
import sys

import numpy as np
import pytest

from treereg.cli import RESULT_SCHEMAS, main
from treereg.cloud_io import PointCloud, synth_shapes, write_xyz

from conftest import GOLDEN


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def rows(out):
    lines = out.strip().splitlines()
    return lines[0].split(","), [l.split(",") for l in lines[1:]]


@pytest.fixture
def cloud_file(tmp_path):
    path = tmp_path / "shape.xyz"
    write_xyz(path, synth_shapes(1, 4, 600, 600)[0])
    return path


def test_build_tree_two_points(tmp_path, capsys):
    src = tmp_path / "a.xyz"
    write_xyz(src, PointCloud([[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]]))
    code, out, err = run(capsys, "build-tree", "--input", src, "--depth", 6, "--dump", tmp_path / "t.txt")
    assert code == 0
    assert out == (GOLDEN / "cli_build_tree_2pts.csv").read_text()
    dump = [l for l in (tmp_path / "t.txt").read_text().splitlines() if not l.startswith("#")]
    assert dump[0].split()[:3] == ["0", "0", "2"] and len(dump) == 3
    assert err.startswith("config ")


def test_make_pair_and_procrustes_gt(tmp_path, cloud_file, capsys):
    code, out, _ = run(capsys, "make-pair", "--input", cloud_file, "--out-dir", tmp_path, "--seed", 3)
    assert code == 0
    assert out == (GOLDEN / "cli_make_pair_seed3.csv").read_text()
    code, out, _ = run(capsys, "register", "--method", "procrustes-gt", "--source", tmp_path / "pair_source.xyz",
                       "--target", tmp_path / "pair_target.xyz", "--gt", tmp_path / "pair_gt.txt")
    head, body = rows(out)
    assert code == 0 and head == RESULT_SCHEMAS["register"]
    rec = dict(zip(head, body[0]))
    assert float(rec["phi_deg"]) <= 1e-7 and float(rec["dt"]) <= 1e-9


def test_register_icp(tmp_path, cloud_file, capsys):
    run(capsys, "make-pair", "--input", cloud_file, "--out-dir", tmp_path, "--max-angle", 4, "--max-translation", 0.02)
    code, out, _ = run(capsys, "register", "--method", "icp", "--source", tmp_path / "pair_source.xyz",
                       "--target", tmp_path / "pair_target.xyz", "--gt", tmp_path / "pair_gt.txt")
    head, body = rows(out)
    rec = dict(zip(head, body[0]))
    assert code == 0 and float(rec["phi_deg"]) < 1.0


def test_trajectory_golden(tmp_path, capsys):
    poses = tmp_path / "poses.txt"
    poses.write_text("1 0 0 1 0 1 0 0 0 0 1 0\n0 -1 0 0 1 0 0 0 0 0 1 0.5\n")
    code, out, _ = run(capsys, "trajectory", "--poses", poses, "--probe", 0, 0, 0)
    assert code == 0
    assert out == (GOLDEN / "cli_trajectory.csv").read_text()


def test_gradcheck_ops_only(capsys):
    code, out, _ = run(capsys, "gradcheck", "--no-pipeline")
    head, body = rows(out)
    assert code == 0 and head == RESULT_SCHEMAS["gradcheck"]
    assert all(r[-1] == "1" for r in body) and len(body) >= 30


def test_bench_tree(cloud_file, capsys):
    code, out, _ = run(capsys, "bench", "--input", cloud_file, "--depth", 5, "--reps", 20, "--skip-inference")
    head, body = rows(out)
    assert code == 0 and body[0][0] == "tree_build" and body[0][1] == "20"
    code, _, err = run(capsys, "bench", "--input", cloud_file, "--reps", 3)
    assert code == 2 and err.strip().splitlines()[-1].startswith("error:")


def test_train_eval_register_rpsrnet(tmp_path, cloud_file, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "max_depth = 4\ndepths_used = [4, 3]\nchannel_widths = [3, 4]\nlift_width = 3\nvoxel_width = 4\n"
        "output_cols = 8\nheads = 2\nfeedforward_dim = 8\nlogit_scale = 0.1\n"
        "train_count = 4\nval_count = 2\nbatch = 2\nk0 = 1\n"
    )
    ck = tmp_path / "m.ckpt"
    code, out, err = run(capsys, "train", "--config", cfg, "--out", ck, "--epochs", 2, "--seed", 1)
    head, body = rows(out)
    assert code == 0 and head == RESULT_SCHEMAS["train"] and len(body) == 2 and ck.exists()
    assert '"logit_scale": 0.1' in err
    code, out, _ = run(capsys, "eval", "--model", ck, "--data", "desk-val", "--passes", 3)
    head, body = rows(out)
    assert code == 0 and [r[0] for r in body] == ["val000", "val001", "rmse", "mean"]
    run(capsys, "make-pair", "--input", cloud_file, "--out-dir", tmp_path / "pairs")
    code, out, _ = run(capsys, "eval", "--model", ck, "--data", tmp_path / "pairs")
    assert code == 0 and rows(out)[1][0][0] == "pair"
    a = run(capsys, "register", "--method", "rpsrnet", "--model", ck, "--passes", 2,
            "--source", tmp_path / "pairs" / "pair_source.xyz", "--target", tmp_path / "pairs" / "pair_target.xyz")
    b = run(capsys, "register", "--method", "rpsrnet", "--model", ck, "--passes", 2,
            "--source", tmp_path / "pairs" / "pair_source.xyz", "--target", tmp_path / "pairs" / "pair_target.xyz")
    assert a[0] == 0 and a[1] == b[1]


def test_errors_exit_nonzero(tmp_path, capsys):
    code, _, err = run(capsys, "build-tree", "--input", tmp_path / "missing.xyz")
    assert code == 2 and "error: no such file" in err
    code, _, err = run(capsys, "register", "--method", "rpsrnet", "--source", tmp_path / "x", "--target", tmp_path / "y")
    assert code == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 3\n")
    code, _, err = run(capsys, "train", "--config", bad, "--out", tmp_path / "o.ckpt")
    assert code == 2 and "unknown configuration keys" in err
    with pytest.raises(SystemExit) as exc:
        main(["register", "--method", "nope", "--source", "a", "--target", "b"])
    assert exc.value.code != 0


def test_env_seed_override(tmp_path, cloud_file, capsys, monkeypatch):
    monkeypatch.setenv("TREEREG_SEED", "3")
    _, out, _ = run(capsys, "make-pair", "--input", cloud_file, "--out-dir", tmp_path)
    assert out == (GOLDEN / "cli_make_pair_seed3.csv").read_text()


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "treereg.cli", "build-tree", "--input", str(tmp_path / "none")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""
