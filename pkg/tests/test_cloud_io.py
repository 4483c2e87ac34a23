import numpy as np
import pytest

from treereg.cloud_io import (
    CloudError,
    Perturbation,
    PerturbationSpec,
    PointCloud,
    euler_rotation,
    kitti_pairs,
    make_pair,
    normalize,
    normalize_cloud,
    read_kitti_bin,
    read_xyz,
    sample_primitive,
    synth_shapes,
    write_kitti_bin,
    write_xyz,
)


def test_point_cloud_validation():
    with pytest.raises(CloudError, match="empty cloud"):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(CloudError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(CloudError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    c = PointCloud([[1, 2, 3]])
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0


def test_read_xyz_two_points(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 1 1\n")
    c = read_xyz(p)
    assert len(c) == 2
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 1, 1]])
    assert c.channels is None


def test_read_xyz_comments_and_channels(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# header\n1 2 3 0.5  # trailing\n\n4 5 6 0.25\n")
    c = read_xyz(p)
    np.testing.assert_array_equal(c.channels[:, 0], [0.5, 0.25])


def test_read_xyz_errors(tmp_path):
    empty = tmp_path / "e.xyz"
    empty.write_text("")
    with pytest.raises(CloudError, match="empty cloud"):
        read_xyz(empty)
    short = tmp_path / "s.xyz"
    short.write_text("0 0 0\n1 2\n")
    with pytest.raises(CloudError, match=":2:"):
        read_xyz(short)
    bad = tmp_path / "b.xyz"
    bad.write_text("0 0 x\n")
    with pytest.raises(CloudError, match=":1:"):
        read_xyz(bad)
    with pytest.raises(OSError):
        read_xyz(tmp_path / "missing.xyz")


def test_xyz_round_trip(tmp_path, rng):
    c = PointCloud(rng.normal(size=(50, 3)), rng.normal(size=(50, 2)))
    write_xyz(tmp_path / "r.xyz", c)
    back = read_xyz(tmp_path / "r.xyz")
    np.testing.assert_array_equal(back.points, c.points)
    np.testing.assert_array_equal(back.channels, c.channels)


def test_kitti_bin_decode(tmp_path):
    p = tmp_path / "s.bin"
    np.array([1, 2, 3, 0.5, 4, 5, 6, 0.1], dtype="<f4").tofile(p)
    assert p.stat().st_size == 32
    c = read_kitti_bin(p)
    np.testing.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_allclose(c.channels[:, 0], [0.5, 0.1], rtol=1e-7)


def test_kitti_bin_errors(tmp_path):
    p = tmp_path / "odd.bin"
    p.write_bytes(b"\0" * 17)
    with pytest.raises(CloudError, match="multiple of 16"):
        read_kitti_bin(p)
    z = tmp_path / "zero.bin"
    z.write_bytes(b"")
    with pytest.raises(CloudError, match="empty cloud"):
        read_kitti_bin(z)
    n = tmp_path / "nan.bin"
    np.array([1, np.nan, 3, 0], dtype="<f4").tofile(n)
    with pytest.raises(CloudError, match="non-finite"):
        read_kitti_bin(n)


def test_kitti_round_trip(tmp_path, rng):
    c = PointCloud(rng.normal(size=(10, 3)).astype(np.float32), rng.random(10).astype(np.float32))
    write_kitti_bin(tmp_path / "x.bin", c)
    back = read_kitti_bin(tmp_path / "x.bin")
    np.testing.assert_array_equal(back.points, c.points)


def test_kitti_pairs_stride():
    paths = [f"{i:06d}.bin" for i in range(8)]
    pairs = kitti_pairs(list(reversed(paths)))
    assert pairs[0] == ("000000.bin", "000005.bin")
    assert len(pairs) == 3
    with pytest.raises(ValueError):
        kitti_pairs(paths, 0)


def test_normalize_symmetric_box():
    a = PointCloud([[-2, -2, -2], [0, 0, 0]])
    b = PointCloud([[2, 2, 2]])
    na, nb, info = normalize((a, b))
    assert info.scale == 2.0
    np.testing.assert_array_equal(info.center, 0)
    assert np.abs(np.vstack([na.points, nb.points])).max() <= 1.0


def test_normalize_already_normalized():
    a = PointCloud([[-1, -1, -1], [0.3, 0.1, -0.2]])
    b = PointCloud([[1, 1, 1]])
    na, nb, info = normalize((a, b))
    assert info.scale == 1.0
    np.testing.assert_array_equal(info.center, 0)
    np.testing.assert_array_equal(na.points, a.points)
    np.testing.assert_array_equal(nb.points, b.points)


def test_normalize_elongated_box():
    a = PointCloud([[0, 0, 0], [10, 2, 2]])
    b = PointCloud([[5, 1, 1]])
    na, nb, info = normalize((a, b))
    assert info.scale == 5.0
    np.testing.assert_array_equal(info.center, [5, 1, 1])
    # recompute the output bounding box independently
    out = np.vstack([na.points, nb.points])
    assert np.abs(out).max() == 1.0
    np.testing.assert_allclose(out.max(0), [1, 0.2, 0.2])


def test_normalize_degenerate():
    c = PointCloud([[1, 1, 1], [1, 1, 1]])
    with pytest.raises(CloudError, match="degenerate"):
        normalize((c, c))


def test_normalize_idempotent(rng):
    a, b = PointCloud(rng.normal(size=(40, 3)) * 3 + 1), PointCloud(rng.normal(size=(30, 3)))
    na, nb, _ = normalize((a, b))
    _, _, info2 = normalize((na, nb))
    np.testing.assert_allclose(info2.center, 0, atol=1e-12)
    assert abs(info2.scale - 1.0) <= 1e-12


def test_transform_normalization_round_trip(rng):
    a = PointCloud(rng.normal(size=(40, 3)) * 4 + 2)
    r, t = euler_rotation(0.3, -0.2, 0.9), np.array([1.0, -2.0, 0.5])
    b = a.with_points(a.points @ r.T + t)
    na, nb, info = normalize((a, b))
    rn, tn = info.normalize_transform(r, t)
    np.testing.assert_allclose(na.points @ rn.T + tn, nb.points, atol=1e-12)
    r2, t2 = info.denormalize_transform(rn, tn)
    np.testing.assert_allclose(t2, t, atol=1e-12)
    np.testing.assert_allclose(r2, r)


def test_make_pair_clean_exact(rng):
    src = PointCloud(rng.uniform(-1, 1, (300, 3)))
    s = make_pair(src, PerturbationSpec(), 3)
    err = np.abs(s.source.points @ s.rotation.T + s.translation - s.target.points).max()
    assert err <= 1e-12
    # inverse map recovers the source
    back = (s.target.points - s.translation) @ s.rotation
    np.testing.assert_allclose(back, src.points, atol=1e-12)
    assert np.all((s.angles_deg > 0) & (s.angles_deg <= 45))
    assert np.all(np.abs(s.translation) <= 0.5)
    np.testing.assert_allclose(s.rotation, euler_rotation(*np.deg2rad(s.angles_deg)))


def test_make_pair_deterministic(rng):
    src = PointCloud(rng.uniform(-1, 1, (100, 3)))
    spec = PerturbationSpec("gaussian_noise", 0.1, 4)
    a, b = make_pair(src, spec, 9), make_pair(src, spec, 9)
    np.testing.assert_array_equal(a.source.points, b.source.points)
    np.testing.assert_array_equal(a.rotation, b.rotation)
    c = make_pair(src, spec, 10)
    assert not np.array_equal(a.rotation, c.rotation)


def test_gaussian_noise_count(rng):
    src = PointCloud(rng.uniform(-1, 1, (1000, 3)))
    s = make_pair(src, PerturbationSpec("gaussian_noise", 0.20, 1), 0)
    assert len(s.source) == 1200
    np.testing.assert_array_equal(s.source.points[:1000], src.points)


def test_uniform_noise_range(rng):
    src = PointCloud(rng.uniform(-0.1, 0.1, (500, 3)))
    s = make_pair(src, PerturbationSpec("uniform_noise", 0.5, 1), 0)
    extra = s.source.points[500:]
    assert len(extra) == 250 and np.abs(extra).max() <= 1.0


def test_crop_half_space(rng):
    src = PointCloud(rng.uniform(-1, 1, (1000, 3)))
    s = make_pair(src, PerturbationSpec("crop", 0.20, 2), 0)
    assert len(s.source) == 800
    normal, offset = s.crop_plane
    kept = {tuple(p) for p in s.source.points}
    removed = np.array([p for p in src.points if tuple(p) not in kept])
    assert len(removed) == 200
    assert np.all(removed @ normal > offset)
    assert np.all(s.source.points @ normal < offset)


def test_jitter_tolerance(rng):
    src = PointCloud(rng.uniform(-1, 1, (400, 3)))
    s = make_pair(src, PerturbationSpec("jitter", 0.03, 2), 0)
    d = np.abs(s.source.points - src.points)
    assert d.max() <= 0.03 and d.max() > 0


@pytest.mark.parametrize(
    "kind,level",
    [("gaussian_noise", 1.5), ("uniform_noise", -0.1), ("crop", 1.0), ("jitter", float("nan")), ("bogus", 0.1)],
)
def test_invalid_spec(kind, level):
    with pytest.raises(ValueError):
        PerturbationSpec(kind, level)


def test_perturbation_enum_values():
    assert {p.value for p in Perturbation} == {"clean", "gaussian_noise", "uniform_noise", "crop", "jitter"}


def test_synth_shapes_deterministic():
    a, b = synth_shapes(1, 7), synth_shapes(1, 7)
    np.testing.assert_array_equal(a[0].points, b[0].points)


def test_synth_shapes_bounds():
    clouds = synth_shapes(256, 0)
    assert len(clouds) == 256
    for c in clouds:
        assert 512 <= len(c) <= 4096
        assert np.abs(c.points).max() <= 1.0


def test_sphere_primitive_radius():
    rng = np.random.default_rng(0)
    p = sample_primitive("sphere", 2000, rng, noise=0.005)
    r = np.linalg.norm(p, axis=1)
    assert np.abs(r - 1.0).max() < 6 * 0.005 * np.sqrt(3)
    with pytest.raises(ValueError):
        sample_primitive("torus", 10, rng)
