import numpy as np
import pytest

from treereg.autodiff import Tape, Tensor, backward
from treereg.cloud_io import euler_rotation
from treereg.config import RunConfig
from treereg.diagnostics import TINY_CONFIG
from treereg.model import Model
from treereg.rigid import angular_error, rmse_aggregate, translation_error
from treereg.training import (
    Adam,
    Checkpoint,
    CheckpointError,
    LossState,
    TrainingError,
    clip_grad_norm,
    evaluate,
    evaluate_identity,
    loss_pass,
    make_samples,
    pass_weights,
    rotate_shapes,
    total_loss,
    train,
)

TINY = RunConfig(**TINY_CONFIG, logit_scale=0.1, train_count=4, val_count=2, batch=2, k0=2).validate()


def value(x):
    return float(np.asarray(x.data))


def test_loss_examples():
    r = euler_rotation(0.3, 0.2, -0.1)
    assert value(loss_pass(r, [1, 2, 3], r, [1, 2, 3], 0.0, 0.0)) <= 1e-12
    assert value(loss_pass(r, [1, 0, 0], r, [0, 0, 0], 0.0, 0.0)) == pytest.approx(1.0)
    rz = np.diag([-1.0, -1.0, 1.0])
    assert value(loss_pass(rz, np.zeros(3), np.eye(3), np.zeros(3), 0.0, 0.0)) == pytest.approx(8.0)


def test_loss_with_sigma():
    # exp(-1)*8 + 1 + exp(-(-2))*1 - 2
    got = value(loss_pass(np.diag([-1.0, -1.0, 1.0]), [1, 0, 0], np.eye(3), [0, 0, 0], 1.0, -2.0))
    assert got == pytest.approx(np.exp(-1) * 8 + 1 + np.exp(2) - 2)


def test_loss_nonnegative_and_zero_iff_exact(rng):
    for _ in range(20):
        r = euler_rotation(*rng.uniform(-3, 3, 3))
        t = rng.normal(size=3)
        assert value(loss_pass(r, t, euler_rotation(*rng.uniform(-3, 3, 3)), rng.normal(size=3), 0.0, 0.0)) > 0
        assert abs(value(loss_pass(r, t, r, t, 0.0, 0.0))) <= 1e-12


def test_sigma_gradient_at_perfect_prediction():
    st = LossState()
    assert st.sigma_r == 0 and st.sigma_t == 0
    sr = Tensor(np.zeros(()), requires_grad=True)
    with Tape() as tape:
        loss = total_loss([loss_pass(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), sr, 0.0)])
    backward(tape, loss)
    assert float(sr.grad) == pytest.approx(1.0)


def test_total_loss(rng):
    assert value(total_loss([Tensor(3.5)])) == 3.5
    assert value(total_loss([Tensor(1.0)] * 3)) == pytest.approx(1.75)
    vals = rng.normal(size=5)
    assert value(total_loss([Tensor(v) for v in vals])) == pytest.approx(sum(v * 0.5**k for k, v in enumerate(vals)))
    np.testing.assert_array_equal(pass_weights(3, 1), [0.5, 0.25, 0.125])
    with pytest.raises(ValueError):
        total_loss([])


def test_total_loss_gradients_are_weights():
    parts = [Tensor(np.array(1.0), requires_grad=True) for _ in range(4)]
    with Tape() as tape:
        loss = total_loss(parts)
    backward(tape, loss)
    assert [float(p.grad) for p in parts] == [1.0, 0.5, 0.25, 0.125]


def test_adam_zero_grad_unchanged(rng):
    p = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True)}
    before = p["w"].data.copy()
    p["w"].grad = np.zeros((3, 2))
    opt = Adam(["w"], 1e-2)
    for _ in range(3):
        opt.step(p)
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_first_step_is_lr_sign(rng):
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    p["w"].grad = np.array([2.0, -0.5, 1e-3, -7.0])
    Adam(["w"], 0.1).step(p)
    np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1, 0.1], rtol=1e-4)


def test_clip_grad_norm():
    p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(1))}
    p["a"].grad, p["b"].grad = np.array([6.0, 0.0]), np.array([8.0])
    assert clip_grad_norm(p, ["a", "b"], 5.0) == pytest.approx(10.0)
    np.testing.assert_allclose(np.r_[p["a"].grad, p["b"].grad], [3, 0, 4])
    p["a"].grad = np.array([np.nan, 0])
    with pytest.raises(TrainingError):
        clip_grad_norm(p, ["a"], 5.0)


def test_identity_eval_closed_form():
    samples = make_samples(6, 5, TINY)
    got = evaluate_identity(samples)
    phi, dt = [], []
    for s in samples:
        r, t = s.info.denormalize_transform(s.rotation, s.translation)
        phi.append(angular_error(r, np.eye(3)))
        dt.append(translation_error(t, np.zeros(3)))
    assert got.phi_rmse == pytest.approx(rmse_aggregate(phi), abs=1e-12)
    assert got.t_rmse == pytest.approx(rmse_aggregate(dt), abs=1e-12)
    assert len(got.rows) == 6


def test_oracle_errors_zero():
    for s in make_samples(4, 1, TINY):
        phi, dt = s.world_error(s.rotation, s.translation)
        assert phi <= 1e-6 and dt <= 1e-12


def test_evaluate_row_count():
    res = evaluate(Model(TINY), make_samples(3, 2, TINY), 1)
    assert len(res.rows) == 3 and np.isfinite(res.phi_rmse)


def _run(samples, val):
    return train(TINY, samples, val, epochs=1)


def test_training_deterministic():
    tr, va = make_samples(4, 0, TINY), make_samples(2, 99, TINY)
    a = _run(tr, va)
    b = _run(make_samples(4, 0, TINY), make_samples(2, 99, TINY))
    assert a.history[0]["train_loss"] == b.history[0]["train_loss"]
    assert a.last.to_bytes() == b.last.to_bytes()


def test_rotate_shapes_is_rigid_and_seeded():
    clouds = [s.source for s in make_samples(2, 5, TINY)]
    a, b = rotate_shapes(clouds, 11), rotate_shapes(clouds, 11)
    for src, x, y in zip(clouds, a, b):
        assert np.array_equal(x.points, y.points)
        assert np.abs(x.points).max() <= 1.0
        # pairwise distances scale uniformly under rotation + renormalization
        d0 = np.linalg.norm(src.points[:50, None] - src.points[None, :50], axis=-1)
        d1 = np.linalg.norm(x.points[:50, None] - x.points[None, :50], axis=-1)
        ratio = d1[d0 > 0] / d0[d0 > 0]
        assert np.allclose(ratio, ratio[0], rtol=1e-9)


def test_augmented_training_runs():
    cfg = RunConfig(**{**TINY.to_dict(), "augment_rotation": True}).validate()
    shapes = [s.source for s in make_samples(4, 0, cfg)]
    res = train(cfg, make_samples(4, 0, cfg), make_samples(2, 99, cfg), epochs=2, shapes=shapes)
    assert len(res.history) == 2 and np.isfinite(res.history[-1]["val_loss"])


def test_time_budget_stops_after_first_epoch():
    res = train(TINY, make_samples(4, 0, TINY), make_samples(2, 99, TINY), epochs=5, time_limit=1e-6)
    assert len(res.history) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_diverges_raises():
    tr = make_samples(2, 0, TINY)
    model = Model(TINY)
    model.params["loss.sigma_r"].data = np.array(-1e308 * 10)
    with pytest.raises(TrainingError):
        train(TINY, tr, [], epochs=1, model=model)


def test_checkpoint_round_trip(tmp_path):
    res = _run(make_samples(4, 0, TINY), make_samples(2, 99, TINY))
    ck = res.last
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.epoch == 1 and back.optimizer["step"] == ck.optimizer["step"]
    val = make_samples(2, 7, TINY)
    e1, e2 = evaluate(ck.model(), val, 2), evaluate(back.model(), make_samples(2, 7, TINY), 2)
    assert e1.rows == e2.rows


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"NOT-A-CHECKPOINT 1\n")
    res = _run(make_samples(2, 0, TINY), [])
    data = res.last.to_bytes()
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data[:-8])
