import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ossnet import tensornet as tn
from ossnet.errors import NumericError, ShapeError
from ossnet.model import forward, init_params, load_checkpoint
from ossnet.sampling import draw_batch
from ossnet.train import (LookaheadState, OptimizerState, RAdamState, TrainConfig, bce,
                          lookahead_step, lr_schedule, optimizer_update, radam_step, total_loss,
                          train, validate)
from ossnet.volume import phantom_dataset


def radam_oracle(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar rectified-Adam written out step by step in plain floats."""
    x, m, v = x0, 0.0, 0.0
    rho_inf = 2 / (1 - b2) - 1
    xs = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        rho = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
        if rho > 4:
            l = math.sqrt(v / (1 - b2 ** t))
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            x = x - lr * r * m_hat / (l + eps)
        else:
            x = x - lr * m_hat
        xs.append(x)
    return xs


def run_radam(x0, grad_fn, steps, lr, **kw):
    x, state, xs = np.array(x0), RAdamState.zeros_like(np.array(x0)), []
    for _ in range(steps):
        x, state = radam_step(x, grad_fn(x), state, lr, **kw)
        xs.append(float(x))
    return xs


# -------------------------------------------------------------------- losses


def test_bce_symmetric_case(rng):
    assert bce(np.full(10, 0.5), rng.integers(0, 2, 10)) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction_bounded():
    assert bce([1.0, 0.0, 1.0], [1, 0, 1]) <= -math.log(1 - 1e-7) + 1e-15


def test_bce_hand_value():
    assert abs(bce([0.9, 0.2], [1, 0]) - (-(math.log(0.9) + math.log(0.8)) / 2)) < 1e-10
    assert bce([0.9, 0.2], [1, 0]) == pytest.approx(0.16425, abs=5e-5)


def test_bce_length_mismatch():
    with pytest.raises(ShapeError):
        bce([0.5, 0.5], [1])


def test_bce_tensor_and_array_agree(rng):
    p, o = rng.uniform(0.01, 0.99, 20), rng.integers(0, 2, 20)
    assert abs(float(bce(tn.Tensor(p), o).data) - bce(p, o)) < 1e-12


def test_total_loss_examples():
    half = np.full(8, 0.5)
    labels = np.array([0, 1] * 4)
    assert total_loss(half, labels, half, labels, alpha=0.0) == bce(half, labels)
    assert abs(total_loss(half, labels, half, labels, 0.1) - 1.1 * math.log(2)) < 1e-10
    assert total_loss(half, labels, None, None, 0.1) == bce(half, labels)


def test_total_loss_composition():
    # Main loss 0.2 and aux loss 0.5 come from single-point predictions.
    main_p, aux_p = math.exp(-0.2), math.exp(-0.5)
    got = total_loss([main_p], [1], [aux_p], [1], alpha=0.1)
    assert abs(got - 0.25) < 1e-10


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 2 ** 31),
       st.floats(0, 2))
def test_total_loss_non_negative(ps, seed, alpha):
    labels = np.random.default_rng(seed).integers(0, 2, len(ps))
    assert total_loss(ps, labels, ps, labels, alpha) >= 0


def test_bce_gradient_matches_analytic(rng):
    p = tn.parameter(rng.uniform(0.05, 0.95, 15), "p")
    o = rng.integers(0, 2, 15)
    with tn.Tape() as tape:
        loss = bce(p, o)
    tn.backprop(tape, loss)
    want = (p.data - o) / (p.data * (1 - p.data)) / 15
    assert np.max(np.abs(p.grad - want)) < 1e-8


# --------------------------------------------------------------------- radam


def test_radam_zero_gradient_fixed_point(rng):
    x = rng.normal(size=5)
    state = RAdamState.zeros_like(x)
    for _ in range(30):
        new, state = radam_step(x, np.zeros(5), state, 0.1)
        assert np.array_equal(new, x)


def test_radam_first_steps_are_momentum():
    xs = run_radam(1.0, lambda x: x, 2, 0.1)
    assert xs[0] == 0.9
    assert abs(xs[1] - (0.9 - 0.1 * 0.18 / 0.19)) < 1e-15


def test_radam_trace_matches_oracle():
    got = run_radam(1.0, lambda x: x, 20, 0.1)
    want = radam_oracle(1.0, lambda x: x, 20, 0.1)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-12
    frozen = [0.9, 0.8052631578947369, 0.7157700524373665, 0.6314866300895146,
              0.6298177307264728, 0.627350600584566]
    assert max(abs(a - b) for a, b in zip(got, frozen)) < 1e-12
    assert abs(got[-1] - 0.5466838729332163) < 1e-12


def test_radam_converges_on_quadratic():
    xs = run_radam(0.0, lambda x: 2 * (x - 3), 200, 0.1)
    assert abs(xs[-1] - 3) < 0.01


def test_radam_rejects_non_finite():
    with pytest.raises(NumericError):
        radam_step(np.zeros(2), np.array([np.nan, 0]), RAdamState.zeros_like(np.zeros(2)), 0.1)


# ----------------------------------------------------------------- lookahead


def _lookahead_trace(fast_values, alpha, k=5, slow0=0.0):
    state = LookaheadState.from_params({"x": np.array(slow0)})
    out = []
    for value in fast_values:
        fast, state = lookahead_step({"x": np.array(value)}, state, k, alpha)
        out.append((float(fast["x"]), float(state.slow["x"])))
    return out


def test_lookahead_single_interpolation():
    trace = _lookahead_trace([2, 4, 6, 8, 10], 0.8)
    assert trace[-1] == (8.0, 8.0)
    assert [t[0] for t in trace[:4]] == [2, 4, 6, 8]
    assert all(t[1] == 0 for t in trace[:4])


def test_lookahead_alpha_extremes():
    assert _lookahead_trace([1, 2, 3, 4, 5], 1.0)[-1] == (5.0, 5.0)
    assert _lookahead_trace([1, 2, 3, 4, 5], 0.0, slow0=-1.0)[-1] == (-1.0, -1.0)


def test_lookahead_syncs_once_per_k():
    trace = _lookahead_trace(np.arange(1, 16, dtype=float), 0.5)
    changes = [i for i in range(1, 15) if trace[i][1] != trace[i - 1][1]]
    assert changes == [4, 9, 14]


def test_radam_lookahead_joint_trace():
    # Fast weights follow RAdam; every fifth step both collapse to the interpolation.
    b1, b2, lr, eps = 0.9, 0.999, 0.1, 1e-8
    x, m, v, slow = 1.0, 0.0, 0.0, 1.0
    rho_inf = 2 / (1 - b2) - 1
    want = []
    for t in range(1, 21):
        g = x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        rho = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
        if rho > 4:
            r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            x = x - lr * r * m_hat / (math.sqrt(v / (1 - b2 ** t)) + eps)
        else:
            x = x - lr * m_hat
        if t % 5 == 0:
            slow = slow + 0.8 * (x - slow)
            x = slow
        want.append(x)

    x_arr, rstate = np.array(1.0), RAdamState.zeros_like(np.array(1.0))
    lstate = LookaheadState.from_params({"x": x_arr})
    got = []
    for _ in range(20):
        x_arr, rstate = radam_step(x_arr, x_arr, rstate, lr)
        fast, lstate = lookahead_step({"x": x_arr}, lstate, 5, 0.8)
        x_arr = fast["x"]
        got.append(float(x_arr))
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-12


# ------------------------------------------------------------------ schedule


def test_lr_schedule_decay_points():
    assert lr_schedule(0, 3e-4) == 3e-4
    assert lr_schedule(19, 3e-4) == 3e-4
    assert lr_schedule(20, 3e-4) == 3e-4 * 0.1
    assert lr_schedule(20, 3e-4) == pytest.approx(3e-5, rel=1e-15)
    assert lr_schedule(29, 3e-4) == lr_schedule(20, 3e-4)
    assert lr_schedule(30, 1e-2) == pytest.approx(1e-4, rel=1e-15)
    assert lr_schedule(45, 1e-2) == lr_schedule(30, 1e-2)
    with pytest.raises(ValueError):
        lr_schedule(-1, 1e-3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(decay_epochs=(30, 20))
    with pytest.raises(ValueError):
        TrainConfig(sampling="edges")
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)


# ------------------------------------------------------------------ training


@pytest.fixture(scope="module")
def tiny_data():
    return phantom_dataset(2, 16, seed=7, blob_radius_range=(2.0, 5.0))


def test_pau_group_uses_its_own_lr(tiny, tiny_data):
    params = init_params(tiny("C"))
    opt = OptimizerState.create(params)
    before = {k: t.data.copy() for k, t in params.tensors.items()}
    grads = {k: np.ones_like(t.data) for k, t in params.tensors.items()}
    optimizer_update(params, grads, opt, 1e-3, 1e-2, TrainConfig())
    assert np.allclose(before["decoder.out.b"] - params["decoder.out.b"].data, 1e-3)
    assert np.allclose(before["decoder.out.pau.num"] - params["decoder.out.pau.num"].data, 1e-2)


def test_loss_decreases_on_fixed_batch(tiny, tiny_data):
    vol, mask = tiny_data[0]
    params = init_params(tiny("C"))
    opt = OptimizerState.create(params)
    batch = draw_batch(vol, mask, 256, "border", np.random.default_rng(0), band_width=2)
    losses = []
    for _ in range(50):
        with tn.Tape() as tape:
            probs, _ = forward(vol, batch, params, "train")
            loss = bce(probs, batch.labels)
        optimizer_update(params, tn.backprop(tape, loss), opt, 3e-3, 1e-2, TrainConfig())
        losses.append(float(loss.data))
    assert np.mean(losses[-5:]) < 0.7 * np.mean(losses[:5])


def test_smoke_run_writes_artifacts(tmp_path, tiny, tiny_data):
    cfg = TrainConfig(epochs=1, batch_volumes=1, n_locations=64, n_val=256)
    result = train(cfg, tiny("C"), tiny_data[:1], out_dir=tmp_path)
    assert np.isfinite(result.history[0]["loss"])
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == 1 and len(lines[0].split()) == 6
    assert (tmp_path / "best.ossckpt").exists() and (tmp_path / "last.ossckpt").exists()
    loaded = load_checkpoint(tmp_path / "best.ossckpt")
    assert any(k.startswith("radam/m/") for k in loaded.optimizer_state)


def test_training_is_bit_reproducible(tmp_path, tiny, tiny_data):
    cfg = TrainConfig(epochs=2, batch_volumes=2, n_locations=128, n_val=256, sampling="border",
                      seed=3)
    train(cfg, tiny("D"), tiny_data, out_dir=tmp_path / "a")
    train(cfg, tiny("D"), tiny_data, out_dir=tmp_path / "b")
    for name in ("best.ossckpt", "last.ossckpt", "metrics.log"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(tiny, tiny_data):
    cfg = TrainConfig(epochs=1, batch_volumes=1, n_locations=64, n_val=128)
    a = train(cfg, tiny("onet"), tiny_data[:1])
    b = train(replace(cfg, seed=1), tiny("onet"), tiny_data[:1])
    assert not np.array_equal(a.params["decoder.out.w"].data, b.params["decoder.out.w"].data)


def test_non_finite_loss_reports_context(tiny, tiny_data, monkeypatch):
    import ossnet.train as train_mod

    real = train_mod.total_loss
    monkeypatch.setattr(train_mod, "total_loss",
                        lambda *a, **kw: tn.mul(real(*a, **kw), np.inf))
    cfg = TrainConfig(epochs=1, batch_volumes=1, n_locations=32, n_val=32)
    with pytest.raises(NumericError, match="epoch 0 step 0"):
        train(cfg, tiny("C"), tiny_data[:1])


def test_validate_perfect_and_empty(tiny, tiny_data):
    from ossnet.volume import Mask

    params = init_params(tiny("onet"))
    for t in params.decoder.values():
        t.data[...] = 0.0
    params["decoder.out.b"].data[...] = 50.0
    vol, _ = tiny_data[0]
    full = Mask(np.ones((16, 16, 16)))
    assert validate(params, [(vol, full)], 500) == (1.0, 1.0)
    params["decoder.out.b"].data[...] = -50.0
    empty = Mask(np.zeros((16, 16, 16)))
    assert validate(params, [(vol, empty)], 500) == (1.0, 1.0)
    assert validate(params, [(vol, full)], 500) == (0.0, 0.0)
