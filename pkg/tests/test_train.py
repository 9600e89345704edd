import math
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from georepnet import ops
from georepnet.config import TrainConfig, micro_config
from georepnet.data import ArrayDataset
from georepnet.errors import DataError, DimensionError, NonFiniteError, UsageError
from georepnet.gradcheck import check_gradients
from georepnet.nn import Context
from georepnet.repvgg import GeoRepNet, reparameterize_model
from georepnet.train import (
    OptimState,
    adam_step,
    cosine_lr,
    cross_entropy,
    evaluate,
    gradient_check,
    train,
)
from oracles import scalar_adam

SMALL = (32, 32)

# ---------------------------------------------------------------- loss


def test_cross_entropy_closed_forms():
    assert float(cross_entropy(np.zeros((3, 9)), [0, 4, 8]).data) == pytest.approx(2.1972245773362194, abs=1e-12)
    assert float(cross_entropy(np.array([[2.0, 0.0]]), [0]).data) == pytest.approx(0.12692801104297250, abs=1e-12)
    big = np.zeros((1, 9))
    big[0, 3] = 100.0
    assert float(cross_entropy(big, [3]).data) < 1e-40


def test_cross_entropy_is_stable_and_validates():
    logits = np.array([[1000.0, -1000.0, 0.0]])
    assert float(cross_entropy(logits, [1]).data) == pytest.approx(2000.0)
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), [-1, 0])


def test_weighted_cross_entropy_is_weighted_mean():
    logits = np.array([[0.0, 1.0], [2.0, 0.0]])
    nll = -np.log(ops.softmax(logits).data[[0, 1], [0, 0]])
    w = np.array([3.0, 1.0])
    got = float(cross_entropy(logits, [0, 0], weights=w).data)
    assert got == pytest.approx(nll.mean())
    got = float(cross_entropy(logits, [0, 1], weights=w).data)
    nll2 = np.array([-np.log(ops.softmax(logits).data[0, 0]), -np.log(ops.softmax(logits).data[1, 1])])
    assert got == pytest.approx((3 * nll2[0] + nll2[1]) / 4)


# ---------------------------------------------------------------- schedule


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(10, 10, 1e-3, 1e-5) == 1e-5
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-18)
    with pytest.raises(UsageError):
        cosine_lr(11, 10, 1e-3)
    with pytest.raises(UsageError):
        cosine_lr(0, 0, 1e-3)


@given(T=st.integers(1, 500), lr=st.floats(1e-6, 1.0), frac=st.floats(0, 1))
def test_cosine_is_nonincreasing(T, lr, frac):
    lo = lr * frac
    values = [cosine_lr(t, T, lr, lo) for t in range(T + 1)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert values[0] == lr and values[-1] == pytest.approx(lo, abs=1e-18)


# ---------------------------------------------------------------- Adam


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -4.0, 1e-3])
    adam_step(p, {"w": g}, OptimState(), 0.01)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign(g), atol=1e-7)


def test_adam_zero_gradient_still_counts_step():
    p = {"w": np.ones(3)}
    state = OptimState()
    adam_step(p, {"w": np.zeros(3)}, state, 0.1)
    assert state.step == 1 and np.array_equal(p["w"], np.ones(3))


@pytest.mark.parametrize("grads", [[1.0, 1.0], [0.5, -2.0, 3.0, 0.0, 1e-4]])
def test_adam_matches_scalar_oracle(grads):
    p = {"w": np.array([0.25])}
    state = OptimState()
    expected = scalar_adam(0.25, grads, 0.1)
    for g, want in zip(grads, expected):
        adam_step(p, {"w": np.array([g])}, state, 0.1)
        assert abs(p["w"][0] - want) <= 1e-12
    assert state.step == len(grads)
    assert state.m["w"].shape == state.v["w"].shape == (1,)


def test_adam_errors():
    with pytest.raises(DimensionError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, OptimState(), 0.1)
    with pytest.raises(UsageError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(3)}, OptimState(), 0.0)


# ---------------------------------------------------------------- training


def _tiny_dataset(per_class=1, seed=0):
    return ArrayDataset.synthesize([per_class] * 9, seed, size=SMALL)


def test_single_sample_loss_goes_down():
    ds = _tiny_dataset().subset(np.array([4]))
    model = GeoRepNet(micro_config(), seed=0)
    before = float(cross_entropy(model.forward(ds.rgb, ds.depth, training=True), ds.labels).data)
    model = GeoRepNet(micro_config(), seed=0)
    train(model, ds, TrainConfig(epochs=1, batch_size=1, base_lr=1e-3))
    after = float(cross_entropy(model.forward(ds.rgb, ds.depth, training=True), ds.labels).data)
    assert after < before


def test_training_is_bit_deterministic():
    ds = _tiny_dataset(2)
    cfg = TrainConfig(epochs=2, batch_size=4, base_lr=1e-3, seed=3)
    a, ha = train(GeoRepNet(micro_config(), seed=1), ds, cfg)
    b, hb = train(GeoRepNet(micro_config(), seed=1), ds, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert ha == hb
    c, _ = train(GeoRepNet(micro_config(), seed=1), ds, TrainConfig(epochs=2, batch_size=4, base_lr=1e-3, seed=4))
    assert c.to_bytes() != a.to_bytes()


def test_history_records():
    ds = _tiny_dataset()
    _, hist = train(GeoRepNet(micro_config(), seed=0), ds, TrainConfig(epochs=3, batch_size=4, base_lr=1e-3))
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    for h in hist:
        assert set(h) == {"epoch", "loss", "train_accuracy", "lr"}
        assert math.isfinite(h["loss"]) and 0 <= h["train_accuracy"] <= 1
    assert hist[0]["lr"] >= hist[-1]["lr"]


def test_train_rejects_bad_inputs():
    model = GeoRepNet(micro_config(), seed=0)
    empty = _tiny_dataset().subset(np.array([], dtype=int))
    with pytest.raises(UsageError):
        train(model, empty, TrainConfig(epochs=1))
    with pytest.raises(UsageError):
        train(reparameterize_model(model), _tiny_dataset(), TrainConfig(epochs=1))
    with pytest.raises(UsageError):
        evaluate(model, empty)


def test_non_finite_loss_names_the_batch(monkeypatch):
    ds = _tiny_dataset()
    calls = {"n": 0}
    real = ops.cross_entropy

    def poisoned(logits, labels, weights=None):
        calls["n"] += 1
        loss = real(logits, labels, weights)
        if calls["n"] == 2:
            raise NonFiniteError("loss is nan")
        return loss

    monkeypatch.setattr(sys.modules["georepnet.train"], "cross_entropy", poisoned)
    with pytest.raises(NonFiniteError) as err:
        train(GeoRepNet(micro_config(), seed=0), ds, TrainConfig(epochs=1, batch_size=4))
    assert "batch 1" in str(err.value)


@pytest.mark.slow
def test_micro_model_overfits_ninety_samples():
    ds = ArrayDataset.synthesize([10] * 9, 0, size=SMALL)
    model = GeoRepNet(micro_config(), seed=0)
    _, hist = train(model, ds, TrainConfig(epochs=200, batch_size=16, base_lr=2e-3))
    assert hist[-1]["train_accuracy"] >= 0.95
    assert evaluate(model, ds).accuracy >= 0.95


def test_fused_and_unfused_reports_agree():
    ds = _tiny_dataset(3)
    model = GeoRepNet(micro_config(), seed=2)
    train(model, ds, TrainConfig(epochs=3, batch_size=8, base_lr=2e-3))
    a = evaluate(model, ds).to_dict()
    b = evaluate(reparameterize_model(model), ds).to_dict()
    for key in ("accuracy", "macro_f1", "weighted_f1", "auc"):
        assert abs(a[key] - b[key]) <= 1e-3, key
    for key in ("precision", "recall", "f1"):
        assert np.max(np.abs(np.subtract(a[key], b[key]))) <= 1e-3
    for key in a["extra"]:
        assert abs(a["extra"][key] - b["extra"][key]) <= 1e-3


# ---------------------------------------------------------------- gradient checks


def test_linear_toy_gradients_are_exact(rng):
    # Central differences of a linear loss are exact up to roundoff of order
    # ulp(loss) / step, so keep the loss small and every gradient entry O(1).
    x = rng.uniform(0.5, 1.5, (5, 4))
    c = rng.uniform(0.5, 1.5, (5, 3)) / 5
    params = {"w": rng.standard_normal((3, 4)) * 0.01, "b": rng.standard_normal(3) * 0.01}

    def loss_fn(tape):
        out = ops.linear(x, tape.param("w", params["w"]), tape.param("b", params["b"]))
        return ops.sum(out * c)

    report = check_gradients(loss_fn, params)
    assert max(report.values()) <= 1e-10


def test_micro_model_gradient_check_passes():
    report = gradient_check(micro_config(), tolerance=1e-4)
    assert report["passed"], report
    names = set(report["groups"])
    for expected in ("dgpg.lambda0", "dgpg.gamma", "dgpg.w1_raw", "dgpg.w2_raw", "gema.wq", "gema.conv3x3"):
        assert any(n.startswith(expected) for n in names), expected


def test_corrupted_backward_rule_is_caught(monkeypatch):
    monkeypatch.setattr(ops, "_relu_grad", lambda mask, g: 0.5 * g * mask)
    report = gradient_check(micro_config(), tolerance=1e-4)
    assert report["max_error"] > 1e-2
    assert not report["passed"]


def test_model_forward_in_training_context_registers_every_parameter(rng):
    from georepnet.tensor import Tape, backward

    model = GeoRepNet(micro_config(), seed=0, dtype=np.float64)
    tape = Tape()
    rgb = rng.random((2, 3, 32, 32))
    depth = 0.5 + 0.5 * rng.random((2, 1, 32, 32))
    loss = cross_entropy(model.forward(rgb, depth, ctx=Context(tape=tape, training=True)), [0, 1])
    grads = backward(loss)
    assert set(grads) == set(model.named_parameters())
