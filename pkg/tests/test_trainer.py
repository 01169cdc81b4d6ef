import math

import numpy as np
import pytest

from mambamotion.models import BaselineConfig, MambaConfig, MambaModel, TransformerModel, load_checkpoint
from mambamotion.taskgen import make_dataset
from mambamotion.tensor import NumericError
from mambamotion.trainer import (AdamState, TrainConfig, TrainingDiverged, adamw_step, batch_arrays,
                                 evaluate_loss, train)


def reference_adamw(w, grads, lr, b1, b2, eps, wd):
    """Textbook AdamW on a flat array, one step per gradient."""
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * wd * w - lr * mhat / (np.sqrt(vhat) + eps)
    return w


def test_first_step_is_lr_sized():
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState(), TrainConfig(lr=1e-3, weight_decay=0.0))
    assert p["w"][0] == pytest.approx(0.999, abs=1e-10)


def test_decoupled_decay_with_zero_gradient():
    cfg = TrainConfig(lr=1e-3, weight_decay=0.01)
    p = {"w": np.array([2.0, -3.0])}
    st = AdamState()
    for _ in range(5):
        adamw_step(p, {"w": np.zeros(2)}, st, cfg)
    np.testing.assert_allclose(p["w"], np.array([2.0, -3.0]) * (1 - 1e-5) ** 5, rtol=1e-15)


def test_zero_gradient_without_decay_is_a_no_op():
    p = {"w": np.array([0.3, -1.2])}
    st = AdamState()
    for _ in range(3):
        adamw_step(p, {"w": np.zeros(2)}, st, TrainConfig(weight_decay=0.0))
    assert p["w"].tolist() == [0.3, -1.2]


def test_matches_reference_over_many_steps(rng):
    cfg = TrainConfig(lr=3e-3, weight_decay=0.05)
    w0 = rng.normal(size=7)
    grads = [rng.normal(size=7) for _ in range(100)]
    p = {"w": w0.copy()}
    st = AdamState()
    for g in grads:
        adamw_step(p, {"w": g}, st, cfg)
    ref = reference_adamw(w0, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    assert np.max(np.abs(p["w"] - ref)) <= 1e-12


@pytest.mark.parametrize("bad", [{"lr": 0.0}, {"lr": -1.0}, {"beta1": 1.0}, {"beta2": 0.0},
                                 {"epochs": 0}, {"batch_size": 0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_non_finite_gradient_names_parameter():
    p = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(NumericError, match="b"):
        adamw_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, AdamState(), TrainConfig())
    assert np.array_equal(p["a"], np.ones(2))


def test_batches_align_targets_and_masks():
    m = MambaModel(MambaConfig(horizon_N=2))
    trials, _ = make_dataset("cup-placing", 2, 0)
    X, Y, M = batch_arrays(trials, m)
    np.testing.assert_array_equal(Y[0, :10], trials[0].x[2:12])
    assert not M[0, :3].any() and not M[0, -2:].any() and M[0, 3:-2].all()


def test_same_seed_is_bit_identical():
    tr, te = make_dataset("updown-twice", 4, 2, seed=1)

    def run():
        m, c = train(MambaModel(MambaConfig(init_seed=5)), tr, te, TrainConfig(epochs=3, batch_size=2, seed=9))
        return m, c

    (m1, c1), (m2, c2) = run(), run()
    assert c1.train == c2.train and c1.test == c2.test
    for n in m1.params:
        assert np.array_equal(m1.params[n].data, m2.params[n].data)
    assert len(c1.train) == len(c1.test) == 3


def test_overfits_one_trial_within_200_epochs():
    # sanity oracle: dropout off, one trial repeated three times per epoch
    tr, _ = make_dataset("updown-repetitive", 1, 0, seed=3)
    _, curve = train(MambaModel(MambaConfig(keep_prob=1.0)), tr * 3, None, TrainConfig(epochs=200, batch_size=1))
    assert min(curve.train) < 0.1 * curve.train[0]


def test_identity_dynamics_drive_loss_to_zero():
    # constant trials: the next sample equals the current one
    tr, _ = make_dataset("updown-repetitive", 2, 0, seed=0)
    for t in tr:
        t.angles[:] = t.angles[0]
        t.torques[:] = t.torques[0]
    _, curve = train(MambaModel(MambaConfig(keep_prob=1.0)), tr, None, TrainConfig(epochs=150, batch_size=1, lr=3e-3))
    assert min(curve.train) < 5e-3 * curve.train[0]


def test_best_epoch_is_restored(tmp_path):
    tr, te = make_dataset("updown-repetitive", 3, 2, seed=4)
    m, curve = train(MambaModel(MambaConfig()), tr, te, TrainConfig(epochs=6, lr=5e-3),
                     checkpoint_path=tmp_path / "best.ckpt")
    assert evaluate_loss(m, te) == min(curve.test)
    assert evaluate_loss(load_checkpoint(tmp_path / "best.ckpt"), te) == min(curve.test)


def test_windowed_transformer_trains_on_row_subsets():
    tr, te = make_dataset("updown-repetitive", 2, 1, seed=0)
    m = TransformerModel(BaselineConfig(window=20, width=16, ffn=16, train_rows=8))
    _, curve = train(m, tr, te, TrainConfig(epochs=2))
    assert all(math.isfinite(v) for v in curve.train + curve.test)


def test_divergence_reports_epoch():
    tr, _ = make_dataset("updown-repetitive", 2, 0)
    with pytest.raises(TrainingDiverged) as e:
        train(MambaModel(MambaConfig(keep_prob=1.0)), tr, None, TrainConfig(epochs=5, lr=1e3))
    assert e.value.epoch >= 0


def test_horizon_mismatch_rejected():
    tr, _ = make_dataset("updown-repetitive", 1, 0)
    with pytest.raises(ValueError):
        train(MambaModel(MambaConfig()), tr, None, TrainConfig(epochs=1, horizon_N=3))


def test_loss_curve_csv(tmp_path):
    tr, te = make_dataset("updown-repetitive", 1, 1)
    _, curve = train(MambaModel(MambaConfig()), tr, te, TrainConfig(epochs=2))
    curve.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_loss" and len(lines) == 3
