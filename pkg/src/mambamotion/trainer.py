"""AdamW and the whole-trial training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import Model, TransformerModel, save_checkpoint
from .taskgen import TrialLog
from .tensor import NumericError, Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 6
    seed: int = 0
    horizon_N: int | None = None  # must match the model when given

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               cfg: TrainConfig) -> None:
    """In-place AdamW update with bias-corrected moments and decoupled decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - cfg.lr * cfg.weight_decay
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step({n: p.data for n, p in self.params.items()}, grads, self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class LossCurve:
    train: list[float] = field(default_factory=list)
    test: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "test_loss"])
            for i, (a, b) in enumerate(zip(self.train, self.test)):
                w.writerow([i, format(a, ".17g"), format(b, ".17g")])


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss {loss})")
        self.epoch = epoch
        self.loss = loss


def batch_arrays(trials: list[TrialLog], model: Model):
    """Stack trials (zero-padded at the end) into inputs, N-ahead targets and a row mask."""
    N = model.horizon
    Tmax = max(tr.T for tr in trials)
    B = len(trials)
    X = np.zeros((B, Tmax, 16))
    Y = np.zeros((B, Tmax, 16))
    M = np.zeros((B, Tmax), dtype=bool)
    for i, tr in enumerate(trials):
        x = tr.x
        X[i, : tr.T] = x
        Y[i, : tr.T - N] = x[N:]
        M[i, : tr.T] = model.loss_mask(tr.T)
    return X, Y, M


def _loss(model: Model, X, Y, M, training: bool, rng, rows=None) -> Tensor:
    if rows is not None:
        out = model.forward(X, training=training, rng=rng, rows=rows)
        return T.mse_loss(out, Y[:, rows], M[:, rows])
    return T.mse_loss(model.forward(X, training=training, rng=rng), Y, M)


def evaluate_loss(model: Model, trials: list[TrialLog]) -> float:
    X, Y, M = batch_arrays(trials, model)
    with T.no_grad():
        return _loss(model, X, Y, M, False, None).item()


def train(model: Model, train_trials: list[TrialLog], test_trials: list[TrialLog] | None,
          cfg: TrainConfig, checkpoint_path=None, restore_best: bool = True):
    """Fixed-epoch AdamW training; returns the model (best test epoch) and its loss curve."""
    if not train_trials:
        raise ValueError("empty training set")
    if cfg.horizon_N is not None and cfg.horizon_N != model.horizon:
        raise ValueError(f"train horizon {cfg.horizon_N} != model horizon {model.horizon}")
    order_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    row_rng = np.random.default_rng([cfg.seed, 2])
    opt = AdamW(model.trainable(), cfg)
    curve = LossCurve()
    best = (math.inf, None)
    sub_rows = getattr(model.config, "train_rows", 0) if isinstance(model, TransformerModel) else 0
    X_all, Y_all, M_all = batch_arrays(train_trials, model)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train_trials))
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[s: s + cfg.batch_size])
            X, Y, M = X_all[idx], Y_all[idx], M_all[idx]
            rows = None
            if sub_rows and model.config.window:
                valid = np.flatnonzero(M.any(axis=0))
                rows = np.sort(row_rng.choice(valid, min(sub_rows, len(valid)), replace=False))
            opt.zero_grad()
            loss = _loss(model, X, Y, M, True, drop_rng, rows)
            lv = loss.item()
            if not math.isfinite(lv) or lv > 1e6:
                raise TrainingDiverged(epoch, lv)
            T.backward(loss)
            opt.step()
            losses.append(lv)
        curve.train.append(float(np.mean(losses)))
        test_loss = evaluate_loss(model, test_trials) if test_trials else curve.train[-1]
        if not math.isfinite(test_loss) or test_loss > 1e6:
            raise TrainingDiverged(epoch, test_loss)
        curve.test.append(test_loss)
        if test_loss < best[0]:
            best = (test_loss, {n: p.data.copy() for n, p in model.params.items()})
    if restore_best and best[1] is not None:
        for n, arr in best[1].items():
            model.params[n].data = arr
    if checkpoint_path is not None:
        save_checkpoint(model, Path(checkpoint_path))
    return model, curve
