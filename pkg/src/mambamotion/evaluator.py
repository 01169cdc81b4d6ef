"""Offline error tables, closed-loop rollouts, success judging and parameter sweeps."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import (BaselineConfig, LowPassFilter, MambaConfig, MambaModel, Model,
                     TransformerModel, LSTMModel)
from .taskgen import TrialLog, generate, make_dataset, trial_seeds
from .trainer import TrainConfig, batch_arrays, train

EVAL_WARMUP = 3  # rows excluded for every model so tables compare like with like
FIXED_A_GRID = (-0.1, -0.5, -2.5, -12.5)


@dataclass
class RmseResult:
    mean: float
    std: float
    per_trial: list[float]


def _eval_mask(model: Model, tr: TrialLog) -> np.ndarray:
    m = model.loss_mask(tr.T).copy()
    m[:EVAL_WARMUP] = False
    return m


def rmse_from_predictions(preds: list[np.ndarray], trials: list[TrialLog], masks, horizon: int) -> RmseResult:
    if not trials:
        raise ValueError("empty test set")
    per = []
    for p, tr, m in zip(preds, trials, masks):
        target = np.zeros_like(tr.x)
        target[: tr.T - horizon] = tr.x[horizon:]
        d = p[m] - target[m]
        per.append(float(np.sqrt(np.mean(d * d))))
    return RmseResult(float(np.mean(per)), float(np.std(per)), per)


def rmse_offline(model: Model, trials: list[TrialLog]) -> RmseResult:
    """Per-trial RMSE over all 16 channels and unmasked rows; mean and std across trials."""
    if not trials:
        raise ValueError("empty test set")
    X, _, _ = batch_arrays(trials, model)
    P = model.predict(X)
    preds = [P[i, : tr.T] for i, tr in enumerate(trials)]
    return rmse_from_predictions(preds, trials, [_eval_mask(model, tr) for tr in trials], model.horizon)


def rmse_streaming(model: MambaModel, trials: list[TrialLog]) -> RmseResult:
    """Same table as :func:`rmse_offline`, computed window by window with carried context."""
    w = model.config.window_w
    preds = []
    for tr in trials:
        ctx = model.new_context()
        rows = []
        n_full = tr.T // w * w
        for s in range(0, n_full, w):
            y, ctx = model.stream_window(tr.x[s: s + w], ctx)
            rows.append(y)
        if n_full < tr.T:
            # shorter final chunk on top of the carried context
            with T.no_grad():
                rows.append(model.forward(tr.x[n_full:], ctx=ctx).data)
        preds.append(np.concatenate(rows, axis=0))
    return rmse_from_predictions(preds, trials, [_eval_mask(model, tr) for tr in trials], model.horizon)


# ---------------------------------------------------------------- online surrogate

def vibration_metric(traj, dt: float) -> float:
    """Peak |x[t+1] - 2 x[t] + x[t-1]| / dt^2 over time and channels."""
    x = np.asarray(traj, dtype=np.float64)
    if x.shape[0] < 3:
        return 0.0
    return float(np.max(np.abs(x[2:] - 2.0 * x[1:-1] + x[:-2])) / (dt * dt))


@dataclass
class Rollout:
    commands: np.ndarray  # [T, 16] commanded stream; rows < w are the initial window
    dt: float
    latencies: list[float]
    budget: float
    n_init: int

    @property
    def overruns(self) -> int:
        return int(sum(l > self.budget for l in self.latencies))

    @property
    def commands_per_second(self) -> float:
        return 1.0 / self.dt

    @property
    def angles(self) -> np.ndarray:
        return self.commands[:, :8]


def _stepper(model: Model, w: int):
    """Callable mapping the history so far to the next-sample prediction."""
    if isinstance(model, MambaModel):
        ctx = [model.new_context()]

        def step(hist: np.ndarray) -> np.ndarray:
            pred, ctx[0] = model.stream_step(hist[-w:], ctx[0], advance=1)
            return pred
        return step
    if isinstance(model, TransformerModel) and model.config.window:
        win = model.config.window

        def step(hist: np.ndarray) -> np.ndarray:
            with T.no_grad():
                return model.forward(hist[-win:], rows=np.array([min(win, len(hist)) - 1])).data[0]
        return step

    def step(hist: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return model.forward(hist).data[-1]
    return step


def rollout_stream(model: Model, init: TrialLog | np.ndarray, cycle: float = 0.1,
                   lpf: LowPassFilter | None = None, steps: int | None = None,
                   w: int = 20) -> Rollout:
    """Closed-loop autoregressive generation from the first w samples of ``init``.

    Every prediction (filtered when ``lpf`` is set) becomes the next command and
    is appended to the model's own input stream. ``cycle`` is the command
    period: 0.1 s nominal, 0.025 s for the 4x speed mode (same samples, quarter
    sample period). Per-step compute time is logged against that budget.
    """
    if model.horizon != 1:
        raise ValueError("closed-loop rollout needs a one-step-ahead model")
    x0 = init.x if isinstance(init, TrialLog) else np.asarray(init, dtype=np.float64)
    total = x0.shape[0] if steps is None else w + steps
    hist = x0[:w].copy()
    if lpf is not None:
        lpf = LowPassFilter(lpf.tau, cycle)
        lpf.reset(hist[-1])
    step = _stepper(model, w)
    out = [row for row in hist]
    lat = []
    for _ in range(total - w):
        t0 = time.perf_counter()
        pred = step(np.asarray(out))
        if lpf is not None:
            pred = lpf.step(pred)
        lat.append(time.perf_counter() - t0)
        out.append(pred)
    return Rollout(np.asarray(out), cycle, lat, cycle, w)


@dataclass
class SuccessCriteria:
    placement_tol: float = 0.1  # RMS joint-angle error (rad, joints 1-7) at the release mark
    v_max: float = 40.0  # peak commanded angular acceleration (rad/s^2), grasp to release
    corridor: float = 0.15  # case loading: max joint deviation (rad) before release
    corridor_from: str = "align"

    def __post_init__(self):
        if min(self.placement_tol, self.v_max, self.corridor) <= 0:
            raise ValueError("success thresholds must be positive")


DEFAULT_CRITERIA = {
    "cup-placing": SuccessCriteria(placement_tol=0.1, v_max=40.0, corridor=0.15),
    "case-loading": SuccessCriteria(placement_tol=0.06, v_max=40.0, corridor=0.1),
}


def carry_span(ref: TrialLog) -> slice:
    """Rows from just before the grasp mark to just after release: the object is held."""
    labels = dict((lab, s) for s, lab in ref.phase_marks)
    if "grasp" not in labels or "release" not in labels:
        raise ValueError(f"{ref.trial_id}: grasp/release phase marks are required")
    return slice(max(labels["grasp"] - 1, 0), labels["release"] + 2)


def judge_success(rollout: Rollout, ref: TrialLog, criteria: SuccessCriteria) -> tuple[bool, str]:
    """Pass/fail with the failure reason: 'drop', 'improper contact' or 'misplaced'."""
    span = carry_span(ref)
    labels = dict((lab, s) for s, lab in ref.phase_marks)
    grasp, release = labels["grasp"], labels["release"]
    q = rollout.angles
    if vibration_metric(q[span], rollout.dt) >= criteria.v_max:
        return False, "drop"
    if ref.task == "case-loading":
        lo = labels.get(criteria.corridor_from, grasp)
        dev = np.abs(q[lo:release, :7] - ref.angles[lo:release, :7])
        if dev.size and dev.max() > criteria.corridor:
            return False, "improper contact"
    err = float(np.sqrt(np.mean((q[release, :7] - ref.angles[release, :7]) ** 2)))
    if err > criteria.placement_tol:
        return False, "misplaced"
    return True, "ok"


def reference_trials(task: str, n: int, seed: int, skip: int = 24) -> list[TrialLog]:
    """Held-out demonstrations for rollouts: trial seeds after the first ``skip`` of the dataset."""
    return [generate(task, s) for s in trial_seeds(seed, skip + n)[skip:]]


def evaluate_online(model: Model, name: str, refs: list[TrialLog], criteria: SuccessCriteria,
                    cycle: float = 0.1, lpf_tau: float | None = None, w: int = 20):
    """One closed-loop rollout per reference; returns per-rollout rows and the rollouts.

    ``vibration`` covers the carry span judged for drops; ``vibration_full``
    covers every generated command including the hand-off from the seed window.
    """
    rows, rollouts = [], []
    for i, ref in enumerate(refs):
        lpf = LowPassFilter(lpf_tau, cycle) if lpf_tau else None
        ro = rollout_stream(model, ref, cycle, lpf, w=w)
        ok, reason = judge_success(ro, ref, criteria)
        rows.append({"model": name, "task": ref.task, "rollout": i, "trial_id": ref.trial_id,
                     "cycle_ms": round(cycle * 1000), "lpf_tau": lpf_tau or 0.0,
                     "success": int(ok), "reason": reason,
                     "vibration": vibration_metric(ro.angles[carry_span(ref)], ro.dt),
                     "vibration_full": vibration_metric(ro.angles[w - 1:], ro.dt)})
        rollouts.append(ro)
    return rows, rollouts


# ---------------------------------------------------------------- experiment cells

def make_model(name: str, seed: int, mamba: dict | None = None, baseline: dict | None = None) -> Model:
    """Named model variants used in the tables: mamba, lstm, transformer-full, transformer-w20."""
    mamba = dict(mamba or {})
    baseline = dict(baseline or {})
    if name == "mamba":
        return MambaModel(MambaConfig(**{**mamba, "init_seed": seed}))
    if name == "lstm":
        return LSTMModel(BaselineConfig(**{**baseline, "kind": "lstm", "window": 0, "init_seed": seed}))
    if name == "transformer-full":
        return TransformerModel(BaselineConfig(**{**baseline, "kind": "transformer", "window": 0,
                                                  "init_seed": seed}))
    if name.startswith("transformer-w"):
        w = int(name[len("transformer-w"):])
        baseline.setdefault("train_rows", WINDOWED_TRAIN_ROWS)
        return TransformerModel(BaselineConfig(**{**baseline, "kind": "transformer", "window": w,
                                                  "init_seed": seed}))
    raise ValueError(f"unknown model name {name!r}")


@dataclass
class CellResult:
    model: str
    task: str
    seed: int
    rmse: float
    rmse_std: float
    final_test_loss: float
    best_test_loss: float
    curve_train: list[float] = field(repr=False, default_factory=list)
    curve_test: list[float] = field(repr=False, default_factory=list)
    extra: dict = field(default_factory=dict)


# training budgets per named variant; the windowed transformer also subsamples rows
DEFAULT_BUDGETS = {
    "mamba": {"epochs": 600, "batch_size": 2},
    "lstm": {"epochs": 100, "batch_size": 6},
    "transformer-full": {"epochs": 100, "batch_size": 6},
    "transformer-w20": {"epochs": 100, "batch_size": 6},
}
WINDOWED_TRAIN_ROWS = 16


def budget_for(name: str, overrides: dict | None = None) -> dict:
    base = DEFAULT_BUDGETS.get(name, DEFAULT_BUDGETS["transformer-w20"] if name.startswith("transformer-w")
                               else {})
    return {**base, **(overrides or {})}


def run_cell(name: str, task: str, seed: int, train_cfg: dict | None = None,
             mamba: dict | None = None, baseline: dict | None = None,
             n_train: int = 18, n_test: int = 6, data_seed: int | None = None,
             return_model: bool = False):
    """Generate data, train one named variant with its budget, score offline RMSE."""
    tr, te = make_dataset(task, n_train, n_test, seed if data_seed is None else data_seed)
    model = make_model(name, seed, mamba, baseline)
    cfg = TrainConfig(**{**budget_for(name, train_cfg), "seed": seed})
    model, curve = train(model, tr, te, cfg)
    r = rmse_offline(model, te)
    cell = CellResult(name, task, seed, r.mean, r.std, curve.test[-1], min(curve.test),
                      curve.train, curve.test)
    return (cell, model, te) if return_model else cell


def state_dispersion(traces: np.ndarray) -> float:
    """Between-trial variance of the state, averaged over steps and coordinates.

    ``traces`` is [trials, T, N]. Small when every trial drives the state
    along nearly the same path, i.e. the state ignores trial differences.
    """
    return float(traces.var(axis=0).mean())


def temporal_variation(trace: np.ndarray) -> float:
    """Std over time of each state coordinate, averaged over coordinates."""
    return float(np.mean(trace.std(axis=0)))


def slope_correlation(trace: np.ndarray) -> float:
    """Mean pairwise correlation of the per-step slopes of the state coordinates."""
    d = np.diff(trace, axis=0)
    c = np.corrcoef(d.T)
    iu = np.triu_indices(c.shape[0], 1)
    return float(np.mean(c[iu])) if len(iu[0]) else 1.0


def sweep_fixed_a(task: str, seeds, grid=FIXED_A_GRID, include_learned: bool = True,
                  train_cfg: dict | None = None, mamba: dict | None = None) -> list[CellResult]:
    cells = []
    settings = [("fixed", a) for a in grid] + ([("learned", -1.0)] if include_learned else [])
    for mode, a_min in settings:
        for seed in seeds:
            cfg = {**(mamba or {}), "a_mode": mode, "a_min": a_min}
            cell, model, te = run_cell("mamba", task, seed, train_cfg, cfg, return_model=True)
            traces = np.stack([model.state_trace(tr.x) for tr in te])
            cell.extra = {"a_mode": mode, "a_min": a_min if mode == "fixed" else None,
                          "a_final": model.a_diag().tolist(),
                          "state_dispersion": state_dispersion(traces),
                          "temporal_variation": float(np.mean([temporal_variation(t) for t in traces])),
                          "slope_correlation": float(np.mean([slope_correlation(t) for t in traces]))}
            cells.append(cell)
    return cells


def sweep_d_state(task: str, seeds, grid=(1, 2, 4, 6, 8), train_cfg: dict | None = None,
                  mamba: dict | None = None, n_train: int = 18, n_test: int = 6) -> list[CellResult]:
    cells = []
    for d in grid:
        for seed in seeds:
            cell = run_cell("mamba", task, seed, train_cfg, {**(mamba or {}), "d_state": d},
                            n_train=n_train, n_test=n_test)
            cell.extra = {"d_state": d}
            cells.append(cell)
    return cells


def ablate_gate(seeds, dims=(2, 4, 6, 8), task: str = "cup-placing",
                train_cfg: dict | None = None, mamba: dict | None = None) -> list[CellResult]:
    """Gated vs gateless Mamba on a 16 train / 8 test split."""
    cells = []
    for d in dims:
        for gate in (False, True):
            for seed in seeds:
                cfg = {**(mamba or {}), "d_state": d, "gate_enabled": gate}
                cell = run_cell("mamba", task, seed, train_cfg, cfg, n_train=16, n_test=8)
                cell.extra = {"d_state": d, "gate": gate}
                cells.append(cell)
    return cells


def dump_states(model: MambaModel, trial: TrialLog, block: int = 0) -> list[list]:
    """Rows of (step, h1..hN, event) with the channel-mean state after each step."""
    trace = model.state_trace(trial.x, block)
    events = {}
    for s, lab in trial.phase_marks:
        events.setdefault(s, []).append(lab)
    return [[k] + trace[k].tolist() + ["|".join(events.get(k, []))] for k in range(trace.shape[0])]


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))


def cells_to_rows(cells: list[CellResult]) -> list[dict]:
    rows = []
    for c in cells:
        d = asdict(c)
        d.pop("curve_train")
        d.pop("curve_test")
        extra = d.pop("extra")
        d.update({k: v for k, v in extra.items() if not isinstance(v, list)})
        rows.append(d)
    return rows
