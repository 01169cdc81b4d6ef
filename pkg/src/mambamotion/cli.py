"""Command-line entry point: data generation, training, evaluation, sweeps, streaming demo.

Every command writes into a fresh output directory (existing directories are
refused) holding ``config.json`` with the fully resolved run configuration,
CSV results and ``summary.json``. Exit status is 0 on success, 1 for invalid
input or configuration and 2 for runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluator as ev
from .models import (BaselineConfig, CheckpointError, MambaConfig, MambaModel, build_model,
                     load_checkpoint)
from .ssm import SsmParams, scan_chunked, scan_parallel, scan_sequential
from .taskgen import (DEFAULT_SPECS, TASKS, IngestionError, TaskSpec, make_dataset, read_dataset,
                      read_trial, write_dataset)
from .tensor import DimensionError, NumericError
from .trainer import TrainConfig, TrainingDiverged, train

DATA_ENV = "MAMBAMOTION_DATA"
MODELS = ("mamba", "lstm", "transformer")


class UsageError(ValueError):
    pass


@dataclass
class OnlineConfig:
    cycle_ms: int = 100
    lpf_tau: float = 0.0  # 0 disables the output filter
    rollouts: int = 20

    def __post_init__(self):
        if self.cycle_ms <= 0 or self.rollouts < 1 or self.lpf_tau < 0:
            raise ValueError("cycle_ms and rollouts must be positive, lpf_tau >= 0")


@dataclass
class RunConfig:
    """Everything a command needs; loaded from JSON, then overridden by flags."""

    task: str = "updown-twice"
    model: str = "mamba"
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n_train: int = 18
    n_test: int = 6
    data: str = ""
    mamba: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    taskspec: dict = field(default_factory=dict)
    success: dict = field(default_factory=dict)
    online: dict = field(default_factory=dict)

    SECTIONS = {"mamba": MambaConfig, "baseline": BaselineConfig, "train": TrainConfig,
                "taskspec": TaskSpec, "success": ev.SuccessCriteria, "online": OnlineConfig}

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; valid: {', '.join(TASKS)}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; valid: {', '.join(MODELS)}")
        for name, cls in self.SECTIONS.items():
            _check_keys(getattr(self, name), cls, name)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, cls, "config")
        return cls(**d)

    # resolved section objects
    def mamba_config(self) -> MambaConfig:
        return MambaConfig(**{**self.mamba, "init_seed": self.mamba.get("init_seed", self.seed)})

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(**{"kind": self.model if self.model != "mamba" else "transformer",
                                 **self.baseline,
                                 "init_seed": self.baseline.get("init_seed", self.seed)})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.train.get("seed", self.seed)})

    def task_spec(self) -> TaskSpec:
        base = asdict(DEFAULT_SPECS[self.task])
        spec = TaskSpec(**{**base, **self.taskspec})
        if spec.kind != self.task:
            raise ValueError(f"taskspec.kind {spec.kind!r} does not match task {self.task!r}")
        return spec

    def criteria(self) -> ev.SuccessCriteria:
        base = ev.DEFAULT_CRITERIA.get(self.task, ev.SuccessCriteria())
        return ev.SuccessCriteria(**{**asdict(base), **self.success})

    def online_config(self) -> OnlineConfig:
        return OnlineConfig(**self.online)

    def resolved(self) -> dict:
        """Plain-data view with every section expanded to its full field set."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["mamba"] = asdict(self.mamba_config())
        out["baseline"] = asdict(self.baseline_config())
        out["train"] = asdict(self.train_config())
        out["taskspec"] = asdict(self.task_spec())
        out["success"] = asdict(self.criteria())
        out["online"] = asdict(self.online_config())
        out["data"] = str(self.data_root())
        return out

    def data_root(self) -> Path:
        return Path(self.data or os.environ.get(DATA_ENV, "data"))


def _check_keys(d, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"{where} must be a JSON object")
    valid = [f.name for f in fields(cls)]
    unknown = sorted(set(d) - set(valid))
    if unknown:
        raise UsageError(f"unknown key(s) {unknown} in {where}; valid keys: {', '.join(valid)}")


# ---------------------------------------------------------------- output helpers

def _fresh_dir(path) -> Path:
    p = Path(path)
    if p.exists():
        raise UsageError(f"output directory {p} already exists; refusing to overwrite")
    p.mkdir(parents=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()])


def _start_run(out, rc: RunConfig, command: str) -> Path:
    run = _fresh_dir(out)
    _write_json(run / "config.json", {"command": command, **rc.resolved()})
    return run


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, rc: RunConfig) -> dict:
    spec = rc.task_spec()
    root = Path(args.out) if args.out else rc.data_root()
    base = root / rc.task
    if base.exists():
        raise UsageError(f"{base} already exists; refusing to overwrite")
    tr, te = make_dataset(rc.task, rc.n_train, rc.n_test, rc.seed, spec)
    write_dataset(root, rc.task, tr, te)
    _write_json(base / "config.json", {"command": "gen-data", **rc.resolved()})
    return {"task": rc.task, "train": len(tr), "test": len(te), "path": str(base)}


def _load_data(rc: RunConfig):
    root = rc.data_root()
    if not (root / rc.task).is_dir():
        raise IngestionError(f"no dataset for {rc.task} under {root} (run gen-data first)")
    return read_dataset(root, rc.task)


def _build(rc: RunConfig):
    if rc.model == "mamba":
        return build_model("mamba", rc.mamba_config())
    return build_model(rc.model, rc.baseline_config())


def cmd_train(args, rc: RunConfig) -> dict:
    tr, te = _load_data(rc)
    run = _start_run(args.out, rc, "train")
    model = _build(rc)
    t0 = time.perf_counter()
    model, curve = train(model, tr, te, rc.train_config(), checkpoint_path=run / "model.ckpt")
    curve.write_csv(run / "loss_curve.csv")
    r = ev.rmse_offline(model, te)
    _write_csv(run / "rmse.csv", [{"task": rc.task, "model": rc.model, "rmse_mean": r.mean,
                                   "rmse_std": r.std, "n_trials": len(te)}])
    return {"run": str(run), "best_test_loss": min(curve.test), "final_test_loss": curve.test[-1],
            "rmse_mean": r.mean, "rmse_std": r.std, "param_count": model.param_count(),
            "train_seconds": time.perf_counter() - t0}


def _model_label(model) -> str:
    if isinstance(model, MambaModel):
        return f"mamba(w={model.config.window_w})"
    if model.kind == "transformer":
        return f"transformer(w={model.config.window or 'T'})"
    return model.kind


def _load_runs(paths) -> list[tuple[str, object]]:
    if not paths:
        raise UsageError("at least one --run directory is required")
    out = []
    for p in paths:
        ck = Path(p) / "model.ckpt"
        if not ck.is_file():
            raise IngestionError(f"{ck}: checkpoint not found")
        out.append((str(p), load_checkpoint(ck)))
    return out


def cmd_eval_offline(args, rc: RunConfig) -> dict:
    runs = _load_runs(args.run)
    _, te = _load_data(rc)
    out = _start_run(args.out, rc, "eval-offline")
    rows = []
    for path, model in runs:
        r = ev.rmse_offline(model, te)
        row = {"task": rc.task, "model": _model_label(model), "run": Path(path).name,
               "rmse_mean": r.mean, "rmse_std": r.std, "n_trials": len(te)}
        if isinstance(model, MambaModel):
            row["streaming_rmse_mean"] = ev.rmse_streaming(model, te).mean
        rows.append(row)
    keys = sorted({k for r in rows for k in r}, key=lambda k: list(rows[0]).index(k) if k in rows[0] else 99)
    rows = [{k: r.get(k, "") for k in keys} for r in rows]
    _write_csv(out / "rmse.csv", rows)
    return {"rows": len(rows)}


def cmd_eval_online(args, rc: RunConfig) -> dict:
    runs = _load_runs(args.run)
    oc = rc.online_config()
    refs = ev.reference_trials(rc.task, oc.rollouts, rc.seed)
    out = _start_run(args.out, rc, "eval-online")
    crit = rc.criteria()
    rows, latencies, summary = [], [], {}
    for path, model in runs:
        label = _model_label(model)
        r, ros = ev.evaluate_online(model, label, refs, crit, oc.cycle_ms / 1000.0, oc.lpf_tau or None)
        rows += r
        lat = np.concatenate([ro.latencies for ro in ros])
        latencies.append({"model": label, "max_ms": 1000 * lat.max(),
                          "overruns": int(sum(ro.overruns for ro in ros))})
        summary[label] = {"success": f"{sum(x['success'] for x in r)}/{len(r)}",
                          "median_vibration": float(np.median([x["vibration"] for x in r]))}
    _write_csv(out / "online.csv", rows)
    # timing varies run to run, so it stays out of the CSV results
    _write_json(out / "latency.json", latencies)
    return summary


def _seeds(rc: RunConfig) -> list[int]:
    return [int(s) for s in rc.seeds]


def _write_curves(path: Path, cells) -> None:
    rows = []
    for c in cells:
        for e, (a, b) in enumerate(zip(c.curve_train, c.curve_test)):
            rows.append({**{k: v for k, v in c.extra.items() if not isinstance(v, list)},
                         "seed": c.seed, "epoch": e, "train_loss": a, "test_loss": b})
    _write_csv(path, rows)


def cmd_sweep_a(args, rc: RunConfig) -> dict:
    out = _start_run(args.out, rc, "sweep-a")
    cells = ev.sweep_fixed_a(rc.task, _seeds(rc), train_cfg=rc.train or None, mamba=rc.mamba)
    _write_csv(out / "sweep_a.csv", ev.cells_to_rows(cells))
    return _median_table(cells, lambda c: c.extra["a_mode"] + ":" + str(c.extra["a_min"]))


def cmd_sweep_dim(args, rc: RunConfig) -> dict:
    out = _start_run(args.out, rc, "sweep-dim")
    cells = ev.sweep_d_state(rc.task, _seeds(rc), train_cfg=rc.train or None, mamba=rc.mamba)
    _write_csv(out / "sweep_dim.csv", ev.cells_to_rows(cells))
    _write_curves(out / "curves.csv", cells)
    return _median_table(cells, lambda c: f"d_state={c.extra['d_state']}", "final_test_loss")


def cmd_ablate_gate(args, rc: RunConfig) -> dict:
    out = _start_run(args.out, rc, "ablate-gate")
    cells = ev.ablate_gate(_seeds(rc), train_cfg=rc.train or None, mamba=rc.mamba, task=rc.task)
    _write_csv(out / "ablate_gate.csv", ev.cells_to_rows(cells))
    _write_curves(out / "curves.csv", cells)
    return _median_table(cells, lambda c: f"d_state={c.extra['d_state']},gate={int(c.extra['gate'])}",
                         "final_test_loss")


def _median_table(cells, key, metric: str = "rmse") -> dict:
    groups: dict[str, list[float]] = {}
    for c in cells:
        groups.setdefault(key(c), []).append(getattr(c, metric))
    return {k: ev.median(v) for k, v in groups.items()}


def cmd_dump_states(args, rc: RunConfig) -> dict:
    (path, model), = _load_runs(args.run)
    if not isinstance(model, MambaModel):
        raise UsageError("dump-states needs a Mamba checkpoint")
    if args.trial:
        trial = read_trial(args.trial)
    else:
        _, te = _load_data(rc)
        trial = te[args.index]
    out = _start_run(args.out, rc, "dump-states")
    rows = ev.dump_states(model, trial)
    N = model.config.d_state
    _write_csv(out / "states.csv", [dict(zip(["step"] + [f"h{i + 1}" for i in range(N)] + ["event"], r))
                                    for r in rows])
    trace = model.state_trace(trial.x)
    return {"trial": trial.trial_id, "steps": len(rows),
            "temporal_variation": ev.temporal_variation(trace),
            "slope_correlation": ev.slope_correlation(trace)}


def cmd_stream_demo(args, rc: RunConfig) -> dict:
    (path, model), = _load_runs(args.run)
    oc = rc.online_config()
    cycle = oc.cycle_ms / 1000.0
    ref = ev.reference_trials(rc.task, 1, rc.seed)[0]
    out = _start_run(args.out, rc, "stream-demo")
    lpf = ev.LowPassFilter(oc.lpf_tau, cycle) if oc.lpf_tau else None
    ro = ev.rollout_stream(model, ref, cycle, lpf)
    cols = [f"q{i}" for i in range(1, 9)] + [f"tau{i}" for i in range(1, 9)]
    _write_csv(out / "commands.csv", [{"step": k, "t": k * cycle, **dict(zip(cols, row))}
                                      for k, row in enumerate(ro.commands)])
    (out / "latency.log").write_text("".join(f"{k + ro.n_init}\t{1000 * l:.4f}\n"
                                             for k, l in enumerate(ro.latencies)))
    return {"cycle_ms": oc.cycle_ms, "commands_per_second": ro.commands_per_second,
            "vibration": ev.vibration_metric(ro.angles[ro.n_init - 1:], ro.dt),
            "max_latency_ms": 1000 * max(ro.latencies), "overruns": ro.overruns}


def cmd_bench_scan(args, rc: RunConfig) -> dict:
    out = _start_run(args.out, rc, "bench-scan")
    rng = np.random.default_rng(rc.seed)
    cfg = rc.mamba_config()
    params = SsmParams.random(cfg.d_inner, cfg.d_state, rng, a_min=cfg.a_min)
    u = rng.normal(size=(args.length, cfg.d_inner))
    t0 = time.perf_counter()
    y_seq, _, _ = scan_sequential(u, params)
    t1 = time.perf_counter()
    y_par, _, _ = scan_parallel(u, params)
    t2 = time.perf_counter()
    chunks, h = [], None
    for s in range(0, args.length, cfg.window_w):
        y, h = scan_chunked(u[s: s + cfg.window_w], params, h)
        chunks.append(y)
    y_chk = np.concatenate(chunks, axis=0)
    t3 = time.perf_counter()
    rows = [{"method": "parallel", "max_abs_diff": float(np.abs(y_par - y_seq).max())},
            {"method": "chunked", "max_abs_diff": float(np.abs(y_chk - y_seq).max())}]
    _write_csv(out / "scan_diff.csv", rows)
    return {"length": args.length, "sequential_s": t1 - t0, "parallel_s": t2 - t1, "chunked_s": t3 - t2,
            **{r["method"] + "_max_abs_diff": r["max_abs_diff"] for r in rows}}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval-offline": cmd_eval_offline,
    "eval-online": cmd_eval_online, "sweep-a": cmd_sweep_a, "sweep-dim": cmd_sweep_dim,
    "ablate-gate": cmd_ablate_gate, "dump-states": cmd_dump_states, "stream-demo": cmd_stream_demo,
    "bench-scan": cmd_bench_scan,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}; valid options: {' '.join(self.flags())}")

    def flags(self) -> list[str]:
        return sorted(s for s in self._option_string_actions if s.startswith("--"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mambamotion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p.commands = {}
    for name in COMMANDS:
        s = p.commands[name] = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--task", choices=TASKS)
        s.add_argument("--seed", type=int)
        s.add_argument("--data", help=f"dataset root (default ${DATA_ENV} or ./data)")
        s.add_argument("--out", required=name != "gen-data", help="fresh output directory")
        if name in ("train",):
            s.add_argument("--model", choices=MODELS)
            s.add_argument("--epochs", type=int)
            s.add_argument("--window", type=int, help="baseline input window (0 = full history)")
        if name in ("eval-offline", "eval-online", "dump-states", "stream-demo"):
            s.add_argument("--run", action="append", help="run directory holding model.ckpt")
        if name in ("eval-online", "stream-demo"):
            s.add_argument("--cycle", help="command period, e.g. 100ms or 25ms")
            s.add_argument("--lpf", type=float, help="low-pass time constant in seconds (0 = off)")
        if name in ("sweep-a", "sweep-dim", "ablate-gate"):
            s.add_argument("--seeds", help="comma-separated seed list")
            s.add_argument("--epochs", type=int)
        if name == "dump-states":
            s.add_argument("--trial", help="trial CSV (default: a test trial from --data)")
            s.add_argument("--index", type=int, default=0)
        if name == "bench-scan":
            s.add_argument("--length", type=int, default=1000)
    return p


def _parse_cycle(text: str) -> int:
    t = text.strip().lower()
    try:
        return int(t[:-2]) if t.endswith("ms") else int(round(float(t.rstrip("s")) * 1000))
    except ValueError:
        raise UsageError(f"cannot parse cycle {text!r}; use e.g. 100ms or 25ms") from None


def resolve_config(args) -> RunConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON: {e}") from None
        _check_keys(d, RunConfig, args.config)
    d = json.loads(json.dumps(d))
    for key in ("task", "seed", "data", "model"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "epochs", None) is not None:
        d.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "window", None) is not None:
        d.setdefault("baseline", {})["window"] = args.window
    if getattr(args, "seeds", None):
        d["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "cycle", None):
        d.setdefault("online", {})["cycle_ms"] = _parse_cycle(args.cycle)
    if getattr(args, "lpf", None) is not None:
        d.setdefault("online", {})["lpf_tau"] = args.lpf
    rc = RunConfig.from_dict(d)
    rc.resolved()  # validates every section eagerly
    return rc


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args, extra = parser.parse_known_args(argv)
        if extra:
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
        rc = resolve_config(args)
        summary = COMMANDS[args.command](args, rc)
    except (UsageError, IngestionError, CheckpointError, DimensionError, TypeError, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, TrainingDiverged, ArithmeticError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    out = getattr(args, "out", None)
    if out and Path(out).is_dir() and args.command != "gen-data":
        _write_json(Path(out) / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
