"""Synthetic 16-channel demonstrations standing in for teleoperated trials.

Channels are 8 joint angles (rad, joint 8 is the gripper) followed by 8 joint
torques (Nm). Torques are a static gravity-like term plus joint-velocity
damping plus, for the manipulation tasks, inertial, payload and contact terms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DT = 0.1
N_JOINTS = 8
TASKS = ("updown-repetitive", "updown-twice", "cup-placing", "case-loading")
HEADER = ["t"] + [f"q{i}" for i in range(1, 9)] + [f"tau{i}" for i in range(1, 9)]

HOME = np.array([0.0, -0.3, 0.0, -1.2, 0.0, 0.6, 0.0, 0.8])
GRAVITY = np.array([0.0, 1.6, 0.0, 0.9, 0.0, 0.25, 0.0, 0.0])
DAMPING = np.array([0.5, 0.8, 0.4, 0.6, 0.2, 0.2, 0.1, 0.3])
INERTIA = np.array([0.05, 0.12, 0.04, 0.08, 0.02, 0.02, 0.01, 0.01])
GRIP_OPEN, GRIP_CLOSED = 0.8, 0.15


class IngestionError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str
    duration: float = 10.0
    period_steps: tuple[int, int] = (20, 24)
    amplitude: float = 0.5
    start_jitter: float = 0.01  # rad, roughly 5 mm at the end effector
    waypoint_jitter: float = 0.01
    timing_jitter: int = 2  # steps
    angle_noise: float = 0.002
    torque_noise: float = 0.02
    contact_spikes: int = 0
    contact_scale: float = 0.0
    slew_limit: float = 0.25  # rad per step

    def noiseless(self) -> "TaskSpec":
        return replace(self, start_jitter=0.0, waypoint_jitter=0.0, timing_jitter=0,
                       angle_noise=0.0, torque_noise=0.0, period_steps=(20, 20))


DEFAULT_SPECS = {
    "updown-repetitive": TaskSpec("updown-repetitive", duration=10.0),
    "updown-twice": TaskSpec("updown-twice", duration=10.0),
    "cup-placing": TaskSpec("cup-placing", duration=15.0),
    "case-loading": TaskSpec("case-loading", duration=18.0, waypoint_jitter=0.04,
                             timing_jitter=3, contact_spikes=3, contact_scale=0.6),
}


@dataclass
class TrialLog:
    angles: np.ndarray  # [T, 8]
    torques: np.ndarray  # [T, 8]
    task: str
    trial_id: str
    seed: int
    dt: float = DT
    phase_marks: list[tuple[int, str]] = field(default_factory=list)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.angles, self.torques], axis=1)

    @property
    def T(self) -> int:
        return self.angles.shape[0]

    def mark(self, label: str) -> int:
        for step, lab in self.phase_marks:
            if lab == label:
                return step
        raise KeyError(label)

    def metadata(self) -> dict:
        return {"task": self.task, "trial_id": self.trial_id, "seed": self.seed, "dt": self.dt,
                "phase_marks": [[int(s), lab] for s, lab in self.phase_marks]}


# ---------------------------------------------------------------- helpers

def _min_jerk(s: np.ndarray) -> np.ndarray:
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _min_jerk_rate(s: np.ndarray) -> np.ndarray:
    return 30.0 * s * s * (1.0 - s) ** 2


def _waypoint_path(waypoints: list[np.ndarray], durations: list[int], T: int):
    """Minimum-jerk segments between waypoints, holding the last one; returns q, qdot."""
    q = np.empty((T, N_JOINTS))
    qd = np.zeros((T, N_JOINTS))
    t0 = 0
    for a, b, n in zip(waypoints[:-1], waypoints[1:], durations):
        steps = np.arange(min(n, T - t0))
        s = steps / n
        q[t0:t0 + len(steps)] = a + (b - a) * _min_jerk(s)[:, None]
        qd[t0:t0 + len(steps)] = (b - a) * _min_jerk_rate(s)[:, None] / (n * DT)
        t0 += len(steps)
        if t0 >= T:
            break
    q[t0:] = waypoints[-1]
    return q, qd


def _torques(q: np.ndarray, qd: np.ndarray, qdd: np.ndarray | None = None) -> np.ndarray:
    tau = GRAVITY * np.sin(q + 0.5) + DAMPING * qd
    if qdd is not None:
        tau = tau + INERTIA * qdd
    return tau


def _finish(task: str, seed: int, spec: TaskSpec, q: np.ndarray, tau: np.ndarray,
            rng: np.random.Generator, marks: list[tuple[int, str]]) -> TrialLog:
    q = q + rng.normal(0.0, 1.0, q.shape) * spec.angle_noise
    tau = tau + rng.normal(0.0, 1.0, tau.shape) * spec.torque_noise
    return TrialLog(q, tau, task, f"{task}-{seed:06d}", seed, DT, marks)


def _n_steps(spec: TaskSpec) -> int:
    return int(round(spec.duration / DT))


# ---------------------------------------------------------------- generators

def _updown(seed: int, spec: TaskSpec, cycles: int | None):
    rng = np.random.default_rng(seed)
    T = _n_steps(spec)
    lo, hi = spec.period_steps
    P = int(rng.integers(lo, hi + 1))
    amp_jitter = 0.05 * rng.uniform(-1, 1)  # drawn unconditionally to keep the stream aligned
    amp = spec.amplitude * ((1.0 + amp_jitter) if spec.start_jitter > 0 else 1.0)
    home = HOME + rng.uniform(-1, 1, N_JOINTS) * spec.start_jitter
    t = np.arange(T)
    if cycles is None:
        start = 0
        active = np.ones(T, dtype=bool)
    else:
        start = 5
        active = (t >= start) & (t < start + cycles * P)
    phase = 2.0 * np.pi * (t - start) / P
    wave = np.where(active, np.sin(phase), 0.0)
    dwave = np.where(active, np.cos(phase) * 2.0 * np.pi / (P * DT), 0.0)
    # shoulder and elbow move together, wrist follows with smaller amplitude
    gains = np.array([0.0, 1.0, 0.0, -0.8, 0.0, 0.3, 0.0, 0.0]) * amp
    q = home + wave[:, None] * gains
    qd = dwave[:, None] * gains
    marks = [(0, "start")]
    if cycles is not None:
        marks += [(start, "motion"), (start + P, "cycle"), (start + cycles * P, "stop")]
    return rng, q, _torques(q, qd), marks, P


def gen_updown_repetitive(seed: int, spec: TaskSpec | None = None) -> TrialLog:
    """Up-and-down motion repeated for the whole trial (period 2.0-2.4 s)."""
    spec = spec or DEFAULT_SPECS["updown-repetitive"]
    rng, q, tau, marks, _ = _updown(seed, spec, None)
    return _finish("updown-repetitive", seed, spec, q, tau, rng, marks)


def gen_updown_twice(seed: int, spec: TaskSpec | None = None) -> TrialLog:
    """Two up-and-down cycles from rest, then a hold until the end of the trial."""
    spec = spec or DEFAULT_SPECS["updown-twice"]
    rng, q, tau, marks, _ = _updown(seed, spec, 2)
    return _finish("updown-twice", seed, spec, q, tau, rng, marks)


def _manipulation(task: str, seed: int, spec: TaskSpec, stages: list[tuple[str, np.ndarray, int]],
                  payload: float) -> TrialLog:
    rng = np.random.default_rng(seed)
    T = _n_steps(spec)
    home = HOME + rng.uniform(-1, 1, N_JOINTS) * spec.start_jitter
    home[7] = GRIP_OPEN
    waypoints = [home]
    durations = []
    marks = []
    t = 0
    for label, target, n in stages:
        wp = target.copy()
        wp[:7] += rng.uniform(-1, 1, 7) * spec.waypoint_jitter
        n = max(4, n + int(rng.integers(-spec.timing_jitter, spec.timing_jitter + 1)))
        marks.append((t, label))
        waypoints.append(wp)
        durations.append(n)
        t += n
    q, qd = _waypoint_path(waypoints, durations, T)
    qdd = np.gradient(qd, DT, axis=0)
    tau = _torques(q, qd, qdd)
    start_of = {label: step for step, label in marks}
    grasp_len = durations[[label for _, label in marks].index("grasp")]
    held = np.zeros(T)
    held[start_of["grasp"] + grasp_len: start_of["release"]] = 1.0
    tau[:, 1] += payload * held
    tau[:, 3] += 0.6 * payload * held
    tau[:, 7] += 0.4 * held  # grip force
    if spec.contact_spikes:
        lo = start_of["insert"]
        for _ in range(spec.contact_spikes):
            at = int(rng.integers(lo, min(lo + 15, T - 3)))
            width = int(rng.integers(1, 4))
            tau[at:at + width, rng.integers(1, 6)] += spec.contact_scale * rng.choice([-1.0, 1.0])
    return _finish(task, seed, spec, q, tau, rng, marks)


def _pose(**joints) -> np.ndarray:
    q = HOME.copy()
    for k, v in joints.items():
        q[int(k[1:]) - 1] = v
    return q


def gen_cup_placing(seed: int, spec: TaskSpec | None = None) -> TrialLog:
    """Align posture, approach the cup, grasp, carry to the target square, release, retreat."""
    spec = spec or DEFAULT_SPECS["cup-placing"]
    stages = [
        ("posture", _pose(j1=0.35, j2=-0.1, j4=-1.5, j6=0.9, j8=GRIP_OPEN), 20),
        ("approach", _pose(j1=0.35, j2=0.35, j4=-1.1, j6=0.75, j8=GRIP_OPEN), 22),
        ("grasp", _pose(j1=0.35, j2=0.35, j4=-1.1, j6=0.75, j8=GRIP_CLOSED), 10),
        ("transfer", _pose(j1=-0.35, j2=0.1, j4=-1.3, j6=0.8, j8=GRIP_CLOSED), 30),
        ("place", _pose(j1=-0.35, j2=0.35, j4=-1.1, j6=0.75, j8=GRIP_CLOSED), 15),
        ("release", _pose(j1=-0.35, j2=0.35, j4=-1.1, j6=0.75, j8=GRIP_OPEN), 10),
        ("retreat", _pose(j1=-0.2, j2=-0.2, j4=-1.3, j6=0.6, j8=GRIP_OPEN), 20),
    ]
    return _manipulation("cup-placing", seed, spec, stages, payload=0.5)


def gen_case_loading(seed: int, spec: TaskSpec | None = None) -> TrialLog:
    """Grasp a box, lift, rotate upright and insert it into a tight case."""
    spec = spec or DEFAULT_SPECS["case-loading"]
    stages = [
        ("posture", _pose(j1=0.4, j2=-0.1, j4=-1.6, j6=0.9, j8=GRIP_OPEN), 20),
        ("approach", _pose(j1=0.4, j2=0.4, j4=-1.0, j6=0.7, j8=GRIP_OPEN), 22),
        ("grasp", _pose(j1=0.4, j2=0.4, j4=-1.0, j6=0.7, j8=GRIP_CLOSED), 10),
        ("lift", _pose(j1=0.1, j2=-0.1, j4=-1.5, j5=0.8, j6=0.9, j8=GRIP_CLOSED), 25),
        ("align", _pose(j1=-0.4, j2=0.0, j4=-1.4, j5=1.4, j6=0.6, j8=GRIP_CLOSED), 25),
        ("insert", _pose(j1=-0.4, j2=0.35, j4=-1.0, j5=1.4, j6=0.5, j8=GRIP_CLOSED), 20),
        ("release", _pose(j1=-0.4, j2=0.35, j4=-1.0, j5=1.4, j6=0.5, j8=GRIP_OPEN), 10),
        ("retreat", _pose(j1=-0.2, j2=-0.2, j4=-1.4, j5=0.6, j6=0.7, j8=GRIP_OPEN), 20),
    ]
    return _manipulation("case-loading", seed, spec, stages, payload=0.7)


GENERATORS = {
    "updown-repetitive": gen_updown_repetitive,
    "updown-twice": gen_updown_twice,
    "cup-placing": gen_cup_placing,
    "case-loading": gen_case_loading,
}


def generate(task: str, seed: int, spec: TaskSpec | None = None) -> TrialLog:
    if task not in GENERATORS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    return GENERATORS[task](seed, spec)


def trial_seeds(seed: int, n: int) -> list[int]:
    return [seed * 10_007 + i for i in range(n)]


def make_dataset(task: str, n_train: int = 18, n_test: int = 6, seed: int = 0,
                 spec: TaskSpec | None = None) -> tuple[list[TrialLog], list[TrialLog]]:
    seeds = trial_seeds(seed, n_train + n_test)
    trials = [generate(task, s, spec) for s in seeds]
    return trials[:n_train], trials[n_train:]


# ---------------------------------------------------------------- properties

def slew_ok(trial: TrialLog, limit: float | None = None) -> bool:
    limit = DEFAULT_SPECS[trial.task].slew_limit if limit is None else limit
    return bool(np.all(np.abs(np.diff(trial.angles, axis=0)) <= limit))


@dataclass
class AmbiguityCertificate:
    stop_step: int  # last sample before the hold
    match_step: int  # end of the look-alike window inside the motion
    window_distance: float  # RMS difference of the two w-sample windows
    next_step_gap: float  # RMS difference of the samples that follow them
    tolerance: float

    @property
    def holds(self) -> bool:
        return self.window_distance <= self.tolerance and self.next_step_gap > self.window_distance


def window_ambiguity_certificate(trial: TrialLog, w: int = 20) -> AmbiguityCertificate | None:
    """Find an in-motion window that a w-sample observer cannot tell from the pre-stop window.

    The tolerance is three times the RMS difference expected from sensor noise
    alone. Returns None if no window qualifies.
    """
    stop = trial.mark("stop") - 1
    start = trial.mark("motion")
    x = trial.x
    ref = x[stop - w + 1: stop + 1]
    spec = DEFAULT_SPECS[trial.task]
    noise = np.sqrt(0.5 * (spec.angle_noise ** 2 + spec.torque_noise ** 2)) * np.sqrt(2.0)
    tol = 3.0 * noise + 1e-9
    best = None
    for end in range(start + w - 1, stop - 1):
        d = float(np.sqrt(np.mean((x[end - w + 1: end + 1] - ref) ** 2)))
        if best is None or d < best[1]:
            best = (end, d)
    if best is None:
        return None
    end, d = best
    gap = float(np.sqrt(np.mean((x[end + 1] - x[stop + 1]) ** 2)))
    cert = AmbiguityCertificate(stop, end, d, gap, tol)
    return cert if cert.holds else None


# ---------------------------------------------------------------- file I/O

def write_trials(trials: list[TrialLog], directory) -> list[Path]:
    """One CSV per trial plus a JSON sidecar with the metadata."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for tr in trials:
        p = d / f"{tr.trial_id}.csv"
        with open(p, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(HEADER)
            for k in range(tr.T):
                row = [k * tr.dt] + list(tr.angles[k]) + list(tr.torques[k])
                wr.writerow([format(v, ".17g") for v in row])
        p.with_suffix(".json").write_text(json.dumps(tr.metadata(), indent=1, sort_keys=True) + "\n")
        paths.append(p)
    return paths


def read_trial(path) -> TrialLog:
    p = Path(path)
    meta_path = p.with_suffix(".json")
    if not p.exists():
        raise IngestionError(f"{p}: file not found")
    if not meta_path.exists():
        raise IngestionError(f"{p}: missing metadata sidecar {meta_path.name}")
    with open(p, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != HEADER:
        raise IngestionError(f"{p}: header must be {','.join(HEADER)}")
    body = rows[1:]
    if len(body) < 2:
        raise IngestionError(f"{p}: trial too short ({len(body)} rows)")
    try:
        arr = np.array([[float(v) for v in r] for r in body])
    except ValueError as e:
        raise IngestionError(f"{p}: non-numeric value: {e}") from None
    if arr.ndim != 2 or arr.shape[1] != len(HEADER):
        raise IngestionError(f"{p}: every row needs {len(HEADER)} columns")
    if not np.all(np.isfinite(arr)):
        raise IngestionError(f"{p}: non-finite value")
    meta = json.loads(meta_path.read_text())
    return TrialLog(arr[:, 1:9], arr[:, 9:17], meta["task"], meta["trial_id"], int(meta["seed"]),
                    float(meta["dt"]), [(int(s), str(l)) for s, l in meta["phase_marks"]])


def read_trials(directory) -> list[TrialLog]:
    d = Path(directory)
    files = sorted(d.glob("*.csv"))
    if not files:
        raise IngestionError(f"{d}: no trial CSV files")
    return [read_trial(p) for p in files]


def write_dataset(root, task: str, train: list[TrialLog], test: list[TrialLog]) -> Path:
    base = Path(root) / task
    write_trials(train, base / "train")
    write_trials(test, base / "test")
    return base


def read_dataset(root, task: str) -> tuple[list[TrialLog], list[TrialLog]]:
    base = Path(root) / task
    return read_trials(base / "train"), read_trials(base / "test")
