import numpy as np
import pytest
from hypothesis import given, strategies as st

from mambamotion import evaluator as E
from mambamotion.models import LowPassFilter, MambaConfig, MambaModel, lpf_apply
from mambamotion.taskgen import generate, make_dataset
from mambamotion.trainer import TrainConfig, train


class Oracle:
    """Stand-in model returning the true next sample plus an offset."""

    horizon = 1

    def __init__(self, trials, offset=0.0):
        self.trials, self.offset = trials, offset

    def loss_mask(self, T):
        m = np.ones(T, dtype=bool)
        m[T - 1:] = False
        return m

    def predict(self, X):
        out = np.zeros_like(X)
        out[:, :-1] = X[:, 1:] + self.offset
        return out


def two_pass_rmse(model, trials):
    per = []
    for tr in trials:
        total, n = 0.0, 0
        for t in range(E.EVAL_WARMUP, tr.T - 1):
            for c in range(16):
                pred = tr.x[t + 1, c] + model.offset
                total += (pred - tr.x[t + 1, c]) ** 2
                n += 1
        per.append((total / n) ** 0.5)
    mean = sum(per) / len(per)
    return mean, (sum((p - mean) ** 2 for p in per) / len(per)) ** 0.5


@pytest.fixture(scope="module")
def cup():
    return make_dataset("cup-placing", 0, 4, seed=2)[1]


# ---------------------------------------------------------------- offline RMSE

def test_perfect_and_offset_predictors(cup):
    r = E.rmse_offline(Oracle(cup), cup)
    assert r.mean == 0.0 and r.std == 0.0
    r = E.rmse_offline(Oracle(cup, 0.1), cup)
    assert r.mean == pytest.approx(0.1, abs=1e-15) and r.std <= 1e-15


def test_matches_two_pass_oracle(cup):
    rng = np.random.default_rng(0)
    m = Oracle(cup, 0.0)
    m.offset = rng.normal(size=16)
    r = E.rmse_offline(m, cup)
    per = []
    for tr in cup:
        d = tr.x[E.EVAL_WARMUP + 1:] + m.offset - tr.x[E.EVAL_WARMUP + 1:]
        per.append(np.sqrt(np.sum(d ** 2) / d.size))
    assert abs(r.mean - np.mean(per)) <= 1e-12
    scalar = Oracle(cup, 0.07)
    mean, std = two_pass_rmse(scalar, cup)
    got = E.rmse_offline(scalar, cup)
    assert abs(got.mean - mean) <= 1e-12 and abs(got.std - std) <= 1e-12


def test_empty_test_set_rejected():
    with pytest.raises(ValueError):
        E.rmse_offline(MambaModel(MambaConfig()), [])


def test_streaming_table_equals_offline(cup):
    m = MambaModel(MambaConfig(init_seed=3))
    for p in m.params.values():
        if p.data.ndim and not p.data.any():
            p.data[:] = 0.05
    a, b = E.rmse_offline(m, cup), E.rmse_streaming(m, cup)
    assert a.mean > 0 and abs(a.mean - b.mean) <= 1e-9
    assert max(abs(x - y) for x, y in zip(a.per_trial, b.per_trial)) <= 1e-9


# ---------------------------------------------------------------- vibration metric

def test_vibration_examples():
    ramp = np.outer(np.arange(30), np.linspace(-1, 1, 8))
    assert E.vibration_metric(ramp, 0.1) <= 1e-9
    # a unit excursion lasting one sample: second difference of -2
    pulse = np.zeros((10, 1))
    pulse[5] = 1.0
    assert E.vibration_metric(pulse, 0.1) == pytest.approx(200.0, rel=1e-12)
    step = np.zeros((10, 1))
    step[5:] = 1.0
    assert E.vibration_metric(step, 0.1) == pytest.approx(100.0, rel=1e-12)
    assert E.vibration_metric(lpf_apply(pulse, 0.3, 0.1), 0.1) < 200.0
    assert E.vibration_metric(lpf_apply(step, 0.3, 0.1), 0.1) < 100.0


@given(st.integers(0, 2**31 - 1))
def test_lpf_lowers_vibration_keeps_dc(seed):
    r = np.random.default_rng(seed)
    x = np.cumsum(r.normal(size=(80, 3)), axis=0) + 2.0
    f = LowPassFilter(0.3, 0.1)
    f.reset(x[0])
    y = np.array([f.step(v) for v in x])
    assert E.vibration_metric(y, 0.1) < E.vibration_metric(x, 0.1)
    const = np.full((200, 3), 1.5)
    f.reset(const[0])
    assert np.allclose([f.step(v) for v in const][-1], 1.5, atol=1e-12)


# ---------------------------------------------------------------- success judging

def replay(ref, dt=0.1):
    return E.Rollout(ref.x.copy(), dt, [], dt, 20)


@pytest.mark.parametrize("task", ["cup-placing", "case-loading"])
def test_reference_passes_with_margin(task):
    crit = E.DEFAULT_CRITERIA[task]
    for ref in E.reference_trials(task, 20, 0):
        assert E.judge_success(replay(ref), ref, crit) == (True, "ok")
        g, r = ref.mark("grasp"), ref.mark("release")
        assert E.vibration_metric(ref.angles[g - 1: r + 2], 0.1) * 2 <= crit.v_max


def test_oscillation_is_a_drop():
    ref = generate("cup-placing", 11)
    ro = replay(ref)
    g, r = ref.mark("grasp"), ref.mark("release")
    t = np.arange(g, r) * 0.1
    # 5 Hz sampled at 10 Hz with a quarter-period phase: alternating +/- amplitude
    ro.commands[g:r, 2] += 0.3 * np.sin(2 * np.pi * 5 * t + np.pi / 2)
    assert E.judge_success(ro, ref, E.DEFAULT_CRITERIA["cup-placing"]) == (False, "drop")


def test_corridor_drift_is_improper_contact():
    ref = generate("case-loading", 12)
    ro = replay(ref)
    a, r = ref.mark("align"), ref.mark("release")
    ro.commands[a:r, 3] += np.linspace(0.0, 0.3, r - a)
    ro.commands[r:, 3] = ref.angles[r:, 3]
    assert E.judge_success(ro, ref, E.DEFAULT_CRITERIA["case-loading"]) == (False, "improper contact")


def test_terminal_offset_is_misplaced():
    ref = generate("cup-placing", 13)
    ro = replay(ref)
    ro.commands[:, :7] += 0.15  # rigid offset: smooth, but off target
    assert E.judge_success(ro, ref, E.DEFAULT_CRITERIA["cup-placing"]) == (False, "misplaced")


def test_missing_marks_rejected():
    ref = generate("updown-twice", 1)
    with pytest.raises(ValueError):
        E.judge_success(replay(ref), ref, E.SuccessCriteria())


def test_judging_is_order_independent():
    refs = E.reference_trials("cup-placing", 4, 1)
    crit = E.DEFAULT_CRITERIA["cup-placing"]
    a = [E.judge_success(replay(r), r, crit) for r in refs]
    b = [E.judge_success(replay(r), r, crit) for r in reversed(refs)]
    assert a == b[::-1]


@pytest.mark.parametrize("bad", [{"placement_tol": 0.0}, {"v_max": -1.0}, {"corridor": 0.0}])
def test_thresholds_positive(bad):
    with pytest.raises(ValueError):
        E.SuccessCriteria(**bad)


# ---------------------------------------------------------------- rollouts

@pytest.fixture(scope="module")
def identity_model():
    tr, _ = make_dataset("cup-placing", 2, 0, seed=5)
    for t in tr:
        t.angles[:] = t.angles[0]
        t.torques[:] = t.torques[0]
    m, _ = train(MambaModel(MambaConfig(keep_prob=1.0)), tr, None, TrainConfig(epochs=150, batch_size=1, lr=3e-3))
    return m, tr[0]


def test_identity_rollout_stays_near_initial_pose(identity_model):
    m, tr = identity_model
    ro = E.rollout_stream(m, tr, steps=100)
    assert ro.commands.shape == (120, 16)
    assert np.max(np.abs(ro.commands - tr.x[0])) < 0.1


def test_quarter_cycle_quadruples_command_rate(identity_model):
    m, tr = identity_model
    slow = E.rollout_stream(m, tr, cycle=0.1, steps=10)
    fast = E.rollout_stream(m, tr, cycle=0.025, steps=10)
    assert fast.commands_per_second == pytest.approx(4 * slow.commands_per_second)
    assert np.array_equal(fast.commands, slow.commands)
    assert len(fast.latencies) == 10 and fast.budget == 0.025
    assert fast.overruns == sum(l > 0.025 for l in fast.latencies)


def test_lpf_rollout_is_smoother(identity_model):
    m, _ = identity_model
    tr = generate("cup-placing", 3)
    raw = E.rollout_stream(m, tr, steps=60)
    filt = E.rollout_stream(m, tr, steps=60, lpf=LowPassFilter(0.3, 0.1))
    assert E.vibration_metric(filt.angles[19:], 0.1) < E.vibration_metric(raw.angles[19:], 0.1)


def test_rollout_needs_one_step_model():
    with pytest.raises(ValueError):
        E.rollout_stream(MambaModel(MambaConfig(horizon_N=2)), generate("cup-placing", 0))


@pytest.mark.parametrize("name", ["mamba", "transformer-full", "transformer-w20", "lstm"])
def test_online_rows(name):
    m = E.make_model(name, 0, baseline={"width": 16, "ffn": 16, "lstm_hidden": 8})
    refs = E.reference_trials("cup-placing", 2, 0)
    rows, ros = E.evaluate_online(m, name, refs, E.DEFAULT_CRITERIA["cup-placing"], lpf_tau=0.3)
    assert [r["rollout"] for r in rows] == [0, 1]
    assert all(r["success"] in (0, 1) and r["vibration"] >= 0 for r in rows)
    assert all(ro.commands.shape == (ref.T, 16) for ro, ref in zip(ros, refs))


def test_reference_trials_are_held_out():
    tr, te = make_dataset("cup-placing", seed=4)
    refs = E.reference_trials("cup-placing", 3, 4)
    assert not {r.seed for r in refs} & {t.seed for t in tr + te}


# ---------------------------------------------------------------- state statistics

def test_dump_states_covers_trial():
    tr = generate("cup-placing", 2)
    rows = E.dump_states(MambaModel(MambaConfig()), tr)
    assert len(rows) == tr.T and len(rows[0]) == 1 + 4 + 1
    assert rows[tr.mark("grasp")][-1] == "grasp"


def test_slope_correlation_and_variation_statistics():
    r = np.random.default_rng(0)
    walk = np.cumsum(r.normal(size=(60, 1)), axis=0)
    together = walk * np.array([1.0, 2.0, 0.5]) + 1e-3 * r.normal(size=(60, 3))
    assert E.slope_correlation(together) > 0.9
    assert abs(E.slope_correlation(np.cumsum(r.normal(size=(4000, 3)), axis=0))) < 0.1
    t = np.linspace(0, 1, 50)[:, None]
    assert E.temporal_variation(np.ones((20, 3))) == 0.0
    traces = np.stack([np.tile(t, (1, 2))] * 3)
    assert E.state_dispersion(traces) <= 1e-15


@pytest.fixture(scope="module")
def ladder_extremes():
    """Mamba trained on cup-placing with the slowest and fastest fixed ladders."""
    out = {}
    for a_min in (-0.1, -12.5):
        _, m, te = E.run_cell("mamba", "cup-placing", 0, mamba={"a_mode": "fixed", "a_min": a_min},
                              return_model=True)
        out[a_min] = np.stack([m.state_trace(t.x) for t in te])
    return out


def test_fast_ladder_state_barely_moves(ladder_extremes):
    slow = np.mean([E.temporal_variation(t) for t in ladder_extremes[-0.1]])
    fast = np.mean([E.temporal_variation(t) for t in ladder_extremes[-12.5]])
    assert fast < 0.5 * slow


@pytest.mark.xfail(strict=True, reason="slow-ladder state slopes are not uniform in this reproduction; see ledger")
def test_slow_ladder_slopes_are_uniform(ladder_extremes):
    assert np.mean([E.slope_correlation(t) for t in ladder_extremes[-0.1]]) > 0.9


def test_cells_to_rows_flattens_extra():
    c = E.CellResult("mamba", "cup-placing", 0, 0.1, 0.01, 0.2, 0.15, [1.0], [2.0], {"d_state": 4, "a": [1]})
    (row,) = E.cells_to_rows([c])
    assert row["d_state"] == 4 and "a" not in row and "curve_train" not in row
