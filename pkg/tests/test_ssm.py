import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import check_op
from mambamotion import ssm
from mambamotion.ssm import (SsmParams, SsmState, StabilityError, build_fixed_a, discretize,
                             impulse_response, scan_chunked, scan_parallel, scan_sequential,
                             select, selective_scan)


def naive_scan(u, p: SsmParams):
    """Scalar-loop reference recurrence, written independently of the library."""
    T, D = u.shape
    N = len(p.a_diag)
    h = [[0.0] * N for _ in range(D)]
    y = np.zeros((T, D))
    for t in range(T):
        B = [sum(u[t, i] * p.w_B[i, n] for i in range(D)) for n in range(N)]
        C = [sum(u[t, i] * p.w_C[i, n] for i in range(D)) for n in range(N)]
        for d in range(D):
            z = sum(u[t, i] * p.w_delta[i, d] for i in range(D)) + p.b_delta[d]
            delta = math.log1p(math.exp(z))
            for n in range(N):
                x = delta * p.a_diag[n]
                h[d][n] = math.exp(x) * h[d][n] + (math.expm1(x) / x) * delta * B[n] * u[t, d]
            y[t, d] = sum(C[n] * h[d][n] for n in range(N))
    return y


# ---------------------------------------------------------------- ladder

def test_ladder_examples():
    np.testing.assert_allclose(build_fixed_a(-2.5, 4), [-2.5, -1.0, -0.4, -0.16], rtol=1e-15)
    np.testing.assert_allclose(build_fixed_a(-0.1, 4), [-0.1, -0.04, -0.016, -0.0064], rtol=1e-15)
    assert build_fixed_a(-0.7, 1).tolist() == [-0.7]


def test_ladder_rejects_unstable():
    with pytest.raises(StabilityError):
        build_fixed_a(0.0, 4)
    with pytest.raises(StabilityError):
        build_fixed_a(1.0, 2)


@given(st.floats(-20.0, -1e-3), st.integers(1, 8))
def test_ladder_monotone_and_retention_ordered(a_min, d):
    a = build_fixed_a(a_min, d)
    assert np.all(np.diff(a) > 0) and np.all(a < 0)
    # slower coordinates keep more of an impulse after any number of steps
    h = impulse_response(a, 0.5, 7)
    assert np.all(np.diff(h) > 0) or d == 1


# ---------------------------------------------------------------- selection / discretization

def test_select_zero_input(rng):
    p = SsmParams.random(6, 4, rng)
    B, C, delta = select(np.zeros(6), p)
    assert np.all(B == 0) and np.all(C == 0)
    np.testing.assert_allclose(delta, np.log1p(np.exp(p.b_delta)), rtol=1e-15)
    p.b_delta[:] = 0.0
    np.testing.assert_allclose(select(np.zeros(6), p)[2], math.log(2.0), rtol=1e-15)


def test_select_does_not_touch_a(rng):
    p = SsmParams.random(6, 4, rng)
    a0 = p.a_diag.copy()
    out1 = select(rng.normal(size=6), p)
    out2 = select(rng.normal(size=6), p)
    assert not np.allclose(out1[0], out2[0])
    assert np.array_equal(p.a_diag, a0)


def test_discretize_closed_form():
    abar, bbar = discretize(-1.0, 1.0, 1.0)
    assert abs(abar - math.exp(-1.0)) <= 1e-12 and abs(abar - 0.367879) < 1e-6
    assert abs(bbar - (1.0 - math.exp(-1.0))) <= 1e-12 and abs(bbar - 0.632121) < 1e-6


def test_discretize_small_step_limit():
    abar, bbar = discretize(-1e-13, 2.0, 0.5)
    assert abar == pytest.approx(1.0, abs=1e-12)
    assert bbar == pytest.approx(1.0, abs=1e-12)


def test_taylor_branch_continuity():
    for edge in (ssm.TAYLOR_THRESHOLD, -ssm.TAYLOR_THRESHOLD):
        inside = np.nextafter(edge, 0.0)
        outside = np.nextafter(edge, 2 * edge)
        assert abs(ssm.phi(inside) - ssm.phi(outside)) <= 1e-12
        # the series branch agrees with the direct formula at the switch point itself
        assert abs(ssm.phi(inside) - math.expm1(inside) / inside) <= 1e-12


def test_discretize_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        discretize(-1.0, 1.0, 0.0)


# ---------------------------------------------------------------- scans

def test_zero_input_gives_zero_output(rng):
    p = SsmParams.random(3, 4, rng)
    y, hT, trace = scan_sequential(np.zeros((12, 3)), p)
    assert np.all(y == 0) and np.all(hT.h == 0) and trace.shape == (12, 4)


def test_scalar_hand_recurrence():
    # delta=1, a=-ln2 gives abar=0.5; B=2 ln2 gives bbar=1; C=2
    ln2 = math.log(2.0)
    T_ = 3
    res = selective_scan(np.array([[1.0], [0.0], [0.0]]), np.ones((T_, 1)),
                         np.full((T_, 1), 2 * ln2), np.full((T_, 1), 2.0), np.array([-ln2]))
    np.testing.assert_allclose(res.states[:, 0, 0], [1.0, 0.5, 0.25], atol=1e-15)
    np.testing.assert_allclose(res.y.data[:, 0], [2.0, 1.0, 0.5], atol=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_sequential_matches_naive(seed):
    r = np.random.default_rng(seed)
    p = SsmParams.random(3, 2, r, a_min=float(r.uniform(-5, -0.1)))
    u = r.uniform(-2, 2, size=(15, 3))
    y, _, _ = scan_sequential(u, p)
    assert np.max(np.abs(y - naive_scan(u, p))) <= 1e-12


def test_chunked_matches_sequential(rng):
    p = SsmParams.random(5, 4, rng)
    u = rng.normal(size=(200, 5))
    y, _, _ = scan_sequential(u, p)
    for w in (20, 1):
        h, parts = None, []
        for s in range(0, 200, w):
            yc, h = scan_chunked(u[s: s + w], p, h)
            parts.append(yc)
        assert np.max(np.abs(np.concatenate(parts) - y)) <= 1e-12
    assert h.step_index == 200


@given(st.integers(0, 2**31 - 1), st.lists(st.integers(1, 30), min_size=1, max_size=6))
def test_any_chunking_is_equivalent(seed, sizes):
    r = np.random.default_rng(seed)
    p = SsmParams.random(3, 4, r)
    u = r.normal(size=(sum(sizes), 3))
    y, _, _ = scan_sequential(u, p)
    h, parts, s = None, [], 0
    for n in sizes:
        yc, h = scan_chunked(u[s: s + n], p, h)
        parts.append(yc)
        s += n
    assert np.max(np.abs(np.concatenate(parts) - y)) <= 1e-9


def test_dropping_context_changes_outputs(rng):
    # slow ladder keeps memory of an early pulse; zeroing the carried state forgets it
    p = SsmParams.random(2, 4, rng, a_min=-0.1)
    u = np.zeros((40, 2))
    u[:5] = 1.0
    u[20:] = 0.3
    y, _, _ = scan_sequential(u, p)
    _, h = scan_chunked(u[:20], p)
    fresh, _ = scan_chunked(u[20:], p, SsmState.zeros(2, 4))
    carried, _ = scan_chunked(u[20:], p, h)
    assert np.max(np.abs(carried - y[20:])) <= 1e-12
    assert np.max(np.abs(fresh - y[20:])) > 1e-3


def test_parallel_matches_sequential_long(rng):
    p = SsmParams.random(4, 4, rng)
    u = rng.normal(size=(1000, 4))
    y, hT, tr = scan_sequential(u, p)
    yp, hp, tp = scan_parallel(u, p)
    assert np.max(np.abs(yp - y)) <= 1e-9
    assert np.max(np.abs(hp.h - hT.h)) <= 1e-9
    u1 = u[:1]
    assert np.max(np.abs(scan_parallel(u1, p)[0] - scan_sequential(u1, p)[0])) <= 1e-15


def test_parallel_with_initial_state(rng):
    p = SsmParams.random(3, 2, rng)
    u = rng.normal(size=(33, 3))
    h0 = SsmState(rng.normal(size=(3, 2)), 7)
    y, hT, _ = scan_sequential(u, p, h0)
    yp, hp, _ = scan_parallel(u, p, h0)
    assert np.max(np.abs(yp - y)) <= 1e-12 and hp.step_index == hT.step_index == 40


@given(st.integers(0, 2**31 - 1), st.integers(1, 70))
def test_associative_scan_matches_loop(seed, n):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-1, 1, size=(n, 3)), r.normal(size=(n, 3))
    h, ref = np.zeros(3), []
    for t in range(n):
        h = a[t] * h + b[t]
        ref.append(h)
    assert np.max(np.abs(ssm.associative_scan(a, b) - np.array(ref))) <= 1e-12


def test_bounded_state_on_long_input():
    r = np.random.default_rng(5)
    p = SsmParams.random(2, 4, r)
    u = r.uniform(-1, 1, size=(100_000, 2))
    y, hT, _ = scan_sequential(u, p)
    assert np.all(np.isfinite(y)) and np.max(np.abs(hT.h)) < 1e3


def test_non_finite_step_is_named(rng):
    inj = rng.normal(size=(10, 2, 2))
    inj[4, 1, 0] = np.inf
    with pytest.raises(ssm.NumericError, match="step 7"):
        ssm._recur(np.ones((10, 2, 2)), inj, np.zeros((2, 2)), start=3)


# ---------------------------------------------------------------- impulse

def test_impulse_examples():
    assert impulse_response([-1.0], 0.1, 10)[0] == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert impulse_response([-1e-15], 1.0, 1000)[0] == pytest.approx(1.0, abs=1e-9)
    assert impulse_response([-12.5], 1.0, 1)[0] < 1e-5


@pytest.mark.parametrize("a_min", [-0.1, -12.5])
def test_impulse_decay_matches_exponential(a_min):
    a = build_fixed_a(a_min, 4)
    for k in (1, 5, 20):
        np.testing.assert_allclose(impulse_response(a, 1.0, k), np.exp(k * a), rtol=1e-9, atol=0)


# ---------------------------------------------------------------- gradient

@given(st.integers(0, 2**31 - 1))
def test_selective_scan_gradient(seed):
    r = np.random.default_rng(seed)
    T_, D, N = 6, 3, 4
    u = r.uniform(-2, 2, size=(2, T_, D))
    delta = r.uniform(0.05, 2.0, size=(2, T_, D))
    B = r.uniform(-2, 2, size=(2, T_, N))
    C = r.uniform(-2, 2, size=(2, T_, N))
    a = -r.uniform(0.05, 3.0, size=N)
    h0 = r.normal(size=(2, D, N))
    assert check_op(lambda *xs: selective_scan(*xs, h0=h0).y, u, delta, B, C, a) <= 1e-4


def test_scan_gradient_near_zero_exponent(rng):
    # delta * a straddles the series branch of the derivative
    u = rng.normal(size=(5, 2))
    delta = np.full((5, 2), 1e-3)
    B, C = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    a = np.array([-1.0, -5e-3, -12.0])
    assert check_op(lambda *xs: selective_scan(*xs).y, u, delta, B, C, a, eps=1e-7) <= 1e-4
