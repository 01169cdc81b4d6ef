"""Selective diagonal state space recurrence.

Per channel ``d`` and state coordinate ``n``::

    abar = exp(delta_d * a_n)
    bbar = (exp(delta_d * a_n) - 1) / (delta_d * a_n) * delta_d * B_n
    h    = abar * h + bbar * u_d
    y_d  = sum_n C_n * h[d, n]

``a`` is one negative vector shared by all channels; ``B``, ``C`` and
``delta`` are computed from the current input (the selection mechanism).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError, Tensor, _make, _softplus_np, as_tensor

TAYLOR_THRESHOLD = 1e-6
LADDER_RATIO = 0.4


class StabilityError(ValueError):
    pass


def build_fixed_a(a_min: float, d_state: int, ratio: float = LADDER_RATIO) -> np.ndarray:
    """Geometric eigenvalue ladder ``a_min * ratio**i`` moving toward zero."""
    if a_min >= 0:
        raise StabilityError(f"a_min must be negative, got {a_min}")
    if d_state < 1:
        raise ValueError("d_state must be >= 1")
    return a_min * ratio ** np.arange(d_state, dtype=np.float64)


@dataclass
class SsmParams:
    a_diag: np.ndarray  # [N]
    w_B: np.ndarray  # [D, N]
    w_C: np.ndarray  # [D, N]
    w_delta: np.ndarray  # [D, D]
    b_delta: np.ndarray  # [D]
    a_mode: str = "fixed"

    def __post_init__(self):
        if np.any(self.a_diag >= 0):
            raise StabilityError("all a_diag entries must be negative")

    @property
    def d_inner(self) -> int:
        return self.w_B.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_diag.shape[0]

    @classmethod
    def random(cls, d_inner: int, d_state: int, rng: np.random.Generator,
               a_min: float = -2.5, scale: float = 0.5) -> "SsmParams":
        return cls(
            a_diag=build_fixed_a(a_min, d_state),
            w_B=rng.normal(0, scale, (d_inner, d_state)),
            w_C=rng.normal(0, scale, (d_inner, d_state)),
            w_delta=rng.normal(0, scale / np.sqrt(d_inner), (d_inner, d_inner)),
            b_delta=rng.normal(0, scale, d_inner),
        )


@dataclass
class SsmState:
    h: np.ndarray  # [..., D, N]
    step_index: int = 0

    @classmethod
    def zeros(cls, d_inner: int, d_state: int, batch: tuple[int, ...] = ()) -> "SsmState":
        return cls(np.zeros(batch + (d_inner, d_state)))


# ---------------------------------------------------------------- pointwise pieces

def select(u_t: np.ndarray, params: SsmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input-dependent (B_t, C_t, delta_t) for input rows ``u_t`` [..., D]."""
    u_t = np.asarray(u_t, dtype=np.float64)
    if u_t.shape[-1] != params.d_inner:
        raise ValueError(f"input width {u_t.shape[-1]} != d_inner {params.d_inner}")
    B = u_t @ params.w_B
    C = u_t @ params.w_C
    delta = _softplus_np(u_t @ params.w_delta + params.b_delta)
    return B, C, delta


def phi(x: np.ndarray) -> np.ndarray:
    """(exp(x) - 1) / x with a series branch near zero."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, x)
    series = 1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0
    return np.where(small, series, np.expm1(safe) / safe)


def _dphi(x: np.ndarray) -> np.ndarray:
    """Derivative of :func:`phi`."""
    small = np.abs(x) < 1e-2
    safe = np.where(small, 1.0, x)
    em1 = np.expm1(safe)
    direct = (em1 * (safe - 1.0) + safe) / (safe * safe)
    series = 1 / 2 + x * (1 / 3 + x * (1 / 8 + x * (1 / 30 + x * (1 / 144 + x / 840))))
    return np.where(small, series, direct)


def discretize(a, b, delta):
    """Zero-order-hold discretization of ``h' = a h + b u`` for step ``delta``."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    x = delta * np.asarray(a, dtype=np.float64)
    abar = np.exp(x)
    bbar = phi(x) * delta * np.asarray(b, dtype=np.float64)
    return abar, bbar


def _coefficients(u, delta, B, a):
    """abar, bbar, injection for the whole sequence; shapes [..., T, D, N]."""
    dA = delta[..., None] * a
    abar = np.exp(dA)
    ph = phi(dA)
    bbar = ph * delta[..., None] * B[..., None, :]
    return dA, abar, ph, bbar, bbar * u[..., None]


def _recur(abar: np.ndarray, inj: np.ndarray, h0: np.ndarray, start: int = 0) -> np.ndarray:
    T = abar.shape[-3]
    hs = np.empty_like(inj)
    h = h0
    for t in range(T):
        h = abar[..., t, :, :] * h + inj[..., t, :, :]
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite SSM state at step {start + t}")
        hs[..., t, :, :] = h
    return hs


def _readout(hs: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.einsum("...tdn,...tn->...td", hs, C)


# ---------------------------------------------------------------- scans

def scan_sequential(u: np.ndarray, params: SsmParams, h0: SsmState | None = None):
    """Run the recurrence over ``u`` [..., T, D].

    Returns ``(y, h_final, h_trace)`` where ``h_trace`` [..., T, N] holds the
    channel-mean of every state coordinate after each step.
    """
    u = np.asarray(u, dtype=np.float64)
    batch = u.shape[:-2]
    if h0 is None:
        h0 = SsmState.zeros(params.d_inner, params.d_state, batch)
    if h0.h.shape[-2:] != (params.d_inner, params.d_state):
        raise ValueError(f"state shape {h0.h.shape} does not match params")
    B, C, delta = select(u, params)
    _, abar, _, _, inj = _coefficients(u, delta, B, params.a_diag)
    hs = _recur(abar, inj, h0.h, h0.step_index)
    y = _readout(hs, C)
    T = u.shape[-2]
    h_out = SsmState(hs[..., -1, :, :].copy() if T else h0.h.copy(), h0.step_index + T)
    return y, h_out, hs.mean(axis=-2)


def scan_chunked(u_chunk: np.ndarray, params: SsmParams, h_in: SsmState | None = None):
    """One chunk of a longer stream; feed ``h_out`` into the next call."""
    y, h_out, _ = scan_sequential(u_chunk, params, h_in)
    return y, h_out


def associative_scan(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inclusive scan of ``h_t = a_t h_{t-1} + b_t`` (h_{-1}=0) in log2(T) sweeps.

    Combine rule for consecutive segments: (a, b) then (a', b') -> (a a', a' b + b').
    """
    a = np.moveaxis(np.array(a, dtype=np.float64), axis, 0)
    b = np.moveaxis(np.array(b, dtype=np.float64), axis, 0)
    T = a.shape[0]
    off = 1
    while off < T:
        a_prev, b_prev = a[:-off], b[:-off]
        b_new = b.copy()
        a_new = a.copy()
        b_new[off:] = a[off:] * b_prev + b[off:]
        a_new[off:] = a[off:] * a_prev
        a, b = a_new, b_new
        off *= 2
    return np.moveaxis(b, 0, axis)


def scan_parallel(u: np.ndarray, params: SsmParams, h0: SsmState | None = None):
    """Same contract as :func:`scan_sequential`, evaluated as a prefix scan."""
    u = np.asarray(u, dtype=np.float64)
    batch = u.shape[:-2]
    if h0 is None:
        h0 = SsmState.zeros(params.d_inner, params.d_state, batch)
    B, C, delta = select(u, params)
    _, abar, _, _, inj = _coefficients(u, delta, B, params.a_diag)
    T = u.shape[-2]
    if T == 0:
        return np.zeros(u.shape), SsmState(h0.h.copy(), h0.step_index), np.zeros(batch + (0, params.d_state))
    inj = inj.copy()
    inj[..., 0, :, :] += abar[..., 0, :, :] * h0.h
    hs = associative_scan(abar, inj, axis=-3)
    if not np.all(np.isfinite(hs)):
        ok = np.isfinite(np.moveaxis(hs, -3, 0)).reshape(T, -1).all(axis=1)
        bad = int(np.argmin(ok))
        raise NumericError(f"non-finite SSM state at step {h0.step_index + bad}")
    y = _readout(hs, C)
    return y, SsmState(hs[..., -1, :, :].copy(), h0.step_index + T), hs.mean(axis=-2)


def impulse_response(a_diag, delta: float, k: int, h0=1.0) -> np.ndarray:
    """State after ``k`` zero-input steps with frozen ``delta``: abar**k * h0."""
    abar = np.exp(delta * np.asarray(a_diag, dtype=np.float64))
    return abar ** k * np.asarray(h0, dtype=np.float64)


# ---------------------------------------------------------------- differentiable op

@dataclass
class ScanResult:
    y: Tensor
    states: np.ndarray = field(repr=False)  # [..., T, D, N]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[..., -1, :, :]

    @property
    def trace(self) -> np.ndarray:
        return self.states.mean(axis=-2)


def selective_scan(u, delta, B, C, a, h0: np.ndarray | None = None, start: int = 0) -> ScanResult:
    """Fused recurrence with an exact hand-written backward.

    u, delta: [..., T, D]; B, C: [..., T, N]; a: [N]; h0: [..., D, N]
    (treated as a constant). Gradients flow to u, delta, B, C and a.
    """
    u, delta, B, C, a = (as_tensor(t) for t in (u, delta, B, C, a))
    ud, dd, Bd, Cd, ad = u.data, delta.data, B.data, C.data, a.data
    if h0 is None:
        h0 = np.zeros(ud.shape[:-2] + (ud.shape[-1], ad.shape[0]))
    dA, abar, ph, bbar, inj = _coefficients(ud, dd, Bd, ad)
    hs = _recur(abar, inj, h0, start)
    y = _readout(hs, Cd)

    def bw(gy):
        gC = np.einsum("...tdn,...td->...tn", hs, gy)
        gdir = gy[..., None] * Cd[..., None, :]
        G = np.empty_like(gdir)
        carry = np.zeros(gdir.shape[:-3] + gdir.shape[-2:])
        for t in range(gdir.shape[-3] - 1, -1, -1):
            gh = gdir[..., t, :, :] + carry
            G[..., t, :, :] = gh
            carry = abar[..., t, :, :] * gh
        hprev = np.concatenate([h0[..., None, :, :], hs[..., :-1, :, :]], axis=-3)
        g_abar = G * hprev
        gu = np.sum(G * bbar, axis=-1)
        g_bbar = G * ud[..., None]
        delta_b = dd[..., None] * Bd[..., None, :]
        g_dA = g_abar * abar + g_bbar * _dphi(dA) * delta_b
        gdelta = np.sum(g_dA * ad, axis=-1) + np.sum(g_bbar * ph * Bd[..., None, :], axis=-1)
        gB = np.sum(g_bbar * ph * dd[..., None], axis=-2)
        ga = np.sum((g_dA * dd[..., None]).reshape(-1, ad.shape[0]), axis=0)
        return gu, gdelta, gB, gC, ga

    return ScanResult(_make(y, "selective_scan", (u, delta, B, C, a), bw), hs)
