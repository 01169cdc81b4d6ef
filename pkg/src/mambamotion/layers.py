"""Small parameterized building blocks shared by the models."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor map; buffers are constants saved with the model."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.asarray(value, dtype=np.float64)
        return self.buffers[name]

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                bias: bool = True, scale: float = 1.0) -> tuple[Tensor, Tensor | None]:
    w = store.add(f"{name}.weight", rng.normal(0.0, scale / np.sqrt(n_in), (n_in, n_out)))
    b = store.add(f"{name}.bias", np.zeros(n_out)) if bias else None
    return w, b


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def lstm_layer(x, w_x, w_h, b) -> Tensor:
    """Fused single-layer LSTM over x [B, T, I] from zero state; gate order i, f, g, o."""
    x, w_x, w_h, b = (T.as_tensor(t) for t in (x, w_x, w_h, b))
    xd, wx, wh = x.data, w_x.data, w_h.data
    Bn, Tn, _ = xd.shape
    H = wh.shape[0]
    pre = xd @ wx + b.data
    hs = np.zeros((Bn, Tn + 1, H))
    cs = np.zeros((Bn, Tn + 1, H))
    gates = np.zeros((Bn, Tn, 4 * H))
    for t in range(Tn):
        a = pre[:, t] + hs[:, t] @ wh
        i = T._sigmoid_np(a[:, :H])
        f = T._sigmoid_np(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = T._sigmoid_np(a[:, 3 * H:])
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t] = np.concatenate([i, f, g, o], axis=-1)

    def bw(gy):
        ga = np.zeros_like(gates)
        dh_next = np.zeros((Bn, H))
        dc_next = np.zeros((Bn, H))
        for t in range(Tn - 1, -1, -1):
            i, f, g, o = np.split(gates[:, t], 4, axis=-1)
            tc = np.tanh(cs[:, t + 1])
            dh = gy[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            ga[:, t] = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * cs[:, t] * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=-1)
            dh_next = ga[:, t] @ wh.T
            dc_next = dc * f
        gx = ga @ wx.T
        gwx = xd.reshape(-1, xd.shape[-1]).T @ ga.reshape(-1, 4 * H)
        gwh = hs[:, :-1].reshape(-1, H).T @ ga.reshape(-1, 4 * H)
        gb = ga.reshape(-1, 4 * H).sum(axis=0)
        return gx, gwx, gwh, gb

    return T._make(hs[:, 1:].copy(), "lstm", (x, w_x, w_h, b), bw)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe
