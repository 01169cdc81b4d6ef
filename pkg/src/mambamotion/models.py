"""Mamba motion predictor, LSTM / Transformer baselines, output filter, checkpoints.

All models map a [T, 16] (or batched [B, T, 16]) stream of joint angles and
torques to a same-shaped prediction whose row ``t`` targets ``x[t + horizon_N]``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import ParamStore, init_linear, linear, lstm_layer, sinusoidal_positions
from .ssm import SsmParams, build_fixed_a, selective_scan
from .tensor import DimensionError, Tensor

SILU_ONE = 1.2784645427610738  # silu(z) == 1


@dataclass
class MambaConfig:
    d_in: int = 16
    d_model: int = 8
    expand: int = 2
    d_state: int = 4
    conv_kernel: int = 4
    n_blocks: int = 1
    n_in_linear: int = 1
    n_out_linear: int = 3
    keep_prob: float = 0.75
    gate_enabled: bool = False
    horizon_N: int = 1
    window_w: int = 20
    a_mode: str = "fixed"
    a_min: float = -0.5
    delta_init: float = 1.0
    zero_head: bool = False
    init_seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "d_model", "expand", "d_state", "conv_kernel", "n_blocks",
                     "n_in_linear", "n_out_linear", "horizon_N", "window_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.a_mode not in ("fixed", "learned"):
            raise ValueError(f"a_mode must be 'fixed' or 'learned', got {self.a_mode!r}")
        if self.a_min >= 0:
            raise ValueError("a_min must be negative")
        if self.delta_init <= 0:
            raise ValueError("delta_init must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class BaselineConfig:
    kind: str = "transformer"
    window: int = 0  # 0 means the full history (w = T)
    d_in: int = 16
    horizon_N: int = 1
    lstm_hidden: int = 64
    lstm_layers: int = 2
    width: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    max_len: int = 1024
    train_rows: int = 0  # windowed transformer: rows sampled per trial per step (0 = all)
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("lstm", "transformer"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.window < 0 or self.horizon_N < 1:
            raise ValueError("window must be >= 0 and horizon_N >= 1")
        if self.kind == "lstm" and self.window:
            raise ValueError("the LSTM baseline always consumes the full history")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xd.ndim == 2:
        return xd[None], True
    if xd.ndim != 3:
        raise DimensionError(f"expected [T, C] or [B, T, C], got {xd.shape}")
    return xd, False


class Model:
    kind = "base"
    warmup = 0

    def __init__(self, config):
        self.config = config
        self.store = ParamStore()

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    @property
    def horizon(self) -> int:
        return self.config.horizon_N

    def param_count(self) -> int:
        return self.store.param_count()

    def trainable(self) -> dict[str, Tensor]:
        return self.store.params

    def loss_mask(self, T_len: int) -> np.ndarray:
        """Rows with a target in range and outside the conv warm-up."""
        m = np.zeros(T_len, dtype=bool)
        m[self.warmup: max(T_len - self.horizon, 0)] = True
        return m

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            return self.forward(x).data


# ---------------------------------------------------------------- Mamba

@dataclass
class StreamContext:
    ssm_states: list[np.ndarray]
    conv_tails: list[np.ndarray]  # conv input of each block, oldest first
    step_index: int = 0


@dataclass
class MambaTrace:
    states: list[np.ndarray] = field(default_factory=list)  # per block [..., T, D, N]
    conv_inputs: list[np.ndarray] = field(default_factory=list)  # per block [..., T, D]


class MambaModel(Model):
    kind = "mamba"

    def __init__(self, config: MambaConfig):
        super().__init__(config)
        c = config
        rng = np.random.default_rng(c.init_seed)
        s = self.store
        self.warmup = c.conv_kernel - 1
        dims = [c.d_in] + [c.d_model] * c.n_in_linear
        for i in range(c.n_in_linear):
            init_linear(s, f"in{i}", dims[i], dims[i + 1], rng)
        for k in range(c.n_blocks):
            p = f"block{k}"
            init_linear(s, f"{p}.in_proj", c.d_model, c.d_inner, rng)
            s.add(f"{p}.conv.weight", rng.normal(0.0, 1.0 / math.sqrt(c.conv_kernel),
                                                 (c.conv_kernel, c.d_inner)))
            s.add(f"{p}.conv.bias", np.zeros(c.d_inner))
            s.add(f"{p}.x_proj_B", rng.normal(0.0, 1.0 / math.sqrt(c.d_inner), (c.d_inner, c.d_state)))
            s.add(f"{p}.x_proj_C", rng.normal(0.0, 1.0 / math.sqrt(c.d_inner), (c.d_inner, c.d_state)))
            s.add(f"{p}.dt_proj.weight", rng.normal(0.0, 0.1 / math.sqrt(c.d_inner),
                                                    (c.d_inner, c.d_inner)))
            # softplus(bias) == delta_init
            s.add(f"{p}.dt_proj.bias", np.full(c.d_inner, math.log(math.expm1(c.delta_init))))
            if c.a_mode == "learned":
                s.add(f"{p}.log_neg_a", np.zeros(c.d_state))  # a = -exp(0) = -1
            else:
                s.add_buffer(f"{p}.a", build_fixed_a(c.a_min, c.d_state))
            if c.gate_enabled:
                init_linear(s, f"{p}.gate_proj", c.d_model, c.d_inner, rng)
            init_linear(s, f"{p}.out_proj", c.d_inner, c.d_model, rng)
        for j in range(c.n_out_linear):
            last = j == c.n_out_linear - 1
            n_out = c.d_in if last else c.d_model
            scale = 0.0 if (last and c.zero_head) else 1.0
            init_linear(s, f"out{j}", c.d_model, n_out, rng, scale=scale)

    # -- pieces

    def a_vector(self, k: int = 0):
        p = f"block{k}"
        if self.config.a_mode == "learned":
            return T.mul(T.exp(self.params[f"{p}.log_neg_a"]), -1.0)
        return Tensor(self.store.buffers[f"{p}.a"])

    def a_diag(self, k: int = 0) -> np.ndarray:
        return self.a_vector(k).data.copy()

    def ssm_params(self, k: int = 0) -> SsmParams:
        p, P = f"block{k}", self.params
        return SsmParams(self.a_diag(k), P[f"{p}.x_proj_B"].data, P[f"{p}.x_proj_C"].data,
                         P[f"{p}.dt_proj.weight"].data, P[f"{p}.dt_proj.bias"].data,
                         self.config.a_mode)

    def block(self, k: int, u, h0=None, tail=None, trace: MambaTrace | None = None) -> Tensor:
        """Residual Mamba block on u [..., T, d_model]."""
        p, P = f"block{k}", self.params
        z = linear(u, P[f"{p}.in_proj.weight"], P[f"{p}.in_proj.bias"])
        c = T.add(T.conv1d_depthwise_causal(z, P[f"{p}.conv.weight"], tail), P[f"{p}.conv.bias"])
        v = T.silu(c)
        Bm = T.matmul(v, P[f"{p}.x_proj_B"])
        Cm = T.matmul(v, P[f"{p}.x_proj_C"])
        delta = T.softplus(linear(v, P[f"{p}.dt_proj.weight"], P[f"{p}.dt_proj.bias"]))
        res = selective_scan(v, delta, Bm, Cm, self.a_vector(k), h0)
        y = res.y
        if self.config.gate_enabled:
            y = T.mul(y, T.silu(linear(u, P[f"{p}.gate_proj.weight"], P[f"{p}.gate_proj.bias"])))
        if trace is not None:
            trace.states.append(res.states)
            trace.conv_inputs.append(z.data)
        return T.add(u, linear(y, P[f"{p}.out_proj.weight"], P[f"{p}.out_proj.bias"]))

    def forward(self, x, ctx: StreamContext | None = None, training: bool = False,
                rng: np.random.Generator | None = None, trace: MambaTrace | None = None) -> Tensor:
        c, P = self.config, self.params
        xd, squeeze = _as_batch(x)
        if ctx is None and xd.shape[1] <= c.conv_kernel + c.horizon_N:
            raise DimensionError(
                f"sequence length {xd.shape[1]} must exceed conv_kernel + horizon_N "
                f"= {c.conv_kernel + c.horizon_N}")
        h = Tensor(xd)
        for i in range(c.n_in_linear):
            h = linear(h, P[f"in{i}.weight"], P[f"in{i}.bias"])
            if i < c.n_in_linear - 1:
                h = T.silu(h)
        for k in range(c.n_blocks):
            h0 = tail = None
            if ctx is not None:
                h0 = np.broadcast_to(ctx.ssm_states[k], xd.shape[:1] + ctx.ssm_states[k].shape[-2:])
                tail = ctx.conv_tails[k]
            h = self.block(k, h, h0, tail, trace)
        for j in range(c.n_out_linear):
            h = linear(h, P[f"out{j}.weight"], P[f"out{j}.bias"])
            if j < c.n_out_linear - 1:
                h = T.silu(h)
                h = T.dropout(h, c.keep_prob, rng, training)
        return T.reshape(h, h.shape[1:]) if squeeze else h

    # -- streaming

    def new_context(self) -> StreamContext:
        c = self.config
        return StreamContext(
            [np.zeros((c.d_inner, c.d_state)) for _ in range(c.n_blocks)],
            [np.zeros((c.conv_kernel - 1, c.d_inner)) for _ in range(c.n_blocks)],
        )

    def stream_window(self, x_window, ctx: StreamContext, advance: int | None = None):
        """Run one window [w, 16] on top of the carried context.

        Returns all w prediction rows and the context advanced by ``advance``
        samples (default w, i.e. non-overlapping windows). Sliding one sample
        per control cycle uses ``advance=1``.
        """
        c = self.config
        xw = np.asarray(x_window, dtype=np.float64)
        if xw.ndim != 2 or xw.shape[0] != c.window_w:
            raise DimensionError(f"window must be [{c.window_w}, {c.d_in}], got {xw.shape}")
        advance = c.window_w if advance is None else advance
        if not 1 <= advance <= c.window_w:
            raise ValueError("advance must be in [1, w]")
        trace = MambaTrace()
        with T.no_grad():
            y = self.forward(xw, ctx=ctx, trace=trace).data
        K = c.conv_kernel
        new = StreamContext([], [], ctx.step_index + advance)
        for k in range(c.n_blocks):
            new.ssm_states.append(trace.states[k][0, advance - 1].copy())
            full = np.concatenate([ctx.conv_tails[k], trace.conv_inputs[k][0]], axis=0)
            new.conv_tails.append(full[advance: advance + K - 1].copy())
        return y, new

    def stream_step(self, x_window, ctx: StreamContext, advance: int = 1):
        """Prediction for the newest sample of the window plus the updated context."""
        y, new = self.stream_window(x_window, ctx, advance)
        return y[-1], new

    def state_trace(self, x, k: int = 0) -> np.ndarray:
        """Channel-mean state coordinates [T, N] of block ``k`` over a whole trial."""
        trace = MambaTrace()
        with T.no_grad():
            self.forward(x, trace=trace)
        st = trace.states[k]
        return st[0].mean(axis=-2) if np.ndim(x) == 2 else st.mean(axis=-2)


# ---------------------------------------------------------------- baselines

class LSTMModel(Model):
    kind = "lstm"

    def __init__(self, config: BaselineConfig):
        super().__init__(config)
        c = config
        rng = np.random.default_rng(c.init_seed)
        s = self.store
        H = c.lstm_hidden
        n_in = c.d_in
        for l in range(c.lstm_layers):
            s.add(f"lstm{l}.w_x", rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, 4 * H)))
            s.add(f"lstm{l}.w_h", rng.normal(0.0, 1.0 / math.sqrt(H), (H, 4 * H)))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            s.add(f"lstm{l}.bias", b)
            n_in = H
        init_linear(s, "head", H, c.d_in, rng)

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        xd, squeeze = _as_batch(x)
        P = self.params
        h = Tensor(xd)
        for l in range(self.config.lstm_layers):
            h = lstm_layer(h, P[f"lstm{l}.w_x"], P[f"lstm{l}.w_h"], P[f"lstm{l}.bias"])
        out = linear(h, P["head.weight"], P["head.bias"])
        return T.reshape(out, out.shape[1:]) if squeeze else out


class TransformerModel(Model):
    """Pre-LN causal Transformer; ``window > 0`` recomputes every row from its last w inputs."""

    kind = "transformer"

    def __init__(self, config: BaselineConfig):
        super().__init__(config)
        c = config
        rng = np.random.default_rng(c.init_seed)
        s = self.store
        D = c.width
        init_linear(s, "embed", c.d_in, D, rng)
        for l in range(c.layers):
            p = f"layer{l}"
            s.add(f"{p}.ln1.gain", np.ones(D))
            s.add(f"{p}.ln1.bias", np.zeros(D))
            init_linear(s, f"{p}.qkv", D, 3 * D, rng)
            init_linear(s, f"{p}.attn_out", D, D, rng, scale=1.0 / math.sqrt(2 * c.layers))
            s.add(f"{p}.ln2.gain", np.ones(D))
            s.add(f"{p}.ln2.bias", np.zeros(D))
            init_linear(s, f"{p}.ffn1", D, c.ffn, rng)
            init_linear(s, f"{p}.ffn2", c.ffn, D, rng, scale=1.0 / math.sqrt(2 * c.layers))
        s.add("ln_f.gain", np.ones(D))
        s.add("ln_f.bias", np.zeros(D))
        init_linear(s, "head", D, c.d_in, rng)
        self._pe = sinusoidal_positions(max(c.max_len, c.window), D)

    def _attend(self, h: Tensor, l: int, mask: np.ndarray, last_only: bool = False) -> Tensor:
        c, P = self.config, self.params
        S, L, D = h.shape
        H, dh = c.heads, c.width // c.heads
        qkv = linear(h, P[f"layer{l}.qkv.weight"], P[f"layer{l}.qkv.bias"])
        qkv = T.transpose(T.reshape(qkv, (S, L, 3, H, dh)), 1, 3)  # [S, H, 3, L, dh]
        q, k, v = qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2]
        if last_only:
            q = q[:, :, L - 1:]
            mask = mask[..., L - 1:, :]
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        att = T.softmax(scores, mask)
        o = T.reshape(T.transpose(T.matmul(att, v), 1, 2), (S, q.shape[2], D))
        return linear(o, P[f"layer{l}.attn_out.weight"], P[f"layer{l}.attn_out.bias"])

    def _encode(self, tokens: np.ndarray, mask: np.ndarray, training: bool, rng,
                last_only: bool = False) -> Tensor:
        """Encoder stack; ``last_only`` evaluates the final layer for the newest token only."""
        P = self.params
        L = tokens.shape[1]
        n_layers = self.config.layers
        h = T.add(linear(Tensor(tokens), P["embed.weight"], P["embed.bias"]), self._pe[:L])
        for l in range(n_layers):
            p = f"layer{l}"
            trim = last_only and l == n_layers - 1
            a = T.layer_norm(h, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
            if trim:
                h = h[:, L - 1:]
            h = T.add(h, self._attend(a, l, mask, trim))
            f = T.layer_norm(h, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
            f = linear(T.relu(linear(f, P[f"{p}.ffn1.weight"], P[f"{p}.ffn1.bias"])),
                       P[f"{p}.ffn2.weight"], P[f"{p}.ffn2.bias"])
            h = T.add(h, f)
        h = T.layer_norm(h, P["ln_f.gain"], P["ln_f.bias"])
        return linear(h, P["head.weight"], P["head.bias"])

    def windows(self, xd: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Left-padded windows ending at each row: tokens [B*R, w, C], key mask [B*R, 1, w, w]."""
        w = self.config.window
        B, Tn, C = xd.shape
        padded = np.concatenate([np.zeros((B, w - 1, C)), xd], axis=1)
        idx = rows[:, None] + np.arange(w)[None, :]  # padded index of window slots
        tokens = padded[:, idx].reshape(B * len(rows), w, C)
        valid = (rows[:, None] - (w - 1) + np.arange(w)[None, :]) >= 0  # [R, w]
        causal = np.tril(np.ones((w, w), dtype=bool))
        mask = causal[None] & valid[:, None, :]
        mask |= np.eye(w, dtype=bool)[None]
        mask = np.broadcast_to(mask[None], (B,) + mask.shape).reshape(B * len(rows), 1, w, w)
        return tokens, mask

    def forward(self, x, training: bool = False, rng=None, rows: np.ndarray | None = None) -> Tensor:
        """Predictions for every row, or only ``rows`` ([B, R, C]) in windowed mode."""
        c = self.config
        xd, squeeze = _as_batch(x)
        B, Tn, _ = xd.shape
        if c.window == 0:
            if Tn > self._pe.shape[0]:
                raise DimensionError(f"sequence longer than max_len {self._pe.shape[0]}")
            mask = np.tril(np.ones((Tn, Tn), dtype=bool))
            out = self._encode(xd, mask, training, rng)
            if rows is not None:
                out = out[:, rows]
        else:
            rows_ = np.arange(Tn) if rows is None else np.asarray(rows)
            tokens, mask = self.windows(xd, rows_)
            out = self._encode(tokens, mask, training, rng, last_only=True)[:, -1]
            out = T.reshape(out, (B, len(rows_), c.d_in))
        return T.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- output filter

@dataclass
class LowPassFilter:
    """First-order low-pass with the exact discrete pole exp(-dt / tau)."""

    tau: float = 0.3
    dt: float = 0.1
    y: np.ndarray | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.tau <= 0:
            raise ValueError("dt and tau must be positive")

    @property
    def alpha(self) -> float:
        return math.exp(-self.dt / self.tau)

    def reset(self, y0=None) -> None:
        self.y = None if y0 is None else np.array(y0, dtype=np.float64)

    def step(self, x) -> np.ndarray:
        """Advance one sample: returns y_{t+1} = a*y_t + (1-a)*x_t (y_0 defaults to x_0)."""
        x = np.asarray(x, dtype=np.float64)
        if self.y is None:
            self.y = x.copy()
        a = self.alpha
        self.y = a * self.y + (1.0 - a) * x
        return self.y.copy()

    def apply(self, x_seq, y0=None) -> np.ndarray:
        self.reset(y0)
        return np.stack([self.step(x) for x in np.asarray(x_seq, dtype=np.float64)])


def lpf_apply(x_seq, tau: float = 0.3, dt: float = 0.1, y0=None) -> np.ndarray:
    return LowPassFilter(tau, dt).apply(x_seq, y0)


# ---------------------------------------------------------------- registry / checkpoints

def build_model(kind: str, config: dict | MambaConfig | BaselineConfig) -> Model:
    if isinstance(config, dict):
        config = dict(config)
        if kind == "mamba":
            config = MambaConfig(**config)
        else:
            config.setdefault("kind", kind)
            config = BaselineConfig(**config)
    if kind == "mamba":
        return MambaModel(config)
    if kind == "lstm":
        return LSTMModel(config)
    if kind == "transformer":
        return TransformerModel(config)
    raise ValueError(f"unknown model kind {kind!r}")


def config_keys(kind: str) -> list[str]:
    cls = MambaConfig if kind == "mamba" else BaselineConfig
    return [f.name for f in fields(cls)]


CHECKPOINT_MAGIC = b"MMCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    """Header (magic, version, JSON config) followed by named float64 records."""
    records = [(n, "param", t.data) for n, t in model.store.params.items()]
    records += [(n, "buffer", a) for n, a in model.store.buffers.items()]
    header = json.dumps({"kind": model.kind, "config": asdict(model.config),
                         "records": [[n, k] for n, k, _ in records]},
                        sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header
    for name, _, arr in records:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<Q", arr.nbytes) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint (need {n} bytes at offset {pos})")
        chunk = buf[pos: pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", take(12))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(hlen))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    try:
        model = build_model(header["kind"], header["config"])
    except (TypeError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: bad config: {e}") from None
    values: dict[str, np.ndarray] = {}
    for _ in header["records"]:
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: length field of {name} disagrees with its shape")
        values[name] = np.frombuffer(take(nbytes), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    expected = set(model.store.params) | set(model.store.buffers)
    unknown = set(values) - expected
    missing = expected - set(values)
    if unknown or missing:
        raise CheckpointError(f"{path}: unknown parameters {sorted(unknown)}, missing {sorted(missing)}")
    for name, arr in values.items():
        target = model.store.params[name].data if name in model.store.params else model.store.buffers[name]
        if target.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    for name, arr in values.items():
        if name in model.store.params:
            model.store.params[name].data = arr
        else:
            model.store.buffers[name] = arr
    return model
