"""Network building blocks: linear, LSTM, attention, chunked streaming encoder.

All layers are pure functions of (input, state) built on the gradient tape,
so they can be trained and also used concurrently from several decoding
sessions as long as each session owns its own state objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    concat,
    exp,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    parameter,
    relu,
    scale,
    sigmoid,
    tanh,
    transpose,
)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def sinusoidal_positions(start: int, count: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position codes for frames [start, start+count).

    Attention alone cannot distinguish identical frames, so the encoder input
    carries absolute positions; without them, runs of repeated acoustic
    frames (doubled tokens) are uncountable.
    """
    positions = np.arange(start, start + count, dtype=np.float64)[:, None]
    dims = np.arange(dim, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * (dims // 2) / dim)
    codes = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    return codes


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            self.weight = parameter(np.zeros((in_dim, out_dim)))
        else:
            self.weight = parameter(_xavier(rng, in_dim, out_dim))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=self.eps)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class FeedForward:
    """Two-layer MLP with a relu; the output layer can start at zero."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 zero_output: bool = False):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng, zero_init=zero_output)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.lin1.params(f"{prefix}.lin1"), **self.lin2.params(f"{prefix}.lin2")}


class MultiHeadAttention:
    """Scaled dot-product attention with projected heads.

    ``zero_output`` starts the output projection at zero so the block
    contributes nothing until trained; the merge model relies on this.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 zero_output: bool = False):
        if dim % n_heads != 0:
            raise DimensionError(f"model dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng, zero_init=zero_output)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        if key.shape[0] < 1:
            raise ContractError("attention needs at least one key; substitute a sentinel row")
        if key.shape[0] != value.shape[0]:
            raise DimensionError(f"key/value lengths disagree: {key.shape} vs {value.shape}")
        q, k, v = self.wq(query), self.wk(key), self.wv(value)
        inv_sqrt = 1.0 / np.sqrt(self.head_dim)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
            scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
            if mask is not None:
                scores = add(scores, Tensor(mask))
            weights = exp(log_softmax(scores, axis=-1))
            heads.append(matmul(weights, vh))
        merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return self.wo(merged)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


# ---------------------------------------------------------------------------
# LSTM


LstmState = list[tuple[Tensor, Tensor]]  # per layer (h, c), each [1, hidden]


class LSTM:
    """Unidirectional multi-layer LSTM with explicit carried state.

    Processing a sequence in several calls with the carried state equals a
    single call on the concatenation, which is what streaming relies on.
    """

    def __init__(self, in_dim: int, hidden: int, num_layers: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.hidden = hidden
        self.num_layers = num_layers
        self.wx: list[Tensor] = []
        self.wh: list[Tensor] = []
        self.b: list[Tensor] = []
        for layer in range(num_layers):
            d_in = in_dim if layer == 0 else hidden
            self.wx.append(parameter(_xavier(rng, d_in, 4 * hidden)))
            self.wh.append(parameter(_xavier(rng, hidden, 4 * hidden)))
            bias = np.zeros(4 * hidden)
            bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
            self.b.append(parameter(bias))

    def initial_state(self) -> LstmState:
        zeros = lambda: Tensor(np.zeros((1, self.hidden)))
        return [(zeros(), zeros()) for _ in range(self.num_layers)]

    def step(self, x_row: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        if x_row.ndim != 2 or x_row.shape[0] != 1:
            raise DimensionError(f"LSTM step expects a [1, d] row, got {x_row.shape}")
        if len(state) != self.num_layers:
            raise DimensionError("LSTM state has wrong number of layers")
        h_in = x_row
        new_state: LstmState = []
        H = self.hidden
        for layer in range(self.num_layers):
            h_prev, c_prev = state[layer]
            z = add(add(matmul(h_in, self.wx[layer]), matmul(h_prev, self.wh[layer])), self.b[layer])
            i = sigmoid(z[:, 0:H])
            f = sigmoid(z[:, H : 2 * H])
            g = tanh(z[:, 2 * H : 3 * H])
            o = sigmoid(z[:, 3 * H : 4 * H])
            c = add(mul(f, c_prev), mul(i, g))
            h = mul(o, tanh(c))
            new_state.append((h, c))
            h_in = h
        return h_in, new_state

    def __call__(self, x: Tensor, state: LstmState | None = None) -> tuple[Tensor, LstmState]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"LSTM input must be [T, {self.in_dim}], got {x.shape}")
        if state is None:
            state = self.initial_state()
        rows = []
        for t in range(x.shape[0]):
            out, state = self.step(x[t : t + 1, :], state)
            rows.append(out)
        if not rows:
            raise DimensionError("LSTM over an empty sequence")
        y = rows[0] if len(rows) == 1 else concat(rows, axis=0)
        return y, state

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in range(self.num_layers):
            out[f"{prefix}.l{layer}.wx"] = self.wx[layer]
            out[f"{prefix}.l{layer}.wh"] = self.wh[layer]
            out[f"{prefix}.l{layer}.b"] = self.b[layer]
        return out


# ---------------------------------------------------------------------------
# Chunked streaming encoder


@dataclass
class ChunkedEncoderConfig:
    num_layers: int
    model_dim: int
    num_heads: int
    chunk_frames: int
    lookahead_frames: int = 1
    left_cache_frames: int = 8

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ContractError("chunk_frames must be >= 1")
        if self.lookahead_frames < 0 or self.left_cache_frames < 0:
            raise ContractError("lookahead and cache lengths must be >= 0")


@dataclass
class EncoderState:
    """Per-layer left-context rows used as extra attention keys/values."""

    caches: list[Tensor | None]


class _EncoderLayer:
    def __init__(self, cfg: ChunkedEncoderConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln1 = LayerNorm(cfg.model_dim)
        self.ff = FeedForward(cfg.model_dim, 2 * cfg.model_dim, rng)
        self.ln2 = LayerNorm(cfg.model_dim)

    def __call__(self, x: Tensor, cache: Tensor | None, chunk_len: int,
                 max_cache: int) -> tuple[Tensor, Tensor | None]:
        window = x if cache is None else concat([cache, x], axis=0)
        attended = self.attn(x, window, window)
        h = self.ln1(add(x, attended))
        y = self.ln2(add(h, self.ff(h)))
        new_cache = None
        if max_cache > 0:
            kept = x[:chunk_len, :] if cache is None else concat([cache, x[:chunk_len, :]], axis=0)
            if kept.shape[0] > max_cache:
                kept = kept[-max_cache:, :]
            new_cache = kept
        return y, new_cache

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.params(f"{prefix}.attn")
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.ff.params(f"{prefix}.ff"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        return out


class ChunkedEncoder:
    """Streaming encoder over fixed-size chunks with a bounded lookahead.

    Each call processes one chunk plus up to ``lookahead_frames`` of future
    context. Attention at every layer sees [left cache | chunk | lookahead],
    and both chunk and lookahead positions are propagated through the stack
    so the total future visibility stays at ``lookahead_frames`` regardless
    of depth. Only the chunk positions are emitted; the lookahead rows are
    recomputed when their own chunk arrives.

    With ``num_layers == 0`` the encoder is the identity.
    """

    def __init__(self, cfg: ChunkedEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [_EncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]

    def initial_state(self) -> EncoderState:
        return EncoderState(caches=[None] * len(self.layers))

    def forward_chunk(self, x: Tensor, state: EncoderState, chunk_len: int) -> tuple[Tensor, EncoderState]:
        if chunk_len < 1:
            raise ContractError("chunk must contain at least one frame")
        if chunk_len > self.cfg.chunk_frames:
            raise DimensionError(
                f"chunk of {chunk_len} frames exceeds configured {self.cfg.chunk_frames}"
            )
        if x.shape[0] - chunk_len > self.cfg.lookahead_frames:
            raise DimensionError(
                f"{x.shape[0] - chunk_len} lookahead frames exceed configured "
                f"{self.cfg.lookahead_frames}"
            )
        if x.shape[0] < chunk_len:
            raise DimensionError("fewer rows than chunk_len")
        new_caches: list[Tensor | None] = []
        h = x
        for layer, cache in zip(self.layers, state.caches):
            h, new_cache = layer(h, cache, chunk_len, self.cfg.left_cache_frames)
            new_caches.append(new_cache)
        out = h[:chunk_len, :] if h.shape[0] != chunk_len else h
        return out, EncoderState(caches=new_caches)

    def encode_sequence(self, x: Tensor, state: EncoderState | None = None) -> tuple[Tensor, EncoderState]:
        """Run the whole sequence through the same chunk schedule."""
        if state is None:
            state = self.initial_state()
        total = x.shape[0]
        chunk = self.cfg.chunk_frames
        look = self.cfg.lookahead_frames
        outputs = []
        start = 0
        while start < total:
            end = min(start + chunk, total)
            stop = min(end + look, total)
            y, state = self.forward_chunk(x[start:stop, :], state, chunk_len=end - start)
            outputs.append(y)
            start = end
        if not outputs:
            raise DimensionError("cannot encode an empty sequence")
        out = outputs[0] if len(outputs) == 1 else concat(outputs, axis=0)
        return out, state

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.l{i}"))
        return out


# ---------------------------------------------------------------------------
# Conformer-style block for short token sequences


class ConformerLiteBlock:
    """Half-step FF, full self-attention, causal depthwise conv, half-step FF.

    Built for short partial-hypothesis sequences; the caller must truncate to
    ``max_len`` tokens before encoding.
    """

    def __init__(self, dim: int, rng: np.random.Generator, n_heads: int = 1,
                 conv_kernel: int = 3, max_len: int = 20, ff_hidden: int | None = None):
        hidden = ff_hidden or 2 * dim
        self.dim = dim
        self.max_len = max_len
        self.conv_kernel = conv_kernel
        self.ln_ff1 = LayerNorm(dim)
        self.ff1 = FeedForward(dim, hidden, rng)
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_conv = LayerNorm(dim)
        self.conv_w = parameter(_xavier(rng, conv_kernel, dim, shape=(conv_kernel, dim)))
        self.conv_b = parameter(np.zeros(dim))
        self.ln_ff2 = LayerNorm(dim)
        self.ff2 = FeedForward(dim, hidden, rng)
        self.ln_out = LayerNorm(dim)

    def _causal_conv(self, x: Tensor) -> Tensor:
        T = x.shape[0]
        padded = concat([Tensor(np.zeros((self.conv_kernel - 1, self.dim))), x], axis=0)
        acc = None
        for k in range(self.conv_kernel):
            term = mul(padded[k : k + T, :], self.conv_w[k, :])
            acc = term if acc is None else add(acc, term)
        return add(acc, self.conv_b)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] > self.max_len:
            raise ContractError(
                f"sequence of {x.shape[0]} tokens exceeds block limit {self.max_len}; truncate first"
            )
        x = add(x, scale(self.ff1(self.ln_ff1(x)), 0.5))
        a = self.ln_attn(x)
        x = add(x, self.attn(a, a, a))
        x = add(x, self._causal_conv(self.ln_conv(x)))
        x = add(x, scale(self.ff2(self.ln_ff2(x)), 0.5))
        return self.ln_out(x)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.ln_ff1.params(f"{prefix}.ln_ff1")
        out.update(self.ff1.params(f"{prefix}.ff1"))
        out.update(self.ln_attn.params(f"{prefix}.ln_attn"))
        out.update(self.attn.params(f"{prefix}.attn"))
        out.update(self.ln_conv.params(f"{prefix}.ln_conv"))
        out[f"{prefix}.conv_w"] = self.conv_w
        out[f"{prefix}.conv_b"] = self.conv_b
        out.update(self.ln_ff2.params(f"{prefix}.ln_ff2"))
        out.update(self.ff2.params(f"{prefix}.ff2"))
        out.update(self.ln_out.params(f"{prefix}.ln_out"))
        return out
