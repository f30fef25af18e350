"""Transformer building blocks for the looped model.

All blocks operate on (T, d) or batched (B, T, d) inputs; parameters are plain
Tensor containers so the same blocks serve the tied (looped) and untied
(vanilla) model modes. Attention exposes its raw per-head matrices so runs can
dump them for offline analysis.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from loopformer import tensor as T
from loopformer.tensor import ShapeError, Tensor

# insertion points for the short depthwise conv; letters match the ablation CLI
CONV_INSERTIONS = (
    "none",
    "after_sdpa",          # (a) per-head, on each head's attention output
    "after_value",         # (b) per-head, on each value head
    "after_key",           # (c) per-head, on each key head
    "after_query",         # (d) per-head, on each query head
    "before_output_proj",  # (e) on the concatenated heads, before W_O
    "after_mlp_expansion", # (f) inside the gated feed-forward
)
INSERTION_LETTERS = dict(zip("abcdef", CONV_INSERTIONS[1:]))

FFN_ACTIVATIONS = ("swiglu", "silu", "relu")
_PER_HEAD_INSERTIONS = ("after_sdpa", "after_value", "after_key", "after_query")


@dataclass
class NonlinearityConfig:
    ffn_activation: str = "swiglu"
    attention_softmax: bool = True
    conv_activation: str = "silu"  # "identity" degrades ConvSwiGLU to conv-then-project

    def __post_init__(self):
        if self.ffn_activation not in FFN_ACTIVATIONS:
            raise ValueError(f"unknown ffn_activation {self.ffn_activation!r}")
        if self.conv_activation not in ("silu", "identity"):
            raise ValueError(f"unknown conv_activation {self.conv_activation!r}")


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    conv: Tensor | None = None  # kernel for insertions (a)-(e); None otherwise

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
               f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o}
        if self.conv is not None:
            out[f"{prefix}.conv"] = self.conv
        return out


@dataclass
class ConvSwiGLUParams:
    w_up: Tensor           # (d, 2m) gated, (d, m) plain
    w_down: Tensor         # (m, d)
    w_dwconv: Tensor | None = None  # (m, k); absent disables the conv stage
    activation: str = "swiglu"
    conv_activation: str = "silu"

    @property
    def width(self) -> int:
        return self.w_down.shape[0]

    @property
    def kernel_size(self) -> int:
        return 0 if self.w_dwconv is None else self.w_dwconv.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w_up": self.w_up, f"{prefix}.w_down": self.w_down}
        if self.w_dwconv is not None:
            out[f"{prefix}.w_dwconv"] = self.w_dwconv
        return out


@dataclass
class LayerParams:
    attn: AttentionParams
    norm1: Tensor
    ffn: ConvSwiGLUParams
    norm2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        out[f"{prefix}.norm1"] = self.norm1
        out.update(self.ffn.named(f"{prefix}.ffn"))
        out[f"{prefix}.norm2"] = self.norm2
        return out


# ---------------------------------------------------------------------------
# positional / depth encodings


def sinusoidal_table(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved sin/cos table; row p starts [sin(p), cos(p), ...]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : table[:, 1::2].shape[1]])
    return table.astype(dtype)


def rope_tables(length: int, head_dim: int, base: float = 10000.0, dtype=np.float64):
    pos = np.arange(length, dtype=np.float64)[:, None]
    inv = 1.0 / np.power(base, np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angle = pos * inv[None, :]
    angle = np.concatenate([angle, angle], axis=-1)
    return np.cos(angle).astype(dtype), np.sin(angle).astype(dtype)


@dataclass
class PositionalEncoding:
    """Position scheme plus the per-loop depth signal injected at each step."""

    scheme: str = "sinusoidal"  # sinusoidal | learned | rotary
    dim: int = 0
    max_len: int = 0
    max_depth: int = 64
    pos_table: Tensor | None = None    # learned positions
    depth_table: Tensor | None = None  # learned depth; None -> sinusoidal depth
    rope_base: float = 10000.0
    _sin_cache: dict = field(default_factory=dict, repr=False)

    def positional(self, length: int, dtype) -> Tensor | None:
        if length > self.max_len:
            raise ShapeError(f"sequence length {length} exceeds max {self.max_len}")
        if self.scheme == "learned":
            return T.narrow(self.pos_table, 0, 0, length)
        if self.scheme == "rotary":
            return None  # applied inside attention
        key = ("pos", length, np.dtype(dtype).name)
        if key not in self._sin_cache:
            self._sin_cache[key] = sinusoidal_table(self.max_len, self.dim, dtype)[:length]
        return Tensor(self._sin_cache[key], dtype=dtype)

    def depth(self, step: int, dtype) -> Tensor | None:
        if step >= self.max_depth:
            raise ShapeError(f"loop index {step} exceeds depth budget {self.max_depth}")
        if self.depth_table is not None:
            return T.narrow(self.depth_table, 0, step, 1)
        key = ("depth", np.dtype(dtype).name)
        if key not in self._sin_cache:
            self._sin_cache[key] = sinusoidal_table(self.max_depth, self.dim, dtype)
        return Tensor(self._sin_cache[key][step][None, :], dtype=dtype)

    def rope(self, length: int, head_dim: int, dtype):
        key = ("rope", length, head_dim, np.dtype(dtype).name)
        if key not in self._sin_cache:
            self._sin_cache[key] = rope_tables(length, head_dim, self.rope_base, dtype)
        return self._sin_cache[key]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        if self.pos_table is not None:
            out[f"{prefix}.pos_table"] = self.pos_table
        if self.depth_table is not None:
            out[f"{prefix}.depth_table"] = self.depth_table
        return out


@dataclass
class EmbedParams:
    token_table: Tensor
    puzzle_table: Tensor | None = None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.token_table": self.token_table}
        if self.puzzle_table is not None:
            out[f"{prefix}.puzzle_table"] = self.puzzle_table
        return out


def embed_static(tokens, puzzle_ids, ep: EmbedParams, pe: PositionalEncoding) -> Tensor:
    """Token + positional + broadcast puzzle embedding (everything that does
    not vary with the loop index, so rollouts can reuse one graph node)."""
    tokens = np.asarray(tokens)
    h = T.embedding(ep.token_table, tokens)
    dtype = ep.token_table.dtype
    pos = pe.positional(tokens.shape[-1], dtype)
    if pos is not None:
        h = T.add(h, pos)
    if ep.puzzle_table is not None:
        pz = T.embedding(ep.puzzle_table, np.asarray(puzzle_ids))
        if pz.ndim == h.ndim - 1:  # (B, d) against (B, T, d)
            pz = T.reshape(pz, pz.shape[:-1] + (1, pz.shape[-1]))
        h = T.add(h, pz)
    return h


def embed(tokens, puzzle_ids, ep: EmbedParams, pe: PositionalEncoding, step: int = 0) -> Tensor:
    """Token + positional + loop-depth + broadcast puzzle embedding.

    tokens: int array (T,) or (B, T); puzzle_ids: int scalar or (B,).
    """
    h = embed_static(tokens, puzzle_ids, ep, pe)
    depth = pe.depth(step, ep.token_table.dtype)
    if depth is not None:
        h = T.add(h, depth)
    return h


# ---------------------------------------------------------------------------
# attention


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[-1] // 2
    a = T.narrow(x, -1, 0, half)
    b = T.narrow(x, -1, half, x.shape[-1] - half)
    return T.concat([T.neg(b), a], axis=-1)


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return T.add(T.mul(x, Tensor(cos, dtype=cos.dtype)),
                 T.mul(_rotate_half(x), Tensor(sin, dtype=sin.dtype)))


def causal_mask(length: int, dtype=np.float32) -> Tensor:
    m = np.triu(np.full((length, length), -1e9, dtype=dtype), k=1)
    return Tensor(m)


def mhsa(
    h: Tensor,
    p: AttentionParams,
    mask: Tensor | None = None,
    nl: NonlinearityConfig | None = None,
    insertion: str = "none",
    pe: PositionalEncoding | None = None,
    pre_norm: bool = False,
    norm_gain: Tensor | None = None,
):
    """Self-attention sublayer with residual + RMSNorm.

    Returns (updated hidden states, raw per-head attention (..., heads, T, T)).
    With attention_softmax off, scaled scores feed the value mixing directly.
    """
    nl = nl or NonlinearityConfig()
    seq_len, dim = h.shape[-2], h.shape[-1]
    if mask is not None and mask.shape[-2:] != (seq_len, seq_len):
        raise ShapeError(f"mask shape {mask.shape} vs sequence length {seq_len}")
    dh = p.head_dim
    x = T.rmsnorm(h, norm_gain) if pre_norm else h
    q = _split_heads(T.matmul(x, p.w_q), p.heads)
    k = _split_heads(T.matmul(x, p.w_k), p.heads)
    v = _split_heads(T.matmul(x, p.w_v), p.heads)
    # per-head conv: in head-major layout the token axis sits at -2 with
    # head_dim channels, so one depthwise conv covers every head at once
    if insertion == "after_value":
        v = T.dwconv1d(v, p.conv)
    if insertion == "after_key":
        k = T.dwconv1d(k, p.conv)
    if insertion == "after_query":
        q = T.dwconv1d(q, p.conv)

    if pe is not None and pe.scheme == "rotary":
        cos, sin = pe.rope(seq_len, dh, h.dtype)
        q = _apply_rope(q, cos, sin)
        k = _apply_rope(k, cos, sin)

    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, mask)
    attn = T.softmax_lastdim(scores) if nl.attention_softmax else scores
    ctx = T.matmul(attn, v)
    if insertion == "after_sdpa":
        ctx = T.dwconv1d(ctx, p.conv)
    merged = _merge_heads(ctx)
    if insertion == "before_output_proj":
        merged = T.dwconv1d(merged, p.conv)
    out = T.matmul(merged, p.w_o)
    if pre_norm:
        return T.add(h, out), attn
    return T.rmsnorm(T.add(h, out), norm_gain), attn


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, d/heads)"""
    seq_len, dim = x.shape[-2], x.shape[-1]
    parted = T.reshape(x, x.shape[:-1] + (heads, dim // heads))
    axes = tuple(range(parted.ndim - 3)) + (parted.ndim - 2, parted.ndim - 3, parted.ndim - 1)
    return T.transpose(parted, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, heads*dh)"""
    axes = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    swapped = T.transpose(x, axes)
    return T.reshape(swapped, swapped.shape[:-2] + (x.shape[-3] * x.shape[-1],))


# ---------------------------------------------------------------------------
# feed-forward


def conv_swiglu(x: Tensor, p: ConvSwiGLUParams) -> Tensor:
    """Gated feed-forward: up-project to [G, U], SiLU(G) * U, optional depthwise
    conv over tokens followed by its activation, then down-project."""
    m = p.width
    up = T.matmul(x, p.w_up)
    g = T.narrow(up, -1, 0, m)
    u = T.narrow(up, -1, m, m)
    h = T.mul(T.silu(g), u)
    if p.w_dwconv is not None:
        h = T.dwconv1d(h, p.w_dwconv)
        if p.conv_activation == "silu":
            h = T.silu(h)
    return T.matmul(h, p.w_down)


def ffn(x: Tensor, p: ConvSwiGLUParams) -> Tensor:
    if p.activation == "swiglu":
        return conv_swiglu(x, p)
    act = T.silu if p.activation == "silu" else T.relu
    return T.matmul(act(T.matmul(x, p.w_up)), p.w_down)


def transition_block(
    h: Tensor,
    layer: LayerParams,
    nl: NonlinearityConfig | None = None,
    insertion: str = "none",
    mask: Tensor | None = None,
    pe: PositionalEncoding | None = None,
    pre_norm: bool = False,
):
    """One full layer: attention sublayer then feed-forward sublayer.

    Post-norm by default (norm after each residual add); pre-norm via flag.
    Returns (hidden states, raw attention matrices).
    """
    h1, attn = mhsa(h, layer.attn, mask=mask, nl=nl, insertion=insertion,
                    pe=pe, pre_norm=pre_norm, norm_gain=layer.norm1)
    if pre_norm:
        h2 = T.add(h1, ffn(T.rmsnorm(h1, layer.norm2), layer.ffn))
    else:
        h2 = T.rmsnorm(T.add(h1, ffn(h1, layer.ffn)), layer.norm2)
    return h2, attn


# ---------------------------------------------------------------------------
# parameter constructors


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    w = rng.standard_normal(shape)
    return (np.clip(w, -2.0, 2.0) * std).astype(dtype)


def init_attention(rng, dim: int, heads: int, insertion: str, kernel: int, dtype) -> AttentionParams:
    if dim % heads:
        raise ValueError(f"hidden size {dim} not divisible by heads {heads}")
    std = 1.0 / math.sqrt(dim)
    mk = lambda: Tensor(trunc_normal(rng, (dim, dim), std, dtype), requires_grad=True)
    conv = None
    if insertion in _PER_HEAD_INSERTIONS:
        conv = _identity_kernel(dim // heads, kernel, dtype)
    elif insertion == "before_output_proj":
        conv = _identity_kernel(dim, kernel, dtype)
    return AttentionParams(w_q=mk(), w_k=mk(), w_v=mk(), w_o=mk(), heads=heads, conv=conv)


def _identity_kernel(channels: int, kernel: int, dtype) -> Tensor:
    # current-token tap starts at 1 so the conv begins as an identity
    w = np.zeros((channels, kernel), dtype=dtype)
    w[:, -1] = 1.0
    return Tensor(w, requires_grad=True)


def init_ffn(rng, dim: int, width: int, activation: str, with_conv: bool,
             kernel: int, conv_activation: str, dtype) -> ConvSwiGLUParams:
    std = 1.0 / math.sqrt(dim)
    up_cols = 2 * width if activation == "swiglu" else width
    w_up = Tensor(trunc_normal(rng, (dim, up_cols), std, dtype), requires_grad=True)
    w_down = Tensor(trunc_normal(rng, (width, dim), 1.0 / math.sqrt(width), dtype), requires_grad=True)
    w_dw = _identity_kernel(width, kernel, dtype) if (with_conv and activation == "swiglu") else None
    return ConvSwiGLUParams(w_up=w_up, w_down=w_down, w_dwconv=w_dw,
                            activation=activation, conv_activation=conv_activation)


def init_layer(rng, dim: int, heads: int, width: int, insertion: str, kernel: int,
               nl: NonlinearityConfig, dtype) -> LayerParams:
    attn = init_attention(rng, dim, heads, insertion, kernel, dtype)
    ffn_p = init_ffn(rng, dim, width, nl.ffn_activation,
                     insertion == "after_mlp_expansion", kernel, nl.conv_activation, dtype)
    ones = lambda: Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    return LayerParams(attn=attn, norm1=ones(), ffn=ffn_p, norm2=ones())


# ---------------------------------------------------------------------------
# attention dump interface (binary record + JSON index)

DUMP_AXES = ["layer", "loop", "head", "query", "key"]


def write_attention_dump(path_base: str, attn: np.ndarray) -> tuple[str, str]:
    """Write (layers, loops, heads, T, T) attention to path_base.bin/.json.

    Binary layout: five dims as little-endian int64, then row-major float32.
    """
    if attn.ndim != 5:
        raise ShapeError(f"attention dump expects 5 dims, got {attn.shape}")
    bin_path, json_path = path_base + ".bin", path_base + ".json"
    with open(bin_path, "wb") as fh:
        fh.write(struct.pack("<5q", *attn.shape))
        fh.write(np.ascontiguousarray(attn, dtype="<f4").tobytes())
    index = {
        "format_version": 1,
        "dims": list(attn.shape),
        "axes": DUMP_AXES,
        "dtype": "float32",
        "byte_order": "little",
        "header_bytes": 40,
        "bin": bin_path.rsplit("/", 1)[-1],
    }
    with open(json_path, "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return bin_path, json_path


def read_attention_dump(path_base: str) -> np.ndarray:
    with open(path_base + ".bin", "rb") as fh:
        dims = struct.unpack("<5q", fh.read(40))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(dims)


def attention_entropy(attn: np.ndarray) -> np.ndarray:
    """Per-row entropy (nats) over the key axis; zero rows contribute zero."""
    p = np.clip(attn.astype(np.float64), 1e-12, None)
    p = p / p.sum(axis=-1, keepdims=True)
    return -(p * np.log(p)).sum(axis=-1)
