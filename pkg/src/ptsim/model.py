"""Single-device dense transformer reference.

Embedding -> n_layers of (pre-norm GQA attention + gated MLP, both with
residuals) -> final norm -> unembedding. This is the dense baseline and
also the per-track layer implementation reused by the track-parallel model
and the tensor-parallel baseline.

Weight derivation is fully deterministic: every tensor is drawn by
seeded_init with scale 1/sqrt(d_model) from a per-tensor seed, and the
per-tensor seeds come from a SplitMix64 stream in a fixed draw order
(embedding, layer stack, final gain, unembedding; within the stack, per
layer: wq, wk, wv, wo, w_gate, w_up, w_down, g_attn, g_mlp).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .tensor import SeededRng, matmul, rms_norm, rope_apply, seeded_init, silu, softmax_rows


def default_ffn_dim(d_model: int) -> int:
    """Gated-MLP hidden width: 4*d_model*2/3, rounded to a multiple of 8."""
    raw = 8.0 * d_model / 3.0
    return max(8, int(round(raw / 8.0)) * 8)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    max_seq: int
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "n_kv_heads",
                     "head_dim", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.norm_eps <= 0 or self.rope_base <= 0:
            raise ConfigError("norm_eps and rope_base must be positive")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be a multiple of "
                f"n_kv_heads ({self.n_kv_heads})"
            )
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim "
                f"({self.n_heads} * {self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    g_attn: np.ndarray
    g_mlp: np.ndarray


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, kv, hd, f = cfg.d_model, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, cfg.d_ff
    return {
        "wq": (d, h * hd),
        "wk": (d, kv * hd),
        "wv": (d, kv * hd),
        "wo": (h * hd, d),
        "w_gate": (d, f),
        "w_up": (d, f),
        "w_down": (f, d),
        "g_attn": (d,),
        "g_mlp": (d,),
    }


_STACK_SLOTS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp")


def _component_seeds(seed: int) -> tuple[int, int, int, int]:
    """(embedding, layer stack, final gain, unembedding) seeds, in draw order."""
    rng = SeededRng(seed)
    return rng.next_u64(), rng.next_u64(), rng.next_u64(), rng.next_u64()


def build_layer_stack(cfg: ModelConfig, stack_seed: int) -> tuple[LayerWeights, ...]:
    """Layer weights for one stack, bit-exactly determined by (cfg, stack_seed)."""
    shapes = _layer_shapes(cfg)
    scale = 1.0 / math.sqrt(cfg.d_model)
    rng = SeededRng(stack_seed)
    layers = []
    for _ in range(cfg.n_layers):
        tensors = {
            slot: seeded_init(shapes[slot], rng.next_u64(), scale)
            for slot in _STACK_SLOTS
        }
        layers.append(LayerWeights(**tensors))
    return tuple(layers)


@dataclass(frozen=True)
class WeightSet:
    cfg: ModelConfig
    token_embedding: np.ndarray
    layers: tuple[LayerWeights, ...] = field(repr=False)
    final_gain: np.ndarray
    unembedding: np.ndarray

    def __post_init__(self):
        cfg = self.cfg
        _expect_shape("token_embedding", self.token_embedding, (cfg.vocab_size, cfg.d_model))
        _expect_shape("final_gain", self.final_gain, (cfg.d_model,))
        _expect_shape("unembedding", self.unembedding, (cfg.d_model, cfg.vocab_size))
        if len(self.layers) != cfg.n_layers:
            raise DimensionError(
                f"expected {cfg.n_layers} layers, got {len(self.layers)}"
            )
        shapes = _layer_shapes(cfg)
        for i, lw in enumerate(self.layers):
            for slot in _STACK_SLOTS:
                _expect_shape(f"layer {i} {slot}", getattr(lw, slot), shapes[slot])

    @classmethod
    def from_seed(cls, cfg: ModelConfig, seed: int) -> "WeightSet":
        embed_seed, stack_seed, final_seed, unembed_seed = _component_seeds(seed)
        scale = 1.0 / math.sqrt(cfg.d_model)
        return cls(
            cfg=cfg,
            token_embedding=seeded_init((cfg.vocab_size, cfg.d_model), embed_seed, scale),
            layers=build_layer_stack(cfg, stack_seed),
            final_gain=seeded_init((cfg.d_model,), final_seed, scale),
            unembedding=seeded_init((cfg.d_model, cfg.vocab_size), unembed_seed, scale),
        )


def _expect_shape(name: str, tensor: np.ndarray, shape: tuple[int, ...]) -> None:
    if tuple(np.shape(tensor)) != shape:
        raise DimensionError(
            f"{name} has shape {tuple(np.shape(tensor))}, expected {shape}"
        )


def validate_tokens(tokens, cfg: ModelConfig) -> list[int]:
    tokens = [int(t) for t in tokens]
    if not 1 <= len(tokens) <= cfg.max_seq:
        raise InputError(
            f"sequence length {len(tokens)} outside [1, {cfg.max_seq}]"
        )
    for i, t in enumerate(tokens):
        if not 0 <= t < cfg.vocab_size:
            raise InputError(f"token id {t} at index {i} outside vocab of {cfg.vocab_size}")
    return tokens


def embed_tokens(tokens, cfg: ModelConfig, token_embedding: np.ndarray) -> np.ndarray:
    tokens = validate_tokens(tokens, cfg)
    return token_embedding[np.asarray(tokens, dtype=np.int64)].copy()


def attention_heads(
    x_norm: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    n_heads: int,
    n_kv_heads: int,
    head_dim: int,
    positions,
    rope_base: float,
) -> np.ndarray:
    """Causal GQA over a contiguous block of heads.

    Returns the concatenated per-head context (seq, n_heads * head_dim).
    Query-head group g = n_heads // n_kv_heads shares KV head q_head // g.
    The tensor-parallel path calls this on head slices; identical arithmetic
    to the dense path for the heads it covers.
    """
    seq = x_norm.shape[0]
    q = matmul(x_norm, wq).reshape(seq, n_heads, head_dim)
    k = matmul(x_norm, wk).reshape(seq, n_kv_heads, head_dim)
    v = matmul(x_norm, wv).reshape(seq, n_kv_heads, head_dim)
    q = rope_apply(q, positions, rope_base)
    k = rope_apply(k, positions, rope_base)

    scale = x_norm.dtype.type(1.0 / math.sqrt(head_dim))
    mask_rows, mask_cols = np.triu_indices(seq, k=1)
    group = n_heads // n_kv_heads
    ctx = np.empty((seq, n_heads * head_dim), dtype=x_norm.dtype)
    for head in range(n_heads):
        kv = head // group
        scores = matmul(q[:, head, :], k[:, kv, :].T) * scale
        scores[mask_rows, mask_cols] = -np.inf
        weights = softmax_rows(scores)
        ctx[:, head * head_dim:(head + 1) * head_dim] = matmul(weights, v[:, kv, :])
    return ctx


def gated_mlp(x_norm: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray,
              w_down: np.ndarray) -> np.ndarray:
    """down(silu(gate(x)) * up(x))."""
    activated = silu(matmul(x_norm, w_gate)) * matmul(x_norm, w_up)
    return matmul(activated, w_down)


def layer_forward(h: np.ndarray, lw: LayerWeights, cfg: ModelConfig,
                  positions) -> np.ndarray:
    """One pre-norm transformer layer: h + Attn(norm(h)), then + MLP(norm(.))."""
    if h.ndim != 2 or h.shape[1] != cfg.d_model:
        raise DimensionError(
            f"layer input shape {tuple(h.shape)} does not match d_model {cfg.d_model}"
        )
    if h.shape[0] > cfg.max_seq:
        raise DimensionError(f"sequence length {h.shape[0]} exceeds max_seq {cfg.max_seq}")
    attn_in = rms_norm(h, lw.g_attn, cfg.norm_eps)
    ctx = attention_heads(
        attn_in, lw.wq, lw.wk, lw.wv,
        cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, positions, cfg.rope_base,
    )
    h = h + matmul(ctx, lw.wo)
    mlp_in = rms_norm(h, lw.g_mlp, cfg.norm_eps)
    h = h + gated_mlp(mlp_in, lw.w_gate, lw.w_up, lw.w_down)
    return h


def dense_forward(tokens, cfg: ModelConfig, w: WeightSet) -> np.ndarray:
    """Logits (seq, vocab) for every position; deterministic in (tokens, cfg, seed)."""
    h = embed_tokens(tokens, cfg, w.token_embedding)
    positions = list(range(h.shape[0]))
    for lw in w.layers:
        h = layer_forward(h, lw, cfg, positions)
    h = rms_norm(h, w.final_gain, cfg.norm_eps)
    return matmul(h, w.unembedding)


# Golden-logit files: 8-byte header of two little-endian int32 (seq, vocab)
# followed by the logits as little-endian float32, row-major.

def write_logits_file(path, logits: np.ndarray) -> None:
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got shape {tuple(logits.shape)}")
    seq, vocab = logits.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<ii", seq, vocab))
        f.write(np.ascontiguousarray(logits, dtype="<f4").tobytes())


def read_logits_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise InputError(f"{path}: truncated golden-logits header")
        seq, vocab = struct.unpack("<ii", header)
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != seq * vocab:
        raise InputError(
            f"{path}: expected {seq * vocab} float32 values, found {data.size}"
        )
    return data.reshape(seq, vocab)
