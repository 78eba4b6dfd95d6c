"""Track-parallel transformer: n independent tracks fused every block_depth layers.

The model is n smaller transformers ("tracks") sharing one embedding and
unembedding at track width. Tracks run their layers independently; after
every block of block_depth layers their activations are combined with an
all-reduce (sum or mean) and the fused value is rebroadcast to every track.
This module is the single-device sequential oracle; the concurrent
execution lives in ptsim.mesh.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .model import (
    LayerWeights,
    ModelConfig,
    WeightSet,
    _component_seeds,
    build_layer_stack,
    embed_tokens,
    layer_forward,
)
from .tensor import matmul, rms_norm, seeded_init

REDUCE_OPS = ("sum", "mean")


@dataclass(frozen=True)
class PTConfig:
    n_tracks: int
    block_depth: int
    track: ModelConfig
    reduce_op: str = "sum"

    def __post_init__(self):
        if self.n_tracks < 1:
            raise ConfigError(f"n_tracks must be >= 1, got {self.n_tracks}")
        if self.block_depth < 1:
            raise ConfigError(f"block_depth must be >= 1, got {self.block_depth}")
        if self.track.n_layers % self.block_depth != 0:
            raise ConfigError(
                f"n_layers ({self.track.n_layers}) must be divisible by "
                f"block_depth ({self.block_depth})"
            )
        if self.reduce_op not in REDUCE_OPS:
            raise ConfigError(f"reduce_op must be one of {REDUCE_OPS}, got {self.reduce_op!r}")


@dataclass(frozen=True)
class PTWeightSet:
    cfg: PTConfig
    token_embedding: np.ndarray
    tracks: tuple[tuple[LayerWeights, ...], ...] = field(repr=False)
    final_gain: np.ndarray
    unembedding: np.ndarray

    def __post_init__(self):
        if len(self.tracks) != self.cfg.n_tracks:
            raise DimensionError(
                f"expected {self.cfg.n_tracks} track stacks, got {len(self.tracks)}"
            )
        # Reuse the dense shape validation on each stack plus the shared pieces.
        for stack in self.tracks:
            WeightSet(
                cfg=self.cfg.track,
                token_embedding=self.token_embedding,
                layers=stack,
                final_gain=self.final_gain,
                unembedding=self.unembedding,
            )

    @classmethod
    def from_seed(cls, cfg: PTConfig, seed: int) -> "PTWeightSet":
        """Shared pieces derive from `seed`; track i's stack from seed XOR i."""
        embed_seed, _, final_seed, unembed_seed = _component_seeds(seed)
        scale = 1.0 / math.sqrt(cfg.track.d_model)
        tracks = []
        for i in range(cfg.n_tracks):
            _, stack_seed, _, _ = _component_seeds(seed ^ i)
            tracks.append(build_layer_stack(cfg.track, stack_seed))
        return cls(
            cfg=cfg,
            token_embedding=seeded_init(
                (cfg.track.vocab_size, cfg.track.d_model), embed_seed, scale
            ),
            tracks=tuple(tracks),
            final_gain=seeded_init((cfg.track.d_model,), final_seed, scale),
            unembedding=seeded_init(
                (cfg.track.d_model, cfg.track.vocab_size), unembed_seed, scale
            ),
        )


def fuse(h_list, op: str = "sum") -> np.ndarray:
    """Elementwise sum (or sum/n) over same-shaped tensors, in track order.

    Accumulation runs track 0 first, ascending, so the result matches the
    mesh all-reduce bit-for-bit. A single operand is returned unchanged
    (as a copy) under either op.
    """
    h_list = list(h_list)
    if not h_list:
        raise DimensionError("fuse requires at least one tensor")
    if op not in REDUCE_OPS:
        raise ConfigError(f"reduce op must be one of {REDUCE_OPS}, got {op!r}")
    shape = h_list[0].shape
    for i, h in enumerate(h_list[1:], start=1):
        if h.shape != shape:
            raise DimensionError(
                f"track {i} has shape {tuple(h.shape)}, expected {tuple(shape)} (track 0)"
            )
    acc = h_list[0].copy()
    for h in h_list[1:]:
        acc += h
    if op == "mean":
        acc /= acc.dtype.type(len(h_list))
    return acc


class FusionCapture:
    """Records each track's activation right after a fusion rebroadcast.

    Thread-safe; keyed by (layer_index, track_index). Doubles as the
    instrumented fusion counter.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.states: dict[tuple[int, int], np.ndarray] = {}

    def record(self, layer_index: int, track: int, h: np.ndarray) -> None:
        with self._lock:
            self.states[(layer_index, track)] = h.copy()

    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.states})

    def fusion_count(self) -> int:
        return len(self.layers())

    def states_at(self, layer_index: int) -> list[np.ndarray]:
        tracks = sorted(t for layer, t in self.states if layer == layer_index)
        return [self.states[(layer_index, t)] for t in tracks]


def count_fusions(cfg: PTConfig) -> int:
    """Number of sync points in one forward pass: n_layers / block_depth."""
    return cfg.track.n_layers // cfg.block_depth


def pt_forward_sequential(tokens, cfg: PTConfig, w: PTWeightSet,
                          fusion_capture: FusionCapture | None = None) -> np.ndarray:
    """Sequential oracle for the track-parallel forward pass.

    Embeds once, initializes every track with the same input, runs layer l
    of each track in track order, fuses whenever l is a multiple of
    block_depth and rebroadcasts the fused activation to every track. The
    final norm and unembedding apply to the last fused activation (layer
    n_layers is always a sync point because block_depth divides n_layers).
    """
    x = embed_tokens(tokens, cfg.track, w.token_embedding)
    positions = list(range(x.shape[0]))
    h = [x.copy() for _ in range(cfg.n_tracks)]
    fused = None
    for layer in range(1, cfg.track.n_layers + 1):
        for i in range(cfg.n_tracks):
            h[i] = layer_forward(h[i], w.tracks[i][layer - 1], cfg.track, positions)
        if layer % cfg.block_depth == 0:
            fused = fuse(h, cfg.reduce_op)
            h = [fused.copy() for _ in range(cfg.n_tracks)]
            if fusion_capture is not None:
                for i in range(cfg.n_tracks):
                    fusion_capture.record(layer, i, h[i])
    final = rms_norm(fused, w.final_gain, cfg.track.norm_eps)
    return matmul(final, w.unembedding)


def dense_equivalent(cfg: PTConfig) -> ModelConfig:
    """Dense comparator with heads/KV heads/widths scaled up by n_tracks.

    Mirrors the head bookkeeping of the track split: total heads equal
    n_tracks times the per-track heads, head_dim unchanged.
    """
    t = cfg.track
    return ModelConfig(
        d_model=t.d_model * cfg.n_tracks,
        n_layers=t.n_layers,
        n_heads=t.n_heads * cfg.n_tracks,
        n_kv_heads=t.n_kv_heads * cfg.n_tracks,
        head_dim=t.head_dim,
        d_ff=t.d_ff * cfg.n_tracks,
        vocab_size=t.vocab_size,
        max_seq=t.max_seq,
        norm_eps=t.norm_eps,
        rope_base=t.rope_base,
    )


def pt_variant(dense: ModelConfig, n_tracks: int, block_depth: int,
               reduce_op: str = "sum") -> PTConfig:
    """Track split of a dense config: heads, KV heads and widths / n_tracks."""
    for name, value in (("n_heads", dense.n_heads), ("n_kv_heads", dense.n_kv_heads),
                        ("d_ff", dense.d_ff)):
        if value % n_tracks != 0:
            raise ConfigError(
                f"{name} ({value}) is not divisible by n_tracks ({n_tracks})"
            )
    track = ModelConfig(
        d_model=dense.d_model // n_tracks,
        n_layers=dense.n_layers,
        n_heads=dense.n_heads // n_tracks,
        n_kv_heads=dense.n_kv_heads // n_tracks,
        head_dim=dense.head_dim,
        d_ff=dense.d_ff // n_tracks,
        vocab_size=dense.vocab_size,
        max_seq=dense.max_seq,
        norm_eps=dense.norm_eps,
        rope_base=dense.rope_base,
    )
    return PTConfig(n_tracks=n_tracks, block_depth=block_depth, track=track,
                    reduce_op=reduce_op)
