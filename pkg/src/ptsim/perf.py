"""Closed-form sync counting and an analytic TTFT/TPOT/throughput estimator.

Synchronization counts are exact: a tensor-parallel dense forward needs two
collectives per layer (2L), the track-parallel model one per block (L/D).
Latency estimates are a simple roofline-style model -- matmul FLOPs at a
fixed compute rate plus a per-collective latency and a ring all-reduce
transfer term -- parameterized by a HardwareProfile. They reproduce the
direction of the latency/throughput comparisons (fewer, smaller collectives
help, and help more as block depth grows), not measured magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig
from .pt import PTConfig

ARCHES = ("dense_tp", "pt")


@dataclass(frozen=True)
class HardwareProfile:
    flops_per_sec: float
    link_bandwidth_bytes_per_sec: float
    per_collective_latency_sec: float
    element_bytes: int

    def __post_init__(self):
        if self.flops_per_sec <= 0:
            raise ConfigError("flops_per_sec must be positive")
        if self.link_bandwidth_bytes_per_sec <= 0:
            raise ConfigError("link_bandwidth_bytes_per_sec must be positive")
        if self.per_collective_latency_sec < 0:
            raise ConfigError("per_collective_latency_sec must be >= 0")
        if self.element_bytes <= 0:
            raise ConfigError("element_bytes must be positive")


@dataclass(frozen=True)
class CostBreakdown:
    compute_sec: float
    collective_latency_sec: float
    collective_transfer_sec: float


@dataclass(frozen=True)
class PerfEstimate:
    ttft_sec: float
    tpot_sec: float
    throughput_tokens_per_sec: float
    breakdown: CostBreakdown  # prefill decomposition; parts sum to ttft_sec


def sync_count(arch: str, n_layers: int, block_depth: int | None = None) -> int:
    """Collectives per forward pass: dense_tp -> 2L, pt -> L/D."""
    if arch not in ARCHES:
        raise ConfigError(f"arch must be one of {ARCHES}, got {arch!r}")
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    if arch == "dense_tp":
        return 2 * n_layers
    if block_depth is None or block_depth < 1:
        raise ConfigError("pt requires a positive block_depth")
    if n_layers % block_depth != 0:
        raise ConfigError(
            f"n_layers ({n_layers}) must be divisible by block_depth ({block_depth})"
        )
    return n_layers // block_depth


def sync_reduction_fraction(block_depth: int) -> float:
    """Fraction of dense-TP sync points removed: 1 - (L/D)/(2L) = 1 - 1/(2D)."""
    if block_depth < 1:
        raise ConfigError(f"block_depth must be >= 1, got {block_depth}")
    return 1.0 - 1.0 / (2.0 * block_depth)


def _ring_transfer_sec(elements: int, n: int, hw: HardwareProfile) -> float:
    # Ring all-reduce moves 2(n-1)/n of the payload over the link.
    if elements == 0 or n == 1:
        return 0.0
    factor = 2.0 * (n - 1) / n
    return factor * elements * hw.element_bytes / hw.link_bandwidth_bytes_per_sec


def collective_cost(elements: int, n: int, hw: HardwareProfile) -> float:
    """Seconds for one n-way all-reduce of `elements` values (ring model)."""
    if elements < 0:
        raise ConfigError(f"elements must be >= 0, got {elements}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    return hw.per_collective_latency_sec + _ring_transfer_sec(elements, n, hw)


def matmul_flops_per_token(cfg: ModelConfig) -> float:
    """2 * (projection params) per token: attention + MLP per layer, plus logits."""
    d, hd = cfg.d_model, cfg.head_dim
    attn = d * cfg.n_heads * hd + 2 * d * cfg.n_kv_heads * hd + cfg.n_heads * hd * d
    mlp = 3 * d * cfg.d_ff
    return 2.0 * (cfg.n_layers * (attn + mlp) + d * cfg.vocab_size)


def attention_flops(cfg: ModelConfig, q_tokens: int, ctx_tokens: int) -> float:
    """Quadratic score/value matmuls: 4 * q * ctx * heads * head_dim per layer."""
    return 4.0 * q_tokens * ctx_tokens * cfg.n_heads * cfg.head_dim * cfg.n_layers


def estimate(arch: str, cfg, *, input_len: int, output_len: int, batch: int,
             hw: HardwareProfile, n_devices: int | None = None) -> PerfEstimate:
    """Analytic TTFT/TPOT/throughput for one (input_len, output_len, batch) point.

    Prefill: per-device matmul + attention FLOPs at the profile's compute
    rate plus sync_count collectives of input_len * batch * width elements.
    Decode: one token of compute per step with attention linear in context
    (KV-cache semantics, mean context = input_len + output_len/2), plus the
    same sync count on batch * width elements.
    throughput = batch * output_len / (ttft + output_len * tpot).
    """
    if arch not in ARCHES:
        raise ConfigError(f"arch must be one of {ARCHES}, got {arch!r}")
    if input_len < 1 or output_len < 1 or batch < 1:
        raise ConfigError("input_len, output_len and batch must be positive")

    if arch == "pt":
        if not isinstance(cfg, PTConfig):
            raise ConfigError("pt estimates require a PTConfig")
        track = cfg.track
        n = cfg.n_tracks
        if n_devices is not None and n_devices != n:
            raise ConfigError(
                f"n_devices ({n_devices}) must equal n_tracks ({n})"
            )
        syncs = sync_count("pt", track.n_layers, cfg.block_depth)
        width = track.d_model
        # Each device computes one full track; tracks run concurrently.
        prefill_flops = batch * (matmul_flops_per_token(track) * input_len
                                 + attention_flops(track, input_len, input_len))
        decode_ctx = input_len + output_len / 2.0
        decode_flops = batch * (matmul_flops_per_token(track)
                                + attention_flops(track, 1, 1) * decode_ctx)
    else:
        if not isinstance(cfg, ModelConfig):
            raise ConfigError("dense_tp estimates require a ModelConfig")
        if n_devices is None:
            raise ConfigError("dense_tp estimates require n_devices")
        n = n_devices
        syncs = sync_count("dense_tp", cfg.n_layers)
        width = cfg.d_model
        # The dense model's FLOPs split evenly across the shards.
        prefill_flops = batch * (matmul_flops_per_token(cfg) * input_len
                                 + attention_flops(cfg, input_len, input_len)) / n
        decode_ctx = input_len + output_len / 2.0
        decode_flops = batch * (matmul_flops_per_token(cfg)
                                + attention_flops(cfg, 1, 1) * decode_ctx) / n

    compute_sec = prefill_flops / hw.flops_per_sec
    latency_sec = syncs * hw.per_collective_latency_sec
    transfer_sec = syncs * _ring_transfer_sec(input_len * batch * width, n, hw)
    ttft = compute_sec + latency_sec + transfer_sec

    tpot = (decode_flops / hw.flops_per_sec
            + syncs * hw.per_collective_latency_sec
            + syncs * _ring_transfer_sec(batch * width, n, hw))
    throughput = batch * output_len / (ttft + output_len * tpot)
    return PerfEstimate(
        ttft_sec=ttft,
        tpot_sec=tpot,
        throughput_tokens_per_sec=throughput,
        breakdown=CostBreakdown(
            compute_sec=compute_sec,
            collective_latency_sec=latency_sec,
            collective_transfer_sec=transfer_sec,
        ),
    )
