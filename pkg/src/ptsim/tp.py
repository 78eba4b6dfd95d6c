"""Tensor-parallel execution of the dense reference on the simulated mesh.

Attention is sharded by contiguous head ranges (column slices of the Q/K/V
projections, matching row slices of the output projection); the MLP is
sharded column-wise on gate/up and row-wise on down. Norm gains, the
embedding and the unembedding are replicated. Each layer needs two
all-reduces -- one for the attention output partials, one for the MLP
partials -- so a forward pass logs exactly 2 * n_layers collectives.

Trace annotation: the attention collective of layer l is logged with
layer_index 2l-1 and the MLP collective with 2l, so the two halves of a
layer are distinguishable straight from the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .mesh import Mesh, SyncStats, run_workers
from .model import (
    LayerWeights,
    ModelConfig,
    WeightSet,
    attention_heads,
    embed_tokens,
    gated_mlp,
)
from .tensor import matmul, rms_norm


@dataclass(frozen=True)
class LayerShard:
    """One device's slice of one layer's projections (norm gains replicated)."""
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass(frozen=True)
class ShardedWeightSet:
    cfg: ModelConfig
    n_shards: int
    shards: tuple[tuple[LayerShard, ...], ...] = field(repr=False)
    dense: WeightSet = field(repr=False)  # replicated norms/embedding/unembedding

    @property
    def heads_per_shard(self) -> int:
        return self.cfg.n_heads // self.n_shards

    @property
    def kv_heads_per_shard(self) -> int:
        return self.cfg.n_kv_heads // self.n_shards


def shard_weights(w: WeightSet, cfg: ModelConfig, n_shards: int) -> ShardedWeightSet:
    """Lossless head/column partition of a dense WeightSet across n_shards."""
    for name, value in (("n_heads", cfg.n_heads), ("n_kv_heads", cfg.n_kv_heads),
                        ("d_ff", cfg.d_ff)):
        if value % n_shards != 0:
            raise ConfigError(
                f"{name} ({value}) is not divisible by n_shards ({n_shards})"
            )
    hd = cfg.head_dim
    q_cols = (cfg.n_heads // n_shards) * hd
    kv_cols = (cfg.n_kv_heads // n_shards) * hd
    ff_cols = cfg.d_ff // n_shards
    shards = []
    for s in range(n_shards):
        layers = []
        for lw in w.layers:
            layers.append(LayerShard(
                wq=lw.wq[:, s * q_cols:(s + 1) * q_cols].copy(),
                wk=lw.wk[:, s * kv_cols:(s + 1) * kv_cols].copy(),
                wv=lw.wv[:, s * kv_cols:(s + 1) * kv_cols].copy(),
                wo=lw.wo[s * q_cols:(s + 1) * q_cols, :].copy(),
                w_gate=lw.w_gate[:, s * ff_cols:(s + 1) * ff_cols].copy(),
                w_up=lw.w_up[:, s * ff_cols:(s + 1) * ff_cols].copy(),
                w_down=lw.w_down[s * ff_cols:(s + 1) * ff_cols, :].copy(),
            ))
        shards.append(tuple(layers))
    return ShardedWeightSet(cfg=cfg, n_shards=n_shards, shards=tuple(shards), dense=w)


def reassemble_weights(sharded: ShardedWeightSet) -> WeightSet:
    """Concatenate the shards back into a dense WeightSet (bit-exact)."""
    layers = []
    for layer_idx in range(sharded.cfg.n_layers):
        parts = [sharded.shards[s][layer_idx] for s in range(sharded.n_shards)]
        ref = sharded.dense.layers[layer_idx]
        layers.append(LayerWeights(
            wq=np.concatenate([p.wq for p in parts], axis=1),
            wk=np.concatenate([p.wk for p in parts], axis=1),
            wv=np.concatenate([p.wv for p in parts], axis=1),
            wo=np.concatenate([p.wo for p in parts], axis=0),
            w_gate=np.concatenate([p.w_gate for p in parts], axis=1),
            w_up=np.concatenate([p.w_up for p in parts], axis=1),
            w_down=np.concatenate([p.w_down for p in parts], axis=0),
            g_attn=ref.g_attn.copy(),
            g_mlp=ref.g_mlp.copy(),
        ))
    d = sharded.dense
    return WeightSet(
        cfg=sharded.cfg,
        token_embedding=d.token_embedding.copy(),
        layers=tuple(layers),
        final_gain=d.final_gain.copy(),
        unembedding=d.unembedding.copy(),
    )


def run_tp_forward(tokens, cfg: ModelConfig, sharded: ShardedWeightSet,
                   mesh: Mesh) -> tuple[np.ndarray, SyncStats]:
    """Sharded dense forward with two collectives per layer.

    Logits match dense_forward (bit-equal for a single shard, within
    rounding of the split partial sums otherwise); the trace logs exactly
    2 * n_layers allreduce events of seq * d_model elements each.
    """
    if mesh.n_devices != sharded.n_shards:
        raise ConfigError(
            f"mesh has {mesh.n_devices} devices but weights are split "
            f"{sharded.n_shards} ways"
        )
    mesh.reset()
    dense = sharded.dense
    x = embed_tokens(tokens, cfg, dense.token_embedding)
    positions = list(range(x.shape[0]))
    local_heads = sharded.heads_per_shard
    local_kv = sharded.kv_heads_per_shard
    finals: list[np.ndarray | None] = [None] * sharded.n_shards

    def worker(rank: int) -> None:
        h = x.copy()
        for layer in range(1, cfg.n_layers + 1):
            lw = dense.layers[layer - 1]
            shard = sharded.shards[rank][layer - 1]

            attn_in = rms_norm(h, lw.g_attn, cfg.norm_eps)
            ctx = attention_heads(
                attn_in, shard.wq, shard.wk, shard.wv,
                local_heads, local_kv, cfg.head_dim, positions, cfg.rope_base,
            )
            partial = matmul(ctx, shard.wo)
            attn_out = mesh.all_reduce(rank, partial, "sum", layer_index=2 * layer - 1)
            h = h + attn_out

            mlp_in = rms_norm(h, lw.g_mlp, cfg.norm_eps)
            partial = gated_mlp(mlp_in, shard.w_gate, shard.w_up, shard.w_down)
            mlp_out = mesh.all_reduce(rank, partial, "sum", layer_index=2 * layer)
            h = h + mlp_out
        finals[rank] = h

    run_workers(mesh, worker, sharded.n_shards)
    final = rms_norm(finals[0], dense.final_gain, cfg.norm_eps)
    logits = matmul(final, dense.unembedding)
    return logits, mesh.stats
