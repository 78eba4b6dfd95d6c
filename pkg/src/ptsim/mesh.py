"""Simulated n-device mesh with deterministic collectives and a sync trace.

One worker thread per device. The only inter-worker interaction is the
collective rendezvous: every device deposits its tensor, a barrier action
reduces the slots in ascending rank order (delegating to pt.fuse, so the
result matches the sequential oracle bit-for-bit) and each device receives
its own copy of the reduced tensor. One SyncEvent is logged per collective,
not per device. Protocol violations (divergent shapes or call sites, a
device skipping a collective) surface as MeshProtocolError instead of
hangs, via a rendezvous timeout.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MeshProtocolError
from .model import embed_tokens, layer_forward
from .pt import FusionCapture, PTConfig, PTWeightSet, fuse
from .tensor import matmul, rms_norm


@dataclass(frozen=True)
class SyncEvent:
    seq_no: int
    layer_index: int
    kind: str
    participants: int
    elements: int
    payload_bytes: int

    def __post_init__(self):
        if self.kind != "allreduce":
            raise ConfigError(f"unknown collective kind {self.kind!r}")


@dataclass
class SyncStats:
    total_events: int = 0
    total_payload_bytes: int = 0
    events: list[SyncEvent] = field(default_factory=list)

    def add(self, event: SyncEvent) -> None:
        self.events.append(event)
        self.total_events += 1
        self.total_payload_bytes += event.payload_bytes


class Mesh:
    """Rendezvous state for n_devices concurrent workers."""

    def __init__(self, n_devices: int, timeout_s: float = 10.0):
        if n_devices < 1:
            raise ConfigError(f"n_devices must be >= 1, got {n_devices}")
        self.n_devices = n_devices
        self.timeout_s = timeout_s
        self.stats = SyncStats()
        self._reset_round_state()

    def _reset_round_state(self) -> None:
        n = self.n_devices
        self._slots: list[np.ndarray | None] = [None] * n
        self._layers: list[int | None] = [None] * n
        self._ops: list[str | None] = [None] * n
        self._calls = [0] * n
        self._result: np.ndarray | None = None
        self._round_error: Exception | None = None
        self._barrier = threading.Barrier(n, action=self._rendezvous)

    def reset(self) -> None:
        """Fresh trace and rendezvous state; call before reusing the mesh."""
        self.stats = SyncStats()
        self._reset_round_state()

    def abort(self) -> None:
        """Break the rendezvous so blocked peers fail fast (worker error path)."""
        self._barrier.abort()

    def _rendezvous(self) -> None:
        # Runs exactly once per collective, in whichever thread arrives last.
        try:
            calls = set(self._calls)
            if len(calls) != 1:
                raise MeshProtocolError(
                    f"collective call counts diverged across devices: {self._calls}"
                )
            layers = set(self._layers)
            ops = set(self._ops)
            if len(layers) != 1 or len(ops) != 1:
                raise MeshProtocolError(
                    f"collective call sites diverged: layers={self._layers}, ops={self._ops}"
                )
            shapes = [tuple(s.shape) for s in self._slots]
            if len(set(shapes)) != 1:
                detail = ", ".join(f"rank {r}: {shp}" for r, shp in enumerate(shapes))
                raise MeshProtocolError(f"collective shapes diverged ({detail})")
            result = fuse(self._slots, self._ops[0])
            elements = int(result.size)
            self.stats.add(SyncEvent(
                seq_no=self.stats.total_events,
                layer_index=self._layers[0],
                kind="allreduce",
                participants=self.n_devices,
                elements=elements,
                payload_bytes=elements * result.dtype.itemsize,
            ))
            self._result = result
        except Exception as exc:
            self._round_error = exc
            raise

    def all_reduce(self, device_rank: int, local: np.ndarray, op: str = "sum",
                   layer_index: int = 0) -> np.ndarray:
        """Collective reduce; every rank must call once per round, same call site."""
        if not 0 <= device_rank < self.n_devices:
            raise ConfigError(
                f"device_rank {device_rank} outside mesh of {self.n_devices}"
            )
        self._slots[device_rank] = local
        self._layers[device_rank] = layer_index
        self._ops[device_rank] = op
        self._calls[device_rank] += 1
        try:
            self._barrier.wait(timeout=self.timeout_s)
        except threading.BrokenBarrierError:
            error = self._round_error
            if error is not None:
                raise error
            raise MeshProtocolError(
                f"collective rendezvous broken on rank {device_rank}: a device "
                f"skipped the collective or timed out after {self.timeout_s}s"
            ) from None
        return self._result.copy()


def all_reduce(mesh: Mesh, device_rank: int, local: np.ndarray, op: str = "sum",
               layer_index: int = 0) -> np.ndarray:
    return mesh.all_reduce(device_rank, local, op, layer_index)


def run_workers(mesh: Mesh, worker, n_workers: int) -> None:
    """Run worker(rank) on one thread per device; first error wins."""
    errors: list[tuple[int, Exception]] = []
    errors_lock = threading.Lock()

    def body(rank: int) -> None:
        try:
            worker(rank)
        except Exception as exc:
            with errors_lock:
                errors.append((rank, exc))
            mesh.abort()

    threads = [threading.Thread(target=body, args=(rank,), name=f"device-{rank}")
               for rank in range(n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        errors.sort(key=lambda pair: pair[0])
        non_broken = [e for _, e in errors if not isinstance(e, MeshProtocolError)]
        raise (non_broken[0] if non_broken else errors[0][1])


def run_pt_parallel(tokens, cfg: PTConfig, w: PTWeightSet, mesh: Mesh,
                    fusion_capture: FusionCapture | None = None
                    ) -> tuple[np.ndarray, SyncStats]:
    """Concurrent track-parallel forward pass: one device per track.

    Logits equal the sequential oracle bit-for-bit in 64-bit mode (both fuse
    in ascending track order); the trace holds one event per fusion.
    """
    if mesh.n_devices != cfg.n_tracks:
        raise ConfigError(
            f"mesh has {mesh.n_devices} devices but the model has {cfg.n_tracks} tracks"
        )
    mesh.reset()
    x = embed_tokens(tokens, cfg.track, w.token_embedding)
    positions = list(range(x.shape[0]))
    finals: list[np.ndarray | None] = [None] * cfg.n_tracks

    def worker(rank: int) -> None:
        h = x.copy()
        for layer in range(1, cfg.track.n_layers + 1):
            h = layer_forward(h, w.tracks[rank][layer - 1], cfg.track, positions)
            if layer % cfg.block_depth == 0:
                h = mesh.all_reduce(rank, h, cfg.reduce_op, layer_index=layer)
                if fusion_capture is not None:
                    fusion_capture.record(layer, rank, h)
        finals[rank] = h

    run_workers(mesh, worker, cfg.n_tracks)
    final = rms_norm(finals[0], w.final_gain, cfg.track.norm_eps)
    logits = matmul(final, w.unembedding)
    return logits, mesh.stats


def export_trace(stats: SyncStats, path) -> None:
    """One JSON object per line per event, in trace order, newline-terminated."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in stats.events:
            f.write(json.dumps({
                "seq_no": e.seq_no,
                "layer_index": e.layer_index,
                "kind": e.kind,
                "participants": e.participants,
                "elements": e.elements,
                "payload_bytes": e.payload_bytes,
            }) + "\n")


def parse_trace(path) -> SyncStats:
    """Re-parse an exported trace into an equal SyncStats."""
    stats = SyncStats()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            stats.add(SyncEvent(
                seq_no=record["seq_no"],
                layer_index=record["layer_index"],
                kind=record["kind"],
                participants=record["participants"],
                elements=record["elements"],
                payload_bytes=record["payload_bytes"],
            ))
    return stats
