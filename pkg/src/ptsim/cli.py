"""Command-line front door: ptsim {verify|count-syncs|perf-table|trace}.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O error. Every command is deterministic: identical config plus seed
yields byte-identical stdout and output files. PTSIM_ELEMENT_WIDTH (32 or
64) overrides the config's run.element_width.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from .config import RunConfig, load_run_config, resolve_tokens
from .errors import ConfigError, PtsimError
from .mesh import Mesh, export_trace, run_pt_parallel
from .model import WeightSet, dense_forward
from .perf import estimate, sync_count, sync_reduction_fraction
from .pt import (
    FusionCapture,
    PTConfig,
    PTWeightSet,
    count_fusions,
    dense_equivalent,
    pt_forward_sequential,
    pt_variant,
)
from .tensor import max_rel_error, set_element_width
from .tp import run_tp_forward, shard_weights

PERF_TABLE_DEPTHS = (2, 4, 8)
DEFAULT_SWEEP = "1024,2048,4096x128,4096"


def _apply_element_width(rc: RunConfig) -> None:
    env = os.environ.get("PTSIM_ELEMENT_WIDTH")
    if env is not None:
        if env not in ("32", "64"):
            raise ConfigError(f"PTSIM_ELEMENT_WIDTH must be 32 or 64, got {env!r}")
        set_element_width(int(env))
    else:
        set_element_width(rc.element_width)


def _equal_logits(a: np.ndarray, b: np.ndarray, rel_tol_32: float,
                  rel_tol_64: float) -> tuple[bool, str]:
    if a.dtype == np.float64 and rel_tol_64 == 0.0:
        ok = bool(np.array_equal(a, b))
        return ok, "bit-exact" if ok else f"max rel err {max_rel_error(a, b):.3e}"
    tol = rel_tol_32 if a.dtype == np.float32 else rel_tol_64
    err = max_rel_error(a, b)
    return err <= tol, f"max rel err {err:.3e} (tol {tol:.0e})"


def cmd_verify(config_path) -> int:
    rc = load_run_config(config_path)
    if rc.pt is None:
        raise ConfigError(
            f"{config_path}:1: verify requires a model.pt section (the dense "
            f"comparator is derived from the track config)"
        )
    _apply_element_width(rc)
    cfg = rc.pt
    tokens = resolve_tokens(rc)
    checks: list[tuple[str, bool, str]] = []

    weights = PTWeightSet.from_seed(cfg, rc.seed)
    sequential = pt_forward_sequential(tokens, cfg, weights)
    capture = FusionCapture()
    mesh = Mesh(cfg.n_tracks)
    parallel, pt_stats = run_pt_parallel(tokens, cfg, weights, mesh,
                                         fusion_capture=capture)

    ok, detail = _equal_logits(parallel, sequential, rel_tol_32=1e-5, rel_tol_64=0.0)
    checks.append(("pt_parallel_matches_sequential", ok, detail))

    expected = count_fusions(cfg)
    layers = [e.layer_index for e in pt_stats.events]
    want_layers = list(range(cfg.block_depth, cfg.track.n_layers + 1, cfg.block_depth))
    ok = pt_stats.total_events == expected and layers == want_layers
    checks.append(("pt_sync_count", ok,
                   f"{pt_stats.total_events} events at layers {layers}"))

    ok = all(
        all(np.array_equal(s, states[0]) for s in states[1:])
        for states in (capture.states_at(layer) for layer in capture.layers())
    ) and capture.fusion_count() == expected
    checks.append(("pt_post_fusion_consistency", ok,
                   f"{capture.fusion_count()} fusions, all tracks identical"))

    dense_cfg = dense_equivalent(cfg)
    dense_weights = WeightSet.from_seed(dense_cfg, rc.seed)
    dense_logits = dense_forward(tokens, dense_cfg, dense_weights)
    sharded = shard_weights(dense_weights, dense_cfg, rc.n_devices)
    tp_logits, tp_stats = run_tp_forward(tokens, dense_cfg, sharded,
                                         Mesh(rc.n_devices))
    ok, detail = _equal_logits(tp_logits, dense_logits, rel_tol_32=1e-5,
                               rel_tol_64=1e-12)
    checks.append(("tp_matches_dense", ok, detail))

    ok = tp_stats.total_events == 2 * dense_cfg.n_layers
    checks.append(("tp_sync_count", ok,
                   f"{tp_stats.total_events} events, expected {2 * dense_cfg.n_layers}"))

    ok = (sync_count("pt", cfg.track.n_layers, cfg.block_depth) == pt_stats.total_events
          and sync_count("dense_tp", dense_cfg.n_layers) == tp_stats.total_events)
    checks.append(("sync_formula_consistency", ok,
                   f"closed forms {sync_count('pt', cfg.track.n_layers, cfg.block_depth)}"
                   f"/{sync_count('dense_tp', dense_cfg.n_layers)} vs measured "
                   f"{pt_stats.total_events}/{tp_stats.total_events}"))

    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


def cmd_count_syncs(arch: str, layers: int, block_depth: int | None) -> int:
    internal = "dense_tp" if arch == "dense-tp" else "pt"
    if internal == "pt" and block_depth is None:
        raise ConfigError("--arch pt requires --block-depth")
    points = sync_count(internal, layers, block_depth)
    if internal == "pt":
        pct = sync_reduction_fraction(block_depth) * 100.0
        print(f"sync_points={points} reduction_vs_tp={pct:g}%")
    else:
        print(f"sync_points={points}")
    return 0


def _parse_sweep(spec: str) -> list[tuple[int, int]]:
    try:
        input_part, output_part = spec.split("x")
        inputs = [int(v) for v in input_part.split(",") if v]
        outputs = [int(v) for v in output_part.split(",") if v]
    except ValueError:
        raise ConfigError(
            f"--sweep must look like 'IN,IN,...xOUT,OUT,...', got {spec!r}"
        ) from None
    if not inputs or not outputs or min(inputs + outputs) < 1:
        raise ConfigError(f"--sweep lengths must be positive, got {spec!r}")
    return [(i, o) for i in sorted(inputs) for o in sorted(outputs)]


def _perf_cells(rc: RunConfig, sweep: list[tuple[int, int]], batch: int):
    """Estimates per row: dense baseline plus one PT column per block depth."""
    if rc.hardware is None:
        raise ConfigError("perf-table requires a hardware section in the config")
    if rc.pt is not None:
        dense_cfg = dense_equivalent(rc.pt)
        n_tracks = rc.pt.n_tracks
        track_src = rc.pt.track
        reduce_op = rc.pt.reduce_op
    else:
        dense_cfg = rc.dense
        n_tracks = rc.n_devices
        track_src = None
        reduce_op = "sum"
    pt_cfgs = {}
    for depth in PERF_TABLE_DEPTHS:
        if dense_cfg.n_layers % depth != 0:
            raise ConfigError(
                f"n_layers ({dense_cfg.n_layers}) must be divisible by every "
                f"table block depth {PERF_TABLE_DEPTHS}"
            )
        if track_src is not None:
            pt_cfgs[depth] = PTConfig(n_tracks=n_tracks, block_depth=depth,
                                      track=track_src, reduce_op=reduce_op)
        else:
            pt_cfgs[depth] = pt_variant(dense_cfg, n_tracks, depth)

    rows = []
    for input_len, output_len in sweep:
        dense_est = estimate("dense_tp", dense_cfg, input_len=input_len,
                             output_len=output_len, batch=batch, hw=rc.hardware,
                             n_devices=rc.n_devices)
        pt_ests = [
            estimate("pt", pt_cfgs[depth], input_len=input_len,
                     output_len=output_len, batch=batch, hw=rc.hardware)
            for depth in PERF_TABLE_DEPTHS
        ]
        rows.append((input_len, output_len, dense_est, pt_ests))
    return rows


_METRICS = (
    ("throughput_tokens_per_sec", "Throughput (tokens/sec)",
     lambda est: f"{est.throughput_tokens_per_sec:.2f}"),
    ("ttft_ms", "TTFT (ms)", lambda est: f"{est.ttft_sec * 1e3:.2f}"),
    ("tpot_ms", "TPOT (ms)", lambda est: f"{est.tpot_sec * 1e3:.2f}"),
)

_COLUMNS = ["Input Len", "Output Len", "Dense"] + [
    f"PT (D={d})" for d in PERF_TABLE_DEPTHS
]


def _render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + _COLUMNS)
    for key, _, fmt in _METRICS:
        for input_len, output_len, dense_est, pt_ests in rows:
            writer.writerow([key, input_len, output_len, fmt(dense_est)]
                            + [fmt(e) for e in pt_ests])
    return buf.getvalue()


def _render_markdown(rows) -> str:
    lines = []
    for _, title, fmt in _METRICS:
        lines.append(f"### {title}")
        lines.append("| " + " | ".join(_COLUMNS) + " |")
        lines.append("|" + "|".join(" ---: " for _ in _COLUMNS) + "|")
        for input_len, output_len, dense_est, pt_ests in rows:
            cells = [str(input_len), str(output_len), fmt(dense_est)] + [
                fmt(e) for e in pt_ests
            ]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_perf_table(config_path, sweep_spec: str, batch: int) -> int:
    rc = load_run_config(config_path)
    sweep = _parse_sweep(sweep_spec)
    rows = _perf_cells(rc, sweep, batch)
    rendered = _render_csv(rows) if rc.output_format == "csv" else _render_markdown(rows)
    sys.stdout.write(rendered)
    if rc.output_path is not None:
        try:
            with open(rc.output_path, "w", encoding="utf-8", newline="\n") as f:
                f.write(rendered)
        except OSError as exc:
            print(f"error: cannot write {rc.output_path}: {exc}", file=sys.stderr)
            return 3
    return 0


def cmd_trace(config_path, out_path) -> int:
    rc = load_run_config(config_path)
    _apply_element_width(rc)
    tokens = resolve_tokens(rc)
    if rc.pt is not None:
        weights = PTWeightSet.from_seed(rc.pt, rc.seed)
        _, stats = run_pt_parallel(tokens, rc.pt, weights, Mesh(rc.pt.n_tracks))
    else:
        weights = WeightSet.from_seed(rc.dense, rc.seed)
        sharded = shard_weights(weights, rc.dense, rc.n_devices)
        _, stats = run_tp_forward(tokens, rc.dense, sharded, Mesh(rc.n_devices))
    try:
        export_trace(stats, out_path)
    except OSError as exc:
        print(f"error: cannot write {out_path}: {exc}", file=sys.stderr)
        return 3
    print(f"total_events={stats.total_events}")
    print(f"total_payload_bytes={stats.total_payload_bytes}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptsim",
        description="Track-parallel transformer simulator: verification, "
                    "sync counting, latency tables and collective traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the equivalence and sync-count checks")
    p.add_argument("config", help="JSON run configuration (needs a model.pt section)")

    p = sub.add_parser("count-syncs", help="closed-form sync points per forward pass")
    p.add_argument("--arch", required=True, choices=("dense-tp", "pt"))
    p.add_argument("--layers", required=True, type=int)
    p.add_argument("--block-depth", type=int, default=None)

    p = sub.add_parser("perf-table", help="analytic TTFT/TPOT/throughput tables")
    p.add_argument("config", help="JSON run configuration with a hardware section")
    p.add_argument("--sweep", default=DEFAULT_SWEEP,
                   help="input x output length grid, e.g. '1024,2048x128,4096'")
    p.add_argument("--batch", type=int, default=1, help="requests per step")

    p = sub.add_parser("trace", help="execute the configured model and dump the trace")
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("out", help="output path for the JSON-lines trace")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "verify":
            return cmd_verify(args.config)
        if args.command == "count-syncs":
            return cmd_count_syncs(args.arch, args.layers, args.block_depth)
        if args.command == "perf-table":
            return cmd_perf_table(args.config, args.sweep, args.batch)
        if args.command == "trace":
            return cmd_trace(args.config, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PtsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
