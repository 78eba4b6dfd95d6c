"""JSON run configuration: parsing, validation and token resolution.

The file mirrors the RunConfig sections directly:

    {
      "model":    {"pt": {...}} or {"dense": {...}}   (exactly one)
      "run":      {"tokens": [...]} or {"prompt_len": N}, "seed", "element_width"
      "mesh":     {"n_devices": N}
      "hardware": {flops_per_sec, link_bandwidth_bytes_per_sec,
                   per_collective_latency_sec, element_bytes}   (optional)
      "output":   {"path": ..., "format": "csv"|"markdown"}     (optional)
    }

Validation failures raise ConfigError with a best-effort file:line prefix so
the CLI can exit 2 with a pointer into the offending config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig, default_ffn_dim
from .perf import HardwareProfile
from .pt import PTConfig
from .tensor import SeededRng

OUTPUT_FORMATS = ("csv", "markdown")


@dataclass(frozen=True)
class RunConfig:
    dense: ModelConfig | None
    pt: PTConfig | None
    tokens: tuple[int, ...] | None
    prompt_len: int | None
    seed: int
    element_width: int
    n_devices: int
    hardware: HardwareProfile | None
    output_path: str | None
    output_format: str

    @property
    def model_kind(self) -> str:
        return "pt" if self.pt is not None else "dense"

    @property
    def vocab_size(self) -> int:
        return (self.pt.track if self.pt is not None else self.dense).vocab_size


def _line_of(raw: str, *keys: str) -> int:
    """1-based line of the first occurrence of any key in the raw JSON text."""
    for key in keys:
        needle = f'"{key}"'
        for i, line in enumerate(raw.splitlines(), start=1):
            if needle in line:
                return i
    return 1


def _section(data: dict, name: str, raw: str, path) -> dict:
    value = data.get(name)
    if value is None:
        raise ConfigError(f"{path}:1: missing required section {name!r}")
    if not isinstance(value, dict):
        raise ConfigError(f"{path}:{_line_of(raw, name)}: section {name!r} must be an object")
    return value


def _model_config(fields: dict, raw: str, path) -> ModelConfig:
    required = ("n_layers", "n_heads", "n_kv_heads", "head_dim", "vocab_size")
    for name in required:
        if name not in fields:
            raise ConfigError(f"{path}:{_line_of(raw, 'model')}: model is missing {name!r}")
    try:
        n_heads = int(fields["n_heads"])
        head_dim = int(fields["head_dim"])
        return ModelConfig(
            d_model=int(fields.get("d_model", n_heads * head_dim)),
            n_layers=int(fields["n_layers"]),
            n_heads=n_heads,
            n_kv_heads=int(fields["n_kv_heads"]),
            head_dim=head_dim,
            d_ff=int(fields.get("d_ff", default_ffn_dim(n_heads * head_dim))),
            vocab_size=int(fields["vocab_size"]),
            max_seq=int(fields.get("max_seq", 256)),
            norm_eps=float(fields.get("norm_eps", 1e-5)),
            rope_base=float(fields.get("rope_base", 10000.0)),
        )
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}:{_line_of(raw, 'model')}: {exc}") from None


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read()
    except OSError as exc:
        raise ConfigError(f"{path}:1: cannot read config: {exc}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: config root must be an object")

    model = _section(data, "model", raw, path)
    present = [k for k in ("dense", "pt") if k in model]
    if len(present) != 1:
        raise ConfigError(
            f"{path}:{_line_of(raw, 'model')}: exactly one of model.dense / model.pt "
            f"must be present, found {present or 'neither'}"
        )

    dense = None
    pt = None
    if "dense" in model:
        dense = _model_config(model["dense"], raw, path)
    else:
        pt_fields = model["pt"]
        for name in ("n_tracks", "block_depth", "track"):
            if name not in pt_fields:
                raise ConfigError(
                    f"{path}:{_line_of(raw, 'pt')}: model.pt is missing {name!r}"
                )
        track = _model_config(pt_fields["track"], raw, path)
        try:
            pt = PTConfig(
                n_tracks=int(pt_fields["n_tracks"]),
                block_depth=int(pt_fields["block_depth"]),
                track=track,
                reduce_op=str(pt_fields.get("reduce_op", "sum")),
            )
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(
                f"{path}:{_line_of(raw, 'block_depth', 'pt')}: {exc}"
            ) from None

    run = _section(data, "run", raw, path)
    tokens = run.get("tokens")
    prompt_len = run.get("prompt_len")
    if (tokens is None) == (prompt_len is None):
        raise ConfigError(
            f"{path}:{_line_of(raw, 'run')}: run must set exactly one of "
            f"'tokens' or 'prompt_len'"
        )
    if tokens is not None:
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise ConfigError(
                f"{path}:{_line_of(raw, 'tokens')}: run.tokens must be a list of ints"
            )
        tokens = tuple(tokens)
    try:
        if prompt_len is not None:
            prompt_len = int(prompt_len)
        seed = int(run.get("seed", 0))
        element_width = int(run.get("element_width", 32))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}:{_line_of(raw, 'run')}: {exc}") from None
    if prompt_len is not None and prompt_len < 1:
        raise ConfigError(
            f"{path}:{_line_of(raw, 'prompt_len')}: prompt_len must be >= 1"
        )
    if element_width not in (32, 64):
        raise ConfigError(
            f"{path}:{_line_of(raw, 'element_width')}: element_width must be 32 or 64"
        )

    mesh = _section(data, "mesh", raw, path)
    if "n_devices" not in mesh:
        raise ConfigError(f"{path}:{_line_of(raw, 'mesh')}: mesh is missing 'n_devices'")
    try:
        n_devices = int(mesh["n_devices"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}:{_line_of(raw, 'n_devices')}: {exc}") from None
    if n_devices < 1:
        raise ConfigError(f"{path}:{_line_of(raw, 'n_devices')}: n_devices must be >= 1")
    if pt is not None and n_devices != pt.n_tracks:
        raise ConfigError(
            f"{path}:{_line_of(raw, 'n_devices')}: mesh.n_devices ({n_devices}) "
            f"must equal model.pt.n_tracks ({pt.n_tracks})"
        )

    hardware = None
    if isinstance(data.get("hardware"), dict):
        hw = data["hardware"]
        try:
            hardware = HardwareProfile(
                flops_per_sec=float(hw["flops_per_sec"]),
                link_bandwidth_bytes_per_sec=float(hw["link_bandwidth_bytes_per_sec"]),
                per_collective_latency_sec=float(hw["per_collective_latency_sec"]),
                element_bytes=int(hw["element_bytes"]),
            )
        except (KeyError, ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{_line_of(raw, 'hardware')}: {exc}") from None

    output_path = None
    output_format = "markdown"
    if isinstance(data.get("output"), dict):
        out = data["output"]
        if out.get("path") is not None:
            output_path = str(out["path"])
            if not output_path:
                raise ConfigError(
                    f"{path}:{_line_of(raw, 'output')}: output.path must be non-empty"
                )
        output_format = str(out.get("format", "markdown"))
        if output_format not in OUTPUT_FORMATS:
            raise ConfigError(
                f"{path}:{_line_of(raw, 'format')}: output.format must be one of "
                f"{OUTPUT_FORMATS}"
            )

    return RunConfig(
        dense=dense, pt=pt, tokens=tokens, prompt_len=prompt_len, seed=seed,
        element_width=element_width, n_devices=n_devices, hardware=hardware,
        output_path=output_path, output_format=output_format,
    )


def resolve_tokens(rc: RunConfig) -> list[int]:
    """Explicit tokens, or a seeded random prompt (raw stream modulo vocab)."""
    if rc.tokens is not None:
        return list(rc.tokens)
    rng = SeededRng(rc.seed)
    vocab = rc.vocab_size
    return [rng.next_u64() % vocab for _ in range(rc.prompt_len)]
