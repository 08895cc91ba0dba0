"""
Experiment runner.

Usage:
  python -m rrsim run --trace ref.rrtrace --scheme baseline,oo_vr
  python -m rrsim gen --reference --out ref.rrtrace
  python -m rrsim gen --scaling --out scaling.rrtrace
  python -m rrsim sweep-bw --link-gbps 32,64,128,1024 --scheme baseline,object_sfr,oo_vr
  python -m rrsim sweep-gpms --gpms 1,2,4,8 --scheme oo_vr

Exit status: 0 success, 2 configuration error, 3 trace error.
"""

import argparse
import asyncio
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .config import settings
from .errors import ConfigError, ParameterError, TraceError, first_field, first_message
from .machine import MachineConfig, machine_config
from .metrics import MetricsReport, speedup, write_csv, write_report
from .schemes import SCHEMES, run_scheme
from .trace import (
    REFERENCE_SCENE,
    SCALING_SCENE,
    SceneParams,
    Trace,
    generate_scene,
    load_trace,
    save_trace,
    scene_params,
    sharing_summary,
)
from .tracing import generate_run_id, sim_logger

INDEX_COLUMNS = [
    "sweep",
    "point",
    "scheme",
    "latency_cycles",
    "latency_speedup",
    "frames_per_megacycle",
    "throughput_speedup",
    "total_link_bytes",
    "normalized_link_bytes",
    "balance_ratio",
]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trace: Optional[str] = None
    scene: Optional[SceneParams] = None
    schemes: list[str] = Field(default_factory=lambda: ["baseline", "oo_vr"], min_length=1)
    machine: dict = Field(default_factory=dict)
    link_gbps: list[float] = Field(default_factory=lambda: [32.0, 64.0, 128.0, 1024.0], min_length=1)
    gpm_counts: list[int] = Field(default_factory=lambda: [1, 2, 4, 8], min_length=1)
    output_dir: str = Field(default_factory=lambda: settings.output_dir)
    seed: Optional[int] = None

    @field_validator("schemes")
    @classmethod
    def _known_schemes(cls, value: list[str]) -> list[str]:
        for name in value:
            if name not in SCHEMES:
                raise ValueError(f"unknown scheme {name!r}; choose from {', '.join(SCHEMES)}")
        return value


def load_run_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(first_field(exc), first_message(exc)) from None


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _csv(kind):
    def parse(text: str) -> list:
        try:
            return [kind(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


def _field_type(name: str):
    annotation = MachineConfig.model_fields[name].annotation
    return int if annotation is int else float


def _add_machine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--trace", help="trace file (default: ref.rrtrace, else the generated reference scene)")
    parser.add_argument("--scheme", type=_csv(str), help=f"comma-separated schemes: {','.join(SCHEMES)}")
    parser.add_argument("--gpms", type=_csv(int), help="GPM count(s)")
    parser.add_argument("--link-gbps", type=_csv(float), help="inter-GPM link bandwidth(s), GB/s")
    parser.add_argument("--local-gbps", type=float, help="local DRAM bandwidth, GB/s")
    parser.add_argument("--page-bytes", type=int)
    parser.add_argument("--remote-cache-bytes", type=int)
    parser.add_argument("--seed", type=int, help="scene seed when no trace file is given")
    parser.add_argument("--out", help="output directory")
    group = parser.add_argument_group("machine fields")
    for name in MachineConfig.model_fields:
        group.add_argument(f"--cfg.{name}", dest=f"cfg_{name}", type=_field_type(name), metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrsim", description="Multi-GPM stereo rendering simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run", "run every scheme once"),
        ("sweep-bw", "sweep inter-GPM link bandwidth"),
        ("sweep-gpms", "sweep the number of GPMs"),
    ):
        _add_machine_flags(sub.add_parser(name, help=help_text))

    gen = sub.add_parser("gen", help="generate a synthetic scene trace")
    gen.add_argument("--out", help="trace file to write")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--scene-objects", type=int, help="objects per frame")
    gen.add_argument("--scene-frames", type=int, help="frame count")
    gen.add_argument("--reference", action="store_true", help="write the reference scene")
    gen.add_argument("--scaling", action="store_true", help="write the balanced GPM-scaling scene")
    return parser


def machine_from_args(args: argparse.Namespace, config: RunConfig) -> dict:
    """Machine field values: config file, then dedicated flags, then --cfg.<field>."""
    values = dict(config.machine)
    if args.local_gbps is not None:
        values["local_dram_gbps"] = args.local_gbps
    if args.page_bytes is not None:
        values["page_bytes"] = args.page_bytes
    if args.remote_cache_bytes is not None:
        values["remote_cache_bytes"] = args.remote_cache_bytes
    for name in MachineConfig.model_fields:
        value = getattr(args, f"cfg_{name}", None)
        if value is not None:
            values[name] = value
    return values


def _default_is_reference(args: argparse.Namespace, config: RunConfig) -> bool:
    return args.command != "sweep-gpms" and config.scene is None and args.seed is None and config.seed is None


def resolve_trace(args: argparse.Namespace, config: RunConfig) -> Trace:
    path = args.trace or config.trace
    bundled = Path(settings.reference_trace)
    if not path and _default_is_reference(args, config) and bundled.is_file():
        path = bundled
    if path:
        try:
            trace = load_trace(path)
        except OSError as exc:
            raise TraceError(f"cannot read {path}: {exc.strerror}") from None
        sim_logger.trace_loaded(str(path), len(trace.frames), trace.object_count())
        return trace
    default = SCALING_SCENE if args.command == "sweep-gpms" else REFERENCE_SCENE
    params = config.scene or default
    seed = args.seed if args.seed is not None else config.seed
    if seed is not None:
        params = params.model_copy(update={"seed": seed})
    trace = generate_scene(params)
    sim_logger.trace_loaded(f"scene:{params.seed}", len(trace.frames), trace.object_count())
    return trace


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

class Point(BaseModel):
    sweep: str
    label: str
    value: float
    scheme: str
    machine: MachineConfig


async def run_points(points: Sequence[Point], trace: Trace, threads: int) -> list[MetricsReport]:
    """Run independent sweep points on a thread pool; results keep the input order."""
    loop = asyncio.get_running_loop()
    run_id = generate_run_id()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = []
        for point in points:
            sim_logger.sweep_point(run_id, point.sweep, point.value, point.scheme)
            futures.append(loop.run_in_executor(pool, run_scheme, point.scheme, trace, point.machine, run_id))
        return list(await asyncio.gather(*futures))


def index_rows(points: Sequence[Point], reports: Sequence[MetricsReport], reference_of) -> list[dict]:
    rows = []
    for point, report in zip(points, reports):
        ref = reference_of(point)
        rows.append({
            "sweep": point.sweep,
            "point": point.label,
            "scheme": point.scheme,
            "latency_cycles": report.single_frame_latency_cycles,
            "latency_speedup": round(speedup(report, ref, "single_frame_latency"), 6)
            if report.single_frame_latency_cycles else 0.0,
            "frames_per_megacycle": report.frames_per_megacycle,
            "throughput_speedup": round(speedup(report, ref, "throughput"), 6) if ref.frames_per_megacycle else 0.0,
            "total_link_bytes": report.total_link_bytes,
            "normalized_link_bytes": round(report.total_link_bytes / ref.total_link_bytes, 6)
            if ref.total_link_bytes else 0.0,
            "balance_ratio": report.balance_ratio,
        })
    return rows


def _make_points(sweep: str, schemes: Sequence[str], base: dict, axis: Optional[str], values: Sequence) -> list[Point]:
    points = []
    for value in values:
        fields = dict(base)
        if axis:
            fields[axis] = value
        cfg = machine_config(**fields)
        label = sweep if axis is None else f"{sweep}-{value:g}"
        for scheme in schemes:
            points.append(Point(sweep=sweep, label=label, value=value if axis else 0, scheme=scheme, machine=cfg))
    return points


def execute(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    schemes = args.scheme or config.schemes
    for name in schemes:
        if name not in SCHEMES:
            raise ConfigError("scheme", f"unknown scheme {name!r}")
    base = machine_from_args(args, config)
    out = Path(args.out or config.output_dir)

    if args.command == "run":
        if args.gpms:
            if len(args.gpms) != 1:
                raise ConfigError("gpms", "run takes a single GPM count")
            base["gpm_count"] = args.gpms[0]
        if args.link_gbps:
            if len(args.link_gbps) != 1:
                raise ConfigError("link_gbps", "run takes a single link bandwidth")
            base["link_gbps"] = args.link_gbps[0]
        points = _make_points("run", schemes, base, None, [None])
    elif args.command == "sweep-bw":
        if args.gpms:
            if len(args.gpms) != 1:
                raise ConfigError("gpms", "sweep-bw takes a single GPM count")
            base["gpm_count"] = args.gpms[0]
        points = _make_points("bw", schemes, base, "link_gbps", args.link_gbps or config.link_gbps)
    else:
        if args.link_gbps:
            if len(args.link_gbps) != 1:
                raise ConfigError("link_gbps", "sweep-gpms takes a single link bandwidth")
            base["link_gbps"] = args.link_gbps[0]
        points = _make_points("gpms", schemes, base, "gpm_count", args.gpms or config.gpm_counts)

    trace = resolve_trace(args, config)
    reports = asyncio.run(run_points(points, trace, settings.threads))

    by_key = {(p.label, p.scheme): r for p, r in zip(points, reports)}
    if args.command == "run":
        ref = by_key.get(("run", "baseline"), reports[0])
        reference_of = lambda point: ref
    elif args.command == "sweep-bw":
        ref = by_key.get(("bw-64", "baseline"), reports[0])
        reference_of = lambda point: ref
    else:
        smallest = min(p.value for p in points)
        reference_of = lambda point: by_key[(f"gpms-{smallest:g}", point.scheme)]

    for point, report in zip(points, reports):
        json_path, _ = write_report(report, out / point.label)
        sim_logger.report_written(str(json_path))
    index_path = write_csv(index_rows(points, reports, reference_of), out / "index.csv", INDEX_COLUMNS)
    sim_logger.report_written(str(index_path))
    return 0


def generate(args: argparse.Namespace) -> int:
    if args.reference or args.scaling:
        params = REFERENCE_SCENE if args.reference else SCALING_SCENE
        if args.seed is not None:
            params = params.model_copy(update={"seed": args.seed})
        default_out = "ref.rrtrace" if args.reference else "scaling.rrtrace"
    else:
        fields = {}
        if args.seed is not None:
            fields["seed"] = args.seed
        if args.scene_objects is not None:
            fields["objects_per_frame"] = args.scene_objects
        if args.scene_frames is not None:
            fields["frames"] = args.scene_frames
        params = scene_params(**fields)
        default_out = str(Path(settings.output_dir) / "scene.rrtrace")
    trace = generate_scene(params)
    path = save_trace(trace, args.out or default_out)
    sim_logger.report_written(str(path))
    print(json.dumps({"path": str(path), **sharing_summary(trace)}, sort_keys=True))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return generate(args)
        return execute(args)
    except (ConfigError, ParameterError) as exc:
        sim_logger.error("config_error", field=exc.field, message=str(exc))
        print(f"[error] configuration: {exc}", file=sys.stderr)
        return 2
    except TraceError as exc:
        sim_logger.error("trace_error", message=str(exc))
        print(f"[error] trace: {exc}", file=sys.stderr)
        return 3
