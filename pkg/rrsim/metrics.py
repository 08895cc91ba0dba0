"""
Traffic and time accounting for one simulation run.

Link bytes double as the energy proxy: energy ~= bytes x 8 x pJ/bit, with
roughly 10 pJ/bit for board-level links and 250 pJ/bit for node-level links.
No energy figure is computed here.

Balance ratio is worst completion over best completion (>= 1, 1.0 = balanced),
the reciprocal of the best-to-worst plots usually published.
"""

import json
from collections import Counter
from pathlib import Path
from statistics import fmean
from typing import NamedTuple, Optional, Union

import pandas as pd
from pydantic import BaseModel, Field

from .config import settings
from .errors import AccountingError, DomainError

CATEGORIES = ("texture_remote", "composition", "preallocation_copy", "command", "ztest", "vertex")


class TrafficLedger:
    """Bytes sent per ordered GPM pair and category. Sent is the only counter."""

    def __init__(self):
        self._sent: dict[tuple[int, int], Counter] = {}

    def record(self, src: int, dst: int, category: str, nbytes: int) -> "TrafficLedger":
        if src == dst:
            raise AccountingError(f"local traffic on GPM {src} entered the link ledger")
        if nbytes < 0:
            raise AccountingError(f"negative byte count {nbytes}")
        if category not in CATEGORIES:
            raise AccountingError(f"unknown traffic category {category!r}")
        self._sent.setdefault((src, dst), Counter())[category] += nbytes
        return self

    def sent(self, src: int, dst: int, category: Optional[str] = None) -> int:
        counts = self._sent.get((src, dst), Counter())
        return counts[category] if category else sum(counts.values())

    def received(self, dst: int, category: Optional[str] = None) -> int:
        return sum(self.sent(src, d, category) for src, d in self._sent if d == dst)

    def total(self, category: Optional[str] = None) -> int:
        return sum(self.sent(src, dst, category) for src, dst in self._sent)

    def by_category(self) -> dict[str, int]:
        return {cat: self.total(cat) for cat in CATEGORIES}

    def by_pair(self) -> dict[str, int]:
        return {f"{src}->{dst}": self.sent(src, dst) for src, dst in sorted(self._sent)}


def record(ledger: TrafficLedger, src_gpm: int, dst_gpm: int, category: str, nbytes: int) -> TrafficLedger:
    return ledger.record(src_gpm, dst_gpm, category, nbytes)


class Balance(NamedTuple):
    ratio: float
    flag: Optional[str] = None


def balance_ratio(completions: list[int]) -> Balance:
    worked = [c for c in completions if c > 0]
    if not worked:
        return Balance(1.0, "no_work")
    if len(worked) == 1:
        return Balance(1.0, "single_gpm")
    return Balance(max(worked) / min(worked))


# ---------------------------------------------------------------------------
# Report models
# ---------------------------------------------------------------------------

class SliceEntry(BaseModel):
    gpm_id: int
    triangle_fraction: str
    pixel_fraction: str


class ScheduleEntry(BaseModel):
    frame_id: int
    batch_id: int
    gpm_id: int
    members: list[int]
    dispatch_cycle: int
    start_cycle: int
    end_cycle: int
    predicted_cycles: Optional[int] = None
    slices: list[SliceEntry] = Field(default_factory=list)


class FrameMetrics(BaseModel):
    frame_id: int
    start_cycle: int
    end_cycle: int
    single_frame_latency_cycles: int
    completion_cycles: list[int]
    busy_cycles: list[int]
    balance_ratio: float
    balance_flag: Optional[str] = None
    pixels_rendered: int
    link_bytes: int


class Calibration(BaseModel):
    c0: float
    c1: float
    c2: float
    fallback: bool


class MetricsReport(BaseModel):
    scheme: str
    config: dict
    trace_digest: str
    frames: list[FrameMetrics] = Field(default_factory=list)
    single_frame_latency_cycles: float = 0.0
    makespan_cycles: int = 0
    frames_per_megacycle: float = 0.0
    balance_ratio: float = 1.0
    busy_cycles_by_gpm: list[int] = Field(default_factory=list)
    total_link_bytes: int = 0
    link_bytes_by_category: dict[str, int] = Field(default_factory=dict)
    link_bytes_by_pair: dict[str, int] = Field(default_factory=dict)
    calibration: Optional[Calibration] = None
    schedule: list[ScheduleEntry] = Field(default_factory=list)

    def to_canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=settings.report_indent) + "\n"

    def csv_rows(self) -> list[dict]:
        rows = [
            {
                "scheme": self.scheme,
                "frame": str(f.frame_id),
                "latency_cycles": f.single_frame_latency_cycles,
                "end_cycle": f.end_cycle,
                "balance_ratio": round(f.balance_ratio, 6),
                "link_bytes": f.link_bytes,
                "pixels_rendered": f.pixels_rendered,
            }
            for f in self.frames
        ]
        rows.append({
            "scheme": self.scheme,
            "frame": "all",
            "latency_cycles": self.single_frame_latency_cycles,
            "end_cycle": self.makespan_cycles,
            "balance_ratio": self.balance_ratio,
            "link_bytes": self.total_link_bytes,
            "pixels_rendered": sum(f.pixels_rendered for f in self.frames),
        })
        return rows


CSV_COLUMNS = ["scheme", "frame", "latency_cycles", "end_cycle", "balance_ratio", "link_bytes", "pixels_rendered"]


def build_report(
    scheme: str,
    config: dict,
    digest: str,
    frames: list[FrameMetrics],
    ledger: TrafficLedger,
    calibration: Optional[Calibration] = None,
    schedule: Optional[list[ScheduleEntry]] = None,
    busy_cycles_by_gpm: Optional[list[int]] = None,
) -> MetricsReport:
    makespan = max((f.end_cycle for f in frames), default=0)
    return MetricsReport(
        scheme=scheme,
        config=config,
        trace_digest=digest,
        frames=frames,
        single_frame_latency_cycles=round(fmean(f.single_frame_latency_cycles for f in frames), 3) if frames else 0.0,
        makespan_cycles=makespan,
        frames_per_megacycle=round(len(frames) * 1e6 / makespan, 6) if makespan else 0.0,
        balance_ratio=round(fmean(f.balance_ratio for f in frames), 6) if frames else 1.0,
        busy_cycles_by_gpm=busy_cycles_by_gpm or [],
        total_link_bytes=ledger.total(),
        link_bytes_by_category=ledger.by_category(),
        link_bytes_by_pair=ledger.by_pair(),
        calibration=calibration,
        schedule=schedule or [],
    )


def speedup(report_a: MetricsReport, report_b: MetricsReport, metric: str = "single_frame_latency") -> float:
    """How much faster a is than b."""
    if metric == "single_frame_latency":
        num, den = report_b.single_frame_latency_cycles, report_a.single_frame_latency_cycles
    elif metric == "throughput":
        num, den = report_a.frames_per_megacycle, report_b.frames_per_megacycle
    else:
        raise DomainError(f"unknown metric {metric!r}")
    if den == 0:
        raise DomainError(f"{metric} speedup has a zero denominator")
    return num / den


def write_csv(rows: list[dict], path: Union[str, Path], columns: Optional[list[str]] = None) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(target, index=False, lineterminator="\n")
    return target


def write_report(report: MetricsReport, directory: Union[str, Path]) -> tuple[Path, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{report.scheme}.json"
    json_path.write_text(report.to_canonical(), encoding="utf-8")
    csv_path = write_csv(report.csv_rows(), out / f"{report.scheme}.csv", CSV_COLUMNS)
    return json_path, csv_path
