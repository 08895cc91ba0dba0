"""
Distribution schemes, the per-frame executor and the composition models.

Each frame starts after the previous one finished (AFR excepted: frame i waits
only for its own GPM). Render work is timed with the roofline rule; Z-test and
composition bytes then travel to the framebuffer owner over the links and the
owner's ROPs write the pixels.
"""

import math
from bisect import bisect_right
from dataclasses import replace
from enum import Enum
from fractions import Fraction
from typing import Mapping, NamedTuple, Optional, Sequence

from .batching import build_batches
from .engine import DistributionEngine, RemainingWork, RunRecord, WorkItem, split_units
from .errors import AccountingError, DomainError
from .machine import Machine, MachineConfig
from .metrics import FrameMetrics, MetricsReport, ScheduleEntry, balance_ratio, build_report
from .pipeline import WorkSlice, slice_signals, stage_costs, stage_time, units
from .trace import DrawObject, Frame, Trace, trace_digest
from .tracing import sim_logger


class SchemeId(str, Enum):
    BASELINE = "baseline"
    BASELINE_IDEAL_LINK = "baseline_ideal_link"
    AFR = "afr"
    TILE_V = "tile_v"
    TILE_H = "tile_h"
    OBJECT_SFR = "object_sfr"
    OO_APP = "oo_app"
    OO_VR = "oo_vr"


SCHEMES = tuple(s.value for s in SchemeId)

# Where rendered pixels are composed.
ROOT = "root"
LOCAL = "local"
COLUMNS = "columns"

LAYOUTS = {
    SchemeId.BASELINE: ROOT,
    SchemeId.BASELINE_IDEAL_LINK: ROOT,
    SchemeId.AFR: LOCAL,
    SchemeId.TILE_V: LOCAL,
    SchemeId.TILE_H: LOCAL,
    SchemeId.OBJECT_SFR: ROOT,
    SchemeId.OO_APP: ROOT,
    SchemeId.OO_VR: COLUMNS,
}

Assignment = tuple[int, list[WorkSlice]]


class FbPartition(NamedTuple):
    gpm_id: int
    x0: int
    x1: int


def cumulative_bounds(total: int, parts: int) -> list[tuple[int, int]]:
    base, extra = divmod(total, parts)
    bounds, at = [], 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        bounds.append((at, at + size))
        at += size
    return bounds


def fb_partitions(frame_width: int, gpm_count: int) -> list[FbPartition]:
    """Column stripes of the stereo frame, equal widths +-1."""
    return [FbPartition(g, x0, x1) for g, (x0, x1) in enumerate(cumulative_bounds(frame_width, gpm_count))]


def _overlaps(lo: int, hi: int, bands: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """(band index, overlap length) for every band the range [lo, hi) touches."""
    out = []
    for index, (b0, b1) in enumerate(bands):
        width = min(hi, b1) - max(lo, b0)
        if width > 0:
            out.append((index, width))
    return out


def pixel_columns(obj: DrawObject, work: WorkSlice) -> dict[int, int]:
    """Stereo-frame column -> pixel count for one slice, spread evenly over each view's bbox columns."""
    per_view = units(obj.pixels_per_view, work.pixel_offset, work.pixel_fraction)
    left, right = obj.bbox_per_view
    views = {"left": (left,), "right": (right,), "both": (left, right)}
    columns: dict[int, int] = {}
    for x0, _, x1, _ in views[work.views]:
        for x, count in zip(range(x0, x1), split_units(per_view, x1 - x0)):
            if count:
                columns[x] = columns.get(x, 0) + count
    return columns


def _column_owners(columns: Mapping[int, int], partitions: Sequence[FbPartition]) -> dict[int, int]:
    starts = [p.x0 for p in partitions]
    lo, hi = partitions[0].x0, partitions[-1].x1
    owners: dict[int, int] = {}
    for x, count in columns.items():
        if not lo <= x < hi:
            raise AccountingError(f"pixel column {x} outside the frame [{lo}, {hi})")
        owner = partitions[bisect_right(starts, x) - 1].gpm_id
        owners[owner] = owners.get(owner, 0) + count
    return owners


def route_pixels(obj: DrawObject, work: WorkSlice, partitions: Sequence[FbPartition]) -> dict[int, int]:
    """Owner GPM -> pixel count for one slice under column partitioning."""
    return _column_owners(pixel_columns(obj, work), partitions)


class Composition(NamedTuple):
    composition_cycles: int
    composition_link_bytes: int
    owned_pixels: dict


def _compose(routes: Mapping[int, Mapping[int, int]], cfg: MachineConfig) -> Composition:
    """Renderer -> {owner -> pixels}; every owner's ROPs write what it owns."""
    owned: dict[int, int] = {}
    link_bytes = 0
    for renderer, owners in routes.items():
        for owner, count in owners.items():
            owned[owner] = owned.get(owner, 0) + count
            if owner != renderer:
                link_bytes += count * cfg.framebuffer_bytes_per_pixel
    rate = cfg.rop_pixels_per_gpm_cycle
    cycles = max((math.ceil(px / rate) for px in owned.values()), default=0)
    return Composition(cycles, link_bytes, owned)


def compose_distributed(
    per_gpm_pixels: Mapping[int, Mapping[int, int]],
    partitions: Sequence[FbPartition],
    cfg: MachineConfig,
) -> Composition:
    """Route every pixel column to its partition owner; all ROPs compose in parallel."""
    routes = {renderer: _column_owners(columns, partitions) for renderer, columns in per_gpm_pixels.items()}
    composition = _compose(routes, cfg)
    owned = {p.gpm_id: composition.owned_pixels.get(p.gpm_id, 0) for p in partitions}
    return composition._replace(owned_pixels=owned)


def compose_root(per_gpm_pixels: Mapping[int, Mapping[int, int]], cfg: MachineConfig, root: int = 0) -> Composition:
    routes = {renderer: {root: sum(columns.values())} for renderer, columns in per_gpm_pixels.items()}
    return _compose(routes, cfg)


# ---------------------------------------------------------------------------
# Frame executor
# ---------------------------------------------------------------------------

class FrameSim:
    """Runs one frame's work on a machine; implements the engine's executor interface."""

    def __init__(
        self,
        machine: Machine,
        trace: Trace,
        frame: Frame,
        frame_start: int,
        layout: str,
        smp_enabled: bool = True,
        segmented: bool = False,
    ):
        self.machine = machine
        self.cfg = machine.cfg
        self.frame = frame
        self.frame_start = frame_start
        self.layout = layout
        self.smp_enabled = smp_enabled
        self.segmented = segmented
        self.bytes_per_fragment = trace.bytes_per_fragment
        self.objects = {obj.object_id: obj for obj in frame.objects}
        self.partitions = fb_partitions(2 * trace.width, self.cfg.gpm_count)
        self.cursor = [max(frame_start, g.timeline_cycles) for g in machine.gpms]
        self.busy = [0] * self.cfg.gpm_count
        self.items: list[WorkItem] = []
        self.vertex_home: dict[int, int] = {}
        self.commanded: set[tuple[int, int]] = set()
        self.object_end: dict[int, int] = {}
        self.ledger_mark = machine.ledger.total()

    def free_at(self, gpm: int) -> int:
        return self.cursor[gpm]

    def _cost(self, gpm: int, work: WorkSlice) -> tuple[int, int]:
        """(geometry+smp cycles, total render cycles); charges command, vertex and texture traffic."""
        obj = self.objects[work.object_id]
        geometry, smp, raster, fragment, _ = stage_costs(
            obj, work, self.cfg, self.smp_enabled, self.bytes_per_fragment
        )
        geo_local, geo_remote, frag_remote = geometry.local_bytes, 0, 0
        ledger = self.machine.ledger
        key = (obj.object_id, gpm)
        if gpm != 0 and not self.segmented and self.cfg.command_bytes and key not in self.commanded:
            self.commanded.add(key)
            ledger.record(0, gpm, "command", self.cfg.command_bytes)
            geo_remote += self.cfg.command_bytes
        home = self.vertex_home.setdefault(obj.object_id, gpm)
        if home != gpm and geo_local:
            ledger.record(home, gpm, "vertex", geo_local)
            geo_remote += geo_local
            geo_local = 0
        if self.segmented:
            self.machine.allocate_segment(gpm, fragment.pages)
        else:
            frag_remote = self.machine.touch_pages(gpm, fragment.pages).remote_bytes

        geo = stage_time(geometry._replace(local_bytes=geo_local, remote_bytes=geo_remote), self.cfg)
        geo += stage_time(smp, self.cfg)
        rest = stage_time(raster, self.cfg) + stage_time(fragment._replace(remote_bytes=frag_remote), self.cfg)
        return geo, geo + rest

    def run(self, gpm: int, slices: Sequence[WorkSlice], ready: int) -> RunRecord:
        t = max(self.cursor[gpm], ready)
        start: Optional[int] = None
        items = []
        for work in slices:
            if work.gpm_id != gpm:
                work = replace(work, gpm_id=gpm)
            obj = self.objects[work.object_id]
            t = max([t] + [self.object_end.get(dep, 0) for dep in obj.depends_on])
            if start is None:
                start = t
            geo, total = self._cost(gpm, work)
            signals = slice_signals(obj, work, self.smp_enabled)
            item = WorkItem(gpm, work, t, t + total, t + geo, signals.tv, signals.pixels)
            items.append(item)
            t += total
            self.busy[gpm] += total
            self.object_end[obj.object_id] = max(self.object_end.get(obj.object_id, 0), item.end)
        self.cursor[gpm] = t
        self.items.extend(items)
        return RunRecord(gpm, t if start is None else start, t, items)

    def truncate(self, run: RunRecord, cycle: int) -> list[RemainingWork]:
        """Stop a run at `cycle`; keeps the finished share, returns what is left per object."""
        gpm = run.gpm_id
        if self.cursor[gpm] != run.end:
            raise AccountingError(f"GPM {gpm} has work queued after the truncated run")
        kept, left = [], []
        for item in run.items:
            if item.end <= cycle:
                kept.append(item)
                continue
            obj = self.objects[item.work.object_id]
            w = item.work
            tri_units = units(obj.triangle_count, w.triangle_offset, w.triangle_fraction)
            px_units = units(obj.pixels_per_view, w.pixel_offset, w.pixel_fraction)
            tri_done = px_done = 0
            if item.start < cycle:
                share = Fraction(cycle - item.start, item.end - item.start)
                tri_done = math.floor(tri_units * share)
                px_done = math.floor(px_units * share)
            if tri_done or px_done:
                done = WorkSlice(
                    object_id=obj.object_id,
                    triangle_fraction=Fraction(tri_done, obj.triangle_count),
                    pixel_fraction=Fraction(px_done, obj.pixels_per_view) if obj.pixels_per_view else Fraction(0),
                    views=w.views,
                    triangle_offset=w.triangle_offset,
                    pixel_offset=w.pixel_offset,
                    gpm_id=gpm,
                )
                signals = slice_signals(obj, done, self.smp_enabled)
                kept.append(WorkItem(gpm, done, item.start, cycle, min(item.geometry_end, cycle), signals.tv, signals.pixels))
            left.append(RemainingWork(
                obj.object_id,
                math.floor(obj.triangle_count * w.triangle_offset) + tri_done,
                math.floor(obj.pixels_per_view * w.pixel_offset) + px_done,
            ))

        removed = {id(item) for item in run.items}
        self.items = [item for item in self.items if id(item) not in removed] + kept
        self.busy[gpm] -= run.end - cycle
        self.cursor[gpm] = cycle
        run.items = kept
        run.end = cycle
        return left

    def compose(self, item: WorkItem) -> Composition:
        """Composition of one work item under the frame's framebuffer layout."""
        columns = {item.gpm_id: pixel_columns(self.objects[item.work.object_id], item.work)}
        if self.layout == COLUMNS:
            return compose_distributed(columns, self.partitions, self.cfg)
        return compose_root(columns, self.cfg, 0 if self.layout == ROOT else item.gpm_id)

    def finalize(self) -> FrameMetrics:
        machine, cfg = self.machine, self.cfg
        frame_end = max([self.frame_start] + [item.end for item in self.items])
        ordered = sorted(
            self.items,
            key=lambda it: (it.end, it.gpm_id, it.work.object_id, it.work.pixel_offset, it.work.views),
        )
        composed_mark = machine.ledger.total("composition")
        composed = 0
        for item in ordered:
            composition = self.compose(item)
            composed += composition.composition_link_bytes
            for owner, pixels in sorted(composition.owned_pixels.items()):
                if not pixels:
                    continue
                ready = item.end
                if owner != item.gpm_id:
                    z = machine.send(item.gpm_id, owner, "ztest", pixels * cfg.ztest_bytes_per_pixel, item.end)
                    fb = machine.send(item.gpm_id, owner, "composition", pixels * cfg.framebuffer_bytes_per_pixel, item.end)
                    ready = max(z, fb)
                frame_end = max(frame_end, machine.reserve_rop(owner, pixels, ready))
        if machine.ledger.total("composition") - composed_mark != composed:
            raise AccountingError(f"frame {self.frame.frame_id} composition bytes disagree with the ledger")

        completion = [0] * cfg.gpm_count
        for item in self.items:
            completion[item.gpm_id] = max(completion[item.gpm_id], item.end - self.frame_start)
        for g in sorted({item.gpm_id for item in self.items}):
            state = machine.gpms[g]
            # A segmented frame owns its GPM until its own pixels are written.
            state.advance_to(max(state.timeline_cycles, frame_end if self.segmented else self.cursor[g]))
        for state, busy in zip(machine.gpms, self.busy):
            state.busy_cycles += busy

        balance = balance_ratio(completion)
        return FrameMetrics(
            frame_id=self.frame.frame_id,
            start_cycle=self.frame_start,
            end_cycle=frame_end,
            single_frame_latency_cycles=frame_end - self.frame_start,
            completion_cycles=completion,
            busy_cycles=list(self.busy),
            balance_ratio=round(balance.ratio, 6),
            balance_flag=balance.flag,
            pixels_rendered=sum(item.pixels for item in self.items),
            link_bytes=machine.ledger.total() - self.ledger_mark,
        )


# ---------------------------------------------------------------------------
# Assignment rules
# ---------------------------------------------------------------------------

def assign_baseline(frame: Frame, cfg: MachineConfig) -> list[Assignment]:
    """Fixed-size triangle chunks dealt round-robin, no locality."""
    chunk = cfg.baseline_chunk_triangles
    out: list[Assignment] = []
    counter = 0
    for obj in frame.objects:
        total = obj.triangle_count
        for lo in range(0, total, chunk):
            hi = min(total, lo + chunk)
            frac, off = Fraction(hi - lo, total), Fraction(lo, total)
            gpm = counter % cfg.gpm_count
            out.append((gpm, [WorkSlice(obj.object_id, frac, frac, "both", off, off, gpm)]))
            counter += 1
    return out


def assign_afr(trace: Trace, cfg: MachineConfig) -> list[int]:
    """Renderer GPM of every frame."""
    return [i % cfg.gpm_count for i in range(len(trace.frames))]


def assign_tile(frame: Frame, cfg: MachineConfig, orientation: str) -> list[Assignment]:
    n = cfg.gpm_count
    out: list[Assignment] = []
    if orientation == "vertical":
        stripes = cumulative_bounds(2 * frame.width, n)
        for obj in frame.objects:
            left = _overlaps(obj.bbox_left[0], obj.bbox_left[2], stripes)
            right = _overlaps(obj.bbox_right[0], obj.bbox_right[2], stripes)
            if len(left) == 1 and len(right) == 1 and left[0][0] == right[0][0]:
                gpm = left[0][0]
                out.append((gpm, [WorkSlice(obj.object_id, views="both", gpm_id=gpm)]))
                continue
            per_gpm: dict[int, list[WorkSlice]] = {}
            for view, rect, overlaps in (("left", obj.bbox_left, left), ("right", obj.bbox_right, right)):
                width = rect[2] - rect[0]
                off = Fraction(0)
                for gpm, w in overlaps:
                    frac = Fraction(w, width)
                    per_gpm.setdefault(gpm, []).append(WorkSlice(obj.object_id, frac, frac, view, off, off, gpm))
                    off += frac
            out.extend((gpm, per_gpm[gpm]) for gpm in sorted(per_gpm))
    elif orientation == "horizontal":
        bands = cumulative_bounds(frame.height, n)
        for obj in frame.objects:
            y0, y1 = obj.bbox_left[1], obj.bbox_left[3]
            off = Fraction(0)
            for gpm, h in _overlaps(y0, y1, bands):
                frac = Fraction(h, y1 - y0)
                out.append((gpm, [WorkSlice(obj.object_id, frac, frac, "both", off, off, gpm)]))
                off += frac
    else:
        raise DomainError(f"unknown tile orientation {orientation!r}")
    return out


def assign_object_sfr(frame: Frame, cfg: MachineConfig) -> list[Assignment]:
    return [
        (i % cfg.gpm_count, [WorkSlice(obj.object_id, views="both", gpm_id=i % cfg.gpm_count)])
        for i, obj in enumerate(frame.objects)
    ]


def assign_oo_app(frame: Frame, cfg: MachineConfig) -> list[Assignment]:
    batches = build_batches(frame, cfg.lookahead_window, cfg.batch_triangle_limit, cfg.tsl_threshold)
    return [
        (b.batch_id % cfg.gpm_count, [WorkSlice(oid, views="both", gpm_id=b.batch_id % cfg.gpm_count) for oid in b.members])
        for b in batches
    ]


def execute(sim: FrameSim, assignments: Sequence[Assignment]) -> None:
    for gpm, slices in assignments:
        sim.run(gpm, slices, sim.frame_start)


# ---------------------------------------------------------------------------
# End-to-end run
# ---------------------------------------------------------------------------

def run_scheme(scheme, trace: Trace, cfg: MachineConfig, run_id: Optional[str] = None) -> MetricsReport:
    scheme = SchemeId(scheme)
    if scheme is SchemeId.BASELINE_IDEAL_LINK:
        cfg = cfg.model_copy(update={"link_gbps": cfg.local_dram_gbps})
    sim_logger.run_start(run_id, scheme.value, cfg.gpm_count, cfg.link_gbps, len(trace.frames))

    machine = Machine(cfg)
    layout = LAYOUTS[scheme]
    engine = DistributionEngine(cfg, run_id) if scheme is SchemeId.OO_VR else None
    afr_gpms = assign_afr(trace, cfg) if scheme is SchemeId.AFR else []
    barrier = 0
    frames: list[FrameMetrics] = []
    schedule: list[ScheduleEntry] = []

    for index, frame in enumerate(trace.frames):
        if scheme is SchemeId.AFR:
            gpm = afr_gpms[index]
            sim = FrameSim(machine, trace, frame, machine.gpms[gpm].timeline_cycles, layout, segmented=True)
            execute(sim, [(gpm, [WorkSlice(obj.object_id, views="both", gpm_id=gpm) for obj in frame.objects])])
        else:
            sim = FrameSim(machine, trace, frame, barrier, layout)
            if scheme in (SchemeId.BASELINE, SchemeId.BASELINE_IDEAL_LINK):
                execute(sim, assign_baseline(frame, cfg))
            elif scheme is SchemeId.TILE_V:
                execute(sim, assign_tile(frame, cfg, "vertical"))
            elif scheme is SchemeId.TILE_H:
                execute(sim, assign_tile(frame, cfg, "horizontal"))
            elif scheme is SchemeId.OBJECT_SFR:
                execute(sim, assign_object_sfr(frame, cfg))
            elif scheme is SchemeId.OO_APP:
                execute(sim, assign_oo_app(frame, cfg))
            else:
                batches = build_batches(frame, cfg.lookahead_window, cfg.batch_triangle_limit, cfg.tsl_threshold)
                schedule.extend(engine.dispatch_frame(frame, batches, machine, sim, barrier))

        metrics = sim.finalize()
        barrier = max(barrier, metrics.end_cycle)
        frames.append(metrics)
        sim_logger.frame_done(run_id, frame.frame_id, metrics.single_frame_latency_cycles, metrics.balance_ratio)

    report = build_report(
        scheme.value,
        cfg.model_dump(),
        trace_digest(trace),
        frames,
        machine.ledger,
        engine.predictor.as_calibration() if engine else None,
        schedule,
        [state.busy_cycles for state in machine.gpms],
    )
    sim_logger.run_end(run_id, scheme.value, report.single_frame_latency_cycles, report.total_link_bytes)
    return report
