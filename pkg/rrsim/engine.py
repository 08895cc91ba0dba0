"""
Object-aware batch distribution engine.

The first batches of a run go round-robin with first-touch placement and
calibrate a linear time model. Afterwards every batch lands on the GPM whose
predicted remaining work (total minus elapsed counter) is smallest, its pages
are pre-allocated there, and a lone straggler at the end of a frame is split
across the idle GPMs.
"""

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .batching import Batch, batch_signals
from .errors import BackpressureError, CalibrationError, PredictorStateError
from .machine import Machine, MachineConfig
from .metrics import Calibration, ScheduleEntry, SliceEntry
from .pipeline import Signals, WorkSlice, footprint_pages, texture_pages
from .trace import DrawObject, Frame
from .tracing import sim_logger


class Sample(NamedTuple):
    triangles: int
    tv: int
    pixels: int
    measured_cycles: int


@dataclass
class PredictorState:
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    calibrated: bool = False
    fallback: bool = False
    samples: list[Sample] = field(default_factory=list)

    def as_calibration(self) -> Optional[Calibration]:
        if not self.calibrated:
            return None
        return Calibration(c0=self.c0, c1=self.c1, c2=self.c2, fallback=self.fallback)


@dataclass
class GpmCounters:
    total_predicted_cycles: int = 0
    elapsed_cycles: int = 0

    @property
    def remaining(self) -> int:
        return self.total_predicted_cycles - self.elapsed_cycles


def calibrate(samples: Sequence[Sample], required: int = 8) -> PredictorState:
    if len(samples) < required:
        raise CalibrationError(f"need {required} samples, got {len(samples)}")
    samples = list(samples[:required])
    if any(s.measured_cycles <= 0 for s in samples):
        raise CalibrationError("measured cycles must be positive")

    measured = np.array([s.measured_cycles for s in samples], dtype=float)
    triangles = sum(s.triangles for s in samples)
    if triangles <= 0:
        raise CalibrationError("calibration batches carry no triangles")
    c0 = float(measured.sum() / triangles)

    signals = np.array([[s.tv, s.pixels] for s in samples], dtype=float)
    fallback = int(np.linalg.matrix_rank(signals)) < 2
    if fallback:
        tv_sum, px_sum = signals.sum(axis=0)
        c1 = float(0.5 * measured.sum() / tv_sum) if tv_sum else 0.0
        c2 = float(0.5 * measured.sum() / px_sum) if px_sum else 0.0
        if not tv_sum:
            c2 *= 2
        if not px_sum:
            c1 *= 2
    else:
        (c1, c2), *_ = np.linalg.lstsq(signals, measured, rcond=None)
        c1, c2 = float(c1), float(c2)
        if c1 < 0:
            col = signals[:, 1]
            c1, c2 = 0.0, max(0.0, float(col @ measured / (col @ col)))
        elif c2 < 0:
            col = signals[:, 0]
            c1, c2 = max(0.0, float(col @ measured / (col @ col))), 0.0

    return PredictorState(c0=c0, c1=c1, c2=c2, calibrated=True, fallback=fallback, samples=samples)


def predict_total(ps: PredictorState, signals: Signals) -> int:
    if not ps.calibrated:
        raise PredictorStateError("predictor used before calibration")
    return round(ps.c0 * signals.triangles)


def advance_elapsed(counters: GpmCounters, ps: PredictorState, delta_tv: int, delta_pixels: int) -> GpmCounters:
    step = round(ps.c1 * delta_tv + ps.c2 * delta_pixels)
    return replace(counters, elapsed_cycles=counters.elapsed_cycles + step)


def select_gpm(counters: Sequence[GpmCounters], queues: Sequence[Sequence], depth: int = 4) -> int:
    eligible = [g for g in range(len(counters)) if len(queues[g]) < depth]
    if not eligible:
        raise BackpressureError("every batch queue is full")
    return min(eligible, key=lambda g: (counters[g].remaining, g))


def split_units(total: int, parts: int) -> list[int]:
    """Even split; the first total % parts shares get one extra unit."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


# ---------------------------------------------------------------------------
# Executor interface (implemented by the scheme simulator)
# ---------------------------------------------------------------------------

class Progress(NamedTuple):
    cycle: int
    delta_tv: int
    delta_pixels: int


@dataclass
class WorkItem:
    gpm_id: int
    work: WorkSlice
    start: int
    end: int
    geometry_end: int
    tv: int
    pixels: int


@dataclass
class RunRecord:
    gpm_id: int
    start: int
    end: int
    items: list[WorkItem] = field(default_factory=list)

    @property
    def progress(self) -> list[Progress]:
        events = []
        for item in self.items:
            events.append(Progress(item.geometry_end, item.tv, 0))
            events.append(Progress(item.end, 0, item.pixels))
        return sorted(events)


class RemainingWork(NamedTuple):
    object_id: int
    triangles_done: int
    pixels_done: int


class Executor(Protocol):
    objects: Mapping[int, DrawObject]
    bytes_per_fragment: int

    def free_at(self, gpm: int) -> int: ...

    def run(self, gpm: int, slices: Sequence[WorkSlice], ready: int) -> RunRecord: ...

    def truncate(self, run: RunRecord, cycle: int) -> list[RemainingWork]: ...


def remaining_slices(obj: DrawObject, left: RemainingWork, participants: Sequence[int]) -> list[WorkSlice]:
    """Even split of an object's unfinished triangles and pixels across participants."""
    k = len(participants)
    tri_total, px_total = obj.triangle_count, obj.pixels_per_view
    tri_parts = split_units(tri_total - left.triangles_done, k)
    px_parts = split_units(px_total - left.pixels_done, k)
    slices = []
    tri_at, px_at = left.triangles_done, left.pixels_done
    for gpm, tris, pxs in zip(participants, tri_parts, px_parts):
        if tris or pxs:
            slices.append(WorkSlice(
                object_id=obj.object_id,
                triangle_fraction=Fraction(tris, tri_total),
                pixel_fraction=Fraction(pxs, px_total) if px_total else Fraction(0),
                views="both",
                triangle_offset=Fraction(tri_at, tri_total),
                pixel_offset=Fraction(px_at, px_total) if px_total else Fraction(0),
                gpm_id=gpm,
            ))
        tri_at += tris
        px_at += pxs
    return slices


def redistribute_straggler(
    active: RunRecord,
    idle_gpms: Sequence[int],
    machine: Machine,
    executor: Executor,
    cycle: int,
) -> list[WorkSlice]:
    """Split the straggler's unfinished work at `cycle` over its owner and the idle GPMs."""
    if not idle_gpms:
        return []
    participants = sorted({active.gpm_id, *idle_gpms})
    leftovers = executor.truncate(active, cycle)
    slices = []
    for left in leftovers:
        slices.extend(remaining_slices(executor.objects[left.object_id], left, participants))

    page_bytes, bpf = machine.cfg.page_bytes, executor.bytes_per_fragment
    for gpm in participants:
        mine = [s for s in slices if s.gpm_id == gpm]
        if not mine:
            continue
        pages = set()
        for s in mine:
            pages.update(texture_pages(executor.objects[s.object_id], s.pixel_offset, s.pixel_fraction, page_bytes, bpf))
        copy = machine.preallocate_pages(gpm, pages)
        ready = cycle
        for src, nbytes in sorted(copy.source_map.items()):
            ready = max(ready, machine.reserve_link(src, gpm, nbytes, cycle))
        executor.run(gpm, mine, ready)
    return slices


# ---------------------------------------------------------------------------
# Frame dispatch
# ---------------------------------------------------------------------------

@dataclass
class _Active:
    run: RunRecord
    predicted: int
    applied: int = 0
    next_event: int = 0


class DistributionEngine:
    """Per-run engine; the predictor persists across frames, counters do not."""

    def __init__(self, cfg: MachineConfig, run_id: Optional[str] = None, redistribute: bool = True):
        self.cfg = cfg
        self.run_id = run_id
        self.redistribute = redistribute
        self.predictor = PredictorState()
        self.queue_high_water = 0

    def _ready_after_deps(self, batch: Batch, objects: Mapping[int, DrawObject], object_end: dict[int, int]) -> int:
        ready = 0
        for object_id in batch.members:
            for dep in objects[object_id].depends_on:
                ready = max(ready, object_end.get(dep, 0))
        return ready

    def _preallocate(self, machine: Machine, gpm: int, batch: Batch, executor: Executor, now: int) -> int:
        page_bytes, bpf = machine.cfg.page_bytes, executor.bytes_per_fragment
        pages = set()
        for object_id in batch.members:
            pages.update(footprint_pages(executor.objects[object_id], page_bytes, bpf))
        copy = machine.preallocate_pages(gpm, pages)
        arrival = now
        for src, nbytes in sorted(copy.source_map.items()):
            arrival = max(arrival, machine.reserve_link(src, gpm, nbytes, now))
        return arrival

    @staticmethod
    def _whole(batch: Batch, gpm: int) -> list[WorkSlice]:
        return [WorkSlice(object_id, views="both", gpm_id=gpm) for object_id in batch.members]

    def dispatch_frame(
        self,
        frame: Frame,
        batches: Sequence[Batch],
        machine: Machine,
        executor: Executor,
        frame_start: int = 0,
    ) -> list[ScheduleEntry]:
        cfg = self.cfg
        n = cfg.gpm_count
        objects = executor.objects
        object_end: dict[int, int] = {}
        runs: list[tuple[Batch, RunRecord, int, Optional[int]]] = []

        def launch(batch: Batch, gpm: int, ready: int, dispatch: int, predicted: Optional[int]) -> RunRecord:
            ready = max(ready, self._ready_after_deps(batch, objects, object_end))
            run = executor.run(gpm, self._whole(batch, gpm), ready)
            for object_id in batch.members:
                object_end[object_id] = run.end
            runs.append((batch, run, dispatch, predicted))
            return run

        position = 0
        if not self.predictor.calibrated:
            needed = cfg.calibration_batches
            if len(batches) < needed:
                sim_logger.calibration_skipped(self.run_id, frame.frame_id, len(batches))
                for i, batch in enumerate(batches):
                    launch(batch, i % n, frame_start, frame_start, None)
                position = len(batches)
            else:
                samples = []
                for i, batch in enumerate(batches[:needed]):
                    run = launch(batch, i % n, frame_start, frame_start, None)
                    sig = batch_signals(batch, objects)
                    samples.append(Sample(sig.triangles, sig.tv, sig.pixels, max(1, run.end - run.start)))
                self.predictor = calibrate(samples, needed)
                p = self.predictor
                sim_logger.calibrated(self.run_id, p.c0, p.c1, p.c2, p.fallback)
                position = needed

        now = max([frame_start] + [run.end for _, run, _, _ in runs])
        counters = [GpmCounters() for _ in range(n)]
        active: list[list[_Active]] = [[] for _ in range(n)]

        def settle(at: int) -> None:
            for g in range(n):
                keep = []
                for entry in active[g]:
                    events = entry.run.progress
                    while entry.next_event < len(events) and events[entry.next_event].cycle <= at:
                        ev = events[entry.next_event]
                        before = counters[g].elapsed_cycles
                        counters[g] = advance_elapsed(counters[g], self.predictor, ev.delta_tv, ev.delta_pixels)
                        entry.applied += counters[g].elapsed_cycles - before
                        entry.next_event += 1
                    if entry.run.end <= at:
                        counters[g] = GpmCounters(
                            counters[g].total_predicted_cycles - entry.predicted,
                            counters[g].elapsed_cycles - entry.applied,
                        )
                    else:
                        keep.append(entry)
                active[g] = keep

        for batch in batches[position:]:
            while True:
                settle(now)
                try:
                    gpm = select_gpm(counters, active, cfg.batch_queue_depth)
                    break
                except BackpressureError:
                    sim_logger.backpressure(self.run_id, frame.frame_id, now)
                    now = min(entry.run.end for queue in active for entry in queue)

            predicted = predict_total(self.predictor, batch_signals(batch, objects))
            counters[gpm] = GpmCounters(counters[gpm].total_predicted_cycles + predicted, counters[gpm].elapsed_cycles)
            arrival = self._preallocate(machine, gpm, batch, executor, now)
            run = launch(batch, gpm, arrival, now, predicted)
            active[gpm].append(_Active(run, predicted))
            self.queue_high_water = max(self.queue_high_water, len(active[gpm]))
            if len(active[gpm]) > cfg.batch_queue_depth:
                raise BackpressureError(f"GPM {gpm} queue exceeded {cfg.batch_queue_depth}")

        schedule_slices: dict[int, list[SliceEntry]] = {}
        if self.redistribute and n > 1 and runs:
            self._split_straggler(frame, runs, machine, executor, schedule_slices)

        return [
            ScheduleEntry(
                frame_id=frame.frame_id,
                batch_id=batch.batch_id,
                gpm_id=run.gpm_id,
                members=list(batch.members),
                dispatch_cycle=dispatch,
                start_cycle=run.start,
                end_cycle=run.end,
                predicted_cycles=predicted,
                slices=schedule_slices.get(batch.batch_id, []),
            )
            for batch, run, dispatch, predicted in runs
        ]

    def _split_straggler(self, frame, runs, machine, executor, schedule_slices) -> None:
        ordered = sorted(range(len(runs)), key=lambda i: (runs[i][1].end, i))
        last = ordered[-1]
        batch, straggler, _, _ = runs[last]
        others = [runs[i][1].end for i in ordered[:-1]]
        cycle = max([straggler.start] + others)
        if cycle >= straggler.end:
            return
        idle = [g for g in range(self.cfg.gpm_count) if g != straggler.gpm_id and executor.free_at(g) <= cycle]
        if not idle:
            return

        # Only split when the even share plus page copies beats finishing alone.
        participants = sorted({straggler.gpm_id, *idle})
        share = (straggler.end - cycle) / len(participants)
        copy_cycles = 0
        for object_id in batch.members:
            pages = footprint_pages(executor.objects[object_id], machine.cfg.page_bytes, executor.bytes_per_fragment)
            copy_cycles += machine.link_transfer_cycles(len(pages) * machine.cfg.page_bytes)
        if cycle + share + copy_cycles / len(participants) >= straggler.end:
            return

        slices = redistribute_straggler(straggler, idle, machine, executor, cycle)
        sim_logger.straggler_split(self.run_id, frame.frame_id, batch.batch_id, participants, cycle)
        schedule_slices[batch.batch_id] = [
            SliceEntry(gpm_id=s.gpm_id, triangle_fraction=str(s.triangle_fraction), pixel_fraction=str(s.pixel_fraction))
            for s in slices
        ]
        new_end = max(executor.free_at(g) for g in participants)
        straggler.end = max(cycle, new_end)
