"""
NUMA multi-GPM topology: configuration, page placement and link/ROP occupancy.

Every GPM has its own DRAM. Pages are placed on first touch; a GPM that reads
a page resident elsewhere pays link bytes unless the page sits in its remote
cache. Each directed GPM pair owns an independent link.
"""

import math
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import AccountingError, ConfigError, DomainError, first_field, first_message
from .metrics import TrafficLedger


class MachineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gpm_count: int = Field(default=4, gt=0)
    sm_per_gpm: int = Field(default=8, gt=0)
    rop_per_gpm: int = Field(default=8, gt=0)
    clock_ghz: float = Field(default=1.0, gt=0)
    local_dram_gbps: float = Field(default=1024.0, gt=0)
    link_gbps: float = Field(default=64.0, gt=0)
    vertex_rate: float = Field(default=8.0, gt=0)
    fragment_rate: float = Field(default=64.0, gt=0)
    rop_pixels_per_cycle: int = Field(default=4, gt=0)
    page_bytes: int = Field(default=4096, gt=0)
    remote_cache_bytes: int = Field(default=2 * 1024 * 1024, ge=0)

    # Pipeline rates and traffic sizes
    raster_pixels_per_cycle: float = Field(default=256.0, gt=0)
    smp_vertices_per_cycle: float = Field(default=32.0, gt=0)
    vertex_bytes: int = Field(default=32, ge=0)
    ztest_bytes_per_pixel: int = Field(default=4, ge=0)
    framebuffer_bytes_per_pixel: int = Field(default=4, ge=0)
    command_bytes: int = Field(default=256, ge=0)

    # Scheduling knobs
    baseline_chunk_triangles: int = Field(default=256, gt=0)
    batch_triangle_limit: int = Field(default=4096, gt=0)
    tsl_threshold: float = Field(default=0.5, ge=0, le=1)
    lookahead_window: int = Field(default=64, gt=0)
    calibration_batches: int = Field(default=8, ge=2)
    batch_queue_depth: int = Field(default=4, gt=0)

    @field_validator("link_gbps")
    @classmethod
    def _numa_asymmetry(cls, value: float, info) -> float:
        local = info.data.get("local_dram_gbps")
        if local is not None and value > local:
            raise ValueError("link bandwidth must not exceed local DRAM bandwidth")
        return value

    @property
    def rop_pixels_per_gpm_cycle(self) -> int:
        return self.rop_per_gpm * self.rop_pixels_per_cycle

    @property
    def remote_cache_pages(self) -> int:
        return self.remote_cache_bytes // self.page_bytes


def machine_config(**kwargs) -> MachineConfig:
    """Build a MachineConfig, reporting the first bad field as ConfigError."""
    try:
        return MachineConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(first_field(exc), first_message(exc)) from None


def bandwidth_bytes_per_cycle(cfg: MachineConfig, kind: str) -> float:
    if kind == "local":
        gbps = cfg.local_dram_gbps
    elif kind == "link":
        gbps = cfg.link_gbps
    else:
        raise DomainError(f"unknown bandwidth kind {kind!r}")
    return gbps / cfg.clock_ghz


class PageId(NamedTuple):
    texture_id: int
    index: int


def texture_page_count(nbytes: int, page_bytes: int) -> int:
    return math.ceil(nbytes / page_bytes) if nbytes > 0 else 0


class AccessSummary(NamedTuple):
    local_bytes: int
    remote_bytes: int
    allocations: int
    cache_hits: int = 0
    remote_by_source: Optional[dict] = None


class CopySummary(NamedTuple):
    copied_bytes: int
    source_map: dict


class Timeline:
    """Busy intervals of one resource; reservations fill the earliest gap."""

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []

    def reserve(self, ready: int, duration: int) -> tuple[int, int]:
        if duration <= 0:
            return ready, ready
        starts, ends = self._starts, self._ends
        i = bisect_right(ends, ready)
        t = ready
        while i < len(starts) and t + duration > starts[i]:
            t = max(t, ends[i])
            i += 1
        end = t + duration

        if i > 0 and ends[i - 1] == t:
            ends[i - 1] = end
            if i < len(starts) and starts[i] == end:
                ends[i - 1] = ends[i]
                del starts[i]
                del ends[i]
        elif i < len(starts) and starts[i] == end:
            starts[i] = t
        else:
            starts.insert(i, t)
            ends.insert(i, end)
        return t, end

    @property
    def busy_until(self) -> int:
        return self._ends[-1] if self._ends else 0

    @property
    def busy_cycles(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))


@dataclass
class GpmState:
    gpm_id: int
    timeline_cycles: int = 0
    page_table_share: set = field(default_factory=set)
    remote_cache: OrderedDict = field(default_factory=OrderedDict)
    cache_capacity_pages: int = 0
    busy_cycles: int = 0

    def advance_to(self, cycle: int) -> None:
        if cycle < self.timeline_cycles:
            raise AccountingError(
                f"GPM {self.gpm_id} timeline would move backwards ({self.timeline_cycles} -> {cycle})"
            )
        self.timeline_cycles = cycle

    def cache_hit(self, page: PageId) -> bool:
        if page in self.remote_cache:
            self.remote_cache.move_to_end(page)
            return True
        return False

    def cache_insert(self, page: PageId) -> None:
        if self.cache_capacity_pages <= 0:
            return
        self.remote_cache[page] = None
        self.remote_cache.move_to_end(page)
        while len(self.remote_cache) > self.cache_capacity_pages:
            self.remote_cache.popitem(last=False)


class Machine:
    """Mutable machine state for exactly one simulation run."""

    def __init__(self, cfg: MachineConfig, ledger: TrafficLedger = None):
        self.cfg = cfg
        self.ledger = ledger if ledger is not None else TrafficLedger()
        self.gpms = [
            GpmState(gpm_id=g, cache_capacity_pages=cfg.remote_cache_pages) for g in range(cfg.gpm_count)
        ]
        self.residency: dict[PageId, set[int]] = {}
        self.duplicates: set[PageId] = set()
        self.links: dict[tuple[int, int], Timeline] = {}
        self.rops = [Timeline() for _ in range(cfg.gpm_count)]
        self.link_bpc = bandwidth_bytes_per_cycle(cfg, "link")
        self.local_bpc = bandwidth_bytes_per_cycle(cfg, "local")

    def _check_gpm(self, gpm: int) -> None:
        if not 0 <= gpm < self.cfg.gpm_count:
            raise AccountingError(f"no such GPM {gpm}")

    def _make_resident(self, page: PageId, gpm: int) -> None:
        holders = self.residency.setdefault(page, set())
        if holders and gpm not in holders:
            self.duplicates.add(page)
        holders.add(gpm)
        self.gpms[gpm].page_table_share.add(page)

    def holders(self, page: PageId) -> frozenset:
        return frozenset(self.residency.get(page, ()))

    def touch_pages(self, gpm: int, pages: Iterable[PageId]) -> AccessSummary:
        """First-touch placement, then local / cached / remote accounting per page."""
        self._check_gpm(gpm)
        state = self.gpms[gpm]
        page_bytes = self.cfg.page_bytes
        local = remote = allocations = hits = 0
        by_source: dict[int, int] = {}

        for page in sorted(set(pages)):
            holders = self.residency.get(page)
            if not holders:
                self._make_resident(page, gpm)
                allocations += 1
                local += page_bytes
            elif gpm in holders:
                local += page_bytes
            elif state.cache_hit(page):
                hits += 1
                local += page_bytes
            else:
                src = min(holders)
                remote += page_bytes
                by_source[src] = by_source.get(src, 0) + page_bytes
                self.ledger.record(src, gpm, "texture_remote", page_bytes)
                state.cache_insert(page)
        return AccessSummary(local, remote, allocations, hits, by_source)

    def _copy_source(self, holders: Iterable[int], gpm: int, pending: dict[int, int]) -> int:
        """Holder whose link into gpm drains first, counting copies already queued in this call."""

        def drained(src: int) -> tuple[int, int]:
            line = self.links.get((src, gpm))
            busy = line.busy_until if line else 0
            return busy + self.link_transfer_cycles(pending.get(src, 0)), src

        return min(holders, key=drained)

    def preallocate_pages(self, gpm: int, pages: Iterable[PageId]) -> CopySummary:
        """Make pages resident on gpm ahead of use, copying each from the least busy holder."""
        self._check_gpm(gpm)
        page_bytes = self.cfg.page_bytes
        copied = 0
        sources: dict[int, int] = {}
        for page in sorted(set(pages)):
            holders = self.residency.get(page)
            if holders and gpm not in holders:
                src = self._copy_source(holders, gpm, sources)
                self.ledger.record(src, gpm, "preallocation_copy", page_bytes)
                sources[src] = sources.get(src, 0) + page_bytes
                copied += page_bytes
            if not holders or gpm not in holders:
                self._make_resident(page, gpm)
        return CopySummary(copied, sources)

    def allocate_segment(self, gpm: int, pages: Iterable[PageId]) -> AccessSummary:
        """Segmented allocation: the GPM's own copy of every page, no link traffic."""
        self._check_gpm(gpm)
        count = 0
        allocations = 0
        for page in sorted(set(pages)):
            if gpm not in self.residency.get(page, ()):
                allocations += 1
                self._make_resident(page, gpm)
            count += 1
        return AccessSummary(count * self.cfg.page_bytes, 0, allocations, 0, {})

    def link_transfer_cycles(self, nbytes: int) -> int:
        return math.ceil(nbytes / self.link_bpc) if nbytes > 0 else 0

    def reserve_link(self, src: int, dst: int, nbytes: int, ready: int) -> int:
        """Occupy the src->dst link for the transfer; returns the arrival cycle."""
        if nbytes <= 0 or src == dst:
            return ready
        timeline = self.links.setdefault((src, dst), Timeline())
        _, end = timeline.reserve(ready, self.link_transfer_cycles(nbytes))
        return end

    def send(self, src: int, dst: int, category: str, nbytes: int, ready: int) -> int:
        if src == dst or nbytes <= 0:
            return ready
        self._check_gpm(src)
        self._check_gpm(dst)
        self.ledger.record(src, dst, category, nbytes)
        return self.reserve_link(src, dst, nbytes, ready)

    def reserve_rop(self, gpm: int, pixels: int, ready: int) -> int:
        self._check_gpm(gpm)
        if pixels <= 0:
            return ready
        cycles = math.ceil(pixels / self.cfg.rop_pixels_per_gpm_cycle)
        _, end = self.rops[gpm].reserve(ready, cycles)
        return end

    def placement_conserved(self) -> bool:
        """Every allocated page is resident somewhere; singly-held pages are not duplicates."""
        for page, holders in self.residency.items():
            if not holders:
                return False
            if len(holders) > 1 and page not in self.duplicates:
                return False
            for gpm in holders:
                if page not in self.gpms[gpm].page_table_share:
                    return False
        return True
