"""
Per-slice stage costs of the stereo rendering pipeline and the roofline timing rule.

Stages run geometry -> smp -> raster -> fragment -> color. With SMP, a slice
covering both views runs geometry once and projects the second position in
the smp stage; otherwise every view pays geometry on its own.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple, Optional

from .errors import ConfigError, DomainError
from .machine import MachineConfig, PageId, bandwidth_bytes_per_cycle, texture_page_count
from .trace import DrawObject, TextureRef

STAGES = ("geometry", "smp", "raster", "fragment", "color")
VIEWS = ("left", "right", "both")


class StageCost(NamedTuple):
    stage: str
    compute_cycles: int
    local_bytes: int
    remote_bytes: int
    output_pixels: int
    pages: tuple = ()


class Signals(NamedTuple):
    triangles: int
    tv: int
    pixels: int

    def __add__(self, other):
        return Signals(self.triangles + other.triangles, self.tv + other.tv, self.pixels + other.pixels)


ZERO_SIGNALS = Signals(0, 0, 0)


@dataclass(frozen=True)
class WorkSlice:
    object_id: int
    triangle_fraction: Fraction = Fraction(1)
    pixel_fraction: Fraction = Fraction(1)
    views: str = "both"
    triangle_offset: Fraction = Fraction(0)
    pixel_offset: Fraction = Fraction(0)
    gpm_id: Optional[int] = None

    def __post_init__(self):
        for name in ("triangle_fraction", "pixel_fraction", "triangle_offset", "pixel_offset"):
            object.__setattr__(self, name, Fraction(getattr(self, name)))
        if self.views not in VIEWS:
            raise DomainError(f"unknown view set {self.views!r}")
        for frac, off in ((self.triangle_fraction, self.triangle_offset), (self.pixel_fraction, self.pixel_offset)):
            if not (0 <= frac <= 1 and 0 <= off and off + frac <= 1):
                raise DomainError(f"slice window [{off}, {off + frac}) outside [0, 1]")

    @property
    def view_count(self) -> int:
        return 2 if self.views == "both" else 1


def units(total: int, offset: Fraction, fraction: Fraction) -> int:
    """Integer share of `total` in the window [offset, offset+fraction); contiguous windows sum exactly."""
    return math.floor(total * (offset + fraction)) - math.floor(total * offset)


def _rate(cfg: MachineConfig, name: str) -> float:
    value = getattr(cfg, name)
    if value <= 0:
        raise ConfigError(name, "rate must be positive")
    return value


@lru_cache(maxsize=65536)
def _window(
    textures: tuple[TextureRef, ...],
    footprint_bytes: int,
    offset: Fraction,
    fraction: Fraction,
    page_bytes: int,
) -> tuple[PageId, ...]:
    total = sum(ref.bytes for ref in textures)
    if total <= 0 or footprint_bytes <= 0:
        return ()
    scale = Fraction(min(footprint_bytes, total), total)
    pages = []
    for ref in sorted(textures, key=lambda r: r.texture_id):
        span = ref.bytes * scale
        lo, hi = span * offset, span * (offset + fraction)
        if hi <= lo:
            continue
        count = texture_page_count(ref.bytes, page_bytes)
        first = min(math.floor(lo / page_bytes), count - 1)
        last = min(math.ceil(hi / page_bytes), count)
        pages.extend(PageId(ref.texture_id, i) for i in range(first, last))
    return tuple(pages)


def texture_pages(
    obj: DrawObject,
    offset: Fraction,
    fraction: Fraction,
    page_bytes: int,
    bytes_per_fragment: int = 16,
) -> tuple[PageId, ...]:
    """Pages read by a pixel window of one view.

    The object's texture footprint is pixels_per_view x bytes_per_fragment
    bytes, capped at its referenced bytes and spread over the references by
    byte share. Both views read the same footprint. Every reference the
    window reaches contributes at least one page.
    """
    if fraction <= 0:
        return ()
    footprint = obj.pixels_per_view * bytes_per_fragment
    return _window(obj.textures, footprint, Fraction(offset), Fraction(fraction), page_bytes)


def footprint_pages(obj: DrawObject, page_bytes: int, bytes_per_fragment: int = 16) -> tuple[PageId, ...]:
    return texture_pages(obj, Fraction(0), Fraction(1), page_bytes, bytes_per_fragment)


def slice_signals(obj: DrawObject, work: WorkSlice, smp_enabled: bool = True) -> Signals:
    verts = units(obj.vertex_count, work.triangle_offset, work.triangle_fraction)
    tris = units(obj.triangle_count, work.triangle_offset, work.triangle_fraction)
    per_view = units(obj.pixels_per_view, work.pixel_offset, work.pixel_fraction)
    return Signals(tris, verts * work.view_count, per_view * work.view_count)


def stage_costs(
    obj: DrawObject,
    work: WorkSlice,
    cfg: MachineConfig,
    smp_enabled: bool = True,
    bytes_per_fragment: int = 16,
) -> list[StageCost]:
    verts = units(obj.vertex_count, work.triangle_offset, work.triangle_fraction)
    pixels = units(obj.pixels_per_view, work.pixel_offset, work.pixel_fraction) * work.view_count
    merged = smp_enabled and work.views == "both"

    vertex_rate = _rate(cfg, "vertex_rate")
    geometry_verts = verts if merged else verts * work.view_count
    geometry = StageCost("geometry", math.ceil(geometry_verts / vertex_rate), verts * cfg.vertex_bytes, 0, 0)
    smp = StageCost("smp", math.ceil(verts / _rate(cfg, "smp_vertices_per_cycle")) if merged else 0, 0, 0, 0)
    pages = ()
    if pixels:
        pages = texture_pages(obj, work.pixel_offset, work.pixel_fraction, cfg.page_bytes, bytes_per_fragment)
    raster = StageCost("raster", math.ceil(pixels / _rate(cfg, "raster_pixels_per_cycle")), 0, 0, 0)
    fragment = StageCost(
        "fragment",
        math.ceil(pixels / _rate(cfg, "fragment_rate")),
        pixels * bytes_per_fragment,
        0,
        0,
        pages,
    )
    rop_rate = _rate(cfg, "rop_per_gpm") * _rate(cfg, "rop_pixels_per_cycle")
    color = StageCost("color", math.ceil(pixels / rop_rate), 0, 0, pixels)
    return [geometry, smp, raster, fragment, color]


def stage_time(cost: StageCost, cfg: MachineConfig) -> int:
    """Roofline: the slowest of compute, local DRAM and link transfer."""
    local_bpc = bandwidth_bytes_per_cycle(cfg, "local")
    link_bpc = bandwidth_bytes_per_cycle(cfg, "link")
    return max(
        cost.compute_cycles,
        math.ceil(cost.local_bytes / local_bpc),
        math.ceil(cost.remote_bytes / link_bpc),
    )
