"""
Unit tests for per-slice stage costs and the roofline timing rule.

Usage:
  pytest tests/test_pipeline.py -v
"""

from fractions import Fraction

import pytest

from rrsim.errors import ConfigError, DomainError
from rrsim.machine import MachineConfig, PageId
from rrsim.pipeline import (
    StageCost,
    WorkSlice,
    footprint_pages,
    slice_signals,
    stage_costs,
    stage_time,
    texture_pages,
    units,
)


def by_stage(costs):
    return {cost.stage: cost for cost in costs}


def test_both_views_with_smp(make_object, cfg):
    obj = make_object(verts=128, tris=64, pixels=1000)
    costs = by_stage(stage_costs(obj, WorkSlice(0, views="both"), cfg, smp_enabled=True))
    assert costs["geometry"].compute_cycles == 16
    assert costs["smp"].compute_cycles == 4
    assert costs["fragment"].compute_cycles == 32
    assert costs["color"].output_pixels == 2000
    assert costs["color"].compute_cycles == 63
    assert slice_signals(obj, WorkSlice(0, views="both")) == (64, 256, 2000)


def test_single_view(make_object, cfg):
    obj = make_object(verts=128, tris=64, pixels=1000)
    costs = by_stage(stage_costs(obj, WorkSlice(0, views="left"), cfg))
    assert costs["geometry"].compute_cycles == 16
    assert costs["smp"].compute_cycles == 0
    assert costs["color"].output_pixels == 1000
    assert costs["fragment"].local_bytes == 1000 * 16


def test_only_color_emits_pixels(make_object, cfg):
    obj = make_object()
    for cost in stage_costs(obj, WorkSlice(0), cfg):
        assert cost.output_pixels == 0 or cost.stage == "color"


def test_zero_pixel_fraction(make_object, cfg):
    obj = make_object(textures={1: 8192})
    costs = by_stage(stage_costs(obj, WorkSlice(0, pixel_fraction=0), cfg))
    assert costs["raster"].compute_cycles == 0
    assert costs["fragment"].compute_cycles == 0
    assert costs["color"].compute_cycles == 0
    assert costs["fragment"].pages == ()


def test_smp_saves_geometry(make_object, cfg):
    obj = make_object(verts=320)
    geometry = lambda views, smp: by_stage(stage_costs(obj, WorkSlice(0, views=views), cfg, smp))["geometry"]
    both = geometry("both", True).compute_cycles
    assert both < geometry("left", True).compute_cycles + geometry("right", True).compute_cycles
    assert geometry("both", False).compute_cycles == 2 * both


def test_slices_conserve_pixels_and_transformed_vertices(make_object):
    obj = make_object(verts=127, tris=101, pixels=997)
    whole = slice_signals(obj, WorkSlice(0))
    thirds = [
        WorkSlice(0, Fraction(1, 3), Fraction(1, 3), "both", Fraction(i, 3), Fraction(i, 3))
        for i in range(3)
    ]
    parts = [slice_signals(obj, s) for s in thirds]
    assert sum(p.pixels for p in parts) == whole.pixels
    assert sum(p.tv for p in parts) == whole.tv
    assert sum(p.triangles for p in parts) == whole.triangles


def test_units_telescope():
    assert units(10, Fraction(0), Fraction(1, 3)) + units(10, Fraction(1, 3), Fraction(2, 3)) == 10


@pytest.mark.parametrize(
    "cost, expected",
    [
        (StageCost("fragment", 100, 0, 0, 0), 100),
        (StageCost("fragment", 10, 0, 6400, 0), 100),
        (StageCost("fragment", 100, 102400, 0, 0), 100),
    ],
)
def test_stage_time_roofline(cost, expected, cfg):
    assert stage_time(cost, cfg) == expected


def test_stage_time_is_monotone(cfg):
    base = StageCost("fragment", 10, 1000, 1000, 0)
    t = stage_time(base, cfg)
    assert stage_time(base._replace(compute_cycles=20), cfg) >= t
    assert stage_time(base._replace(local_bytes=50000), cfg) >= t
    assert stage_time(base._replace(remote_bytes=50000), cfg) >= t


def test_texture_window_reads_at_least_one_page(make_object):
    obj = make_object(pixels=1024, textures={3: 10 * 4096})
    assert len(texture_pages(obj, Fraction(0), Fraction(1, 100), 4096, 16)) == 1
    assert len(texture_pages(obj, Fraction(0), Fraction(1), 4096, 16)) == 4
    first = texture_pages(obj, Fraction(0), Fraction(1, 2), 4096, 16)
    second = texture_pages(obj, Fraction(1, 2), Fraction(1, 2), 4096, 16)
    assert set(first + second) == set(footprint_pages(obj, 4096, 16))


@pytest.mark.parametrize("pixels, pages", [(10, 1), (1600, 7), (16384, 64), (100000, 64)])
def test_footprint_grows_with_pixels_up_to_the_referenced_bytes(make_object, pixels, pages):
    obj = make_object(pixels=pixels, textures={1: 64 * 4096})
    assert len(footprint_pages(obj, 4096, 16)) == pages


def test_footprint_splits_by_reference_bytes(make_object):
    obj = make_object(pixels=512, textures={1: 3 * 4096, 2: 4096})
    assert footprint_pages(obj, 4096, 16) == (PageId(1, 0), PageId(1, 1), PageId(2, 0))
    assert len(footprint_pages(obj, 4096, 64)) == 4


def test_bytes_per_fragment_scales_the_footprint(make_object):
    obj = make_object(pixels=1000, textures={1: 64 * 4096})
    assert len(footprint_pages(obj, 4096, 16)) == 4
    assert len(footprint_pages(obj, 4096, 64)) == 16


def test_both_views_share_one_footprint(make_object, cfg):
    obj = make_object(pixels=1000, textures={1: 64 * 4096})
    both = by_stage(stage_costs(obj, WorkSlice(0, views="both"), cfg, bytes_per_fragment=32))["fragment"]
    left = by_stage(stage_costs(obj, WorkSlice(0, views="left"), cfg, bytes_per_fragment=32))["fragment"]
    assert both.pages == left.pages
    assert len(both.pages) == 8


def test_zero_rate_is_a_configuration_error(make_object):
    broken = MachineConfig.model_construct(**{**MachineConfig().model_dump(), "fragment_rate": 0})
    with pytest.raises(ConfigError) as exc:
        stage_costs(make_object(), WorkSlice(0), broken)
    assert exc.value.field == "fragment_rate"


def test_slice_window_outside_unit_interval():
    with pytest.raises(DomainError):
        WorkSlice(0, triangle_fraction=Fraction(3, 4), triangle_offset=Fraction(1, 2))
    with pytest.raises(DomainError):
        WorkSlice(0, views="middle")
