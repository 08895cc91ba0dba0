"""
Tests for the assignment rules, composition models and end-to-end scheme runs.

Usage:
  pytest tests/test_schemes.py -v
"""

from fractions import Fraction

import pytest

from rrsim.errors import AccountingError, DomainError
from rrsim.machine import Machine, MachineConfig
from rrsim.metrics import speedup
from rrsim.pipeline import WorkSlice
from rrsim.schemes import (
    COLUMNS,
    SCHEMES,
    FrameSim,
    assign_baseline,
    assign_object_sfr,
    assign_tile,
    compose_distributed,
    compose_root,
    fb_partitions,
    pixel_columns,
    route_pixels,
    run_scheme,
)


def test_every_scheme_handles_an_empty_frame(make_trace):
    trace = make_trace([[]])
    for scheme in SCHEMES:
        report = run_scheme(scheme, trace, MachineConfig())
        assert report.single_frame_latency_cycles == 0
        assert report.total_link_bytes == 0
        assert report.frames[0].balance_flag == "no_work"


def test_trace_without_frames(make_trace):
    report = run_scheme("oo_vr", make_trace([]), MachineConfig())
    assert report.frames == []
    assert report.makespan_cycles == 0


def test_unknown_scheme_is_rejected(make_trace):
    with pytest.raises(ValueError):
        run_scheme("sort_last", make_trace([[]]), MachineConfig())


# ---------------------------------------------------------------------------
# Assignment rules
# ---------------------------------------------------------------------------

def test_baseline_deals_triangle_chunks_round_robin(make_object, make_trace):
    trace = make_trace([[make_object(tris=1024, verts=1024)]])
    assignments = assign_baseline(trace.frames[0], MachineConfig())
    assert [gpm for gpm, _ in assignments] == [0, 1, 2, 3]
    assert all(s.triangle_fraction == Fraction(1, 4) for _, (s,) in assignments)
    assert [s.triangle_offset for _, (s,) in assignments] == [Fraction(i, 4) for i in range(4)]


def test_baseline_chunk_counter_runs_across_objects(make_object, make_trace):
    objects = [make_object(object_id=i, tris=300, verts=300) for i in range(2)]
    assignments = assign_baseline(make_trace([objects]).frames[0], MachineConfig())
    assert [gpm for gpm, _ in assignments] == [0, 1, 2, 3]
    assert [s.object_id for _, (s,) in assignments] == [0, 0, 1, 1]


def test_vertical_tiles_split_the_eyes(make_object, make_trace):
    frame = make_trace([[make_object(left=(0, 0, 40, 40))]]).frames[0]
    assignments = assign_tile(frame, MachineConfig(), "vertical")
    assert [(gpm, s.views) for gpm, (s,) in assignments] == [(0, "left"), (2, "right")]


def test_vertical_tiles_follow_the_bbox_overlap(make_object, make_trace):
    frame = make_trace([[make_object(left=(30, 0, 80, 10))]]).frames[0]
    assignments = assign_tile(frame, MachineConfig(), "vertical")
    left = [(gpm, s.pixel_fraction) for gpm, slices in assignments for s in slices if s.views == "left"]
    assert left == [(0, Fraction(34, 50)), (1, Fraction(16, 50))]


def test_horizontal_bands(make_object, make_trace):
    frame = make_trace([[make_object(left=(0, 0, 40, 40))]]).frames[0]
    assignments = assign_tile(frame, MachineConfig(), "horizontal")
    assert [(gpm, s.views, s.pixel_fraction) for gpm, (s,) in assignments] == [
        (0, "both", Fraction(2, 5)),
        (1, "both", Fraction(2, 5)),
        (2, "both", Fraction(1, 5)),
    ]


def test_unknown_tile_orientation(make_object, make_trace):
    with pytest.raises(DomainError):
        assign_tile(make_trace([[make_object()]]).frames[0], MachineConfig(), "diagonal")


def test_object_sfr_deals_whole_objects(make_object, make_trace):
    objects = [make_object(object_id=i, textures={i: 4096}) for i in range(8)]
    assignments = assign_object_sfr(make_trace([objects]).frames[0], MachineConfig())
    assert [gpm for gpm, _ in assignments] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert all(s.views == "both" and s.triangle_fraction == 1 for _, (s,) in assignments)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def test_fb_partitions_cover_the_stereo_frame():
    parts = fb_partitions(258, 4)
    assert [p.x1 - p.x0 for p in parts] == [65, 65, 64, 64]
    assert parts[0].x0 == 0 and parts[-1].x1 == 258


def test_pixel_columns_spread_over_the_bbox(make_object):
    obj = make_object(pixels=10, left=(0, 0, 4, 10))
    assert pixel_columns(obj, WorkSlice(0, views="left")) == {0: 3, 1: 3, 2: 2, 3: 2}
    both = pixel_columns(obj, WorkSlice(0, views="both"))
    assert both[128] == 3 and sum(both.values()) == 20
    half = WorkSlice(0, pixel_fraction=Fraction(1, 2), views="right")
    assert pixel_columns(obj, half) == {128: 2, 129: 1, 130: 1, 131: 1}


def test_route_pixels_conserves_pixels(make_object):
    obj = make_object(pixels=997, left=(30, 0, 90, 10))
    owners = route_pixels(obj, WorkSlice(0, views="both"), fb_partitions(256, 4))
    assert sum(owners.values()) == 2 * 997
    assert set(owners) == {0, 1, 2, 3}


def test_distributed_composition_beats_the_root_under_uniform_load():
    cfg = MachineConfig()
    per_gpm = {g: {x: 10 for x in range(256)} for g in range(4)}
    distributed = compose_distributed(per_gpm, fb_partitions(256, 4), cfg)
    root = compose_root(per_gpm, cfg)
    assert distributed.composition_cycles == 80
    assert root.composition_cycles == 320
    assert root.composition_cycles >= 4 * distributed.composition_cycles
    assert distributed.composition_link_bytes == 4 * 192 * 10 * 4
    assert sum(distributed.owned_pixels.values()) == root.owned_pixels[0]


def test_pixel_outside_the_frame_is_an_accounting_error():
    with pytest.raises(AccountingError):
        compose_distributed({0: {300: 1}}, fb_partitions(256, 4), MachineConfig())


def test_frame_composition_routes_columns_to_their_owners(make_object, make_trace):
    cfg = MachineConfig()
    obj = make_object(pixels=1000, left=(0, 0, 128, 10))
    trace = make_trace([[obj]])
    machine = Machine(cfg)
    sim = FrameSim(machine, trace, trace.frames[0], 0, COLUMNS)
    sim.run(0, [WorkSlice(0)], 0)
    sim.finalize()
    expected = compose_distributed({0: pixel_columns(obj, WorkSlice(0))}, fb_partitions(256, 4), cfg)
    # GPM 0 keeps columns 0-63; the other three partitions travel.
    assert expected.owned_pixels == {0: 512, 1: 488, 2: 512, 3: 488}
    assert machine.ledger.total("composition") == expected.composition_link_bytes == 1488 * 4
    assert machine.ledger.total("ztest") == 1488 * 4


# ---------------------------------------------------------------------------
# End-to-end runs on small traces
# ---------------------------------------------------------------------------

def test_afr_keeps_each_frame_on_one_gpm(make_object, make_trace):
    frames = [
        [make_object(object_id=f * 4 + i, textures={i: 8192}) for i in range(4)]
        for f in range(4)
    ]
    report = run_scheme("afr", make_trace(frames), MachineConfig())
    assert report.total_link_bytes == 0
    for index, frame in enumerate(report.frames):
        assert frame.start_cycle == 0
        assert [c > 0 for c in frame.completion_cycles] == [g == index for g in range(4)]
        assert frame.balance_flag == "single_gpm"


def test_vertical_tiles_duplicate_texture_traffic(make_object, make_trace):
    trace = make_trace([[make_object(textures={9: 4 * 4096})]])
    report = run_scheme("tile_v", trace, MachineConfig())
    assert report.link_bytes_by_category["texture_remote"] == 4 * 4096
    assert report.link_bytes_by_category["composition"] == 0


def test_object_sfr_composes_on_the_root(make_object, make_trace):
    objects = [make_object(object_id=i, pixels=1000, textures={i: 4096}) for i in range(8)]
    report = run_scheme("object_sfr", make_trace([objects]), MachineConfig())
    busy = report.frames[0].busy_cycles
    assert busy[0] > 0 and len(set(busy)) == 1
    off_root = 6 * 2 * 1000
    assert report.link_bytes_by_category["composition"] == off_root * 4
    assert report.link_bytes_by_category["ztest"] == off_root * 4
    assert report.link_bytes_by_category["texture_remote"] == 0


@pytest.mark.parametrize("scheme", SCHEMES)
def test_every_scheme_renders_every_pixel(scheme, small_scene):
    report = run_scheme(scheme, small_scene, MachineConfig())
    for frame, metrics in zip(small_scene.frames, report.frames):
        assert metrics.pixels_rendered == 2 * sum(obj.pixels_per_view for obj in frame.objects)
        assert metrics.end_cycle >= metrics.start_cycle
    assert report.total_link_bytes == sum(report.link_bytes_by_category.values())
    assert report.total_link_bytes == sum(report.link_bytes_by_pair.values())


def test_runs_are_deterministic(small_scene):
    first = run_scheme("oo_vr", small_scene, MachineConfig())
    second = run_scheme("oo_vr", small_scene, MachineConfig())
    assert first.to_canonical() == second.to_canonical()


def test_ideal_link_uses_local_bandwidth(small_scene):
    report = run_scheme("baseline_ideal_link", small_scene, MachineConfig())
    assert report.config["link_gbps"] == report.config["local_dram_gbps"]


def test_busy_cycles_add_up_over_frames(small_scene):
    report = run_scheme("oo_vr", small_scene, MachineConfig())
    per_frame = [sum(frame.busy_cycles[g] for frame in report.frames) for g in range(4)]
    assert report.busy_cycles_by_gpm == per_frame
    assert all(busy > 0 for busy in per_frame)


# ---------------------------------------------------------------------------
# Reference scene comparisons
# ---------------------------------------------------------------------------

COMPARED = ("baseline", "afr", "object_sfr", "oo_app", "oo_vr")
BANDWIDTHS = (32, 64, 128, 1024)


@pytest.fixture(scope="module")
def reference_reports(full_reference_trace):
    cfg = MachineConfig(link_gbps=64)
    return {scheme: run_scheme(scheme, full_reference_trace, cfg) for scheme in COMPARED}


@pytest.fixture(scope="module")
def bandwidth_reports(full_reference_trace, reference_reports):
    reports = {}
    for scheme, points in (("baseline", (32, 1024)), ("oo_vr", BANDWIDTHS)):
        for gbps in points:
            reports[scheme, gbps] = reference_reports[scheme] if gbps == 64 else run_scheme(
                scheme, full_reference_trace, MachineConfig(link_gbps=gbps)
            )
    return reports


@pytest.fixture(scope="module")
def scaling_speedups(scaling_trace):
    speedups = {}
    for scheme in ("baseline", "oo_vr"):
        single = run_scheme(scheme, scaling_trace, MachineConfig(gpm_count=1))
        for gpms in (4, 8):
            report = run_scheme(scheme, scaling_trace, MachineConfig(gpm_count=gpms))
            speedups[scheme, gpms] = speedup(report, single, "throughput")
    return speedups


def test_afr_moves_nothing_over_the_links(reference_reports):
    assert reference_reports["afr"].total_link_bytes == 0


def test_afr_single_frame_latency_is_the_worst(reference_reports):
    assert reference_reports["afr"].single_frame_latency_cycles >= reference_reports["oo_vr"].single_frame_latency_cycles


def test_object_oriented_distribution_cuts_link_traffic(reference_reports):
    baseline, object_sfr, oo_vr = (reference_reports[s] for s in ("baseline", "object_sfr", "oo_vr"))
    assert oo_vr.total_link_bytes <= 0.40 * baseline.total_link_bytes
    assert oo_vr.total_link_bytes <= 0.80 * object_sfr.total_link_bytes
    texture = "texture_remote"
    assert oo_vr.link_bytes_by_category[texture] < baseline.link_bytes_by_category[texture]


def test_latency_improves_at_every_step_towards_oo_vr(reference_reports):
    ladder = [reference_reports[s].single_frame_latency_cycles for s in ("oo_vr", "oo_app", "object_sfr", "baseline")]
    for faster, slower in zip(ladder, ladder[1:]):
        assert slower >= 1.05 * faster


def test_baseline_slows_down_on_narrow_links(bandwidth_reports):
    narrow, wide = bandwidth_reports["baseline", 32], bandwidth_reports["baseline", 1024]
    assert narrow.single_frame_latency_cycles >= 1.3 * wide.single_frame_latency_cycles
    assert narrow.total_link_bytes == wide.total_link_bytes


def test_oo_vr_is_insensitive_to_link_bandwidth(bandwidth_reports):
    latencies = [bandwidth_reports["oo_vr", gbps].single_frame_latency_cycles for gbps in BANDWIDTHS]
    assert max(latencies) <= 1.10 * min(latencies)


@pytest.mark.parametrize("gpms,floor", [(4, 3.0), (8, 5.0)])
def test_oo_vr_throughput_scales_with_gpms(scaling_speedups, gpms, floor):
    assert scaling_speedups["oo_vr", gpms] >= floor
    assert scaling_speedups["oo_vr", gpms] > scaling_speedups["baseline", gpms]
