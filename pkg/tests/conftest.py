"""
Shared fixtures: hand-built draw objects, small deterministic scenes and the
reference scene.

Usage:
  pytest tests -v
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from rrsim.machine import MachineConfig  # noqa: E402
from rrsim.trace import (  # noqa: E402
    REFERENCE_SCENE,
    SCALING_SCENE,
    DrawObject,
    Frame,
    TextureRef,
    Trace,
    generate_scene,
    load_trace,
    scene_params,
)

REPO_ROOT = Path(__file__).resolve().parents[1]
BUNDLED_REFERENCE = REPO_ROOT / "ref.rrtrace"

WIDTH = 128
HEIGHT = 64


def build_object(
    object_id=0,
    verts=128,
    tris=64,
    pixels=1000,
    textures=None,
    deps=(),
    left=(0, 0, 40, 40),
    right=None,
):
    right = right if right is not None else (left[0] + WIDTH, left[1], left[2] + WIDTH, left[3])
    refs = tuple(TextureRef(texture_id=t, bytes=b) for t, b in sorted((textures or {}).items()))
    return DrawObject(
        object_id=object_id,
        vertex_count=verts,
        triangle_count=tris,
        pixels_per_view=pixels,
        bbox_left=left,
        bbox_right=right,
        textures=refs,
        depends_on=tuple(deps),
    )


def build_trace(objects_per_frame, texture_table=None):
    """Trace from lists of objects (one list per frame); the table defaults to the largest reference."""
    table = dict(texture_table or {})
    for objects in objects_per_frame:
        for obj in objects:
            for ref in obj.textures:
                table[ref.texture_id] = max(table.get(ref.texture_id, 0), ref.bytes)
    frames = tuple(
        Frame(frame_id=i, width=WIDTH, height=HEIGHT, objects=tuple(objects))
        for i, objects in enumerate(objects_per_frame)
    )
    return Trace(width=WIDTH, height=HEIGHT, frames=frames, texture_table=table)


@pytest.fixture
def make_object():
    return build_object


@pytest.fixture
def make_trace():
    return build_trace


@pytest.fixture
def cfg():
    return MachineConfig()


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(scene_params(
        seed=11,
        frames=2,
        objects_per_frame=48,
        texture_pool_size=12,
        sharing_cluster_size=4,
        resolution=(160, 96),
        dependency_fraction=0.1,
    ))


@pytest.fixture(scope="session")
def reference_trace():
    return generate_scene(REFERENCE_SCENE.model_copy(update={"frames": 2}))


@pytest.fixture(scope="session")
def full_reference_trace():
    """All four reference frames; the bundled file when it is checked in."""
    if BUNDLED_REFERENCE.exists():
        return load_trace(BUNDLED_REFERENCE)
    return generate_scene(REFERENCE_SCENE)


@pytest.fixture(scope="session")
def scaling_trace():
    return generate_scene(SCALING_SCENE)
