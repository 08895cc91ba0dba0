"""
Workload data model, synthetic scene generator and the `rrtrace` text format.

File format (LF line endings, decimal integers):

    rrtrace v1 <frames> <width> <height> <bytes_per_fragment>
    M <key> <value>
    T <texture_id> <bytes>
    F <frame_id>
    O <id> <verts> <tris> <pixels_per_view> <lx0> <ly0> <lx1> <ly1> <rx0> <ry0> <rx1> <ry1> deps=<csv> tex=<id:bytes,...>

Bounding boxes are half-open rectangles in the stereo frame: the left eye
covers x in [0, width), the right eye x in [width, 2*width).
"""

import hashlib
import math
import re
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ParameterError, TraceParseError, TraceValidationError, first_field, first_message

Rect = tuple[int, int, int, int]

TRACE_MAGIC = "rrtrace"
TRACE_VERSION = "v1"
MIN_TRIANGLES = 8
MAX_TRIANGLES = 32768


class TextureRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    texture_id: int
    bytes: int


class DrawObject(BaseModel):
    model_config = ConfigDict(frozen=True)

    object_id: int
    vertex_count: int
    triangle_count: int
    pixels_per_view: int
    bbox_left: Rect
    bbox_right: Rect
    textures: tuple[TextureRef, ...] = ()
    depends_on: tuple[int, ...] = ()

    @property
    def bbox_per_view(self) -> tuple[Rect, Rect]:
        return self.bbox_left, self.bbox_right

    def texture_map(self) -> dict[int, int]:
        return {ref.texture_id: ref.bytes for ref in self.textures}


class Frame(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: int
    width: int
    height: int
    objects: tuple[DrawObject, ...] = ()


class Trace(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int
    height: int
    frames: tuple[Frame, ...] = ()
    texture_table: dict[int, int] = Field(default_factory=dict)
    bytes_per_fragment: int = 16
    metadata: dict[str, str] = Field(default_factory=dict)

    def object_count(self) -> int:
        return sum(len(frame.objects) for frame in self.frames)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _rect_inside(rect: Rect, x_lo: int, x_hi: int, height: int) -> bool:
    x0, y0, x1, y1 = rect
    return x_lo <= x0 < x1 <= x_hi and 0 <= y0 < y1 <= height


def validate_trace(trace: Trace) -> Trace:
    """Check every type invariant; raise TraceValidationError naming the object."""
    if trace.width <= 0 or trace.height <= 0:
        raise TraceValidationError(None, "resolution must be positive")
    if trace.bytes_per_fragment <= 0:
        raise TraceValidationError(None, "bytes_per_fragment must be positive")
    for texture_id, total in trace.texture_table.items():
        if total <= 0:
            raise TraceValidationError(None, f"texture {texture_id} has non-positive size")

    seen_ids: set[int] = set()
    seen_frames: set[int] = set()
    for frame in trace.frames:
        if frame.frame_id in seen_frames:
            raise TraceValidationError(None, f"duplicate frame id {frame.frame_id}")
        seen_frames.add(frame.frame_id)
        if (frame.width, frame.height) != (trace.width, trace.height):
            raise TraceValidationError(None, f"frame {frame.frame_id} resolution differs from the trace header")

        earlier: set[int] = set()
        for obj in frame.objects:
            oid = obj.object_id
            if oid in seen_ids:
                raise TraceValidationError(oid, "duplicate object id")
            seen_ids.add(oid)
            if obj.vertex_count <= 0 or obj.triangle_count <= 0:
                raise TraceValidationError(oid, "vertex and triangle counts must be positive")
            if obj.triangle_count > obj.vertex_count * 3:
                raise TraceValidationError(oid, "more triangles than vertices allow")
            if obj.pixels_per_view < 0:
                raise TraceValidationError(oid, "negative pixel count")
            if not _rect_inside(obj.bbox_left, 0, trace.width, trace.height):
                raise TraceValidationError(oid, "left bbox outside the left eye")
            if not _rect_inside(obj.bbox_right, trace.width, 2 * trace.width, trace.height):
                raise TraceValidationError(oid, "right bbox outside the right eye")
            tex_ids = [ref.texture_id for ref in obj.textures]
            if len(set(tex_ids)) != len(tex_ids):
                raise TraceValidationError(oid, "texture referenced twice")
            for ref in obj.textures:
                if ref.texture_id not in trace.texture_table:
                    raise TraceValidationError(oid, f"unknown texture {ref.texture_id}")
                if ref.bytes <= 0:
                    raise TraceValidationError(oid, f"texture {ref.texture_id} reference has no bytes")
                if ref.bytes > trace.texture_table[ref.texture_id]:
                    raise TraceValidationError(oid, f"texture {ref.texture_id} reference exceeds texture size")
            for dep in obj.depends_on:
                if dep not in earlier:
                    raise TraceValidationError(oid, f"dependency {dep} is not an earlier object of the frame")
            earlier.add(oid)
    return trace


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _object_line(obj: DrawObject) -> str:
    deps = ",".join(str(d) for d in sorted(obj.depends_on))
    tex = ",".join(f"{ref.texture_id}:{ref.bytes}" for ref in sorted(obj.textures, key=lambda r: r.texture_id))
    coords = " ".join(str(v) for v in (*obj.bbox_left, *obj.bbox_right))
    return (
        f"O {obj.object_id} {obj.vertex_count} {obj.triangle_count} {obj.pixels_per_view} "
        f"{coords} deps={deps} tex={tex}"
    )


def serialize_trace(trace: Trace) -> bytes:
    """Canonical form: key-sorted metadata and textures, submission-ordered objects."""
    lines = [
        f"{TRACE_MAGIC} {TRACE_VERSION} {len(trace.frames)} {trace.width} {trace.height} {trace.bytes_per_fragment}"
    ]
    for key in sorted(trace.metadata):
        lines.append(f"M {key} {trace.metadata[key]}")
    for texture_id in sorted(trace.texture_table):
        lines.append(f"T {texture_id} {trace.texture_table[texture_id]}")
    for frame in trace.frames:
        lines.append(f"F {frame.frame_id}")
        lines.extend(_object_line(obj) for obj in frame.objects)
    return ("\n".join(lines) + "\n").encode("utf-8")


def trace_digest(trace: Trace) -> str:
    return hashlib.sha256(serialize_trace(trace)).hexdigest()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\S+")


def _int(token: str, line_no: int, offset: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise TraceParseError(line_no, offset, f"expected integer {what}, got {token!r}") from None


def _parse_object(tokens: list[tuple[int, str]], line_no: int) -> DrawObject:
    if len(tokens) != 15:
        offset = tokens[-1][0] if tokens else 0
        raise TraceParseError(line_no, offset, f"object record needs 15 fields, got {len(tokens)}")
    nums = [_int(tok, line_no, off, "field") for off, tok in tokens[1:13]]

    deps_off, deps_tok = tokens[13]
    if not deps_tok.startswith("deps="):
        raise TraceParseError(line_no, deps_off, "expected deps=<csv>")
    deps_body = deps_tok[len("deps="):]
    deps = tuple(_int(d, line_no, deps_off, "dependency") for d in deps_body.split(",")) if deps_body else ()

    tex_off, tex_tok = tokens[14]
    if not tex_tok.startswith("tex="):
        raise TraceParseError(line_no, tex_off, "expected tex=<id:bytes,...>")
    refs = []
    tex_body = tex_tok[len("tex="):]
    for item in tex_body.split(",") if tex_body else ():
        texture_id, sep, nbytes = item.partition(":")
        if not sep:
            raise TraceParseError(line_no, tex_off, f"malformed texture reference {item!r}")
        refs.append(TextureRef(
            texture_id=_int(texture_id, line_no, tex_off, "texture id"),
            bytes=_int(nbytes, line_no, tex_off, "texture bytes"),
        ))

    return DrawObject(
        object_id=nums[0],
        vertex_count=nums[1],
        triangle_count=nums[2],
        pixels_per_view=nums[3],
        bbox_left=tuple(nums[4:8]),
        bbox_right=tuple(nums[8:12]),
        textures=tuple(refs),
        depends_on=deps,
    )


def _decode(data: Union[bytes, bytearray, str]) -> str:
    if not isinstance(data, (bytes, bytearray)):
        return data
    try:
        return bytes(data).decode("utf-8")
    except UnicodeDecodeError as exc:
        head = bytes(data[: exc.start])
        line = head.count(b"\n") + 1
        offset = exc.start - (head.rfind(b"\n") + 1)
        raise TraceParseError(line, offset, "invalid UTF-8") from None


def parse_trace(data: Union[bytes, str]) -> Trace:
    """Parse an rrtrace byte stream and validate every invariant."""
    text = _decode(data)
    header: Optional[list[int]] = None
    metadata: dict[str, str] = {}
    textures: dict[int, int] = {}
    frames: list[tuple[int, list[DrawObject]]] = []

    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tokens = [(m.start(), m.group()) for m in _TOKEN.finditer(line)]
        tag_off, tag = tokens[0]

        if header is None:
            if tag != TRACE_MAGIC:
                raise TraceParseError(line_no, tag_off, f"expected '{TRACE_MAGIC}' header")
            if len(tokens) != 6 or tokens[1][1] != TRACE_VERSION:
                raise TraceParseError(line_no, tokens[1][0] if len(tokens) > 1 else 0, "unsupported header")
            header = [_int(tok, line_no, off, "header field") for off, tok in tokens[2:]]
            continue

        if tag == "M":
            if len(tokens) < 2:
                raise TraceParseError(line_no, tag_off, "metadata record needs a key")
            key_off, key = tokens[1]
            value = line[key_off + len(key):].strip()
            metadata[key] = value
        elif tag == "T":
            if len(tokens) != 3:
                raise TraceParseError(line_no, tag_off, "texture record needs 3 fields")
            texture_id = _int(tokens[1][1], line_no, tokens[1][0], "texture id")
            if texture_id in textures:
                raise TraceParseError(line_no, tokens[1][0], f"duplicate texture {texture_id}")
            textures[texture_id] = _int(tokens[2][1], line_no, tokens[2][0], "texture bytes")
        elif tag == "F":
            if len(tokens) != 2:
                raise TraceParseError(line_no, tag_off, "frame record needs 2 fields")
            frames.append((_int(tokens[1][1], line_no, tokens[1][0], "frame id"), []))
        elif tag == "O":
            if not frames:
                raise TraceParseError(line_no, tag_off, "object record before any frame record")
            frames[-1][1].append(_parse_object(tokens, line_no))
        else:
            raise TraceParseError(line_no, tag_off, f"unknown record tag {tag!r}")

    if header is None:
        raise TraceParseError(1, 0, "empty trace")
    frame_count, width, height, bytes_per_fragment = header
    if frame_count != len(frames):
        raise TraceValidationError(None, f"header declares {frame_count} frames, found {len(frames)}")

    trace = Trace(
        width=width,
        height=height,
        bytes_per_fragment=bytes_per_fragment,
        metadata=metadata,
        texture_table=textures,
        frames=tuple(
            Frame(frame_id=fid, width=width, height=height, objects=tuple(objs)) for fid, objs in frames
        ),
    )
    return validate_trace(trace)


def load_trace(path: Union[str, Path]) -> Trace:
    return parse_trace(Path(path).read_bytes())


def save_trace(trace: Trace, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(serialize_trace(trace))
    return target


# ---------------------------------------------------------------------------
# Synthetic scene generator
# ---------------------------------------------------------------------------

class TriangleDistribution(BaseModel):
    model_config = ConfigDict(frozen=True)

    median: float = Field(default=400.0, gt=0)
    sigma: float = Field(default=1.0, ge=0)


class SceneParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 1
    frames: int = Field(default=1, gt=0)
    objects_per_frame: int = Field(default=64, ge=0)
    triangle_distribution: TriangleDistribution = TriangleDistribution()
    texture_pool_size: int = Field(default=32, gt=0)
    sharing_cluster_size: int = Field(default=4, gt=0)
    stereo_overlap_fraction: float = Field(default=0.8, ge=0, le=1)
    resolution: tuple[int, int] = (640, 480)
    bytes_per_fragment: int = Field(default=16, gt=0)
    dependency_fraction: float = Field(default=0.05, ge=0, le=1)
    texture_bytes_range: tuple[int, int] = (64 * 1024, 512 * 1024)
    max_object_extent: float = Field(default=0.15, gt=0, le=1)


def scene_params(**kwargs) -> SceneParams:
    """Build SceneParams, reporting range violations as ParameterError."""
    try:
        params = SceneParams(**kwargs)
    except ValidationError as exc:
        raise ParameterError(first_field(exc), first_message(exc)) from None
    return _check_ranges(params)


def _check_ranges(params: SceneParams) -> SceneParams:
    width, height = params.resolution
    if width <= 0 or height <= 0:
        raise ParameterError("resolution", "width and height must be positive")
    lo, hi = params.texture_bytes_range
    if lo <= 0 or hi < lo:
        raise ParameterError("texture_bytes_range", "need 0 < low <= high")
    return params


def _validated(params: Union[SceneParams, Mapping]) -> SceneParams:
    data = params.model_dump() if isinstance(params, SceneParams) else dict(params)
    return scene_params(**data)


# Seed-fixed reference scene: many small objects, clustered texture sharing.
REFERENCE_SCENE = SceneParams(
    seed=2019,
    frames=4,
    objects_per_frame=500,
    triangle_distribution=TriangleDistribution(median=1500, sigma=0.8),
    texture_pool_size=96,
    sharing_cluster_size=8,
    stereo_overlap_fraction=0.85,
    resolution=(640, 480),
    max_object_extent=0.1,
    # 16x anisotropic filtering folded into the per-fragment texture bytes.
    bytes_per_fragment=32,
)

# Balanced scene for GPM-count scaling: narrow triangle spread.
SCALING_SCENE = SceneParams(
    seed=4,
    frames=8,
    objects_per_frame=256,
    triangle_distribution=TriangleDistribution(median=1200, sigma=0.2),
    texture_pool_size=64,
    sharing_cluster_size=4,
    stereo_overlap_fraction=0.85,
    resolution=(640, 480),
    max_object_extent=0.08,
)


def _draw_triangles(rng: np.random.Generator, dist: TriangleDistribution) -> int:
    value = math.exp(rng.normal(math.log(dist.median), dist.sigma)) if dist.sigma > 0 else dist.median
    return int(min(MAX_TRIANGLES, max(MIN_TRIANGLES, round(value))))


def _base_objects(params: SceneParams, rng: np.random.Generator, texture_sizes: list[int]) -> list[dict]:
    width, height = params.resolution
    pool = params.texture_pool_size
    n = params.objects_per_frame
    cluster_count = math.ceil(n / params.sharing_cluster_size) if n else 0
    subset_size = min(2, pool)
    cluster_textures = [
        [int(t) for t in rng.choice(pool, size=subset_size, replace=False)] for _ in range(cluster_count)
    ]

    max_w = min(width, max(2, int(width * params.max_object_extent)))
    max_h = min(height, max(2, int(height * params.max_object_extent)))
    min_w = max(1, max_w // 8)
    min_h = max(1, max_h // 8)

    objects = []
    for i in range(n):
        subset = cluster_textures[i // params.sharing_cluster_size]
        triangles = _draw_triangles(rng, params.triangle_distribution)
        vertices = max(math.ceil(triangles / 3), int(triangles * rng.uniform(0.6, 1.1)))

        refs: dict[int, int] = {}
        primary = subset[0]
        refs[primary] = max(1, int(texture_sizes[primary] * rng.uniform(0.1, 0.3)))
        if len(subset) > 1 and rng.random() < 0.6:
            secondary = subset[1]
            refs[secondary] = min(texture_sizes[secondary], max(1, int(refs[primary] * rng.uniform(0.15, 0.35))))
        if rng.random() < 0.3:
            private = int(rng.integers(0, pool))
            if private not in refs:
                refs[private] = min(texture_sizes[private], max(1, int(refs[primary] * rng.uniform(0.05, 0.15))))

        bw = int(rng.integers(min_w, max_w + 1))
        bh = int(rng.integers(min_h, max_h + 1))
        x0 = int(rng.integers(0, width - bw + 1))
        y0 = int(rng.integers(0, height - bh + 1))
        coverage = rng.uniform(0.35, 0.9)
        # Eye disparity: the right-eye copy is shifted by the non-overlapping share.
        disparity = int(round((1.0 - params.stereo_overlap_fraction) * bw))
        rx0 = min(max(0, x0 - disparity), width - bw)

        deps: list[int] = []
        if i > 0 and rng.random() < params.dependency_fraction:
            deps.append(int(rng.integers(0, i)))

        objects.append({
            "vertices": vertices,
            "triangles": triangles,
            "pixels": int(bw * bh * coverage),
            "box": (x0, y0, bw, bh),
            "rx0": rx0,
            "refs": refs,
            "deps": deps,
        })
    return objects


def _jittered(base: dict, rng: np.random.Generator, width: int, height: int, first: bool) -> tuple[int, Rect, Rect]:
    x0, y0, bw, bh = base["box"]
    rx0 = base["rx0"]
    pixels = base["pixels"]
    if not first:
        dx = int(rng.integers(-2, 3))
        dy = int(rng.integers(-2, 3))
        x0 = min(max(0, x0 + dx), width - bw)
        rx0 = min(max(0, rx0 + dx), width - bw)
        y0 = min(max(0, y0 + dy), height - bh)
        pixels = min(bw * bh, int(pixels * rng.uniform(0.9, 1.1)))
    left = (x0, y0, x0 + bw, y0 + bh)
    right = (width + rx0, y0, width + rx0 + bw, y0 + bh)
    return pixels, left, right


def generate_scene(params: Union[SceneParams, Mapping]) -> Trace:
    """Deterministic synthetic stereo scene for the given parameters."""
    params = _validated(params)
    rng = np.random.default_rng(params.seed)
    width, height = params.resolution
    lo, hi = params.texture_bytes_range
    texture_sizes = [int(s) for s in rng.integers(lo, hi + 1, size=params.texture_pool_size)]

    base = _base_objects(params, rng, texture_sizes)
    n = params.objects_per_frame
    used: set[int] = set()
    frames = []
    for f in range(params.frames):
        objects = []
        for i, spec in enumerate(base):
            pixels, left, right = _jittered(spec, rng, width, height, first=(f == 0))
            used.update(spec["refs"])
            objects.append(DrawObject(
                object_id=f * n + i,
                vertex_count=spec["vertices"],
                triangle_count=spec["triangles"],
                pixels_per_view=pixels,
                bbox_left=left,
                bbox_right=right,
                textures=tuple(TextureRef(texture_id=t, bytes=b) for t, b in sorted(spec["refs"].items())),
                depends_on=tuple(f * n + d for d in spec["deps"]),
            ))
        frames.append(Frame(frame_id=f, width=width, height=height, objects=tuple(objects)))

    trace = Trace(
        width=width,
        height=height,
        frames=tuple(frames),
        texture_table={t: texture_sizes[t] for t in sorted(used)},
        bytes_per_fragment=params.bytes_per_fragment,
        metadata={"generator": "rrsim-scene", "seed": str(params.seed)},
    )
    return validate_trace(trace)


def sharing_summary(trace: Trace) -> dict[str, float]:
    """Counts printed by `gen`: objects, triangles, texture bytes and sharing."""
    objects = [obj for frame in trace.frames for obj in frame.objects]
    users: dict[int, int] = {}
    for obj in objects:
        for ref in obj.textures:
            users[ref.texture_id] = users.get(ref.texture_id, 0) + 1
    shared = sum(1 for count in users.values() if count > 1)
    return {
        "frames": len(trace.frames),
        "objects": len(objects),
        "triangles": sum(obj.triangle_count for obj in objects),
        "texture_bytes": sum(trace.texture_table.values()),
        "textures": len(trace.texture_table),
        "shared_textures": shared,
        "mean_users_per_texture": (sum(users.values()) / len(users)) if users else 0.0,
    }
