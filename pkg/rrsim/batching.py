"""Object grouping middleware: texture sharing level and TSL-driven batches."""

from dataclasses import dataclass, field
from typing import Mapping

from .errors import DomainError
from .pipeline import ZERO_SIGNALS, Signals, WorkSlice, slice_signals
from .trace import DrawObject, Frame


@dataclass
class Batch:
    batch_id: int
    members: list[int]
    union_textures: dict[int, int]
    total_triangles: int
    total_vertices: int
    total_pixels_both_views: int
    dependency_merged: bool = False
    # TSL against the union footprint at each sharing merge, in merge order.
    merge_tsl: list[float] = field(default_factory=list)

    @classmethod
    def rooted_at(cls, batch_id: int, obj: DrawObject) -> "Batch":
        return cls(
            batch_id=batch_id,
            members=[obj.object_id],
            union_textures=obj.texture_map(),
            total_triangles=obj.triangle_count,
            total_vertices=obj.vertex_count,
            total_pixels_both_views=2 * obj.pixels_per_view,
        )

    def absorb(self, obj: DrawObject) -> None:
        self.members.append(obj.object_id)
        for texture_id, nbytes in obj.texture_map().items():
            self.union_textures[texture_id] = max(nbytes, self.union_textures.get(texture_id, 0))
        self.total_triangles += obj.triangle_count
        self.total_vertices += obj.vertex_count
        self.total_pixels_both_views += 2 * obj.pixels_per_view


def tsl(root_textures: Mapping[int, int], target_textures: Mapping[int, int]) -> float:
    """Sum of P_r(t)*P_n(t) over shared textures divided by the sum of P_r(t), byte-weighted."""
    if not root_textures or not target_textures:
        raise DomainError("texture sharing level needs two non-empty footprints")
    shared = root_textures.keys() & target_textures.keys()
    if not shared:
        return 0.0
    root_total = sum(root_textures.values())
    target_total = sum(target_textures.values())
    numerator = 0.0
    denominator = 0.0
    for t in sorted(shared):
        p_root = root_textures[t] / root_total
        numerator += p_root * (target_textures[t] / target_total)
        denominator += p_root
    return numerator / denominator


def build_batches(
    frame: Frame,
    window: int = 64,
    triangle_limit: int = 4096,
    threshold: float = 0.5,
) -> list[Batch]:
    queue = list(frame.objects)
    batches: list[Batch] = []

    while queue:
        root = queue.pop(0)
        batch = Batch.rooted_at(len(batches), root)
        members = {root.object_id}
        pending = {obj.object_id for obj in queue}

        i = 0
        scanned = 0
        while i < len(queue) and scanned < window:
            candidate = queue[i]
            scanned += 1
            deps = set(candidate.depends_on)
            waiting_on = (deps - members) & pending

            if waiting_on:
                i += 1
                continue
            if deps & members:
                batch.absorb(candidate)
                batch.dependency_merged = True
            else:
                target = candidate.texture_map()
                if not target:
                    i += 1
                    continue
                level = tsl(batch.union_textures, target) if batch.union_textures else 0.0
                if level <= threshold:
                    i += 1
                    continue
                if batch.total_triangles + candidate.triangle_count > triangle_limit:
                    break
                batch.absorb(candidate)
                batch.merge_tsl.append(level)

            members.add(candidate.object_id)
            pending.discard(candidate.object_id)
            queue.pop(i)

        batches.append(batch)
    return batches


def batch_signals(batch: Batch, objects: Mapping[int, DrawObject], smp_enabled: bool = True) -> Signals:
    if not batch.members:
        raise DomainError(f"batch {batch.batch_id} has no members")
    total = ZERO_SIGNALS
    for object_id in batch.members:
        total = total + slice_signals(objects[object_id], WorkSlice(object_id, views="both"), smp_enabled)
    return total


def objects_by_id(frame: Frame) -> dict[int, DrawObject]:
    return {obj.object_id: obj for obj in frame.objects}
