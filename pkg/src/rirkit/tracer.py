"""Specular reflection path enumeration via the image-source method.

For a surface sequence (s_1 .. s_k) the source is mirrored across each
surface in turn; the candidate is kept iff the backward walk from the
listener toward each successive image yields reflection points inside every
polygon, with every leg unoccluded. On top of the exhaustive search up to
``max_order``, alternating bounce ladders between parallel wall pairs are
traced to a much higher order at linear cost ("axial boosting").

Tracing is pure and reentrant; results are deterministic (sorted by arrival
time, then surface ids). Path sets are precomputed once per source/listener
pair and treated as constants during fitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Room, Surface, points_in_polygon

MAX_TRACE_ORDER = 8
OCCLUSION_ENDPOINT_TOL = 1e-6


@dataclass(frozen=True)
class PathRecord:
    """One specular path from source to listener.

    ``out_direction`` is the unit vector along the first leg, leaving the
    source. ``in_direction`` points from the listener toward the last
    reflection point (or the source, for the direct path), i.e. the direction
    the wavefront arrives *from* -- the convention used for HRIR lookup.
    """

    length: float
    surfaces: tuple[int, ...]
    out_direction: np.ndarray
    in_direction: np.ndarray
    arrival_time: float
    points: np.ndarray  # (k, 3) reflection points, empty for the direct path

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "surfaces": list(self.surfaces),
            "out_direction": self.out_direction.tolist(),
            "in_direction": self.in_direction.tolist(),
            "arrival_time": self.arrival_time,
            "points": self.points.tolist(),
        }

    @staticmethod
    def from_dict(doc: dict) -> "PathRecord":
        return PathRecord(
            length=float(doc["length"]),
            surfaces=tuple(int(s) for s in doc["surfaces"]),
            out_direction=np.asarray(doc["out_direction"], dtype=np.float64),
            in_direction=np.asarray(doc["in_direction"], dtype=np.float64),
            arrival_time=float(doc["arrival_time"]),
            points=np.asarray(doc["points"], dtype=np.float64).reshape(-1, 3),
        )


@dataclass(frozen=True)
class PathSet:
    """All traced paths for one source/listener pair."""

    paths: tuple[PathRecord, ...]
    max_order: int
    axial_order: int = 0

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))

    def __len__(self) -> int:
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sequence_images(room: Room, source: np.ndarray, seqs: np.ndarray) -> np.ndarray:
    """Cumulative mirror images of the source: (m, k) ids -> (m, k, 3)."""
    m, k = seqs.shape
    imgs = np.empty((m, k, 3), dtype=np.float64)
    current = np.broadcast_to(source, (m, 3)).copy()
    for j in range(k):
        ids = seqs[:, j]
        for sid in np.unique(ids):
            s = room.surface_by_id(int(sid))
            rows = ids == sid
            pts = current[rows]
            d = (pts - s.origin) @ s.normal
            current[rows] = pts - 2.0 * d[:, None] * s.normal
        imgs[:, j, :] = current
    return imgs


def _legs_occluded(room: Room, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Whether any surface blocks segments a[i]->b[i]. Hits within
    OCCLUSION_ENDPOINT_TOL meters of either endpoint are ignored, so legs
    terminating on their own reflection surfaces do not self-occlude.
    """
    seg = b - a
    seg_len = np.linalg.norm(seg, axis=1)
    occluded = np.zeros(len(a), dtype=bool)
    for s in room.surfaces:
        denom = seg @ s.normal
        numer = (s.origin - a) @ s.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = numer / denom
        cand = (
            (np.abs(denom) > 1e-14)
            & (t * seg_len > OCCLUSION_ENDPOINT_TOL)
            & ((1.0 - t) * seg_len > OCCLUSION_ENDPOINT_TOL)
        )
        cand &= ~occluded
        if not cand.any():
            continue
        pts = a[cand] + t[cand, None] * seg[cand]
        inside = points_in_polygon(pts, s)
        idx = np.flatnonzero(cand)
        occluded[idx[inside]] = True
    return occluded


def _validate_sequences(
    room: Room,
    source: np.ndarray,
    listener: np.ndarray,
    seqs: np.ndarray,
) -> list[PathRecord]:
    """Run the backward image-source walk over candidate sequences (m, k)."""
    if seqs.size == 0:
        return []
    m, k = seqs.shape
    imgs = _sequence_images(room, source, seqs)
    pts = np.empty((m, k, 3), dtype=np.float64)
    walk = np.broadcast_to(listener, (m, 3)).copy()
    alive = np.arange(m)
    for j in range(k - 1, -1, -1):
        target = imgs[alive, j, :]
        ids = seqs[alive, j]
        current = walk[alive]
        ok = np.zeros(len(alive), dtype=bool)
        hit = np.empty((len(alive), 3), dtype=np.float64)
        for sid in np.unique(ids):
            s = room.surface_by_id(int(sid))
            rows = ids == sid
            a = current[rows]
            b = target[rows]
            seg = b - a
            denom = seg @ s.normal
            numer = (s.origin - a) @ s.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = numer / denom
            good = (np.abs(denom) > 1e-14) & (t > 1e-12) & (t < 1.0 - 1e-12)
            x = a + t[:, None] * seg
            good &= points_in_polygon(x, s)
            sub = np.flatnonzero(rows)
            ok[sub] = good
            hit[sub] = x
        keep = np.flatnonzero(ok)
        pts[alive[keep], j, :] = hit[keep]
        walk[alive[keep]] = hit[keep]
        alive = alive[keep]
        if alive.size == 0:
            return []

    # Occlusion over all k+1 legs of the surviving candidates.
    n_alive = alive.size
    blocked = np.zeros(n_alive, dtype=bool)
    chain = np.concatenate(
        [
            np.broadcast_to(source, (n_alive, 1, 3)),
            pts[alive],
            np.broadcast_to(listener, (n_alive, 1, 3)),
        ],
        axis=1,
    )
    for j in range(k + 1):
        todo = ~blocked
        if not todo.any():
            break
        idx = np.flatnonzero(todo)
        occ = _legs_occluded(room, chain[idx, j, :], chain[idx, j + 1, :])
        blocked[idx[occ]] = True

    records = []
    for row in alive[~blocked]:
        rpts = pts[row]
        length = float(np.linalg.norm(imgs[row, k - 1, :] - listener))
        records.append(
            PathRecord(
                length=length,
                surfaces=tuple(int(s) for s in seqs[row]),
                out_direction=_unit(rpts[0] - source),
                in_direction=_unit(rpts[-1] - listener),
                arrival_time=length / room.speed_of_sound,
                points=rpts.copy(),
            )
        )
    return records


def _direct_path(room: Room, source: np.ndarray, listener: np.ndarray) -> Optional[PathRecord]:
    occ = _legs_occluded(room, source[None, :], listener[None, :])[0]
    if occ:
        return None
    length = float(np.linalg.norm(listener - source))
    return PathRecord(
        length=length,
        surfaces=(),
        out_direction=_unit(listener - source),
        in_direction=_unit(source - listener),
        arrival_time=length / room.speed_of_sound,
        points=np.empty((0, 3), dtype=np.float64),
    )


def _sort_key(p: PathRecord):
    return (p.arrival_time, p.surfaces)


def trace_paths(
    room: Room, source, listener, max_order: int
) -> PathSet:
    """Enumerate all valid specular paths up to ``max_order`` reflections.

    Considers every surface permutation with repetition (immediate repeats
    skipped); cost grows as S*(S-1)^(order-1), so orders above
    MAX_TRACE_ORDER are rejected -- axial boosting covers higher orders
    between parallel walls.
    """
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    if max_order > MAX_TRACE_ORDER:
        raise ValueError(
            f"max_order {max_order} > {MAX_TRACE_ORDER}; use axial boosting for high orders"
        )
    if not room.contains_point(source):
        raise ValueError("source lies outside the room bounding box")
    if not room.contains_point(listener):
        raise ValueError("listener lies outside the room bounding box")

    records = []
    direct = _direct_path(room, source, listener)
    if direct is not None:
        records.append(direct)

    ids = np.array([s.id for s in room.surfaces], dtype=np.int64)
    level = ids[:, None]  # (S, 1)
    for order in range(1, max_order + 1):
        if order > 1:
            last = level[:, -1]
            ext = [
                np.column_stack([level[last != sid], np.full((last != sid).sum(), sid)])
                for sid in ids
            ]
            level = np.vstack([e for e in ext if len(e)]) if ext else np.empty((0, order))
        if level.size:
            records.extend(_validate_sequences(room, source, listener, level))

    records.sort(key=_sort_key)
    return PathSet(paths=tuple(records), max_order=max_order)


def axial_boost(
    room: Room,
    source,
    listener,
    pairs: Sequence[tuple[int, int]],
    axial_order: int,
    max_order: int,
) -> list[PathRecord]:
    """Alternating bounce paths between parallel wall pairs for orders
    max_order+1 .. axial_order (lower orders are already covered by
    :func:`trace_paths`). Cost is linear in ``axial_order``.
    """
    source = np.asarray(source, dtype=np.float64)
    listener = np.asarray(listener, dtype=np.float64)
    if axial_order < 0:
        raise ValueError("axial_order must be >= 0")
    records = []
    for a, b in pairs:
        for order in range(max_order + 1, axial_order + 1):
            seqs = np.empty((2, order), dtype=np.int64)
            seqs[0] = [a if j % 2 == 0 else b for j in range(order)]
            seqs[1] = [b if j % 2 == 0 else a for j in range(order)]
            records.extend(_validate_sequences(room, source, listener, seqs))
    records.sort(key=_sort_key)
    return records


def merge_and_annotate(base: PathSet, axial: Iterable[PathRecord]) -> PathSet:
    """Deduplicated union of base and axial paths, sorted by arrival time."""
    seen = {}
    for rec in list(base.paths) + list(axial):
        if rec.surfaces not in seen:
            seen[rec.surfaces] = rec
    merged = sorted(seen.values(), key=_sort_key)
    axial_order = max((len(r.surfaces) for r in merged), default=base.max_order)
    return PathSet(
        paths=tuple(merged),
        max_order=base.max_order,
        axial_order=max(axial_order, base.max_order),
    )


def trace_all(
    room: Room,
    source,
    listener,
    max_order: int,
    axial_order: int = 0,
) -> PathSet:
    """trace_paths + axial_boost + merge in one call."""
    from .geometry import detect_parallel_pairs

    base = trace_paths(room, source, listener, max_order)
    axial = []
    if axial_order > max_order:
        pairs = detect_parallel_pairs(room)
        axial = axial_boost(room, source, listener, pairs, axial_order, max_order)
    return merge_and_annotate(base, axial)


def dump_paths(paths: Iterable[PathRecord], path: str | Path) -> None:
    """Write one JSON object per line, for debugging and oracle comparison."""
    with open(path, "w") as f:
        for rec in paths:
            f.write(json.dumps(rec.to_dict()) + "\n")


def load_paths(path: str | Path) -> list[PathRecord]:
    with open(path) as f:
        return [PathRecord.from_dict(json.loads(line)) for line in f if line.strip()]
