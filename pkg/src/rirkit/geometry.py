"""Planar room geometry: convex polygonal surfaces, mirror reflections,
parallel-pair detection, and segment/polygon intersection tests.

All values are immutable after construction, so rooms can be shared freely
across worker threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

COPLANAR_TOL = 1e-6
PARALLEL_ANGLE_TOL = 1e-4
ENDPOINT_TOL = 1e-9

DEFAULT_SPEED_OF_SOUND = 343.0


class GeometryError(ValueError):
    """Raised when a surface or room fails validation."""


@dataclass(frozen=True)
class Surface:
    """A convex planar polygon with a unit normal derived from vertex winding.

    Surfaces are two-sided for tracing purposes; the winding only fixes the
    sign of ``normal``.
    """

    id: int
    vertices: np.ndarray  # (n, 3) float64, ordered
    name: str = ""
    normal: np.ndarray = field(init=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] < 3:
            raise GeometryError(f"surface {self.id!r}: need at least 3 vertices of dim 3")
        verts = verts.copy()
        verts.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        normal = _polygon_normal(verts)
        object.__setattr__(self, "normal", normal)
        _check_coplanar(verts, normal, self.id)
        _check_convex(verts, normal, self.id)

    @property
    def origin(self) -> np.ndarray:
        """A point on the surface plane."""
        return self.vertices[0]

    def plane_offset(self, p: np.ndarray) -> float:
        """Signed distance of ``p`` from the surface plane."""
        return float(np.dot(np.asarray(p, dtype=np.float64) - self.origin, self.normal))

    def contains(self, p: np.ndarray, tol: float = COPLANAR_TOL) -> bool:
        """True if ``p`` lies on the plane (within ``tol``) and inside the polygon."""
        p = np.asarray(p, dtype=np.float64)
        if abs(self.plane_offset(p)) > tol:
            return False
        return bool(points_in_polygon(p[None, :], self)[0])


@dataclass(frozen=True)
class Room:
    """A set of surfaces plus the speed of sound used for arrival times."""

    surfaces: tuple[Surface, ...]
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        ids = [s.id for s in self.surfaces]
        if len(set(ids)) != len(ids):
            raise GeometryError("surface ids must be unique")
        if self.speed_of_sound <= 0:
            raise GeometryError("speed_of_sound must be positive")

    @property
    def bounding_box(self) -> Optional[tuple[np.ndarray, np.ndarray]]:
        """Axis-aligned (min, max) extent over all vertices; None if empty."""
        if not self.surfaces:
            return None
        allv = np.vstack([s.vertices for s in self.surfaces])
        return allv.min(axis=0), allv.max(axis=0)

    def surface_by_id(self, sid: int) -> Surface:
        for s in self.surfaces:
            if s.id == sid:
                return s
        raise KeyError(f"no surface with id {sid}")

    def contains_point(self, p: np.ndarray, pad: float = 1e-6) -> bool:
        """True if ``p`` is inside the bounding box. Axes with no extent
        (open scenes such as a lone floor plane) are unconstrained; an empty
        room contains everything."""
        box = self.bounding_box
        if box is None:
            return True
        p = np.asarray(p, dtype=np.float64)
        lo, hi = box
        proper = (hi - lo) > 1e-9
        return bool(
            np.all(p[proper] >= lo[proper] - pad) and np.all(p[proper] <= hi[proper] + pad)
        )


def _polygon_normal(verts: np.ndarray) -> np.ndarray:
    # Newell's method is robust to near-collinear leading vertices.
    v = verts
    nxt = np.roll(v, -1, axis=0)
    n = np.array([
        np.sum((v[:, 1] - nxt[:, 1]) * (v[:, 2] + nxt[:, 2])),
        np.sum((v[:, 2] - nxt[:, 2]) * (v[:, 0] + nxt[:, 0])),
        np.sum((v[:, 0] - nxt[:, 0]) * (v[:, 1] + nxt[:, 1])),
    ])
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise GeometryError("degenerate polygon: vertices are collinear")
    n = n / norm
    n.flags.writeable = False
    return n


def _check_coplanar(verts: np.ndarray, normal: np.ndarray, sid) -> None:
    offsets = (verts - verts[0]) @ normal
    worst = float(np.abs(offsets).max())
    if worst > COPLANAR_TOL:
        raise GeometryError(
            f"surface {sid!r}: vertices deviate {worst:.2e} m from common plane "
            f"(tolerance {COPLANAR_TOL:.0e})"
        )


def _check_convex(verts: np.ndarray, normal: np.ndarray, sid) -> None:
    n = len(verts)
    edges = np.roll(verts, -1, axis=0) - verts
    for i in range(n):
        cross = np.cross(edges[i], edges[(i + 1) % n])
        if np.dot(cross, normal) < -1e-9:
            raise GeometryError(f"surface {sid!r}: polygon is not convex")


def mirror_point(p: np.ndarray, surface: Surface) -> np.ndarray:
    """Reflect ``p`` across the plane of ``surface``.

    Involutive: applying twice returns the original point.
    """
    p = np.asarray(p, dtype=np.float64)
    n = surface.normal
    return p - 2.0 * np.dot(p - surface.origin, n) * n


def mirror_points(pts: np.ndarray, surface: Surface) -> np.ndarray:
    """Vectorized :func:`mirror_point` for an (m, 3) array."""
    pts = np.asarray(pts, dtype=np.float64)
    n = surface.normal
    d = (pts - surface.origin) @ n
    return pts - 2.0 * d[:, None] * n


def detect_parallel_pairs(room: Room) -> list[tuple[int, int]]:
    """All unordered id pairs of surfaces with parallel (or anti-parallel)
    normals lying in distinct planes.

    Returned sorted by id pair for determinism.
    """
    pairs = []
    surfs = room.surfaces
    for i in range(len(surfs)):
        for j in range(i + 1, len(surfs)):
            a, b = surfs[i], surfs[j]
            sin_angle = np.linalg.norm(np.cross(a.normal, b.normal))
            if sin_angle > PARALLEL_ANGLE_TOL:
                continue
            if abs(a.plane_offset(b.origin)) <= COPLANAR_TOL:
                continue  # same plane
            pairs.append(tuple(sorted((a.id, b.id))))
    return sorted(pairs)


def points_in_polygon(pts: np.ndarray, surface: Surface, edge_tol: float = 1e-9) -> np.ndarray:
    """Vectorized 2D containment test for (m, 3) points assumed on the plane.

    Projects along the dominant normal axis and uses half-plane tests
    (polygon is convex). Points within ``edge_tol`` of an edge count as inside.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    axis = int(np.argmax(np.abs(surface.normal)))
    keep = [k for k in range(3) if k != axis]
    p2 = pts[:, keep]
    v2 = surface.vertices[:, keep]
    # Winding sign of the projected polygon, via the shoelace sum.
    nxt = np.roll(v2, -1, axis=0)
    area2 = np.sum(v2[:, 0] * nxt[:, 1] - nxt[:, 0] * v2[:, 1])
    sign = 1.0 if area2 > 0 else -1.0
    inside = np.ones(len(p2), dtype=bool)
    nv = len(v2)
    for i in range(nv):
        a = v2[i]
        e = v2[(i + 1) % nv] - a
        cross = e[0] * (p2[:, 1] - a[1]) - e[1] * (p2[:, 0] - a[0])
        inside &= sign * cross >= -edge_tol * max(1.0, np.linalg.norm(e))
    return inside


def segment_plane_intersection(
    a: np.ndarray, b: np.ndarray, surface: Surface
) -> Optional[tuple[float, np.ndarray]]:
    """Parametric intersection of segment a->b with the surface plane.

    Returns (t, point) with t in [0, 1], or None if the segment is parallel
    to the plane or crosses outside [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = surface.normal
    denom = np.dot(b - a, n)
    if abs(denom) < 1e-14:
        return None
    t = np.dot(surface.origin - a, n) / denom
    if t < 0.0 or t > 1.0:
        return None
    return float(t), a + t * (b - a)


def segment_intersect(
    a: np.ndarray, b: np.ndarray, surface: Surface, endpoint_tol: float = ENDPOINT_TOL
) -> Optional[np.ndarray]:
    """Intersection point of the open segment (a, b) with polygon ``surface``.

    Endpoints lying on the surface (within ``endpoint_tol`` meters) do not
    count. Returns None when there is no crossing.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        raise ValueError("segment endpoints must differ")
    hit = segment_plane_intersection(a, b, surface)
    if hit is None:
        return None
    t, point = hit
    seg_len = np.linalg.norm(b - a)
    if t * seg_len <= endpoint_tol or (1.0 - t) * seg_len <= endpoint_tol:
        return None
    if not points_in_polygon(point[None, :], surface)[0]:
        return None
    return point


# ---------------------------------------------------------------------------
# Room file format: JSON with named surfaces as vertex arrays in meters.
#
# {
#   "speed_of_sound": 343.0,          // optional
#   "surfaces": [
#     {"id": 0, "name": "floor", "vertices": [[0,0,0], [4,0,0], [4,5,0], [0,5,0]]},
#     ...
#   ]
# }
#
# "id" is optional; surfaces without one get their list index.
# ---------------------------------------------------------------------------


def room_from_dict(doc: dict) -> Room:
    surfaces = []
    for idx, sdoc in enumerate(doc.get("surfaces", [])):
        surfaces.append(
            Surface(
                id=int(sdoc.get("id", idx)),
                vertices=np.asarray(sdoc["vertices"], dtype=np.float64),
                name=str(sdoc.get("name", f"surface_{idx}")),
            )
        )
    return Room(
        surfaces=tuple(surfaces),
        speed_of_sound=float(doc.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND)),
    )


def room_to_dict(room: Room) -> dict:
    return {
        "speed_of_sound": room.speed_of_sound,
        "surfaces": [
            {"id": s.id, "name": s.name, "vertices": s.vertices.tolist()}
            for s in room.surfaces
        ],
    }


def load_room(path: str | Path) -> Room:
    """Load a room geometry JSON file. Invalid geometry raises GeometryError."""
    with open(path) as f:
        return room_from_dict(json.load(f))


def save_room(room: Room, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(room_to_dict(room), f, indent=2)


def shoebox_room(
    lx: float,
    ly: float,
    lz: float,
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND,
) -> Room:
    """Axis-aligned box [0,lx]x[0,ly]x[0,lz] with six named walls."""
    corners = lambda pts: np.array(pts, dtype=np.float64)
    walls: Sequence[tuple[str, np.ndarray]] = [
        ("floor", corners([[0, 0, 0], [lx, 0, 0], [lx, ly, 0], [0, ly, 0]])),
        ("ceiling", corners([[0, 0, lz], [0, ly, lz], [lx, ly, lz], [lx, 0, lz]])),
        ("wall_x0", corners([[0, 0, 0], [0, ly, 0], [0, ly, lz], [0, 0, lz]])),
        ("wall_x1", corners([[lx, 0, 0], [lx, 0, lz], [lx, ly, lz], [lx, ly, 0]])),
        ("wall_y0", corners([[0, 0, 0], [0, 0, lz], [lx, 0, lz], [lx, 0, 0]])),
        ("wall_y1", corners([[0, ly, 0], [lx, ly, 0], [lx, ly, lz], [0, ly, lz]])),
    ]
    surfaces = tuple(
        Surface(id=i, vertices=v, name=name) for i, (name, v) in enumerate(walls)
    )
    return Room(surfaces=surfaces, speed_of_sound=speed_of_sound)
