"""
Triangle surfaces and the queries the losses and metrics run against them.

Meshes are immutable once built. Heavier per-mesh structures (the trimesh
view, broad-phase trees) are built lazily on first use and then shared
read-only, so concurrent queries over one mesh are safe.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from scipy import ndimage
from scipy.spatial import cKDTree

from errors import CorpusError, InvalidInputError, ParseError, TopologyError

logger = logging.getLogger(__name__)

AREA_EPS = 1e-14
WINDING_BUDGET = 2_000_000
ORIENT_EXACT_REL = 1e-10


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    confidence: Optional[np.ndarray] = None
    fan_triangulated: bool = False

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("mesh vertices must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidInputError("triangle index out of range")
        c = np.ones(len(v)) if self.confidence is None else np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if c.shape[0] != len(v) or np.any(c < 0.0) or np.any(c > 1.0):
            raise InvalidInputError("confidence must hold one value in [0, 1] per vertex")
        if t.size:
            areas = triangle_areas(v[t])
            if np.any(areas <= AREA_EPS):
                bad = int(np.flatnonzero(areas <= AREA_EPS)[0])
                raise InvalidInputError(f"triangle {bad} is degenerate (zero area)")
        v.setflags(write=False)
        t.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "confidence", c)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity and confidence, new positions."""
        return TriMesh(vertices, self.triangles, self.confidence)

    @cached_property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)

    @cached_property
    def face_normals(self) -> np.ndarray:
        return trimesh.triangles.normals(self.corners)[0]

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        return np.asarray(self.trimesh.vertex_normals)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted vertex pairs."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def open_edges(self) -> List[Tuple[int, int]]:
        """Edges not shared by exactly two triangles with opposite orientation."""
        directed = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        keys, counts = np.unique(np.sort(directed, axis=1), axis=0, return_counts=True)
        bad = {tuple(k) for k in keys[counts != 2]}
        forward = {tuple(d) for d in directed}
        for a, b in keys[counts == 2]:
            if (a, b) not in forward or (b, a) not in forward:
                bad.add((int(a), int(b)))
        return sorted((int(a), int(b)) for a, b in bad)

    def is_watertight(self) -> bool:
        return self.n_triangles > 0 and not self.open_edges()

    def require_watertight(self, what: str = "mesh") -> None:
        if self.n_triangles == 0:
            raise TopologyError(f"{what} has no triangles")
        bad = self.open_edges()
        if bad:
            raise TopologyError(f"{what} is not watertight", bad)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def area(self) -> float:
        return float(triangle_areas(self.corners).sum())


def triangle_areas(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


# ============================================================================
# OBJ I/O
# ============================================================================

def load_obj(path: Union[str, Path]) -> TriMesh:
    """
    Read `v` and `f` records. Polygons are fan-triangulated (flagged on the
    result), `v x y z c c c` carries the per-vertex confidence.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise CorpusError(f"cannot read {path}: {e}") from e

    vertices: List[List[float]] = []
    confidence: List[float] = []
    faces: List[List[int]] = []
    fanned = False
    has_conf = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) not in (3, 4, 6):
                raise ParseError(f"vertex record needs 3 or 6 values, got {len(rest)}", lineno, str(path))
            try:
                vals = [float(x) for x in rest]
            except ValueError:
                raise ParseError(f"bad vertex record {raw!r}", lineno, str(path)) from None
            vertices.append(vals[:3])
            if len(vals) == 6:
                has_conf = True
                confidence.append(vals[3])
            else:
                confidence.append(1.0)
        elif tag == "f":
            if len(rest) < 3:
                raise ParseError("face needs at least 3 vertices", lineno, str(path))
            try:
                idx = [int(tok.split("/")[0]) for tok in rest]
            except ValueError:
                raise ParseError(f"bad face record {raw!r}", lineno, str(path)) from None
            n = len(vertices)
            idx = [i - 1 if i > 0 else n + i for i in idx]
            if any(i < 0 or i >= n for i in idx):
                raise ParseError("face references an undefined vertex", lineno, str(path))
            if len(idx) > 3:
                fanned = True
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        # vt, vn, o, g, s, usemtl and friends carry nothing we need

    if fanned:
        logger.warning(f"⚠ {path.name}: polygon faces fan-triangulated")
    v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    t = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(t):
        keep = triangle_areas(v[t]) > AREA_EPS
        if not np.all(keep):
            logger.warning(f"⚠ {path.name}: dropped {int((~keep).sum())} degenerate triangles")
            t = t[keep]
    conf = np.clip(np.array(confidence), 0.0, 1.0) if has_conf else None
    return TriMesh(v, t, conf, fan_triangulated=fanned)


def save_obj(mesh: TriMesh, path: Union[str, Path], with_confidence: Optional[bool] = None) -> Path:
    path = Path(path)
    if with_confidence is None:
        with_confidence = bool(np.any(mesh.confidence != 1.0))
    lines = []
    for i, v in enumerate(mesh.vertices):
        if with_confidence:
            c = mesh.confidence[i]
            lines.append(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f} {c:.6f} {c:.6f} {c:.6f}")
        else:
            lines.append(f"v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}")
    lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise CorpusError(f"cannot write {path}: {e}") from e
    return path


# ============================================================================
# SURFACE SAMPLING
# ============================================================================

@dataclass(frozen=True, eq=False)
class SurfaceSampleSet:
    points: np.ndarray
    normals: np.ndarray
    triangle_ids: np.ndarray
    barycentric: np.ndarray
    confidence: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "SurfaceSampleSet":
        return SurfaceSampleSet(
            self.points[idx], self.normals[idx], self.triangle_ids[idx],
            self.barycentric[idx], self.confidence[idx], self.seed,
        )


def sample_surface(mesh: TriMesh, n: int, seed: int, vertex_mode: bool = False) -> SurfaceSampleSet:
    """
    Area-weighted samples, or the mesh vertices themselves when `vertex_mode`
    is set and `n` equals the vertex count.
    """
    if mesh.n_triangles == 0:
        raise InvalidInputError("cannot sample an empty mesh")
    if n < 1:
        raise InvalidInputError("sample count must be >= 1")

    if vertex_mode and n == mesh.n_vertices:
        return _vertex_samples(mesh, seed)

    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh.corners)
    tri = rng.choice(mesh.n_triangles, size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    corners = mesh.corners[tri]
    points = np.einsum("ni,nij->nj", bary, corners)
    conf = np.einsum("ni,ni->n", bary, mesh.confidence[mesh.triangles[tri]])
    return SurfaceSampleSet(points, mesh.face_normals[tri], tri, bary, conf, seed)


def _vertex_samples(mesh: TriMesh, seed: int) -> SurfaceSampleSet:
    # first triangle touching each vertex, with the matching unit barycentric
    flat = mesh.triangles.reshape(-1)
    order = np.argsort(flat, kind="stable")
    first = np.full(mesh.n_vertices, -1, dtype=np.int64)
    uniq, pos = np.unique(flat[order], return_index=True)
    first[uniq] = order[pos]
    if np.any(first < 0):
        raise InvalidInputError(f"vertex {int(np.flatnonzero(first < 0)[0])} belongs to no triangle")
    tri = first // 3
    bary = np.zeros((mesh.n_vertices, 3))
    bary[np.arange(mesh.n_vertices), first % 3] = 1.0
    return SurfaceSampleSet(
        mesh.vertices.copy(), mesh.vertex_normals.copy(), tri, bary, mesh.confidence.copy(), seed,
    )


# ============================================================================
# DISTANCE QUERIES
# ============================================================================

class SurfaceDistance:
    """
    Exact point-to-surface distances.

    Triangle centroids go into a KD-tree. The distance to the nearest centroid
    bounds the answer from above, so only triangles whose centroid lies within
    that bound plus the largest centroid-to-corner radius can hold the
    closest point; those candidates are resolved exactly.
    """

    def __init__(self, mesh: TriMesh):
        if mesh.n_triangles == 0:
            raise InvalidInputError("distance query against an empty mesh")
        self.mesh = mesh
        self.centroids = mesh.corners.mean(axis=1)
        self.radius = float(np.linalg.norm(mesh.corners - self.centroids[:, None, :], axis=2).max())
        self.tree = cKDTree(self.centroids)

    def query(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distances (n,), closest points (n, 3) and triangle ids (n,)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            return np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        upper, _ = self.tree.query(p)
        candidates = self.tree.query_ball_point(p, upper + self.radius + 1e-9)
        counts = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(p))
        pt_idx = np.repeat(np.arange(len(p)), counts)
        tri_idx = np.fromiter((i for c in candidates for i in c), dtype=np.int64, count=int(counts.sum()))

        closest = trimesh.triangles.closest_point(self.mesh.corners[tri_idx], p[pt_idx])
        dist = np.linalg.norm(closest - p[pt_idx], axis=1)
        order = np.lexsort((dist, pt_idx))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        best = order[starts]
        return dist[best], closest[best], tri_idx[best]

    def within(self, points, radius: float) -> List[List[int]]:
        """Candidate triangle ids whose closest point may lie within `radius`."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.tree.query_ball_point(p, radius + self.radius)


def point_to_mesh_distance(p, mesh: TriMesh) -> Tuple[np.ndarray, np.ndarray]:
    """Distance (mm) and closest surface point for one point or a batch."""
    pts = np.asarray(p, dtype=np.float64)
    dist, closest, _ = SurfaceDistance(mesh).query(pts)
    if pts.ndim == 1:
        return dist[0], closest[0]
    return dist, closest


# ============================================================================
# EDGE-TRIANGLE PENETRATIONS
# ============================================================================

def _orient(a, b, c, d) -> np.ndarray:
    return np.einsum("ij,ij->i", np.cross(b - a, c - a), d - a)


def _orient_exact(a, b, c, d) -> int:
    fa = [Fraction(float(x)) for x in a]
    m = [[Fraction(float(p[k])) - fa[k] for k in range(3)] for p in (b, c, d)]
    det = (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )
    return (det > 0) - (det < 0)


def _orient_sign(a, b, c, d) -> np.ndarray:
    """Sign of orient3d with an exact rational fallback near zero."""
    val = _orient(a, b, c, d)
    scale = (
        np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1) * np.linalg.norm(d - a, axis=1)
    )
    sign = np.sign(val).astype(np.int64)
    unsure = np.flatnonzero(np.abs(val) <= ORIENT_EXACT_REL * scale)
    for i in unsure:
        sign[i] = _orient_exact(a[i], b[i], c[i], d[i])
    return sign


def _segment_crosses(p, q, a, b, c) -> np.ndarray:
    """Proper crossings: endpoints strictly on both sides, hit strictly inside."""
    sp = _orient_sign(a, b, c, p)
    sq = _orient_sign(a, b, c, q)
    hit = sp * sq < 0
    if not np.any(hit):
        return hit
    idx = np.flatnonzero(hit)
    s1 = _orient_sign(p[idx], q[idx], a[idx], b[idx])
    s2 = _orient_sign(p[idx], q[idx], b[idx], c[idx])
    s3 = _orient_sign(p[idx], q[idx], c[idx], a[idx])
    inside = (s1 != 0) & (s1 == s2) & (s2 == s3)
    hit[idx] = inside
    return hit


def _directed_penetrations(edge_mesh: TriMesh, tri_mesh: TriMesh) -> int:
    if edge_mesh.n_triangles == 0 or tri_mesh.n_triangles == 0:
        return 0
    edges = edge_mesh.edges
    p = edge_mesh.vertices[edges[:, 0]]
    q = edge_mesh.vertices[edges[:, 1]]
    mid = 0.5 * (p + q)
    half = 0.5 * np.linalg.norm(q - p, axis=1)

    corners = tri_mesh.corners
    centroids = corners.mean(axis=1)
    tri_radius = float(np.linalg.norm(corners - centroids[:, None, :], axis=2).max())
    # centroid KD-tree broad phase, same candidate pairs as a uniform grid
    tree = cKDTree(centroids)
    candidates = tree.query_ball_point(mid, half + tri_radius + 1e-9)
    counts = np.fromiter((len(c) for c in candidates), dtype=np.int64, count=len(edges))
    if counts.sum() == 0:
        return 0
    e_idx = np.repeat(np.arange(len(edges)), counts)
    t_idx = np.fromiter((i for c in candidates for i in c), dtype=np.int64, count=int(counts.sum()))
    tri = corners[t_idx]
    hits = _segment_crosses(p[e_idx], q[e_idx], tri[:, 0], tri[:, 1], tri[:, 2])
    return int(hits.sum())


def edge_triangle_penetrations(mesh_a: TriMesh, mesh_b: TriMesh) -> int:
    """Proper edge-triangle crossings of A's edges through B plus B's through A."""
    return _directed_penetrations(mesh_a, mesh_b) + _directed_penetrations(mesh_b, mesh_a)


# ============================================================================
# INSIDE / OUTSIDE
# ============================================================================

def winding_numbers(points, mesh: TriMesh) -> np.ndarray:
    """Generalized winding number: total signed solid angle over 4*pi."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners
    out = np.empty(len(p))
    step = max(1, WINDING_BUDGET // max(1, len(corners)))
    for start in range(0, len(p), step):
        chunk = p[start:start + step]
        a = corners[None, :, 0, :] - chunk[:, None, :]
        b = corners[None, :, 1, :] - chunk[:, None, :]
        c = corners[None, :, 2, :] - chunk[:, None, :]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        num = np.einsum("ptk,ptk->pt", a, np.cross(b, c))
        den = (
            la * lb * lc
            + np.einsum("ptk,ptk->pt", a, b) * lc
            + np.einsum("ptk,ptk->pt", a, c) * lb
            + np.einsum("ptk,ptk->pt", b, c) * la
        )
        out[start:start + len(chunk)] = np.arctan2(num, den).sum(axis=1) / (2.0 * np.pi)
    return out


def inside(points, mesh: TriMesh) -> Union[bool, np.ndarray]:
    """Winding number >= 0.5 against a watertight mesh."""
    mesh.require_watertight()
    pts = np.asarray(points, dtype=np.float64)
    result = winding_numbers(pts, mesh) >= 0.5
    return bool(result[0]) if pts.ndim == 1 else result


def inside_grid(mesh: TriMesh, origin, h: float, shape: Sequence[int]) -> np.ndarray:
    """
    Classify the centers of a regular grid of cells.

    Cells touched by a triangle's bounding box get their own winding number.
    Every other cell belongs to a face-connected component that no triangle
    crosses, so one winding number per component settles all of its cells.
    """
    mesh.require_watertight()
    origin = np.asarray(origin, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    band = np.zeros(shape, dtype=bool)
    lo = np.floor((mesh.corners.min(axis=1) - origin) / h).astype(np.int64)
    hi = np.floor((mesh.corners.max(axis=1) - origin) / h).astype(np.int64)
    lo = np.clip(lo, 0, np.array(shape) - 1)
    hi = np.clip(hi, 0, np.array(shape) - 1)
    for (i0, j0, k0), (i1, j1, k1) in zip(lo, hi):
        band[i0:i1 + 1, j0:j1 + 1, k0:k1 + 1] = True

    def centers(idx: np.ndarray) -> np.ndarray:
        return origin + (idx + 0.5) * h

    result = np.zeros(shape, dtype=bool)
    band_idx = np.argwhere(band)
    if len(band_idx):
        result[band] = winding_numbers(centers(band_idx), mesh) >= 0.5

    labels, n_comp = ndimage.label(~band)
    if n_comp:
        reps = np.array(ndimage.minimum_position(np.ones(shape), labels, index=np.arange(1, n_comp + 1)))
        rep_inside = winding_numbers(centers(reps.reshape(-1, 3)), mesh) >= 0.5
        lookup = np.concatenate([[False], rep_inside])
        far = ~band
        result[far] = lookup[labels[far]]
    return result


def ray_parity_inside(points, mesh: TriMesh, direction=(0.5773, 0.5774, 0.5775)) -> np.ndarray:
    """Even-odd rule along one ray per point; kept as an independent oracle."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    v0 = mesh.corners[:, 0]
    e1 = mesh.corners[:, 1] - v0
    e2 = mesh.corners[:, 2] - v0
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(len(p), dtype=np.int64)
    step = max(1, WINDING_BUDGET // max(1, len(v0)))
    for start in range(0, len(p), step):
        chunk = p[start:start + step]
        tvec = chunk[:, None, :] - v0[None]
        u = np.einsum("ptk,tk->pt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("k,ptk->pt", d, qvec) * inv
        t = np.einsum("ptk,tk->pt", qvec, e2) * inv
        hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
        counts[start:start + len(chunk)] = hit.sum(axis=1)
    return counts % 2 == 1


def sample_volume(
    outer: TriMesh,
    holes: Sequence[TriMesh],
    n: int,
    seed: int,
    batch: int = 8192,
    max_rounds: int = 1000,
) -> np.ndarray:
    """Uniform points inside `outer` and outside every hole, by rejection."""
    if n < 1:
        raise InvalidInputError("sample count must be >= 1")
    outer.require_watertight("outer surface")
    for hole in holes:
        hole.require_watertight("hole surface")
    rng = np.random.default_rng(seed)
    lo, hi = outer.bounds()
    kept: List[np.ndarray] = []
    total = 0
    for _ in range(max_rounds):
        cand = lo + rng.random((batch, 3)) * (hi - lo)
        mask = winding_numbers(cand, outer) >= 0.5
        for hole in holes:
            idx = np.flatnonzero(mask)
            mask[idx] = winding_numbers(cand[idx], hole) < 0.5
        kept.append(cand[mask])
        total += int(mask.sum())
        if total >= n:
            break
    else:
        raise InvalidInputError("volume sampling rejected every candidate")
    return np.concatenate(kept)[:n]
