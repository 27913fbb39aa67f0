"""
Distance barrier between tagged embedded surfaces, and a constructed pinch
scenario where two actuated slabs are pushed into each other.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import trimesh

from errors import InvalidInputError
from extraction import ConstraintBundle
from geometry import SurfaceDistance, TriMesh, edge_triangle_penetrations, point_to_mesh_distance
from lattice import Embedding, HexLattice, embed
from numerics import RigidTransform

logger = logging.getLogger(__name__)


@dataclass
class CollisionSettings:
    pairs: List[Tuple[str, str]]
    distance: float = 1.0
    stiffness: float = 1e-3
    # False keeps the penetration report but applies no barrier
    enabled: bool = True

    def __post_init__(self):
        if self.distance <= 0.0:
            raise InvalidInputError("barrier distance must be positive")
        if self.stiffness <= 0.0:
            raise InvalidInputError("barrier stiffness must be positive")


def barrier(d: np.ndarray, d_hat: float, stiffness: float) -> Tuple[np.ndarray, np.ndarray]:
    """-k (d - d_hat)^2 ln(d / d_hat) for 0 < d < d_hat, and its derivative in d."""
    d = np.asarray(d, dtype=np.float64)
    active = d < d_hat
    energy = np.zeros_like(d)
    deriv = np.zeros_like(d)
    da = d[active]
    gap = da - d_hat
    log = np.log(da / d_hat)
    energy[active] = -stiffness * gap * gap * log
    deriv[active] = -stiffness * (2.0 * gap * log + gap * gap / da)
    return energy, deriv


def vertex_triangle_barrier(points: np.ndarray, mesh: TriMesh, d_hat: float,
                            stiffness: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Barrier over every point-triangle pair closer than d_hat. Returns the
    energy, its gradient at the points and at the mesh vertices.
    """
    grad_p = np.zeros_like(points)
    grad_v = np.zeros_like(mesh.vertices)
    candidates = SurfaceDistance(mesh).within(points, d_hat)
    pi = np.array([i for i, tris in enumerate(candidates) for _ in tris], dtype=np.int64)
    ti = np.array([t for tris in candidates for t in tris], dtype=np.int64)
    if len(pi) == 0:
        return 0.0, grad_p, grad_v

    corners = mesh.corners[ti]
    closest = trimesh.triangles.closest_point(corners, points[pi])
    diff = points[pi] - closest
    d = np.linalg.norm(diff, axis=1)
    if np.any(d <= 0.0):
        raise InvalidInputError("surfaces touch or interpenetrate; the barrier needs a feasible start")
    keep = d < d_hat
    if not np.any(keep):
        return 0.0, grad_p, grad_v
    pi, ti, diff, d, corners, closest = pi[keep], ti[keep], diff[keep], d[keep], corners[keep], closest[keep]

    energy, deriv = barrier(d, d_hat, stiffness)
    g = (deriv / d)[:, None] * diff
    np.add.at(grad_p, pi, g)
    bary = trimesh.triangles.points_to_barycentric(corners, closest)
    for k in range(3):
        np.add.at(grad_v, mesh.triangles[ti, k], -bary[:, k:k + 1] * g)
    return float(energy.sum()), grad_p, grad_v


def current_mesh(embeddings: Dict[str, Embedding], meshes: Dict[str, TriMesh], tag: str, u: np.ndarray) -> TriMesh:
    return meshes[tag].with_vertices(embeddings[tag].apply(u))


def collision_barrier(embeddings: Dict[str, Embedding], meshes: Dict[str, TriMesh], u: np.ndarray,
                      settings: CollisionSettings) -> Tuple[float, np.ndarray]:
    """Total barrier energy of the region pairs and its gradient at the lattice nodes."""
    grad = np.zeros_like(u)
    total = 0.0
    for a, b in settings.pairs:
        mesh_a = current_mesh(embeddings, meshes, a, u)
        mesh_b = current_mesh(embeddings, meshes, b, u)
        for src, dst, w_src, w_dst in (
            (mesh_a, mesh_b, embeddings[a].weights, embeddings[b].weights),
            (mesh_b, mesh_a, embeddings[b].weights, embeddings[a].weights),
        ):
            e, g_p, g_v = vertex_triangle_barrier(src.vertices, dst, settings.distance, settings.stiffness)
            total += e
            grad += w_src.T @ g_p + w_dst.T @ g_v
    return total, grad


def penetration_pairs(embeddings: Dict[str, Embedding], meshes: Dict[str, TriMesh], u: np.ndarray,
                      pairs: Sequence[Tuple[str, str]]) -> int:
    return sum(
        edge_triangle_penetrations(current_mesh(embeddings, meshes, a, u), current_mesh(embeddings, meshes, b, u))
        for a, b in pairs
    )


def is_feasible(embeddings: Dict[str, Embedding], meshes: Dict[str, TriMesh], u: np.ndarray,
                pairs: Sequence[Tuple[str, str]]) -> bool:
    """No region pair touches or crosses."""
    for a, b in pairs:
        mesh_a = current_mesh(embeddings, meshes, a, u)
        mesh_b = current_mesh(embeddings, meshes, b, u)
        if edge_triangle_penetrations(mesh_a, mesh_b):
            return False
        if point_to_mesh_distance(mesh_a.vertices, mesh_b)[0].min() <= 0.0:
            return False
        if point_to_mesh_distance(mesh_b.vertices, mesh_a)[0].min() <= 0.0:
            return False
    return True


# ============================================================================
# REGIONS
# ============================================================================

def submesh(mesh: TriMesh, triangle_mask: np.ndarray) -> Tuple[TriMesh, np.ndarray]:
    """Open patch of the selected triangles and the parent ids of its vertices."""
    tris = mesh.triangles[np.asarray(triangle_mask, dtype=bool)]
    if len(tris) == 0:
        raise InvalidInputError("region selects no triangles")
    ids, local = np.unique(tris, return_inverse=True)
    return TriMesh(mesh.vertices[ids], local.reshape(-1, 3), mesh.confidence[ids]), ids


def lip_regions(skin: TriMesh, split_y: float = -40.0, band: float = 10.0,
                gap: float = 2.0) -> Dict[str, TriMesh]:
    """
    Upper and lower frontal bands of the skin on either side of the mouth
    line. Every vertex of a band triangle lies on its own side of the gap, so
    the two bands never share a vertex.
    """
    corners_y = skin.corners[:, :, 1]
    centers = skin.corners.mean(axis=1)
    front = centers[:, 2] > 0.5 * skin.vertices[:, 2].max()
    upper = front & (corners_y.min(axis=1) > split_y + gap) & (centers[:, 1] < split_y + gap + band)
    lower = front & (corners_y.max(axis=1) < split_y - gap) & (centers[:, 1] > split_y - gap - band)
    return {"upper_lip": submesh(skin, upper)[0], "lower_lip": submesh(skin, lower)[0]}


# ============================================================================
# PINCH SCENARIO
# ============================================================================

def _sheet(n: int, h: float, y: float, flip: bool) -> TriMesh:
    ii, kk = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    vertices = np.stack([ii.ravel() * h, np.full(ii.size, y), kk.ravel() * h], axis=1)
    vid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = vid[:-1, :-1].ravel(), vid[1:, :-1].ravel(), vid[1:, 1:].ravel(), vid[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    if flip:
        tris = tris[:, ::-1]
    return TriMesh(vertices, tris)


@dataclass
class PinchScenario:
    lattice: HexLattice
    embeddings: Dict[str, Embedding]
    meshes: Dict[str, TriMesh]
    actuations: np.ndarray
    settings: CollisionSettings = field(default_factory=lambda: CollisionSettings([("lower", "upper")]))

    def bundle(self) -> ConstraintBundle:
        return ConstraintBundle(self.actuations, RigidTransform.identity(), provenance="pinch")


def make_pinch_scenario(size: int = 8, thickness: int = 3, gap: int = 1, h: float = 1.0,
                        stretch: float = 2.5) -> PinchScenario:
    """
    Two slabs separated by `gap` cells, bottom face of the lower one held as
    skull and top face of the upper one as jaw. The central patch of both is
    actuated to thicken, which drives the facing sheets into each other.
    """
    if size < 4 or thickness < 1 or gap < 1:
        raise InvalidInputError("pinch scenario needs size >= 4, thickness >= 1, gap >= 1")
    ii, jj, kk = np.meshgrid(np.arange(size), np.arange(thickness), np.arange(size), indexing="ij")
    lower = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    upper = lower + np.array([0, thickness + gap, 0])
    lattice = HexLattice.from_cells(np.zeros(3), h, np.concatenate([lower, upper]))

    top_y = (2 * thickness + gap) * h
    meshes = {
        "skull": _sheet(size, h, 0.0, flip=True),
        "jaw": _sheet(size, h, top_y, flip=False),
        "lower": _sheet(size, h, thickness * h, flip=False),
        "upper": _sheet(size, h, (thickness + gap) * h, flip=True),
    }
    embeddings = {tag: embed(lattice, mesh, tag) for tag, mesh in meshes.items()}

    actuations = np.broadcast_to(np.eye(3), (lattice.n_elements, 3, 3)).copy()
    lo, hi = size // 4, size - size // 4
    cells = lattice.cells
    core = (cells[:, 0] >= lo) & (cells[:, 0] < hi) & (cells[:, 2] >= lo) & (cells[:, 2] < hi)
    actuations[core, 1, 1] = stretch
    logger.info(f"✓ pinch scenario: {lattice.n_elements} elements, {int(core.sum())} actuated")
    return PinchScenario(lattice, embeddings, meshes, actuations,
                         CollisionSettings([("lower", "upper")], distance=0.5 * h * gap, stiffness=1e-3))
