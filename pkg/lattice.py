"""
Uniform hexahedral simulation lattice over the soft-tissue volume.

Corner c of every element sits at cell offset (c & 1, (c >> 1) & 1, (c >> 2) & 1),
matching numerics.trilinear_basis. Lattices and embeddings are immutable once
built.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from errors import CorpusError, CoverageError, InvalidInputError, ParseError, RefinementError
from geometry import TriMesh, inside_grid
from numerics import CORNER_OFFSETS, trilinear_basis
from phantom import Anatomy, min_bone_gap

logger = logging.getLogger(__name__)

Quadrature = Literal["gauss8", "center"]
SurfaceTag = Literal["skin", "skull", "jaw"]

LATTICE_FORMAT = "latv1"
EMBED_TOL = 1e-9

_G = 0.5 / np.sqrt(3.0)
QUADRATURE_POINTS: Dict[str, np.ndarray] = {
    "center": np.array([[0.5, 0.5, 0.5]]),
    "gauss8": 0.5 + _G * (2.0 * CORNER_OFFSETS.astype(np.float64) - 1.0),
}


@dataclass(frozen=True, eq=False)
class HexLattice:
    origin: np.ndarray
    h: float
    cells: np.ndarray
    node_keys: np.ndarray
    elements: np.ndarray

    @classmethod
    def from_cells(cls, origin, h: float, cells) -> "HexLattice":
        """
        Lattice over an explicit set of integer cell indices.

        The cells need not be face-connected: the contact scenarios build two
        separate slabs this way. `voxelize` keeps a single component, and
        `n_components` reports how many a lattice holds.
        """
        if h <= 0.0:
            raise InvalidInputError("cell size must be positive")
        cells = np.unique(np.asarray(cells, dtype=np.int64).reshape(-1, 3), axis=0)
        if len(cells) == 0:
            raise InvalidInputError("lattice needs at least one cell")
        corners = cells[:, None, :] + CORNER_OFFSETS[None]
        keys, inverse = np.unique(corners.reshape(-1, 3), axis=0, return_inverse=True)
        elements = inverse.reshape(-1, 8)
        return cls(np.asarray(origin, dtype=np.float64), float(h), cells, keys, elements)

    def n_components(self) -> int:
        """Number of face-connected groups of cells."""
        low = self.cells.min(axis=0)
        occupied = np.zeros(self.cells.max(axis=0) - low + 1, dtype=bool)
        occupied[tuple((self.cells - low).T)] = True
        return int(ndimage.label(occupied)[1])

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_nodes(self) -> int:
        return len(self.node_keys)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Rest node coordinates u0 (mm)."""
        return self.origin + self.node_keys * self.h

    @property
    def element_volume(self) -> float:
        return self.h ** 3

    def total_volume(self) -> float:
        return self.n_elements * self.element_volume

    def element_centers(self) -> np.ndarray:
        return self.origin + (self.cells + 0.5) * self.h

    @cached_property
    def _cell_lookup(self) -> Dict[Tuple[int, int, int], int]:
        return {tuple(c): i for i, c in enumerate(self.cells.tolist())}

    def element_of_cell(self, cell) -> int:
        return self._cell_lookup.get(tuple(int(c) for c in cell), -1)

    def locate(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """
        Containing element (-1 if none) and local coordinates for each point.
        Points on a cell face may belong to either neighbour; an occupied one
        is preferred.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        t = (p - self.origin) / self.h
        base = np.floor(t).astype(np.int64)
        elem = np.full(len(p), -1, dtype=np.int64)
        local = t - base
        lookup = self._cell_lookup
        for i in range(len(p)):
            e = lookup.get(tuple(base[i]), -1)
            if e >= 0:
                elem[i] = e
                continue
            near_low = np.abs(local[i]) <= EMBED_TOL
            for bits in CORNER_OFFSETS[1:]:
                if np.any(bits.astype(bool) & ~near_low):
                    continue
                e = lookup.get(tuple(base[i] - bits), -1)
                if e >= 0:
                    elem[i] = e
                    local[i] = local[i] + bits
                    break
        return elem, np.clip(local, 0.0, 1.0)


def deformation_gradients(lattice: HexLattice, u, quadrature: Quadrature = "gauss8") -> np.ndarray:
    """F for every element and quadrature point, shape (E, Q, 3, 3)."""
    u = np.asarray(u, dtype=np.float64).reshape(lattice.n_nodes, 3)
    _, grads = trilinear_basis(QUADRATURE_POINTS[quadrature], lattice.h)
    return np.einsum("ecx,qcy->eqxy", u[lattice.elements], grads)


def element_gradient(lattice: HexLattice, u, e: int, q: Union[int, str] = "center") -> np.ndarray:
    """F of element e at one quadrature point: "center" or a Gauss point index 0..7."""
    u = np.asarray(u, dtype=np.float64).reshape(lattice.n_nodes, 3)
    local = QUADRATURE_POINTS["center"][0] if q == "center" else QUADRATURE_POINTS["gauss8"][int(q)]
    _, grads = trilinear_basis(local, lattice.h)
    return u[lattice.elements[e]].T @ grads


def gradient_operator(lattice: HexLattice, quadrature: Quadrature = "gauss8") -> sp.csr_matrix:
    """
    Sparse G with (G @ u[:, d]).reshape(E, Q, 3) == F[:, :, d, :], so one
    operator serves all three coordinates.
    """
    _, grads = trilinear_basis(QUADRATURE_POINTS[quadrature], lattice.h)
    n_q = grads.shape[0]
    e_idx, q_idx, c_idx, y_idx = np.meshgrid(
        np.arange(lattice.n_elements), np.arange(n_q), np.arange(8), np.arange(3), indexing="ij"
    )
    rows = (e_idx * n_q + q_idx) * 3 + y_idx
    cols = lattice.elements[e_idx, c_idx]
    vals = grads[q_idx, c_idx, y_idx]
    shape = (lattice.n_elements * n_q * 3, lattice.n_nodes)
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)


# ============================================================================
# VOXELIZATION
# ============================================================================

def voxelize(anatomy: Anatomy, h: float) -> HexLattice:
    """
    Occupied cells: centre inside skin and outside both bones, or holding any
    skin, skull or jaw vertex. The largest face-connected component holding
    skin vertices is kept.
    """
    if h <= 0.0:
        raise InvalidInputError("cell size must be positive")
    gap = min_bone_gap(anatomy)
    if h > gap:
        raise RefinementError(f"cell size {h:g} mm exceeds the smallest bone-to-skin gap {gap:.3g} mm; use a smaller h")

    lo, hi = anatomy.skin.bounds()
    origin = np.floor(lo / h) * h - h
    shape = tuple(int(s) for s in np.ceil((hi - origin) / h).astype(np.int64) + 2)

    occupied = inside_grid(anatomy.skin, origin, h, shape)
    occupied &= ~inside_grid(anatomy.skull, origin, h, shape)
    occupied &= ~inside_grid(anatomy.jaw, origin, h, shape)

    def vertex_cells(v: np.ndarray) -> np.ndarray:
        return np.clip(np.floor((v - origin) / h).astype(np.int64), 0, np.array(shape) - 1)

    for mesh in (anatomy.skin, anatomy.skull, anatomy.jaw):
        c = vertex_cells(mesh.vertices)
        occupied[c[:, 0], c[:, 1], c[:, 2]] = True

    labels, n_comp = ndimage.label(occupied)
    if n_comp == 0:
        raise RefinementError("voxelization produced no occupied cells")
    skin_cells = vertex_cells(anatomy.skin.vertices)
    hits = np.bincount(labels[skin_cells[:, 0], skin_cells[:, 1], skin_cells[:, 2]], minlength=n_comp + 1)
    hits[0] = 0
    keep = int(np.argmax(hits))
    if n_comp > 1:
        logger.warning(f"⚠ voxelization found {n_comp} components; keeping the one with {hits[keep]} skin vertices")

    lattice = HexLattice.from_cells(origin, h, np.argwhere(labels == keep))
    logger.info(f"✓ voxelized at h={h:g} mm: {lattice.n_elements} elements, {lattice.n_nodes} nodes")
    return lattice


# ============================================================================
# EMBEDDING
# ============================================================================

@dataclass(frozen=True, eq=False)
class Embedding:
    weights: sp.csr_matrix
    tag: str
    rest_vertices: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.weights.shape[0]

    def apply(self, u) -> np.ndarray:
        """Embedded surface positions W @ u."""
        return self.weights @ np.asarray(u, dtype=np.float64)

    def support(self) -> np.ndarray:
        """Lattice nodes carrying a nonzero weight."""
        w = self.weights.tocsc()
        return np.flatnonzero(np.diff(w.indptr) > 0)


def embed(lattice: HexLattice, mesh: Union[TriMesh, np.ndarray], tag: str) -> Embedding:
    vertices = mesh.vertices if isinstance(mesh, TriMesh) else np.asarray(mesh, dtype=np.float64).reshape(-1, 3)
    elem, local = lattice.locate(vertices)
    missing = np.flatnonzero(elem < 0)
    if len(missing):
        raise CoverageError(f"{tag} vertex lies outside every occupied cell", int(missing[0]))
    weights, _ = trilinear_basis(local, lattice.h)
    weights[np.abs(weights) < 1e-15] = 0.0
    rows = np.repeat(np.arange(len(vertices)), 8)
    cols = lattice.elements[elem].reshape(-1)
    w = sp.csr_matrix((weights.reshape(-1), (rows, cols)), shape=(len(vertices), lattice.n_nodes))
    w.eliminate_zeros()
    return Embedding(w, tag, np.array(vertices, dtype=np.float64))


# ============================================================================
# SAMPLING
# ============================================================================

class SoftSamples(NamedTuple):
    points: np.ndarray
    elements: np.ndarray


def sample_soft_points(lattice: HexLattice, n: int, seed: int,
                       mode: Literal["volume-uniform", "per-element-centers"] = "volume-uniform") -> SoftSamples:
    if mode == "per-element-centers":
        return SoftSamples(lattice.element_centers(), np.arange(lattice.n_elements))
    if mode != "volume-uniform":
        raise InvalidInputError(f"unknown sampling mode {mode!r}")
    if n < 1:
        raise InvalidInputError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    elements = rng.integers(0, lattice.n_elements, size=n)
    local = rng.random((n, 3))
    points = lattice.origin + (lattice.cells[elements] + local) * lattice.h
    return SoftSamples(points, elements)


# ============================================================================
# latv1 FILES
# ============================================================================

def save_lattice(lattice: HexLattice, path: Union[str, Path], embeddings: Optional[Dict[str, Embedding]] = None) -> Path:
    path = Path(path)
    embeddings = embeddings or {}
    lines = [
        LATTICE_FORMAT,
        f"origin {lattice.origin[0]:.17g} {lattice.origin[1]:.17g} {lattice.origin[2]:.17g}",
        f"h {lattice.h:.17g}",
        f"counts {lattice.n_nodes} {lattice.n_elements} {len(embeddings)}",
    ]
    lines.extend(f"n {a} {b} {c}" for a, b, c in lattice.node_keys)
    lines.extend("e " + " ".join(str(i) for i in row) for row in lattice.elements)
    for tag, emb in embeddings.items():
        coo = emb.weights.tocoo()
        lines.append(f"embedding {tag} {emb.n_vertices} {coo.nnz}")
        lines.extend(f"w {r} {c} {v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data))
        lines.extend(f"r {x:.17g} {y:.17g} {z:.17g}" for x, y, z in emb.rest_vertices)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise CorpusError(f"cannot write lattice {path}: {e}") from e
    return path


def load_lattice(path: Union[str, Path]) -> Tuple[HexLattice, Dict[str, Embedding]]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read lattice {path}: {e}") from e
    if not lines or lines[0].strip() != LATTICE_FORMAT:
        raise ParseError(f"expected header {LATTICE_FORMAT!r}", 1, str(path))
    i = 0

    def fields(i: int, tag: str, n: int):
        parts = lines[i].split()
        if len(parts) != n + 1 or parts[0] != tag:
            raise ParseError(f"expected {tag!r} record with {n} values", i + 1, str(path))
        return parts[1:]

    try:
        origin = np.array([float(x) for x in fields(1, "origin", 3)])
        h = float(fields(2, "h", 1)[0])
        n_nodes, n_elems, n_emb = (int(x) for x in fields(3, "counts", 3))
        i = 4
        keys = np.array([[int(x) for x in fields(i + k, "n", 3)] for k in range(n_nodes)], dtype=np.int64)
        i += n_nodes
        elements = np.array([[int(x) for x in fields(i + k, "e", 8)] for k in range(n_elems)], dtype=np.int64)
        i += n_elems
        node_keys = keys.reshape(-1, 3)
        cells = node_keys[elements[:, 0]]
        lattice = HexLattice(origin, h, cells, node_keys, elements.reshape(-1, 8))
        embeddings = {}
        for _ in range(n_emb):
            tag, n_rows, nnz = fields(i, "embedding", 3)
            n_rows, nnz = int(n_rows), int(nnz)
            i += 1
            trip = [fields(i + k, "w", 3) for k in range(nnz)]
            i += nnz
            rest = np.array([[float(x) for x in fields(i + k, "r", 3)] for k in range(n_rows)]).reshape(-1, 3)
            i += n_rows
            rows = np.array([int(t[0]) for t in trip], dtype=np.int64)
            cols = np.array([int(t[1]) for t in trip], dtype=np.int64)
            vals = np.array([float(t[2]) for t in trip])
            w = sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_nodes))
            embeddings[tag] = Embedding(w, tag, rest)
    except IndexError:
        raise ParseError("unexpected end of file", len(lines), str(path)) from None
    except ValueError as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(str(e), i + 1, str(path)) from None
    return lattice, embeddings
