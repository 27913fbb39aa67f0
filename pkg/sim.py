"""
Quasi-static shape-targeting solver on an embedded hexahedral lattice.

Energy: mu/2 * sum_q w_q |F_q - R_q A_e|^2 - f . (u - u0) (+ barrier), with
skull and jaw supporting nodes eliminated as prescribed positions. Local
steps project F A onto rotations; the global step is one back-substitution
on a factorization built once per setup.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from collision import CollisionSettings, collision_barrier, is_feasible, penetration_pairs
from errors import InvalidInputError, NumericalFailureError, SetupError
from extraction import ConstraintBundle
from geometry import TriMesh
from lattice import QUADRATURE_POINTS, Embedding, HexLattice, Quadrature, gradient_operator
from losses import MaterialParams
from numerics import RigidTransform, polar_rotation

logger = logging.getLogger(__name__)

INCREASE_TOL = 1e-12
PIVOT_TOL = 1e-12
MAX_HALVINGS = 30


@dataclass(frozen=True, eq=False)
class SolverSetup:
    lattice: HexLattice
    embeddings: Dict[str, Embedding]
    meshes: Dict[str, TriMesh]
    quadrature: Quadrature
    gradient: sp.csr_matrix
    weights: np.ndarray
    stiffness: sp.csc_matrix
    skull_nodes: np.ndarray
    jaw_nodes: np.ndarray
    free_nodes: np.ndarray
    jaw_rest: np.ndarray
    factor: object
    material: MaterialParams
    tolerance: float = 1e-6
    max_iterations: int = 500

    @property
    def constrained_nodes(self) -> np.ndarray:
        return np.concatenate([self.skull_nodes, self.jaw_nodes])

    @property
    def n_quadrature(self) -> int:
        return len(QUADRATURE_POINTS[self.quadrature])

    def solve_free(self, rhs: np.ndarray) -> np.ndarray:
        return self.factor.solve(np.ascontiguousarray(rhs))


def assemble(
    lattice: HexLattice,
    embeddings: Dict[str, Embedding],
    quadrature: Quadrature = "gauss8",
    material: Optional[MaterialParams] = None,
    meshes: Optional[Dict[str, TriMesh]] = None,
    tolerance: float = 1e-6,
    max_iterations: int = 500,
    jaw_rest: Optional[np.ndarray] = None,
) -> SolverSetup:
    """Build the quadratic form, eliminate bone-supporting nodes and factorize once."""
    if "skull" not in embeddings:
        raise SetupError("no skull constraint: the lattice would float; embed the skull first")
    skull_nodes = embeddings["skull"].support()
    jaw_nodes = embeddings["jaw"].support() if "jaw" in embeddings else np.zeros(0, dtype=np.int64)
    if len(skull_nodes) == 0:
        raise SetupError("skull embedding supports no lattice node")
    shared = np.intersect1d(skull_nodes, jaw_nodes)
    if len(shared):
        raise SetupError(f"{len(shared)} lattice nodes support both skull and jaw; refine the lattice")

    g = gradient_operator(lattice, quadrature)
    n_q = len(QUADRATURE_POINTS[quadrature])
    w = np.full(g.shape[0], lattice.element_volume / n_q)
    k = (g.T @ sp.diags(w) @ g).tocsc()

    constrained = np.concatenate([skull_nodes, jaw_nodes])
    free = np.setdiff1d(np.arange(lattice.n_nodes), constrained)
    factor = None
    if len(free):
        k_ff = k[free][:, free].tocsc()
        try:
            factor = splu(k_ff)
        except RuntimeError as e:
            raise SetupError(f"reduced system is singular: {e}") from e
        pivots = np.abs(factor.U.diagonal())
        if pivots.min() <= PIVOT_TOL * pivots.max():
            raise SetupError("reduced system is singular: some free nodes are not tied to a constraint")

    if jaw_rest is None:
        jaw_rest = lattice.nodes[jaw_nodes].copy()
    logger.info(f"✓ assembled {lattice.n_nodes} nodes: {len(skull_nodes)} skull, {len(jaw_nodes)} jaw, "
                f"{len(free)} free")
    return SolverSetup(
        lattice, dict(embeddings), dict(meshes or {}), quadrature, g, w, k,
        skull_nodes, jaw_nodes, free, jaw_rest, factor, material or MaterialParams(),
        tolerance, max_iterations,
    )


# ============================================================================
# EFFECTS
# ============================================================================

@dataclass
class Paralysis:
    mask: np.ndarray
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError("paralysis blend must lie in [0, 1]")


@dataclass
class JawEdit:
    """Affine edit x -> pivot + matrix (x - pivot) + translation of the rest jaw."""

    matrix: np.ndarray
    pivot: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def scale(cls, factor: float, pivot) -> "JawEdit":
        return cls(factor * np.eye(3), np.asarray(pivot, dtype=np.float64))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)) and not np.any(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.pivot + (points - self.pivot) @ np.asarray(self.matrix).T + self.translation


@dataclass
class SimEffects:
    gravity: Optional[np.ndarray] = None
    density: float = 0.9
    collision: Optional[CollisionSettings] = None
    paralysis: Optional[Paralysis] = None
    jaw_edit: Optional[JawEdit] = None


def apply_paralysis(bundle: ConstraintBundle, mask, alpha: float) -> ConstraintBundle:
    """Blend masked actuations towards rest: (1 - alpha) A + alpha I."""
    Paralysis(np.asarray(mask), alpha)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if len(mask) != bundle.n_elements:
        raise InvalidInputError("paralysis mask needs one entry per element")
    a = bundle.actuations.copy()
    a[mask] = (1.0 - alpha) * a[mask] + alpha * np.eye(3)
    return bundle.with_actuations(a)


def apply_jaw_edit(setup: SolverSetup, bundle: ConstraintBundle, edit: JawEdit) -> Tuple[SolverSetup, ConstraintBundle]:
    """Reshape the rest jaw and rebuild the setup; the actuations are replayed unchanged."""
    embeddings = dict(setup.embeddings)
    if edit.is_identity():
        jaw_rest = setup.jaw_rest.copy()
    else:
        jaw_rest = edit.apply(setup.jaw_rest)
        if "jaw" in embeddings:
            old = embeddings["jaw"]
            embeddings["jaw"] = Embedding(old.weights, old.tag, edit.apply(old.rest_vertices))
    new = assemble(setup.lattice, embeddings, setup.quadrature, setup.material, setup.meshes,
                   setup.tolerance, setup.max_iterations, jaw_rest)
    return new, bundle


def apply_effects(setup: SolverSetup, bundle: ConstraintBundle,
                  effects: Optional[SimEffects]) -> Tuple[SolverSetup, ConstraintBundle]:
    if effects is None:
        return setup, bundle
    if effects.paralysis is not None:
        bundle = apply_paralysis(bundle, effects.paralysis.mask, effects.paralysis.alpha)
    if effects.jaw_edit is not None:
        setup, bundle = apply_jaw_edit(setup, bundle, effects.jaw_edit)
    return setup, bundle


def gravity_force(setup: SolverSetup, g, density: float) -> np.ndarray:
    """
    Lumped nodal forces in N: density (g/ml) times element volume (mm^3),
    an eighth per corner, times g (m/s^2).
    """
    g = np.asarray(g, dtype=np.float64).reshape(3)
    lattice = setup.lattice
    mass = density * 1e-6 * lattice.element_volume
    f = np.zeros((lattice.n_nodes, 3))
    np.add.at(f, lattice.elements.reshape(-1), np.broadcast_to(mass / 8.0 * g, (lattice.elements.size, 3)))
    return f


# ============================================================================
# SOLVE
# ============================================================================

@dataclass
class SolveResult:
    u: np.ndarray
    energies: List[float]
    iterations: int
    converged: bool
    inversions: int
    penetration_pairs: int
    constraint_residual: float
    setup: SolverSetup
    bundle: ConstraintBundle

    def surface(self, tag: str) -> np.ndarray:
        return self.setup.embeddings[tag].apply(self.u)


def prescribed_positions(setup: SolverSetup, bundle: ConstraintBundle,
                         boundary: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Targets of the constrained nodes, in `constrained_nodes` order."""
    u0 = setup.lattice.nodes
    if boundary is not None:
        return boundary(u0[setup.constrained_nodes])
    skull = bundle.skull.apply(u0[setup.skull_nodes])
    jaw = bundle.skull.compose(bundle.jaw).apply(setup.jaw_rest)
    return np.concatenate([skull, jaw])


def _gradients(setup: SolverSetup, u: np.ndarray) -> np.ndarray:
    e, q = setup.lattice.n_elements, setup.n_quadrature
    return np.swapaxes((setup.gradient @ u).reshape(e, q, 3, 3), -1, -2)


def _local(setup: SolverSetup, u: np.ndarray, actuations: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Deformation gradients and targets R* A per quadrature point."""
    f = _gradients(setup, u)
    a = actuations[:, None]
    rot = polar_rotation(f @ a)
    return f, rot @ a


def _elastic_energy(setup: SolverSetup, f: np.ndarray, targets: np.ndarray, mu: float) -> float:
    e, q = setup.lattice.n_elements, setup.n_quadrature
    sq = ((f - targets) ** 2).sum(axis=(-2, -1))
    return 0.5 * mu * float(setup.weights.reshape(e, q, 3)[:, :, 0].ravel() @ sq.ravel())


def solve_quasistatic(
    setup: SolverSetup,
    bundle: ConstraintBundle,
    effects: Optional[SimEffects] = None,
    u_init: Optional[np.ndarray] = None,
    boundary: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    report_path: Optional[Union[str, Path]] = None,
) -> SolveResult:
    """
    Local-global minimization with hard bone constraints. Without collision
    the energy must not increase; two increases in a row abort the solve.
    """
    if bundle.n_elements != setup.lattice.n_elements:
        raise InvalidInputError(f"bundle has {bundle.n_elements} actuations for {setup.lattice.n_elements} elements")
    setup, bundle = apply_effects(setup, bundle, effects)
    effects = effects or SimEffects()
    lattice = setup.lattice
    u0 = lattice.nodes
    mu = setup.material.mu * 1e-3
    actuations = bundle.actuations

    constrained = setup.constrained_nodes
    free = setup.free_nodes
    target_c = prescribed_positions(setup, bundle, boundary)
    u = u0.copy() if u_init is None else np.array(u_init, dtype=np.float64).reshape(lattice.n_nodes, 3)
    u[constrained] = target_c

    force = np.zeros_like(u0)
    if effects.gravity is not None:
        force += gravity_force(setup, effects.gravity, effects.density)

    collide = effects.collision
    barrier_on = collide is not None and collide.enabled
    if barrier_on and not is_feasible(setup.embeddings, setup.meshes, u, collide.pairs):
        raise InvalidInputError("collision regions interpenetrate at the start; a feasible start is needed")

    k_fc = setup.stiffness[free][:, constrained] if len(free) else None
    coupling = k_fc @ target_c if k_fc is not None else None

    def energy(u: np.ndarray, f: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
        value = _elastic_energy(setup, f, targets, mu) - float((force * (u - u0)).sum())
        grad = np.zeros_like(u)
        if barrier_on:
            b, grad = collision_barrier(setup.embeddings, setup.meshes, u, collide)
            value += b
        return value, grad

    f, targets = _local(setup, u, actuations)
    current, barrier_grad = energy(u, f, targets)
    energies = [current]
    converged = current == 0.0 and not force.any()
    increases = 0
    iterations = 0

    while not converged and iterations < setup.max_iterations and len(free):
        iterations += 1
        t_rows = np.swapaxes(targets, -1, -2).reshape(-1, 3)
        rhs = setup.gradient.T @ (setup.weights[:, None] * t_rows) + (force - barrier_grad) / mu
        candidate = u.copy()
        candidate[free] = setup.solve_free(rhs[free] - coupling)

        if barrier_on:
            step = candidate - u
            alpha = 1.0
            for _ in range(MAX_HALVINGS):
                trial = u + alpha * step
                if is_feasible(setup.embeddings, setup.meshes, trial, collide.pairs):
                    candidate = trial
                    break
                alpha *= 0.5
            else:
                logger.warning("⚠ collision line search found no feasible step; stopping")
                break

        u = candidate
        f, targets = _local(setup, u, actuations)
        value, barrier_grad = energy(u, f, targets)
        energies.append(value)
        previous = current
        current = value
        decrease = previous - current

        if not barrier_on:
            if decrease < -INCREASE_TOL * max(1.0, abs(previous)):
                increases += 1
                if increases >= 2:
                    result = SolveResult(u, energies, iterations, False, 0, 0, 0.0, setup, bundle)
                    path = write_solve_report(result, report_path) if report_path else None
                    raise NumericalFailureError(
                        f"energy increased in two consecutive iterations (iteration {iterations})",
                        str(path) if path else None,
                    )
            else:
                increases = 0
        scale = max(abs(previous), 1e-300)
        if abs(decrease) < setup.tolerance * scale or current == 0.0:
            converged = True

    if not len(free):
        converged = True
    inversions = int((np.linalg.det(f) <= 0.0).sum())
    if inversions:
        logger.warning(f"⚠ {inversions} quadrature points inverted after the solve")
    pairs = penetration_pairs(setup.embeddings, setup.meshes, u, collide.pairs) if collide is not None else 0
    residual = float(np.abs(u[constrained] - target_c).max(initial=0.0))
    result = SolveResult(u, energies, iterations, converged, inversions, pairs, residual, setup, bundle)
    if report_path:
        write_solve_report(result, report_path)
    status = "✓ converged" if converged else "⚠ stopped"
    logger.info(f"{status} after {iterations} iterations, energy {current:.6g}")
    return result


def write_solve_report(result: SolveResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = [
        "solve report",
        f"iterations {result.iterations}",
        f"converged {str(result.converged).lower()}",
        f"constraint_residual {result.constraint_residual:.6g}",
        f"inversions {result.inversions}",
        f"penetration_pairs {result.penetration_pairs}",
        "energy_trace " + " ".join(f"{e:.12g}" for e in result.energies),
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def rest_bundle(setup: SolverSetup) -> ConstraintBundle:
    return ConstraintBundle.rest(setup.lattice.n_elements)


def with_pose(bundle: ConstraintBundle, skull: RigidTransform) -> ConstraintBundle:
    return replace(bundle, skull=skull)
