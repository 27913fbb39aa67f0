"""
Closed-form physical constraints from a deformation field: per-element
actuation tensors from the polar stretch of the field Jacobian, and jaw/skull
transforms from rigid fits of the field's bone images.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch

from errors import CorpusError, InvalidInputError, ParseError
from field import as_tensor
from lattice import HexLattice
from model import FaceModel
from numerics import RigidTransform, kabsch, kabsch_residual, polar3
from phantom import Anatomy

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "cbv1"
SYMMETRY_TOL = 1e-8
PSD_TOL = 1e-8

# upper-triangle storage order of a symmetric tensor
_SYM = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass(frozen=True, eq=False)
class ConstraintBundle:
    actuations: np.ndarray
    jaw: RigidTransform
    skull: RigidTransform = field(default_factory=RigidTransform.identity)
    provenance: str = ""
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    jaw_residual: float = 0.0
    skull_residual: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.actuations, dtype=np.float64)
        if a.ndim != 3 or a.shape[1:] != (3, 3):
            raise InvalidInputError(f"actuations must be (E, 3, 3), got {a.shape}")
        if np.abs(a - np.swapaxes(a, 1, 2)).max(initial=0.0) > SYMMETRY_TOL:
            raise InvalidInputError("actuation tensors must be symmetric")
        object.__setattr__(self, "actuations", a)

    @property
    def n_elements(self) -> int:
        return len(self.actuations)

    @classmethod
    def rest(cls, n_elements: int) -> "ConstraintBundle":
        return cls(np.broadcast_to(np.eye(3), (n_elements, 3, 3)).copy(), RigidTransform.identity())

    def with_actuations(self, actuations: np.ndarray) -> "ConstraintBundle":
        return replace(self, actuations=actuations)


def non_psd_elements(actuations: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    return np.flatnonzero(np.linalg.eigvalsh(actuations).min(axis=1) < -tol)


def extract_from_map(fmap, lattice: HexLattice, anatomy: Anatomy, provenance: str = "",
                     skull: Optional[RigidTransform] = None) -> ConstraintBundle:
    """
    Constraints of any map with `eval` / `eval_with_jacobian` over the
    identity's material space. `anatomy` holds the rest bones in that space.
    """
    with torch.no_grad():
        _, jac = fmap.eval_with_jacobian(as_tensor(lattice.element_centers()))
        jaw_rest = anatomy.jaw.vertices
        skull_rest = anatomy.skull.vertices
        jaw_img = fmap.eval(as_tensor(jaw_rest)).cpu().numpy()
        skull_img = fmap.eval(as_tensor(skull_rest)).cpu().numpy()

    actuations = polar3(jac.cpu().numpy()).s
    flagged = non_psd_elements(actuations)
    if len(flagged):
        logger.warning(f"⚠ {len(flagged)} elements have a non-PSD actuation (inverted field Jacobian)")

    jaw = kabsch(jaw_rest, jaw_img)
    skull_fit = kabsch(skull_rest, skull_img)
    jaw_res = kabsch_residual(jaw_rest, jaw_img, jaw)
    skull_res = kabsch_residual(skull_rest, skull_img, skull_fit)
    logger.info(f"✓ extracted {len(actuations)} actuations; jaw angle {jaw.angle():.4f} rad, "
                f"jaw residual {jaw_res:.3g} mm², skull residual {skull_res:.3g} mm²")
    return ConstraintBundle(
        actuations, jaw, skull or RigidTransform.identity(), provenance, flagged, jaw_res, skull_res,
    )


def extract_constraints(model: FaceModel, beta: torch.Tensor, gamma: torch.Tensor, lattice: HexLattice,
                        anatomy: Anatomy, provenance: str = "",
                        skull: Optional[RigidTransform] = None) -> ConstraintBundle:
    """Constraints of the expression field for one identity and expression code."""
    return extract_from_map(model.expression_map(beta, gamma), lattice, anatomy, provenance, skull)


# ============================================================================
# cbv1 FILES
# ============================================================================

def _transform_line(tag: str, t: RigidTransform) -> str:
    values = list(t.rotation.reshape(-1)) + list(t.translation)
    return tag + " " + " ".join(f"{v:.17g}" for v in values)


def save_bundle(bundle: ConstraintBundle, path: Union[str, Path]) -> Path:
    path = Path(path)
    lines = [
        BUNDLE_FORMAT,
        f"provenance {'_'.join(bundle.provenance.split()) or '-'}",
        f"elements {bundle.n_elements}",
        _transform_line("jaw", bundle.jaw),
        _transform_line("skull", bundle.skull),
    ]
    lines.extend("a " + " ".join(f"{a[i, j]:.17g}" for i, j in _SYM) for a in bundle.actuations)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise CorpusError(f"cannot write bundle {path}: {e}") from e
    return path


def load_bundle(path: Union[str, Path]) -> ConstraintBundle:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read bundle {path}: {e}") from e
    if not lines or lines[0].strip() != BUNDLE_FORMAT:
        raise ParseError(f"expected header {BUNDLE_FORMAT!r}", 1, str(path))

    def record(i: int, tag: str, n: int) -> Tuple[str, ...]:
        if i >= len(lines):
            raise ParseError("unexpected end of file", len(lines), str(path))
        parts = lines[i].split()
        if parts[:1] != [tag] or len(parts) != n + 1:
            raise ParseError(f"expected {tag!r} record with {n} values", i + 1, str(path))
        return tuple(parts[1:])

    def transform(i: int, tag: str) -> RigidTransform:
        v = np.array([float(x) for x in record(i, tag, 12)])
        return RigidTransform(v[:9].reshape(3, 3), v[9:])

    i = 0
    try:
        provenance = record(1, "provenance", 1)[0]
        n = int(record(2, "elements", 1)[0])
        jaw = transform(3, "jaw")
        skull = transform(4, "skull")
        actuations = np.empty((n, 3, 3))
        for e in range(n):
            i = 5 + e
            v = [float(x) for x in record(i, "a", 6)]
            for (r, c), x in zip(_SYM, v):
                actuations[e, r, c] = actuations[e, c, r] = x
    except ValueError as err:
        if isinstance(err, ParseError):
            raise
        raise ParseError(str(err), i + 1, str(path)) from None
    return ConstraintBundle(actuations, jaw, skull, "" if provenance == "-" else provenance,
                            non_psd_elements(actuations))
