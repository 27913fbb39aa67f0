"""
Small dense 3x3 kernels.

Every function accepts a single matrix or a batch stacked along leading axes
and returns arrays of matching leading shape. Nothing here holds state, so the
kernels are safe to call from any worker.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import numpy.typing as npt

from errors import (
    AmbiguityError,
    ConvergenceError,
    DegenerateConfigurationError,
    InvalidInputError,
    InvertedElementError,
)

Mat3 = npt.NDArray[np.float64]
Vec3 = npt.NDArray[np.float64]

ORTHO_TOL = 1e-9
DET1_MAX_ITER = 50
TRILINEAR_SLACK = 1e-9

# corner c of a unit cell sits at (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


class SVD3(NamedTuple):
    u: Mat3
    sigma: npt.NDArray[np.float64]
    v: Mat3


class Polar3(NamedTuple):
    r: Mat3
    s: Mat3


def _as_mats(m, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.shape[-2:] != (3, 3):
        raise InvalidInputError(f"{name} must have trailing shape (3, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def svd3(m) -> SVD3:
    """m = u @ diag(sigma) @ v.T with sigma descending and nonnegative."""
    a = _as_mats(m, "m")
    u, sigma, vt = np.linalg.svd(a)
    return SVD3(u, sigma, np.swapaxes(vt, -1, -2))


def polar3(f) -> Polar3:
    """
    Rotation-stretch split f = r @ s with r in SO(3).

    When det(u v^T) < 0 the smallest singular direction is flipped, which keeps
    r a proper rotation that maximizes trace(r^T f); s is then symmetric but
    may carry one negative eigenvalue.
    """
    a = _as_mats(f, "f")
    norm = np.linalg.norm(a, axis=(-2, -1))
    if np.any(norm <= 0.0):
        raise InvalidInputError("polar3 needs a nonzero matrix")
    u, sigma, v = svd3(a)
    if np.any(sigma[..., 1] <= 1e-12 * sigma[..., 0]):
        raise AmbiguityError("polar rotation is not unique: two singular values vanish")
    vt = np.swapaxes(v, -1, -2)
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0.0, 1.0, d)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    r = u @ vt
    s = np.swapaxes(r, -1, -2) @ a
    s = 0.5 * (s + np.swapaxes(s, -1, -2))
    return Polar3(r, s)


def polar_rotation(f) -> np.ndarray:
    """Rotation factor of polar3, with the identity where it is not unique."""
    a = _as_mats(f, "f")
    try:
        return polar3(a).r
    except (AmbiguityError, InvalidInputError):
        out = np.broadcast_to(np.eye(3), a.shape).copy()
        sigma = svd3(a).sigma
        ok = sigma[..., 1] > 1e-12 * np.maximum(sigma[..., 0], 1e-300)
        if np.any(ok):
            out[ok] = polar3(a[ok]).r
        return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: Mat3
    translation: Vec3

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("rigid transform has non-finite entries")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise InvalidInputError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, pivot=None, translation=None) -> "RigidTransform":
        """Rotation by `angle` about `axis` through `pivot`, followed by `translation`."""
        r = rotation_about_axis(axis, angle)
        p = np.zeros(3) if pivot is None else np.asarray(pivot, dtype=np.float64)
        t = p - r @ p
        if translation is not None:
            t = t + np.asarray(translation, dtype=np.float64)
        return cls(r, t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))


def rotation_about_axis(axis, angle: float) -> Mat3:
    k = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(k)
    if n == 0.0:
        raise InvalidInputError("rotation axis must be nonzero")
    k = k / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def kabsch(p, q, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """Weighted least-squares rigid transform taking p onto q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise InvalidInputError(f"kabsch needs matching (n, 3) point sets, got {p.shape} and {q.shape}")
    if p.shape[0] < 3:
        raise InvalidInputError("kabsch needs at least 3 points")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InvalidInputError("kabsch points must be finite")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != p.shape[0] or np.any(w < 0.0) or w.sum() <= 0.0:
        raise InvalidInputError("kabsch weights must be nonnegative with a positive sum")
    w = w / w.sum()

    centroid_p = w @ p
    centroid_q = w @ q
    pc = p - centroid_p
    qc = q - centroid_q

    spread = np.linalg.svd(np.sqrt(w)[:, None] * pc, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-10 * spread[0]:
        raise DegenerateConfigurationError("source points are collinear or coincident")

    h = (w[:, None] * pc).T @ qc
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    d = 1.0 if d == 0.0 else d
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = centroid_q - r @ centroid_p
    return RigidTransform(r, t)


def kabsch_residual(p, q, transform: RigidTransform, weights: Optional[np.ndarray] = None) -> float:
    """Weighted mean of |R p + t - q|^2."""
    diff = transform.apply(p) - np.asarray(q, dtype=np.float64)
    sq = np.einsum("ij,ij->i", diff, diff)
    if weights is None:
        return float(sq.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float((w * sq).sum() / w.sum())


def project_det1(f) -> Mat3:
    """
    Closest matrix with determinant one, in the Frobenius sense.

    Works on singular values: minimizes sum (sigma_i - d_i)^2 subject to
    d1 d2 d3 = 1 by Newton iteration on the Lagrange system, started from the
    isotropic rescaling sigma * det^(-1/3).
    """
    a = _as_mats(f, "f")
    det = np.linalg.det(a)
    if np.any(det <= 0.0):
        raise InvertedElementError("project_det1 needs det(f) > 0")
    u, sigma, v = svd3(a)
    d = _det1_singular_values(sigma.reshape(-1, 3)).reshape(sigma.shape)
    return (u * d[..., None, :]) @ np.swapaxes(v, -1, -2)


def _det1_singular_values(sigma: np.ndarray) -> np.ndarray:
    d = sigma / np.cbrt(np.prod(sigma, axis=1))[:, None]
    cof = np.prod(d, axis=1)[:, None] / d
    kappa = np.mean((d - sigma) / cof, axis=1)
    scale = np.maximum(1.0, np.abs(sigma).max(axis=1))

    for _ in range(DET1_MAX_ITER):
        cof = np.stack([d[:, 1] * d[:, 2], d[:, 0] * d[:, 2], d[:, 0] * d[:, 1]], axis=1)
        res = np.empty((len(d), 4))
        res[:, :3] = d - sigma - kappa[:, None] * cof
        res[:, 3] = np.prod(d, axis=1) - 1.0
        if np.all(np.abs(res).max(axis=1) <= 1e-14 * scale):
            return d
        jac = np.zeros((len(d), 4, 4))
        for i in range(3):
            jac[:, i, i] = 1.0
            for j in range(3):
                if j != i:
                    k = 3 - i - j
                    jac[:, i, j] = -kappa * d[:, k]
            jac[:, i, 3] = -cof[:, i]
            jac[:, 3, i] = cof[:, i]
        step = np.linalg.solve(jac, -res[..., None])[..., 0]
        d = d + step[:, :3]
        kappa = kappa + step[:, 3]
        if not np.all(np.isfinite(d)):
            break
    cof = np.stack([d[:, 1] * d[:, 2], d[:, 0] * d[:, 2], d[:, 0] * d[:, 1]], axis=1)
    res = np.abs(np.concatenate([d - sigma - kappa[:, None] * cof, np.prod(d, axis=1)[:, None] - 1.0], axis=1))
    if np.all(np.isfinite(res)) and np.all(res.max(axis=1) <= 1e-10 * scale):
        return d
    raise ConvergenceError(f"det-1 projection did not converge in {DET1_MAX_ITER} Newton iterations")


def trilinear_basis(local, h: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weights (..., 8) and spatial gradients (..., 8, 3) of the trilinear
    shape functions at local cell coordinates in [0, 1]^3 for a cell of size h.
    """
    x = np.asarray(local, dtype=np.float64)
    if x.shape[-1] != 3:
        raise InvalidInputError(f"local coordinates need trailing size 3, got {x.shape}")
    if not np.all(np.isfinite(x)) or np.any(x < -TRILINEAR_SLACK) or np.any(x > 1.0 + TRILINEAR_SLACK):
        raise InvalidInputError("local coordinates must lie in [0, 1]^3")
    x = np.clip(x, 0.0, 1.0)

    # factors[..., c, a]: 1-D shape function along axis a for corner c
    bits = CORNER_OFFSETS.astype(np.float64)
    xe = x[..., None, :]
    factors = bits * xe + (1.0 - bits) * (1.0 - xe)
    dfactors = (2.0 * bits - 1.0) / h
    weights = np.prod(factors, axis=-1)

    grads = np.empty(x.shape[:-1] + (8, 3))
    grads[..., 0] = dfactors[:, 0] * factors[..., 1] * factors[..., 2]
    grads[..., 1] = factors[..., 0] * dfactors[:, 1] * factors[..., 2]
    grads[..., 2] = factors[..., 0] * factors[..., 1] * dfactors[:, 2]
    return weights, grads


def cofactor(m) -> Mat3:
    """Cofactor matrix, det(m) * inv(m)^T for invertible m."""
    a = np.asarray(m, dtype=np.float64)
    c0, c1, c2 = a[..., :, 0], a[..., :, 1], a[..., :, 2]
    return np.stack([np.cross(c1, c2), np.cross(c2, c0), np.cross(c0, c1)], axis=-1)
