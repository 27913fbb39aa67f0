"""
Synthetic head phantom: anatomy, identity warps, analytic expressions and
the on-disk corpus built from them.

Coordinates are millimetres with x lateral, y up and z forward (the face
looks down +z). Every identity shares the canonical topology, so vertex i
of any skin, skull or jaw corresponds across identities and expressions.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import CorpusError, InvalidInputError
from geometry import TriMesh, SurfaceDistance, load_obj, save_obj
from numerics import RigidTransform

logger = logging.getLogger(__name__)

N_ID_PARAMS = 6
N_EXPR_CODE = 6
N_LANDMARKS = 64

SKIN_CENTER = np.array([0.0, 0.0, 0.0])
SKIN_RADII = np.array([80.0, 100.0, 90.0])
SKULL_CENTER = np.array([0.0, 10.0, -5.0])
SKULL_RADII = np.array([68.0, 82.0, 78.0])
SKULL_CUT = -14.0
JAW_CENTER = np.array([0.0, -30.0, 12.0])
JAW_RADII = np.array([54.0, 44.0, 56.0])
JAW_CUT = -34.0
HINGE_PIVOT = np.array([0.0, -24.0, -42.0])
HINGE_AXIS = np.array([1.0, 0.0, 0.0])

MAX_JAW_ANGLE = 0.25
MAX_JAW_SLIDE = 2.0
LOW_CONFIDENCE = 0.1
BACK_BAND_Z = -45.0

# blend shaping, mm
SMOOTH_K = 2.0
BONE_MARGIN = 1.0
SKULL_BAND = 12.0
JAW_BAND = 20.0

# (center, plateau radius, falloff, principal stretch per unit amplitude)
BULGES = (
    ((-62.0, -30.0, 45.0), 10.0, 12.0, (0.12, 0.10, -0.08)),
    ((62.0, -30.0, 45.0), 10.0, 12.0, (0.12, 0.10, -0.08)),
    ((0.0, 50.0, 70.0), 6.0, 8.0, (0.10, -0.10, 0.05)),
    ((0.0, -24.0, 76.0), 7.0, 9.0, (0.15, -0.10, 0.10)),
)


# ============================================================================
# MESH CONSTRUCTION
# ============================================================================

def _ring_mesh(top: np.ndarray, rings: Sequence[np.ndarray], bottom: np.ndarray) -> TriMesh:
    n_lon = len(rings[0])
    verts = [top[None]] + list(rings) + [bottom[None]]
    vertices = np.concatenate(verts)
    ring_start = [1 + i * n_lon for i in range(len(rings))]
    bottom_id = len(vertices) - 1
    j = np.arange(n_lon)
    jn = (j + 1) % n_lon
    tris = [np.stack([np.zeros(n_lon, dtype=np.int64), ring_start[0] + j, ring_start[0] + jn], axis=1)]
    for a, b in zip(ring_start[:-1], ring_start[1:]):
        tris.append(np.stack([a + j, b + j, b + jn], axis=1))
        tris.append(np.stack([a + j, b + jn, a + jn], axis=1))
    last = ring_start[-1]
    tris.append(np.stack([np.full(n_lon, bottom_id), last + jn, last + j], axis=1))
    triangles = np.concatenate(tris)

    corners = vertices[triangles]
    volume = np.einsum("ij,ij->i", corners[:, 0], np.cross(corners[:, 1], corners[:, 2])).sum()
    if volume < 0.0:
        triangles = triangles[:, ::-1]
    return TriMesh(vertices, np.ascontiguousarray(triangles))


def ellipsoid_mesh(center, radii, n_lat: int, n_lon: int) -> TriMesh:
    c = np.asarray(center, dtype=np.float64)
    r = np.asarray(radii, dtype=np.float64)
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    rings = []
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        unit = np.stack([np.sin(theta) * np.cos(phi), np.full(n_lon, np.cos(theta)), np.sin(theta) * np.sin(phi)], axis=1)
        rings.append(c + unit * r)
    return _ring_mesh(c + np.array([0.0, r[1], 0.0]), rings, c - np.array([0.0, r[1], 0.0]))


def truncated_ellipsoid_mesh(center, radii, cut: float, keep_above: bool, n_lat: int, n_lon: int, n_cap: int) -> TriMesh:
    """Ellipsoid cut by the plane y = cut and closed by a flat disk."""
    c = np.asarray(center, dtype=np.float64)
    r = np.asarray(radii, dtype=np.float64)
    sign = 1.0 if keep_above else -1.0
    cos_cut = sign * (cut - c[1]) / r[1]
    if not -1.0 < cos_cut < 1.0:
        raise InvalidInputError("cut plane misses the ellipsoid")
    theta_cut = np.arccos(cos_cut)
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    rings = []
    for i in range(1, n_lat + 1):
        theta = theta_cut * i / n_lat
        unit = np.stack([np.sin(theta) * np.cos(phi), np.full(n_lon, sign * np.cos(theta)), np.sin(theta) * np.sin(phi)], axis=1)
        rings.append(c + unit * r)
    rim = rings[-1]
    hub = np.array([c[0], cut, c[2]])
    for j in range(1, n_cap):
        s = 1.0 - j / n_cap
        rings.append(hub + s * (rim - hub))
    return _ring_mesh(c + np.array([0.0, sign * r[1], 0.0]), rings, hub)


# ============================================================================
# ANATOMY
# ============================================================================

class PhantomResolution(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    skin_lat: int = Field(20, ge=4)
    skin_lon: int = Field(32, ge=6)
    bone_lat: int = Field(10, ge=3)
    bone_lon: int = Field(24, ge=6)
    cap_rings: int = Field(4, ge=1)


@dataclass(frozen=True, eq=False)
class Anatomy:
    skin: TriMesh
    skull: TriMesh
    jaw: TriMesh
    hinge_axis: np.ndarray
    hinge_pivot: np.ndarray
    landmark_ids: np.ndarray
    id_params: np.ndarray
    resolution: PhantomResolution = field(default_factory=PhantomResolution)

    def bones(self) -> np.ndarray:
        return np.concatenate([self.skull.vertices, self.jaw.vertices])


def _farthest_points(points: np.ndarray, k: int, start: int) -> np.ndarray:
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(1, min(k, len(points))):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def make_canonical(resolution: Optional[PhantomResolution] = None) -> Anatomy:
    res = resolution or PhantomResolution()
    skin = ellipsoid_mesh(SKIN_CENTER, SKIN_RADII, res.skin_lat, res.skin_lon)
    confidence = np.where(skin.vertices[:, 2] < BACK_BAND_Z, LOW_CONFIDENCE, 1.0)
    skin = TriMesh(skin.vertices, skin.triangles, confidence)
    skull = truncated_ellipsoid_mesh(SKULL_CENTER, SKULL_RADII, SKULL_CUT, True, res.bone_lat, res.bone_lon, res.cap_rings)
    jaw = truncated_ellipsoid_mesh(JAW_CENTER, JAW_RADII, JAW_CUT, False, res.bone_lat, res.bone_lon, res.cap_rings)

    frontal = np.flatnonzero(skin.vertices[:, 2] > 0.0)
    start = int(np.argmax(skin.vertices[frontal, 2]))
    landmarks = frontal[_farthest_points(skin.vertices[frontal], N_LANDMARKS, start)]
    return Anatomy(
        skin, skull, jaw, HINGE_AXIS.copy(), HINGE_PIVOT.copy(), landmarks,
        np.zeros(N_ID_PARAMS), res,
    )


def min_bone_gap(anatomy: Anatomy) -> float:
    """Smallest distance from any bone vertex to the skin surface."""
    dist, _, _ = SurfaceDistance(anatomy.skin).query(anatomy.bones())
    return float(dist.min())


# ============================================================================
# IDENTITY WARP
# ============================================================================

def warp_modes(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Displacement modes (n, K, 3) and their spatial Jacobians (n, K, 3, 3)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    n = len(y)
    x0, x1, x2 = y[:, 0], y[:, 1], y[:, 2]
    m = np.zeros((n, N_ID_PARAMS, 3))
    dm = np.zeros((n, N_ID_PARAMS, 3, 3))
    m[:, 0, 0] = 0.05 * x0
    dm[:, 0, 0, 0] = 0.05
    m[:, 1, 1] = 0.05 * x1
    dm[:, 1, 1, 1] = 0.05
    m[:, 2, 2] = 0.05 * x2
    dm[:, 2, 2, 2] = 0.05
    m[:, 3, 2] = -0.05 * x1
    dm[:, 3, 2, 1] = -0.05
    q = 1.0 - (x1 / 100.0) ** 2
    m[:, 4, 0] = 0.05 * x0 * q
    dm[:, 4, 0, 0] = 0.05 * q
    dm[:, 4, 0, 1] = -0.05 * x0 * 2.0 * x1 / 1e4
    s = (x0 / 80.0) ** 2
    m[:, 5, 2] = 0.04 * x2 * s
    dm[:, 5, 2, 0] = 0.04 * x2 * 2.0 * x0 / 6400.0
    dm[:, 5, 2, 2] = 0.04 * s
    return m, dm


def _check_id_params(id_params) -> np.ndarray:
    p = np.asarray(id_params, dtype=np.float64).reshape(-1)
    if p.shape[0] != N_ID_PARAMS:
        raise InvalidInputError(f"identity parameters need {N_ID_PARAMS} entries, got {p.shape[0]}")
    if not np.all(np.isfinite(p)) or np.any(np.abs(p) > 1.0):
        raise InvalidInputError("identity parameters must lie in [-1, 1]")
    return p


def warp(y, id_params) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(id_params, dtype=np.float64)
    if not np.any(p):
        return y.copy()
    m, _ = warp_modes(y)
    return y + np.einsum("k,nkj->nj", p, m).reshape(y.shape)


def warp_jacobian(y, id_params) -> np.ndarray:
    _, dm = warp_modes(y)
    return np.eye(3) + np.einsum("k,nkij->nij", np.asarray(id_params, dtype=np.float64), dm)


def unwarp(x, id_params, tol: float = 1e-12, max_iter: int = 30) -> np.ndarray:
    """Canonical preimage of identity-space points by Newton iteration."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(id_params, dtype=np.float64)
    if not np.any(p):
        return x.copy()
    y = x.copy()
    for _ in range(max_iter):
        r = warp(y, p) - x
        if np.abs(r).max() <= tol * (1.0 + np.abs(x).max()):
            break
        y = y - np.linalg.solve(warp_jacobian(y, p), r[..., None])[..., 0]
    return y


def make_identity(id_params, canonical: Anatomy) -> Anatomy:
    p = _check_id_params(id_params)
    return Anatomy(
        canonical.skin.with_vertices(warp(canonical.skin.vertices, p)),
        canonical.skull.with_vertices(warp(canonical.skull.vertices, p)),
        canonical.jaw.with_vertices(warp(canonical.jaw.vertices, p)),
        canonical.hinge_axis.copy(),
        warp(canonical.hinge_pivot[None], p)[0],
        canonical.landmark_ids.copy(),
        p,
        canonical.resolution,
    )


def fit_id_params(skin_vertices, canonical: Anatomy) -> np.ndarray:
    """Least-squares identity parameters explaining a neutral skin in correspondence."""
    v = np.asarray(skin_vertices, dtype=np.float64)
    if v.shape != canonical.skin.vertices.shape:
        raise InvalidInputError("skin is not in correspondence with the canonical skin")
    m, _ = warp_modes(canonical.skin.vertices)
    a = np.transpose(m, (0, 2, 1)).reshape(-1, N_ID_PARAMS)
    b = (v - canonical.skin.vertices).reshape(-1)
    p, *_ = np.linalg.lstsq(a, b, rcond=None)
    return np.clip(p, -1.0, 1.0)


def bone_oracle(skin_vertices, canonical: Anatomy) -> Tuple[np.ndarray, np.ndarray]:
    """Skull and jaw vertices predicted from a neutral skin."""
    p = fit_id_params(skin_vertices, canonical)
    return warp(canonical.skull.vertices, p), warp(canonical.jaw.vertices, p)


# ============================================================================
# EXPRESSIONS
# ============================================================================

class Bulge(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: List[float]
    radius: float = Field(gt=0.0)
    stretch: List[List[float]]
    falloff: float = Field(gt=0.0)

    @field_validator("center")
    @classmethod
    def _three(cls, v):
        if len(v) != 3:
            raise ValueError("center needs 3 coordinates")
        return v

    @field_validator("stretch")
    @classmethod
    def _symmetric_positive(cls, v):
        s = np.asarray(v, dtype=np.float64)
        if s.shape != (3, 3):
            raise ValueError("stretch must be 3x3")
        if np.abs(s - s.T).max() > 1e-12:
            raise ValueError("stretch must be symmetric")
        if np.linalg.det(s) <= 0.0:
            raise ValueError("stretch must have det > 0")
        return v


class ExpressionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    jaw_angle: float = Field(0.0, ge=0.0, le=0.5)
    jaw_slide: float = 0.0
    bulges: List[Bulge] = Field(default_factory=list)
    expression_code: List[float] = Field(default_factory=lambda: [0.0] * N_EXPR_CODE)

    @classmethod
    def neutral(cls) -> "ExpressionSpec":
        return cls()

    @classmethod
    def from_code(cls, code: Sequence[float]) -> "ExpressionSpec":
        """
        code[0] in [0, 1] opens the jaw, code[1] in [-1, 1] slides it,
        code[2:6] in [-1, 1] drive the four facial bulges.
        """
        c = np.asarray(code, dtype=np.float64).reshape(-1)
        if c.shape[0] != N_EXPR_CODE:
            raise InvalidInputError(f"expression code needs {N_EXPR_CODE} entries")
        if c[0] < 0.0 or c[0] > 1.0 or np.any(np.abs(c[1:]) > 1.0):
            raise InvalidInputError("expression code out of range")
        bulges = []
        for amp, (center, radius, falloff, principal) in zip(c[2:], BULGES):
            if amp == 0.0:
                continue
            stretch = np.diag(1.0 + amp * np.asarray(principal))
            bulges.append(Bulge(center=list(center), radius=radius, stretch=stretch.tolist(), falloff=falloff))
        return cls(
            jaw_angle=float(MAX_JAW_ANGLE * c[0]),
            jaw_slide=float(MAX_JAW_SLIDE * c[1]),
            bulges=bulges,
            expression_code=c.tolist(),
        )

    def is_neutral(self) -> bool:
        return self.jaw_angle == 0.0 and self.jaw_slide == 0.0 and not self.bulges


def _smoothstep(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t)


def _smooth_max(a, b, ga, gb, k: float = SMOOTH_K):
    h = np.maximum(k - np.abs(a - b), 0.0) / k
    sgn = np.sign(a - b)
    value = np.maximum(a, b) + h * h * k / 4.0
    da = (a > b).astype(np.float64) - 0.5 * h * sgn
    db = (b > a).astype(np.float64) + 0.5 * h * sgn
    tie = a == b
    da = np.where(tie, 0.5, da)
    db = np.where(tie, 0.5, db)
    return value, da[:, None] * ga + db[:, None] * gb


def _ellipsoid_level(y, center, radii):
    q = (y - center) / radii
    norm = np.sqrt(np.einsum("ij,ij->i", q, q) + 1e-24)
    scale = radii.min()
    return (norm - 1.0) * scale, scale * q / radii / norm[:, None]


def bone_implicit(y, which: str) -> Tuple[np.ndarray, np.ndarray]:
    """Smoothed signed level of the canonical skull or jaw, <= margin on the bone."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    ones = np.zeros_like(y)
    if which == "skull":
        e, ge = _ellipsoid_level(y, SKULL_CENTER, SKULL_RADII)
        ones[:, 1] = -1.0
        return _smooth_max(e, SKULL_CUT - y[:, 1], ge, ones)
    if which == "jaw":
        e, ge = _ellipsoid_level(y, JAW_CENTER, JAW_RADII)
        ones[:, 1] = 1.0
        return _smooth_max(e, y[:, 1] - JAW_CUT, ge, ones)
    raise InvalidInputError(f"unknown bone {which!r}")


def bone_weight(y, which: str) -> Tuple[np.ndarray, np.ndarray]:
    """1 on the bone, 0 beyond its blend band, C1 in between."""
    band = SKULL_BAND if which == "skull" else JAW_BAND
    f, gf = bone_implicit(y, which)
    s, ds = _smoothstep((f - BONE_MARGIN) / band)
    return 1.0 - s, -(ds / band)[:, None] * gf


class GroundTruthMap:
    """
    Analytic expression map of one anatomy: fixed skull, rigid jaw, a C1
    rigid blend in between and masked facial bulges. Weights are computed
    on the canonical preimage so every identity shares the same regions.
    """

    def __init__(self, anatomy: Anatomy, spec: ExpressionSpec):
        self.anatomy = anatomy
        self.spec = spec
        self.id_params = np.asarray(anatomy.id_params, dtype=np.float64)
        self.jaw = jaw_transform(anatomy, spec)
        self.bulges = [
            (
                warp(np.asarray(b.center)[None], self.id_params)[0],
                b.radius,
                b.falloff,
                np.asarray(b.stretch) - np.eye(3),
            )
            for b in spec.bulges
        ]

    def eval(self, x) -> np.ndarray:
        return self.eval_with_jacobian(x)[0]

    def jacobian(self, x) -> np.ndarray:
        return self.eval_with_jacobian(x)[1]

    def eval_with_jacobian(self, x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = x.reshape(-1, 3)
        n = len(x)
        if self.spec.is_neutral():
            out, jac = x.copy(), np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            return (out[0], jac[0]) if single else (out, jac)

        y = unwarp(x, self.id_params)
        jinv = np.linalg.inv(warp_jacobian(y, self.id_params))
        ws, gws = bone_weight(y, "skull")
        wj, gwj = bone_weight(y, "jaw")
        # pull weight gradients from canonical to identity coordinates
        gws = np.einsum("nji,nj->ni", jinv, gws)
        gwj = np.einsum("nji,nj->ni", jinv, gwj)

        w = wj * (1.0 - ws)
        gw = gwj * (1.0 - ws)[:, None] - wj[:, None] * gws
        mask = (1.0 - ws) * (1.0 - wj)
        gmask = -gws * (1.0 - wj)[:, None] - (1.0 - ws)[:, None] * gwj

        rot = self.jaw.rotation
        target = self.jaw.apply(x)
        delta = target - x
        out = x + w[:, None] * delta
        jac = np.eye(3) + w[:, None, None] * (rot - np.eye(3)) + np.einsum("ni,nj->nij", delta, gw)

        if self.bulges:
            disp = np.zeros_like(x)
            jdisp = np.zeros((n, 3, 3))
            for center, radius, falloff, stretch in self.bulges:
                rel = x - center
                r = np.sqrt(np.einsum("ij,ij->i", rel, rel) + 1e-24)
                s, ds = _smoothstep((r - radius) / falloff)
                g = 1.0 - s
                gg = -(ds / falloff)[:, None] * rel / r[:, None]
                local = rel @ stretch.T
                disp += g[:, None] * local
                jdisp += g[:, None, None] * stretch + np.einsum("ni,nj->nij", local, gg)
            out = out + mask[:, None] * disp
            jac = jac + np.einsum("ni,nj->nij", disp, gmask) + mask[:, None, None] * jdisp
        return (out[0], jac[0]) if single else (out, jac)


def jaw_transform(anatomy: Anatomy, spec: ExpressionSpec) -> RigidTransform:
    """Hinge rotation about the anatomy's pivot followed by the slide."""
    axis = np.asarray(anatomy.hinge_axis, dtype=np.float64)
    pivot = np.asarray(anatomy.hinge_pivot, dtype=np.float64)
    tangent = np.cross(axis, np.array([0.0, 1.0, 0.0]))
    tangent = tangent / np.linalg.norm(tangent)
    # cross(x, y) = +z: slide moves the jaw forward
    return RigidTransform.from_axis_angle(axis, spec.jaw_angle, pivot=pivot, translation=spec.jaw_slide * tangent)


def ground_truth_map(anatomy: Anatomy, spec: ExpressionSpec) -> GroundTruthMap:
    return GroundTruthMap(anatomy, spec)


def posed_anatomy(anatomy: Anatomy, spec: ExpressionSpec) -> Anatomy:
    """Anatomy with skin, skull and jaw carried through the expression map."""
    gt = GroundTruthMap(anatomy, spec)
    return Anatomy(
        anatomy.skin.with_vertices(gt.eval(anatomy.skin.vertices)),
        anatomy.skull.with_vertices(gt.eval(anatomy.skull.vertices)),
        anatomy.jaw.with_vertices(gt.eval(anatomy.jaw.vertices)),
        anatomy.hinge_axis.copy(),
        gt.jaw.apply(anatomy.hinge_pivot[None])[0],
        anatomy.landmark_ids.copy(),
        anatomy.id_params.copy(),
        anatomy.resolution,
    )


# ============================================================================
# CAMERAS AND MASKS
# ============================================================================

def look_at_camera(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), focal: float = 1000.0,
                   principal: Tuple[float, float] = (256.0, 256.0)) -> np.ndarray:
    """3x4 pinhole projection; image x right, image y down, depth along the view."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    k = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
    return k @ np.hstack([rot, -(rot @ eye)[:, None]])


def project(camera: np.ndarray, points) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (n, 2) and depths (n,)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h = p @ camera[:, :3].T + camera[:, 3]
    return h[:, :2] / h[:, 2:3], h[:, 2]


def frontal_mask(anatomy: Anatomy) -> np.ndarray:
    """Skin vertex ids of the front half of the face."""
    return np.flatnonzero(anatomy.skin.vertices[:, 2] > 0.0)


# ============================================================================
# CORPUS
# ============================================================================

class ExpressionEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spec: ExpressionSpec
    skin_file: str


class IdentityEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id_params: List[float]
    directory: str
    neutral_files: List[str]
    landmarks_file: str
    expressions: List[ExpressionEntry]

    @model_validator(mode="after")
    def _neutral_first(self):
        if not self.expressions or not self.expressions[0].spec.is_neutral():
            raise ValueError("each identity needs a neutral expression first")
        return self


class CorpusManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = "physface-corpus-v1"
    seed: int
    resolution: PhantomResolution
    identities: List[IdentityEntry]


@dataclass
class IdentityData:
    anatomy: Anatomy
    specs: List[ExpressionSpec]
    skins: List[TriMesh]


@dataclass
class Corpus:
    root: Path
    manifest: CorpusManifest
    canonical: Anatomy
    identities: List[IdentityData]

    def pairs(self) -> List[Tuple[int, int]]:
        return [(i, j) for i, ident in enumerate(self.identities) for j in range(len(ident.specs))]


def random_expression_code(rng: np.random.Generator) -> np.ndarray:
    code = rng.uniform(-1.0, 1.0, N_EXPR_CODE)
    code[0] = rng.uniform(0.0, 1.0)
    return code


def gen_corpus(n_ids: int, n_exprs: int, seed: int, out_dir: Union[str, Path],
               resolution: Optional[PhantomResolution] = None) -> CorpusManifest:
    """
    Write neutral anatomies, deformed expression skins and landmark tables.
    Expression 0 of every identity is the neutral one.
    """
    if n_ids < 1 or n_exprs < 1:
        raise InvalidInputError("corpus needs at least one identity and one expression")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create corpus directory {out}: {e}") from e

    canonical = make_canonical(resolution)
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(n_ids):
        params = rng.uniform(-1.0, 1.0, N_ID_PARAMS)
        anatomy = make_identity(params, canonical)
        sub = f"id_{k}"
        names = [f"{sub}/neutral_{part}.obj" for part in ("skin", "skull", "jaw")]
        for name, mesh in zip(names, (anatomy.skin, anatomy.skull, anatomy.jaw)):
            save_obj(mesh, out / name)
        landmarks = f"{sub}/landmarks.txt"
        (out / landmarks).write_text("".join(f"{i}\n" for i in anatomy.landmark_ids))

        expressions = []
        for j in range(n_exprs):
            spec = ExpressionSpec.neutral() if j == 0 else ExpressionSpec.from_code(random_expression_code(rng))
            skin_name = f"{sub}/expr_{j}_skin.obj"
            posed = GroundTruthMap(anatomy, spec).eval(anatomy.skin.vertices)
            save_obj(anatomy.skin.with_vertices(posed), out / skin_name)
            expressions.append(ExpressionEntry(spec=spec, skin_file=skin_name))
        entries.append(IdentityEntry(
            id_params=params.tolist(), directory=sub, neutral_files=names,
            landmarks_file=landmarks, expressions=expressions,
        ))
        logger.info(f"✓ identity {k}: {n_exprs} expressions written")

    manifest = CorpusManifest(seed=seed, resolution=canonical.resolution, identities=entries)
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.info(f"✓ corpus with {n_ids} identities written to {out}")
    return manifest


def load_corpus(root: Union[str, Path]) -> Corpus:
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = CorpusManifest.model_validate_json(path.read_text())
    except OSError as e:
        raise CorpusError(f"cannot read corpus manifest {path}: {e}") from e
    except ValidationError as e:
        raise CorpusError(f"corpus manifest {path} is malformed: {e.error_count()} errors") from e
    canonical = make_canonical(manifest.resolution)
    identities = []
    for entry in manifest.identities:
        skin, skull, jaw = (load_obj(root / name) for name in entry.neutral_files)
        if skin.n_vertices != canonical.skin.n_vertices:
            raise CorpusError(f"{entry.directory}: skin is not in canonical correspondence")
        params = np.asarray(entry.id_params)
        try:
            landmark_ids = np.array([int(s) for s in (root / entry.landmarks_file).read_text().split()], dtype=np.int64)
        except (OSError, ValueError) as e:
            raise CorpusError(f"{entry.directory}: bad landmark table: {e}") from e
        anatomy = Anatomy(
            skin, skull, jaw, HINGE_AXIS.copy(), warp(HINGE_PIVOT[None], params)[0],
            landmark_ids, params, manifest.resolution,
        )
        specs = [e.spec for e in entry.expressions]
        skins = [load_obj(root / e.skin_file) for e in entry.expressions]
        identities.append(IdentityData(anatomy, specs, skins))
    logger.info(f"✓ loaded corpus {root} ({len(identities)} identities)")
    return Corpus(root, manifest, canonical, identities)


def manifest_digest(root: Union[str, Path]) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()
