"""
Simulation-free training losses.

Every loss takes a map exposing `eval` / `eval_with_jacobian` on float64
tensors (a BoundField, ComposedField, AffineMap, AnalyticMap ...). Inner
minimizers (best rotation, closest unit-determinant matrix, best rigid fit)
are computed in numpy on detached values and enter the loss as constants.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidInputError
from field import as_tensor, lipschitz_penalty
from numerics import kabsch, polar_rotation, project_det1
from phantom import Anatomy, bone_oracle

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

TRAIN_TERMS = ("skin", "rigid", "fix", "soft", "id", "bone", "ereg", "lreg", "lip")
TEST_TERMS = ("skin", "landmark", "rigid", "fix", "soft", "bone", "ereg", "lreg")


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    skin: float = Field(20.0, ge=0.0)
    rigid: float = Field(20.0, ge=0.0)
    fix: float = Field(20.0, ge=0.0)
    soft: float = Field(0.1, ge=0.0)
    id: float = Field(1.0, ge=0.0)
    bone: float = Field(0.1, ge=0.0)
    ereg: float = Field(0.1, ge=0.0)
    lreg: float = Field(1e-4, ge=0.0)
    lip: float = Field(2e-6, ge=0.0)
    landmark: float = Field(1.0, ge=0.0)

    def without(self, *terms: str) -> "LossWeights":
        return self.model_copy(update={t: 0.0 for t in terms})


class MaterialParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    young_modulus: float = Field(5.0, gt=0.0, description="kPa")
    poisson_ratio: float = Field(0.47, gt=0.0, lt=0.5)
    density: float = Field(0.9, gt=0.0, description="g/ml")

    @property
    def mu(self) -> float:
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.young_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


@dataclass
class LossBreakdown:
    components: Dict[str, Tensor] = field(default_factory=dict)
    diagnostics: Dict[str, int] = field(default_factory=dict)

    def __setitem__(self, key: str, value: Tensor) -> None:
        self.components[key] = value

    def __getitem__(self, key: str) -> Tensor:
        return self.components[key]

    def as_floats(self) -> Dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


def _targets(targets, n: int) -> Tensor:
    t = as_tensor(targets).reshape(-1, 3)
    if len(t) != n:
        raise InvalidInputError(f"{n} samples but {len(t)} targets")
    return t


def _weighted_mean(sq: Tensor, confidence) -> Tensor:
    """Confidence-weighted mean; only the relative weights matter."""
    if confidence is None:
        return sq.mean()
    w = as_tensor(confidence).reshape(-1)
    if len(w) != len(sq):
        raise InvalidInputError("confidence must have one entry per sample")
    total = w.sum()
    if not total > 0.0:
        raise InvalidInputError("confidence weights must not all be zero")
    return (w * sq).sum() / total


def loss_skin(fmap, points, targets, confidence=None) -> Tensor:
    """Mean squared distance between mapped samples and their targets."""
    x = as_tensor(points).reshape(-1, 3)
    t = _targets(targets, len(x))
    sq = ((fmap.eval(x) - t) ** 2).sum(-1)
    return _weighted_mean(sq, confidence)


def loss_id(identity_map, canonical_points, neutral_targets, confidence=None) -> Tensor:
    return loss_skin(identity_map, canonical_points, neutral_targets, confidence)


def loss_bone(identity_map, canonical_bone_points, oracle_points) -> Tensor:
    return loss_skin(identity_map, canonical_bone_points, oracle_points)


def loss_bone_selfsup(identity_map, canonical: Anatomy) -> Tensor:
    """Bone loss with targets predicted from the map's own neutral skin."""
    with torch.no_grad():
        skin = identity_map.eval(as_tensor(canonical.skin.vertices)).cpu().numpy()
    skull, jaw = bone_oracle(skin, canonical)
    return loss_bone(identity_map, canonical.bones(), np.concatenate([skull, jaw]))


def loss_fix(fmap, skull_points) -> Tensor:
    x = as_tensor(skull_points).reshape(-1, 3)
    if len(x) == 0:
        raise InvalidInputError("fixation loss needs at least one skull sample")
    return ((fmap.eval(x) - x) ** 2).sum(-1).mean()


def loss_rigid(fmap, regions: Sequence) -> Tensor:
    """Sum over bone regions of the mean squared residual to the best rigid fit."""
    total = torch.zeros((), dtype=torch.float64)
    for points in regions:
        x = as_tensor(points).reshape(-1, 3)
        y = fmap.eval(x)
        fit = kabsch(x.detach().cpu().numpy(), y.detach().cpu().numpy())
        rot = as_tensor(fit.rotation)
        trans = as_tensor(fit.translation)
        total = total + ((y - (x @ rot.T + trans)) ** 2).sum(-1).mean()
    return total


def loss_soft(fmap, points, material: MaterialParams) -> Tuple[Tensor, int]:
    """
    Elastic plus volume-preserving penalty on the map's Jacobians, and the
    number of samples whose Jacobian is inverted. At inverted samples the
    volume target falls back to the rotation target.
    """
    x = as_tensor(points).reshape(-1, 3)
    _, jac = fmap.eval_with_jacobian(x)
    jn = jac.detach().cpu().numpy()
    rot = polar_rotation(jn)
    vol = rot.copy()
    det = np.linalg.det(jn)
    ok = det > 0.0
    if np.any(ok):
        vol[ok] = project_det1(jn[ok])
    inverted = int((~ok).sum())
    if inverted:
        logger.warning(f"⚠ soft loss: {inverted} of {len(x)} samples inverted")
    elastic = ((jac - as_tensor(rot)) ** 2).sum((-2, -1))
    volume = ((jac - as_tensor(vol)) ** 2).sum((-2, -1))
    return (material.mu * elastic + material.lam * volume).mean(), inverted


def loss_ereg(identity_map, points) -> Tensor:
    x = as_tensor(points).reshape(-1, 3)
    _, jac = identity_map.eval_with_jacobian(x)
    rot = as_tensor(polar_rotation(jac.detach().cpu().numpy()))
    return ((jac - rot) ** 2).sum((-2, -1)).mean()


def loss_landmark(fmap, landmark_points, camera, targets_2d) -> Tuple[Tensor, int]:
    """Mean squared pixel error of projected landmarks, and the count behind the camera."""
    x = as_tensor(landmark_points).reshape(-1, 3)
    cam = as_tensor(camera).reshape(3, 4)
    if not torch.all(torch.isfinite(cam)):
        raise InvalidInputError("camera matrix is not finite")
    t = as_tensor(targets_2d).reshape(-1, 2)
    if len(t) != len(x):
        raise InvalidInputError(f"{len(x)} landmarks but {len(t)} targets")
    hom = fmap.eval(x) @ cam[:, :3].T + cam[:, 3]
    front = hom[:, 2].detach() > 0.0
    behind = int((~front).sum())
    if behind:
        logger.warning(f"⚠ {behind} landmarks behind the camera excluded")
    if not torch.any(front):
        raise InvalidInputError("every landmark lies behind the camera")
    uv = hom[front, :2] / hom[front, 2:3]
    return ((uv - t[front]) ** 2).sum(-1).mean(), behind


def loss_lreg(beta: Tensor, gamma: Optional[Tensor] = None) -> Tensor:
    out = (beta ** 2).sum()
    if gamma is not None:
        out = out + (gamma ** 2).sum()
    return out


def loss_lip(parameterizer) -> Tensor:
    return lipschitz_penalty(parameterizer)


def _objective(components: Mapping[str, Tensor], weights: LossWeights, terms: Sequence[str]) -> Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for t in terms:
        w = getattr(weights, t)
        if w == 0.0 or t not in components:
            continue
        total = total + w * components[t]
    return total


def train_objective(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    return _objective(components, weights, TRAIN_TERMS)


def test_objective(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Fitting objective: no identity supervision and no Lipschitz term."""
    return _objective(components, weights, TEST_TERMS)


test_objective.__test__ = False
