"""
Surface and constraint metrics for fitted fields and simulated faces.
All distances are in mm.
"""

import logging
from typing import Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidInputError
from field import as_tensor
from geometry import SurfaceDistance, TriMesh, edge_triangle_penetrations, sample_surface
from numerics import RigidTransform, kabsch
from phantom import Anatomy

logger = logging.getLogger(__name__)

FSCORE_SAMPLES = 32000
FSCORE_THRESHOLD = 1.0


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    v2v: float = Field(0.0, ge=0.0)
    s2m: float = Field(0.0, ge=0.0)
    fscore: float = Field(1.0, ge=0.0, le=1.0)
    normal_error: float = Field(0.0, ge=0.0)
    jaw_rigidity: float = Field(0.0, ge=0.0)
    skull_fixation: float = Field(0.0, ge=0.0)
    bone_fidelity: float = Field(0.0, ge=0.0)
    penetration_pairs: int = Field(0, ge=0)
    jaw_recovery: Optional[float] = Field(None, ge=0.0)

    def row(self, **labels) -> dict:
        """Flat CSV row, labels first."""
        return {**labels, **self.model_dump()}


def _masked(a: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return a if mask is None else a[np.asarray(mask)]


def _same_topology(gt: TriMesh, result: TriMesh) -> None:
    if gt.n_vertices != result.n_vertices:
        raise InvalidInputError(f"meshes differ in vertex count ({gt.n_vertices} vs {result.n_vertices})")


def v2v(gt: TriMesh, result: TriMesh, mask: Optional[np.ndarray] = None) -> float:
    """Mean distance between corresponding vertices."""
    _same_topology(gt, result)
    d = np.linalg.norm(gt.vertices - result.vertices, axis=1)
    return float(_masked(d, mask).mean())


def s2m(gt: TriMesh, result: TriMesh, mask: Optional[np.ndarray] = None) -> float:
    """Mean distance from ground-truth vertices to the result surface."""
    dist, _, _ = SurfaceDistance(result).query(_masked(gt.vertices, mask))
    return float(dist.mean())


def normal_error(gt: TriMesh, result: TriMesh, mask: Optional[np.ndarray] = None) -> float:
    """Mean cosine distance between corresponding vertex normals."""
    _same_topology(gt, result)
    cos = np.einsum("ij,ij->i", gt.vertex_normals, result.vertex_normals)
    return float(_masked(1.0 - np.clip(cos, -1.0, 1.0), mask).mean())


def fscore(gt: TriMesh, result: TriMesh, n: int = FSCORE_SAMPLES, threshold: float = FSCORE_THRESHOLD,
           seed: int = 0) -> float:
    """Harmonic mean of precision and recall of surface samples within `threshold`."""
    if threshold <= 0.0:
        raise InvalidInputError("fscore threshold must be positive")
    gt_samples = sample_surface(gt, n, seed).points
    result_samples = sample_surface(result, n, seed + 1).points
    precision = float((SurfaceDistance(gt).query(result_samples)[0] <= threshold).mean())
    recall = float((SurfaceDistance(result).query(gt_samples)[0] <= threshold).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jaw_rigidity(rest_jaw: np.ndarray, deformed_jaw: np.ndarray) -> float:
    """Mean distance of the deformed jaw to its best rigid fit."""
    fit = kabsch(rest_jaw, deformed_jaw)
    return float(np.linalg.norm(fit.apply(rest_jaw) - deformed_jaw, axis=1).mean())


def skull_fixation(rest_skull: np.ndarray, deformed_skull: np.ndarray,
                   pose: Optional[RigidTransform] = None) -> float:
    """Mean displacement of the skull away from its rest (or posed) position."""
    target = rest_skull if pose is None else pose.apply(rest_skull)
    return float(np.linalg.norm(deformed_skull - target, axis=1).mean())


def bone_fidelity(predicted_bones: np.ndarray, oracle_bones: np.ndarray) -> float:
    if predicted_bones.shape != oracle_bones.shape:
        raise InvalidInputError("bone vertex sets differ in shape")
    return float(np.linalg.norm(predicted_bones - oracle_bones, axis=1).mean())


def jaw_recovery(rest_jaw: np.ndarray, recovered: RigidTransform, truth: RigidTransform) -> float:
    """Mean distance between rest jaw vertices moved by the recovered and the true transform."""
    return float(np.linalg.norm(recovered.apply(rest_jaw) - truth.apply(rest_jaw), axis=1).mean())


def penetration_pairs(a: TriMesh, b: TriMesh) -> int:
    """Edge-triangle crossings between two surfaces, counted in both directions."""
    return edge_triangle_penetrations(a, b)


def map_bones(fmap, anatomy: Anatomy) -> Tuple[np.ndarray, np.ndarray]:
    """Skull and jaw vertices carried through a field map."""
    with torch.no_grad():
        skull = fmap.eval(as_tensor(anatomy.skull.vertices)).cpu().numpy()
        jaw = fmap.eval(as_tensor(anatomy.jaw.vertices)).cpu().numpy()
    return skull, jaw


def evaluate_surfaces(
    gt: TriMesh,
    result: TriMesh,
    mask: Optional[np.ndarray] = None,
    n_samples: int = FSCORE_SAMPLES,
    threshold: float = FSCORE_THRESHOLD,
    seed: int = 0,
    **constraint_metrics,
) -> MetricReport:
    """Surface metrics of a result skin against ground truth, plus any precomputed constraint metrics."""
    report = MetricReport(
        v2v=v2v(gt, result, mask),
        s2m=s2m(gt, result, mask),
        fscore=fscore(gt, result, n_samples, threshold, seed),
        normal_error=normal_error(gt, result, mask),
        **constraint_metrics,
    )
    logger.info(f"✓ v2v {report.v2v:.4f} mm, s2m {report.s2m:.4f} mm, fscore {report.fscore:.4f}")
    return report
