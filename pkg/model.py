"""
FaceModel: identity field N_c (canonical -> identity material space),
expression field N_e (material space -> expression) and the latent
parameterizers, plus checkpoints and latent-space editing.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from config.settings import FieldConfig
from errors import CorpusError, InvalidInputError, ParseError
from field import (
    BoundField,
    ComposedField,
    DeformationField,
    GridField,
    LatentParameterizer,
    SirenField,
    as_tensor,
)
from geometry import TriMesh
from phantom import N_EXPR_CODE, N_ID_PARAMS, SKIN_CENTER, SKIN_RADII, Anatomy, fit_id_params

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "physface-checkpoint-v1"


def field_box(config: FieldConfig) -> Tuple[np.ndarray, np.ndarray]:
    half = SKIN_RADII * config.box_scale
    return SKIN_CENTER - half, SKIN_CENTER + half


def build_field(config: FieldConfig, latent_dim: int) -> DeformationField:
    lo, hi = field_box(config)
    if config.kind == "grid":
        return GridField(lo, hi, latent_dim, config.grid_resolution, config.grid_mode, config.displacement_scale)
    return SirenField(lo, hi, latent_dim, config.n_layers, config.width, config.omega0, config.displacement_scale)


class FaceModel(nn.Module):
    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        self.identity_field = build_field(config, config.d_id)
        self.expression_field = build_field(config, config.d_id + config.d_ex)
        self.parameterizer = LatentParameterizer(N_ID_PARAMS, N_EXPR_CODE, config.d_id, config.d_ex, config.hidden)

    @classmethod
    def from_config(cls, config: FieldConfig, seed: int = 0) -> "FaceModel":
        torch.manual_seed(seed)
        return cls(config)

    def codes(self, id_params, expr_code) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.parameterizer(as_tensor(id_params), as_tensor(expr_code))

    def identity_map(self, beta: torch.Tensor) -> BoundField:
        return BoundField(self.identity_field, beta)

    def expression_map(self, beta: torch.Tensor, gamma: torch.Tensor) -> BoundField:
        return BoundField(self.expression_field, torch.cat([beta.reshape(-1), gamma.reshape(-1)]))

    def face_map(self, beta: torch.Tensor, gamma: torch.Tensor) -> ComposedField:
        """Canonical points to expression space of identity beta."""
        return ComposedField(self.expression_map(beta, gamma), self.identity_map(beta))

    @torch.no_grad()
    def identity_anatomy(self, beta: torch.Tensor, canonical: Anatomy) -> Anatomy:
        """The canonical anatomy carried into the material space of identity beta."""
        n_c = self.identity_map(beta)

        def carry(points: np.ndarray) -> np.ndarray:
            return n_c.eval(as_tensor(points)).cpu().numpy()

        skin = canonical.skin.with_vertices(carry(canonical.skin.vertices))
        return Anatomy(
            skin,
            canonical.skull.with_vertices(carry(canonical.skull.vertices)),
            canonical.jaw.with_vertices(carry(canonical.jaw.vertices)),
            canonical.hinge_axis.copy(),
            carry(canonical.hinge_pivot[None])[0],
            canonical.landmark_ids.copy(),
            fit_id_params(skin.vertices, canonical),
            canonical.resolution,
        )

    @torch.no_grad()
    def expression_skin(self, beta: torch.Tensor, gamma: torch.Tensor, canonical: Anatomy) -> TriMesh:
        x = self.face_map(beta, gamma).eval(as_tensor(canonical.skin.vertices))
        return canonical.skin.with_vertices(x.cpu().numpy())


def retarget(model: FaceModel, source_gamma: torch.Tensor, target_beta: torch.Tensor) -> ComposedField:
    """Expression of one subject replayed on another identity."""
    return model.face_map(target_beta, source_gamma)


def interpolate_identity(beta_a: torch.Tensor, beta_b: torch.Tensor, t: float) -> torch.Tensor:
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError("interpolation weight must lie in [0, 1]")
    return (1.0 - t) * beta_a + t * beta_b


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(model: FaceModel, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "field": model.config.model_dump(),
        "state": model.state_dict(),
        "meta": meta or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise CorpusError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"✓ checkpoint written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[FaceModel, Dict[str, Any]]:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu")
    except OSError as e:
        raise CorpusError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a {CHECKPOINT_FORMAT} file", 1, str(path))
    model = FaceModel(FieldConfig.model_validate(payload["field"]))
    model.load_state_dict(payload["state"])
    return model, dict(payload.get("meta", {}))


def checkpoint_id(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
