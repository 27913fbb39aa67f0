"""
End-to-end training of the face model on a phantom corpus, and test-time
fitting of latent codes to scans or 2D landmarks.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config.settings import FitConfig, RunConfig, SamplingConfig, ScheduleConfig
from errors import DivergenceError, InvalidInputError
from field import GradientTape, PosedMap, as_tensor, axis_angle_matrix, backprop, inset_points
from geometry import SurfaceSampleSet, TriMesh, sample_surface, sample_volume
from losses import (
    LossBreakdown,
    LossWeights,
    MaterialParams,
    loss_bone,
    loss_bone_selfsup,
    loss_ereg,
    loss_fix,
    loss_id,
    loss_landmark,
    loss_lip,
    loss_lreg,
    loss_rigid,
    loss_skin,
    loss_soft,
    test_objective,
    train_objective,
)
from model import FaceModel, save_checkpoint
from numerics import RigidTransform
from phantom import N_EXPR_CODE, N_ID_PARAMS, Anatomy, Corpus, bone_oracle

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


# ============================================================================
# OPTIMIZER
# ============================================================================

@dataclass
class AdamState:
    step: int = 0
    m: List[Tensor] = field(default_factory=list)
    v: List[Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to `params` in place."""
    if len(params) != len(grads):
        raise InvalidInputError("one gradient per parameter expected")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def learning_rate(step: int, steps_per_epoch: int, schedule: ScheduleConfig) -> float:
    """Constant until `decay_after` epochs, then linear decay to zero at the last epoch."""
    epoch = step / max(1, steps_per_epoch)
    if epoch < schedule.decay_after or schedule.epochs <= schedule.decay_after:
        return schedule.learning_rate
    frac = (epoch - schedule.decay_after) / (schedule.epochs - schedule.decay_after)
    return schedule.learning_rate * max(0.0, 1.0 - frac)


# ============================================================================
# TRAINING
# ============================================================================

def corresponding_points(samples: SurfaceSampleSet, mesh: TriMesh, vertices: np.ndarray) -> np.ndarray:
    """Points at the samples' barycentric coordinates on a mesh in correspondence."""
    corners = vertices[mesh.triangles[samples.triangle_ids]]
    return np.einsum("ni,nij->nj", samples.barycentric, corners)


@dataclass
class PairData:
    identity: int
    expression: int
    id_params: np.ndarray
    expr_code: np.ndarray
    target_skin: np.ndarray


@dataclass
class TrainingData:
    """Everything a training step needs, precomputed once from the corpus."""

    canonical: Anatomy
    identities: List[Anatomy]
    neutral_skins: List[np.ndarray]
    oracle_bones: List[np.ndarray]
    pairs: List[PairData]
    volume_pool: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Corpus, sampling: SamplingConfig, seed: int) -> "TrainingData":
        canonical = corpus.canonical
        identities, neutral, oracle, pairs = [], [], [], []
        for i, ident in enumerate(corpus.identities):
            skin = ident.skins[0].vertices
            skull, jaw = bone_oracle(skin, canonical)
            identities.append(ident.anatomy)
            neutral.append(skin)
            oracle.append(np.concatenate([skull, jaw]))
            for j, (spec, mesh) in enumerate(zip(ident.specs, ident.skins)):
                pairs.append(PairData(i, j, ident.anatomy.id_params, np.asarray(spec.expression_code), mesh.vertices))
        pool = sample_volume(
            canonical.skin, [canonical.skull, canonical.jaw], sampling.n_volume * sampling.volume_pool, seed
        )
        return cls(canonical, identities, neutral, oracle, pairs, pool)


def pair_losses(model: FaceModel, data: TrainingData, pair: PairData, weights: LossWeights,
                material: MaterialParams, sampling: SamplingConfig, rng: np.random.Generator) -> LossBreakdown:
    """Every per-pair training loss; the Lipschitz term is added once per batch."""
    out = LossBreakdown()
    canonical = data.canonical
    anatomy = data.identities[pair.identity]
    beta, gamma = model.codes(pair.id_params, pair.expr_code)
    n_c = model.identity_map(beta)
    n_e = model.expression_map(beta, gamma)

    def seed() -> int:
        return int(rng.integers(0, 2 ** 31 - 1))

    skin = sample_surface(canonical.skin, sampling.n_skin, seed())
    if weights.skin:
        target = corresponding_points(skin, canonical.skin, pair.target_skin)
        out["skin"] = loss_skin(model.face_map(beta, gamma), skin.points, target, skin.confidence)
    if weights.id:
        target = corresponding_points(skin, canonical.skin, data.neutral_skins[pair.identity])
        out["id"] = loss_id(n_c, skin.points, target, skin.confidence)
    if weights.bone:
        out["bone"] = loss_bone(n_c, canonical.bones(), data.oracle_bones[pair.identity])

    if weights.rigid:
        skull = sample_surface(anatomy.skull, sampling.n_bone, seed()).points
        jaw = sample_surface(anatomy.jaw, sampling.n_bone, seed()).points
        out["rigid"] = loss_rigid(n_e, [skull, jaw])
    if weights.fix:
        out["fix"] = loss_fix(n_e, sample_surface(anatomy.skull, sampling.n_fix, seed()).points)

    pick = rng.choice(len(data.volume_pool), size=min(sampling.n_volume, len(data.volume_pool)), replace=False)
    volume = data.volume_pool[pick]
    if weights.soft:
        with torch.no_grad():
            material_points = n_c.eval(inset_points(volume, model.identity_field))
        soft, inverted = loss_soft(n_e, inset_points(material_points, model.expression_field), material)
        out["soft"] = soft
        out.diagnostics["inverted"] = inverted
    if weights.ereg:
        out["ereg"] = loss_ereg(n_c, inset_points(volume, model.identity_field))
    if weights.lreg:
        out["lreg"] = loss_lreg(beta, gamma)
    return out


@dataclass
class TrainResult:
    model: FaceModel
    history: List[Dict[str, float]]
    checkpoint_path: Optional[Path]
    steps: int


def _mean_breakdown(parts: List[LossBreakdown]) -> LossBreakdown:
    out = LossBreakdown()
    for key in parts[0].components:
        out[key] = torch.stack([p[key] for p in parts]).mean()
    out.diagnostics["inverted"] = sum(p.diagnostics.get("inverted", 0) for p in parts)
    return out


def train(
    corpus: Corpus,
    model: FaceModel,
    config: RunConfig,
    seed: Optional[int] = None,
    run_dir: Optional[Path] = None,
    on_step: Optional[Callable[[int, Dict[str, float]], None]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """
    Minibatch Adam over (identity, expression) pairs. Volume samples are
    redrawn every batch from a fixed canonical pool.
    """
    seed = config.seed if seed is None else seed
    weights, material, sampling, schedule = config.weights, config.material, config.sampling, config.schedule
    rng = np.random.default_rng(seed)
    data = TrainingData.from_corpus(corpus, sampling, seed)
    n_pairs = len(data.pairs)
    steps_per_epoch = max(1, -(-n_pairs // schedule.batch_size))
    total_steps = schedule.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState()
    history: List[Dict[str, float]] = []
    last_good = copy.deepcopy(model.state_dict())
    logger.info(f"✓ training on {n_pairs} pairs: {total_steps} steps, batch {schedule.batch_size}")

    step = 0
    while step < total_steps:
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, schedule.batch_size):
            if step >= total_steps:
                break
            batch = [data.pairs[k] for k in order[start:start + schedule.batch_size]]
            breakdown = _mean_breakdown([
                pair_losses(model, data, pair, weights, material, sampling, rng) for pair in batch
            ])
            if weights.lip:
                breakdown["lip"] = loss_lip(model.parameterizer)
            total = train_objective(breakdown.components, weights)

            if not torch.isfinite(total):
                path = None
                if run_dir is not None:
                    model.load_state_dict(last_good)
                    path = str(save_checkpoint(model, Path(run_dir) / "last_good.pt", {"step": step}))
                raise DivergenceError(f"training loss became {float(total)} at step {step}", path, step)

            grads = backprop(GradientTape(total, {"theta": params}))["theta"]
            lr = learning_rate(step, steps_per_epoch, schedule)
            adam_step(params, grads, state, lr)

            row = {"step": step, "total": float(total.detach()), "lr": lr, **breakdown.as_floats(),
                   "inverted": breakdown.diagnostics["inverted"]}
            history.append(row)
            if on_step is not None:
                on_step(step, row)
            if step % schedule.log_every == 0:
                parts = " ".join(f"{k}={v:.4g}" for k, v in breakdown.as_floats().items())
                logger.info(f"step {step}: total={row['total']:.5g} {parts}")
                last_good = copy.deepcopy(model.state_dict())
            step += 1

    checkpoint = None
    if run_dir is not None:
        checkpoint = save_checkpoint(model, Path(run_dir) / "model.pt", {"seed": seed, "steps": step})
    final = history[-1]["total"] if history else float("nan")
    logger.info(f"✓ training finished after {step} steps, final loss {final:.5g}")
    return TrainResult(model, history, checkpoint, step)


# ============================================================================
# LATENT FITTING
# ============================================================================

@dataclass
class Observation:
    """A skin scan in canonical correspondence, 2D landmarks with a camera, or both."""

    scan: Optional[TriMesh] = None
    landmarks_2d: Optional[np.ndarray] = None
    camera: Optional[np.ndarray] = None
    neutral: bool = False

    def __post_init__(self):
        if self.scan is None and self.landmarks_2d is None:
            raise InvalidInputError("observation needs a scan or landmarks")
        if self.landmarks_2d is not None and self.camera is None:
            raise InvalidInputError("landmark observations need a camera")


@dataclass
class FitResult:
    beta: Tensor
    gamma: Tensor
    skull: Optional[RigidTransform]
    breakdown: Dict[str, float]
    history: List[float]
    early_stopped: bool


def fit_latents(
    model: FaceModel,
    observation: Observation,
    canonical: Anatomy,
    fit: FitConfig,
    weights: LossWeights,
    material: MaterialParams,
    sampling: SamplingConfig,
    seed: int = 0,
    init: Optional[Tuple[Tensor, Tensor]] = None,
) -> FitResult:
    """Optimize identity and expression codes (and optionally head pose) under the test objective."""
    if observation.scan is not None and observation.scan.n_vertices != canonical.skin.n_vertices:
        raise InvalidInputError("scan is not in correspondence with the canonical skin")
    if init is None:
        with torch.no_grad():
            init = model.codes(np.zeros(N_ID_PARAMS), np.zeros(N_EXPR_CODE))
    beta = init[0].detach().clone().requires_grad_(True)
    gamma = init[1].detach().clone().requires_grad_(True)
    latents = [beta, gamma]
    if fit.fit_pose:
        omega = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        shift = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        latents += [omega, shift]

    volume = sample_volume(canonical.skin, [canonical.skull, canonical.jaw], sampling.n_volume, seed)
    skin_points = canonical.skin.vertices
    oracle = None
    if observation.scan is not None and observation.neutral and not fit.fit_pose:
        skull, jaw = bone_oracle(observation.scan.vertices, canonical)
        oracle = np.concatenate([skull, jaw])

    def objective() -> Tuple[Tensor, LossBreakdown]:
        out = LossBreakdown()
        n_c = model.identity_map(beta)
        n_e = model.expression_map(beta, gamma)
        face = model.face_map(beta, gamma)
        if fit.fit_pose:
            face = PosedMap(face, axis_angle_matrix(omega), shift)
        if observation.scan is not None:
            out["skin"] = loss_skin(face, skin_points, observation.scan.vertices, canonical.skin.confidence)
        if observation.landmarks_2d is not None:
            value, behind = loss_landmark(
                face, skin_points[canonical.landmark_ids], observation.camera, observation.landmarks_2d
            )
            out["landmark"] = value
            out.diagnostics["behind"] = behind
        if weights.bone:
            out["bone"] = (loss_bone(n_c, canonical.bones(), oracle) if oracle is not None
                           else loss_bone_selfsup(n_c, canonical))
        with torch.no_grad():
            skull = n_c.eval(as_tensor(canonical.skull.vertices))
            jaw = n_c.eval(as_tensor(canonical.jaw.vertices))
            material_points = n_c.eval(inset_points(volume, model.identity_field))
        if weights.rigid:
            out["rigid"] = loss_rigid(n_e, [skull, jaw])
        if weights.fix:
            out["fix"] = loss_fix(n_e, skull)
        if weights.soft:
            out["soft"], out.diagnostics["inverted"] = loss_soft(
                n_e, inset_points(material_points, model.expression_field), material
            )
        if weights.ereg:
            out["ereg"] = loss_ereg(n_c, inset_points(volume, model.identity_field))
        if weights.lreg:
            out["lreg"] = loss_lreg(beta, gamma)
        return test_objective(out.components, weights), out

    state = AdamState()
    history: List[float] = []
    best = float("inf")
    stale = 0
    early = False
    breakdown = LossBreakdown()
    for step in range(fit.steps):
        total, breakdown = objective()
        value = float(total.detach())
        history.append(value)
        if value < best:
            best, stale = value, 0
        else:
            stale += 1
            if stale >= fit.patience:
                logger.warning(f"⚠ fitting stalled for {fit.patience} steps; stopping at step {step}")
                early = True
                break
        grads = backprop(GradientTape(total, {"latents": latents}))["latents"]
        adam_step(latents, grads, state, fit.learning_rate)

    if not early:
        total, breakdown = objective()
        history.append(float(total.detach()))

    skull_pose = None
    if fit.fit_pose:
        with torch.no_grad():
            skull_pose = RigidTransform(axis_angle_matrix(omega).numpy(), shift.numpy().copy())
    logger.info(f"✓ fitted latents: loss {history[0]:.5g} -> {history[-1]:.5g}")
    return FitResult(beta.detach(), gamma.detach(), skull_pose, breakdown.as_floats(), history, early)
