"""
Round trip from a fitted field to a simulated face, as a LangGraph state graph:

    material_space -> voxelize -> extract -> simulate -> evaluate

The graph carries numpy and torch objects, so it is compiled without a
checkpointer and every invocation starts from a fresh state.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TypedDict

import numpy as np
import torch
from langgraph.graph import END, START, StateGraph

from collision import CollisionSettings, lip_regions
from config.settings import EffectsConfig, EvalConfig, LatticeConfig, RunConfig
from errors import ConvergenceError, InvalidInputError
from extraction import ConstraintBundle, extract_from_map
from field import as_tensor
from geometry import TriMesh
from lattice import Embedding, HexLattice, embed, voxelize
from losses import MaterialParams
from metrics import (
    MetricReport,
    bone_fidelity,
    evaluate_surfaces,
    jaw_recovery,
    jaw_rigidity,
    map_bones,
    penetration_pairs,
    skull_fixation,
    v2v,
)
from model import FaceModel
from numerics import RigidTransform, kabsch
from phantom import Anatomy, frontal_mask
from sim import JawEdit, Paralysis, SimEffects, SolverSetup, SolveResult, assemble, solve_quasistatic

logger = logging.getLogger(__name__)

COLLISION_PAIRS = [("upper_lip", "lower_lip")]


class RoundTripState(TypedDict, total=False):
    # inputs: either model + beta + gamma + canonical, or fmap + anatomy
    model: FaceModel
    beta: torch.Tensor
    gamma: torch.Tensor
    canonical: Anatomy
    fmap: Any
    anatomy: Anatomy
    h: float
    lattice_config: LatticeConfig
    material: MaterialParams
    effects_config: EffectsConfig
    eval_config: EvalConfig
    ground_truth: Optional[TriMesh]
    true_jaw: Optional[RigidTransform]
    skull_pose: Optional[RigidTransform]
    report_dir: Optional[str]
    provenance: str
    seed: int
    # filled in by the nodes
    lattice: HexLattice
    setup: SolverSetup
    effects: SimEffects
    bundle: ConstraintBundle
    result: SolveResult
    field_skin: TriMesh
    sim_skin: TriMesh
    report: MetricReport
    field_v2v: float


def build_effects(config: EffectsConfig, lattice: HexLattice, anatomy: Anatomy,
                  material: MaterialParams) -> SimEffects:
    effects = SimEffects(density=material.density)
    if config.gravity is not None:
        effects.gravity = np.asarray(config.gravity, dtype=np.float64)
    if config.collision:
        effects.collision = CollisionSettings(list(COLLISION_PAIRS), config.barrier_distance, config.barrier_stiffness)
    if config.paralysis_alpha > 0.0:
        mask = lattice.element_centers()[:, 0] > config.paralysis_side
        effects.paralysis = Paralysis(mask, config.paralysis_alpha)
    if config.jaw_scale != 1.0:
        effects.jaw_edit = JawEdit.scale(config.jaw_scale, anatomy.hinge_pivot)
    return effects


# ============================================================================
# NODES
# ============================================================================

def material_space(state: RoundTripState) -> Dict[str, Any]:
    if "fmap" in state and "anatomy" in state:
        return {"anatomy": state["anatomy"], "fmap": state["fmap"]}
    for key in ("model", "beta", "gamma", "canonical"):
        if key not in state:
            raise InvalidInputError(f"round trip needs either fmap + anatomy or a model with codes (missing {key!r})")
    model = state["model"]
    anatomy = model.identity_anatomy(state["beta"], state["canonical"])
    return {"anatomy": anatomy, "fmap": model.expression_map(state["beta"], state["gamma"])}


def voxelize_node(state: RoundTripState) -> Dict[str, Any]:
    anatomy = state["anatomy"]
    lc = state.get("lattice_config") or LatticeConfig()
    h = state.get("h", lc.h)
    lattice = voxelize(anatomy, h)
    meshes: Dict[str, TriMesh] = {"skin": anatomy.skin, "skull": anatomy.skull, "jaw": anatomy.jaw}
    material = state.get("material") or MaterialParams()
    effects = build_effects(state.get("effects_config") or EffectsConfig(), lattice, anatomy, material)
    if effects.collision is not None:
        meshes.update(lip_regions(anatomy.skin))
    embeddings: Dict[str, Embedding] = {tag: embed(lattice, mesh, tag) for tag, mesh in meshes.items()}
    setup = assemble(lattice, embeddings, lc.quadrature, material, meshes, lc.tolerance, lc.max_iterations)
    return {"lattice": lattice, "setup": setup, "effects": effects}


def extract_node(state: RoundTripState) -> Dict[str, Any]:
    bundle = extract_from_map(state["fmap"], state["lattice"], state["anatomy"],
                              state.get("provenance", ""), state.get("skull_pose"))
    return {"bundle": bundle}


def simulate_node(state: RoundTripState) -> Dict[str, Any]:
    setup, effects = state["setup"], state["effects"]
    u_init = None
    # warm start from the field unless contact needs a feasible rest start
    if effects.collision is None:
        with torch.no_grad():
            u_init = state["fmap"].eval(as_tensor(setup.lattice.nodes)).cpu().numpy()
    report_path = None
    if state.get("report_dir"):
        report_path = Path(state["report_dir"]) / f"solve_h{setup.lattice.h:g}.txt"
    result = solve_quasistatic(setup, state["bundle"], effects, u_init=u_init, report_path=report_path)
    return {"result": result}


def evaluate_node(state: RoundTripState) -> Dict[str, Any]:
    anatomy, result = state["anatomy"], state["result"]
    ev = state.get("eval_config") or EvalConfig()
    with torch.no_grad():
        field_skin = anatomy.skin.with_vertices(state["fmap"].eval(as_tensor(anatomy.skin.vertices)).cpu().numpy())
    sim_skin = anatomy.skin.with_vertices(result.surface("skin"))
    mask = frontal_mask(anatomy) if ev.frontal_only else None
    reference = state.get("ground_truth") or field_skin

    sim_skull = result.surface("skull")
    sim_jaw = result.surface("jaw")
    penetrations = result.penetration_pairs + sum(
        penetration_pairs(sim_skin, bone.with_vertices(result.surface(tag)))
        for tag, bone in (("skull", anatomy.skull), ("jaw", anatomy.jaw))
    )
    extra: Dict[str, Any] = {
        "jaw_rigidity": jaw_rigidity(result.setup.jaw_rest, sim_jaw),
        "skull_fixation": skull_fixation(anatomy.skull.vertices, sim_skull, result.bundle.skull),
        "penetration_pairs": penetrations,
    }
    if state.get("true_jaw") is not None:
        extra["jaw_recovery"] = jaw_recovery(anatomy.jaw.vertices, result.bundle.jaw, state["true_jaw"])
    report = evaluate_surfaces(reference, sim_skin, mask, ev.fscore_samples, ev.fscore_threshold,
                               state.get("seed", 0), **extra)
    return {"field_skin": field_skin, "sim_skin": sim_skin, "report": report,
            "field_v2v": v2v(field_skin, sim_skin, mask)}


def build_round_trip_graph():
    graph = StateGraph(RoundTripState)
    graph.add_node("material_space", material_space)
    graph.add_node("voxelize", voxelize_node)
    graph.add_node("extract", extract_node)
    graph.add_node("simulate", simulate_node)
    graph.add_node("evaluate", evaluate_node)
    graph.add_edge(START, "material_space")
    graph.add_edge("material_space", "voxelize")
    graph.add_edge("voxelize", "extract")
    graph.add_edge("extract", "simulate")
    graph.add_edge("simulate", "evaluate")
    graph.add_edge("evaluate", END)
    return graph.compile()


round_trip_graph = build_round_trip_graph()


def run_round_trip(config: RunConfig, h: Optional[float] = None, **inputs) -> RoundTripState:
    state: RoundTripState = {
        "lattice_config": config.lattice,
        "material": config.material,
        "effects_config": config.effects,
        "eval_config": config.eval,
        "seed": config.seed,
        "h": config.lattice.h if h is None else h,
        **inputs,
    }
    return round_trip_graph.invoke(state)


# ============================================================================
# FIELD METRICS
# ============================================================================

def field_constraint_metrics(model: FaceModel, beta: torch.Tensor, gamma: torch.Tensor, canonical: Anatomy,
                             true_jaw: Optional[RigidTransform] = None,
                             oracle_bones: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Constraint metrics of the network output itself, before any simulation."""
    material = model.identity_anatomy(beta, canonical)
    skull, jaw = map_bones(model.expression_map(beta, gamma), material)
    out = {
        "jaw_rigidity": jaw_rigidity(material.jaw.vertices, jaw),
        "skull_fixation": skull_fixation(material.skull.vertices, skull),
    }
    if oracle_bones is not None:
        out["bone_fidelity"] = bone_fidelity(material.bones(), oracle_bones)
    if true_jaw is not None:
        out["jaw_recovery"] = jaw_recovery(material.jaw.vertices, kabsch(material.jaw.vertices, jaw), true_jaw)
    return out


def network_report(model: FaceModel, beta: torch.Tensor, gamma: torch.Tensor, canonical: Anatomy,
                   ground_truth: TriMesh, config: RunConfig, **constraint_inputs) -> MetricReport:
    """Metrics of the field's expression skin against ground truth."""
    skin = model.expression_skin(beta, gamma, canonical)
    mask = frontal_mask(canonical) if config.eval.frontal_only else None
    return evaluate_surfaces(
        ground_truth, skin, mask, config.eval.fscore_samples, config.eval.fscore_threshold, config.seed,
        **field_constraint_metrics(model, beta, gamma, canonical, **constraint_inputs),
    )


# ============================================================================
# RESOLUTION STUDY
# ============================================================================

def check_trend(values: Sequence[float], label: str = "v2v") -> None:
    """Values must strictly decrease along the ladder."""
    for i in range(1, len(values)):
        if not values[i] < values[i - 1]:
            raise ConvergenceError(
                f"{label} does not decrease along the resolution ladder: "
                f"{values[i - 1]:.6g} -> {values[i]:.6g} at rung {i}"
            )


def check_network_floor(rows: Sequence[Dict[str, Any]], label: str = "v2v") -> None:
    """No simulated rung may land closer to ground truth than the network row it was built from."""
    floor = float(rows[-1][label])
    for row in rows[:-1]:
        if float(row[label]) < floor:
            raise ConvergenceError(
                f"{label} at {row['source']} ({float(row[label]):.6g}) is below "
                f"the network row ({floor:.6g})"
            )


def resolution_rows(config: RunConfig, network: MetricReport, ladder: Optional[Sequence[float]] = None,
                    **inputs) -> List[Dict[str, Any]]:
    """One metric row per lattice size, coarse to fine, then the network row."""
    ladder = sorted(ladder or config.lattice.h_ladder, reverse=True)
    rows = []
    for h in ladder:
        state = run_round_trip(config, h=h, **inputs)
        rows.append(state["report"].row(source=f"h={h:g}", h=h, field_v2v=state["field_v2v"]))
        logger.info(f"✓ h={h:g}: v2v to field {state['field_v2v']:.4f} mm")
    rows.append(network.row(source="network", h="", field_v2v=0.0))
    return rows


# ============================================================================
# ABLATION
# ============================================================================

def _mean_of(rows: Sequence[Dict[str, Any]], variant: str, metric: str, jaw_open: bool = False) -> float:
    picked = [r for r in rows if r["variant"] == variant]
    if jaw_open:
        opened = [r for r in picked if float(r.get("jaw_angle", 0.0)) > 0.0]
        picked = opened or picked
    if not picked:
        raise InvalidInputError(f"no ablation rows for variant {variant}")
    return float(np.mean([float(r[metric]) for r in picked]))


def ablation_verdicts(rows: Sequence[Dict[str, Any]], factor: float = 5.0) -> Dict[str, Dict[str, Any]]:
    """
    Compare each dropped-term variant against the full model.

    Dropping the rigid term must raise jaw rigidity, and dropping the soft
    term must raise jaw recovery on jaw-open expressions, each by at least
    `factor`. Variants without a criterion are left out.
    """
    criteria = {"no_rigid": ("jaw_rigidity", False), "no_soft": ("jaw_recovery", True)}
    present = {r["variant"] for r in rows}
    verdicts = {}
    for variant, (metric, jaw_open) in criteria.items():
        if variant not in present:
            continue
        full = _mean_of(rows, "full", metric, jaw_open)
        dropped = _mean_of(rows, variant, metric, jaw_open)
        ratio = dropped / full if full > 0.0 else (float("inf") if dropped > 0.0 else 1.0)
        verdicts[variant] = {"metric": metric, "full": full, "dropped": dropped,
                             "ratio": ratio, "passed": bool(ratio >= factor)}
        mark = "✓" if ratio >= factor else "⚠"
        logger.info(f"{mark} {variant}: {metric} {dropped:.4f} vs {full:.4f} mm ({ratio:.2f}x)")
    return verdicts
