"""
Command-line entry point.

    python cli.py gen-corpus --out runs/corpus
    python cli.py train --corpus runs/corpus --out runs/train
    python cli.py simulate --checkpoint runs/train/model.pt --identity 0 --expression 1

Exit codes: 0 ok, 1 other library error, 2 configuration error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from config.settings import RunConfig, create_run_config, run_root
from errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    InvalidInputError,
    NumericalFailureError,
    PhysFaceError,
)
from extraction import extract_constraints, save_bundle
from field import as_tensor
from geometry import load_obj, save_obj
from lattice import embed, save_lattice, voxelize
from metrics import evaluate_surfaces
from model import FaceModel, checkpoint_id, interpolate_identity, load_checkpoint, retarget
from persistence import RunDirectory
from phantom import (
    Corpus,
    bone_oracle,
    frontal_mask,
    gen_corpus,
    ground_truth_map,
    jaw_transform,
    load_corpus,
    look_at_camera,
    project,
)
from training import Observation, fit_latents, train
from workflow import (
    ablation_verdicts,
    check_network_floor,
    check_trend,
    network_report,
    resolution_rows,
    run_round_trip,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

ABLATION_TERMS = ("bone", "rigid", "soft", "lip")


# ============================================================================
# HELPERS
# ============================================================================

def _config(args) -> RunConfig:
    return create_run_config(args.config, overrides=args.set or (), seed=args.seed)


def _run_dir(args, command: str) -> RunDirectory:
    return RunDirectory(args.out or run_root() / command)


def _corpus(args, config: RunConfig) -> Corpus:
    return load_corpus(args.corpus or config.corpus.path)


def _pair_codes(model: FaceModel, corpus: Corpus, i: int, j: int) -> Tuple[torch.Tensor, torch.Tensor]:
    ident = corpus.identities[i]
    with torch.no_grad():
        return model.codes(ident.anatomy.id_params, ident.specs[j].expression_code)


def _test_pairs(corpus: Corpus, config: RunConfig) -> List[Tuple[int, int]]:
    """Last expressions of every identity, skipping the neutral one."""
    pairs = []
    for i, ident in enumerate(corpus.identities):
        n = len(ident.specs)
        first = max(1, n - config.eval.test_expressions)
        pairs.extend((i, j) for j in range(first, n))
    return pairs


def _oracle(corpus: Corpus, i: int) -> np.ndarray:
    skull, jaw = bone_oracle(corpus.identities[i].skins[0].vertices, corpus.canonical)
    return np.concatenate([skull, jaw])


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen_corpus(args) -> int:
    config = _config(args)
    out = Path(args.out or config.corpus.path)
    # the corpus keeps its own manifest.json
    run = RunDirectory(out, manifest_name="run.json")
    manifest = gen_corpus(config.corpus.n_identities, config.corpus.n_expressions, config.seed, out,
                          config.corpus.resolution)
    run.write_manifest("gen-corpus", config, {"identities": len(manifest.identities)})
    print(f"✓ corpus with {len(manifest.identities)} identities written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    run = _run_dir(args, "train")
    corpus = _corpus(args, config)
    model = FaceModel.from_config(config.field, config.seed)
    result = train(corpus, model, config, run_dir=run.root, on_step=run.loss_log(), max_steps=args.max_steps)
    run.write_manifest("train", config, {"steps": result.steps, "checkpoint": str(result.checkpoint_path)})
    print(f"✓ trained {result.steps} steps; final loss {result.history[-1]['total']:.5g}")
    print(f"  checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _config(args)
    run = _run_dir(args, "fit")
    corpus = _corpus(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    ident = corpus.identities[args.identity]
    scan = ident.skins[args.expression]
    if args.landmarks:
        camera = look_at_camera((0.0, 0.0, 600.0))
        uv, _ = project(camera, scan.vertices[corpus.canonical.landmark_ids])
        observation = Observation(landmarks_2d=uv, camera=camera)
    else:
        observation = Observation(scan=scan, neutral=args.expression == 0)
    result = fit_latents(model, observation, corpus.canonical, config.fit, config.weights, config.material,
                         config.sampling, config.seed)
    skin = model.expression_skin(result.beta, result.gamma, corpus.canonical)
    save_obj(skin, run.path("fitted_skin.obj"))
    torch.save({"beta": result.beta, "gamma": result.gamma}, run.path("latents.pt"))
    mask = frontal_mask(corpus.canonical) if config.eval.frontal_only else None
    report = evaluate_surfaces(scan, skin, mask, config.eval.fscore_samples, config.eval.fscore_threshold, config.seed)
    run.write_csv("metrics.csv", [report.row(identity=args.identity, expression=args.expression)])
    run.write_csv("fit_history.csv", [{"step": k, "loss": v} for k, v in enumerate(result.history)])
    run.write_manifest("fit", config, {"checkpoint": checkpoint_id(args.checkpoint)})
    print(f"✓ fitted in {len(result.history)} steps; v2v {report.v2v:.4f} mm")
    return EXIT_OK


def cmd_extract(args) -> int:
    config = _config(args)
    run = _run_dir(args, "extract")
    corpus = _corpus(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    beta, gamma = _pair_codes(model, corpus, args.identity, args.expression)
    anatomy = model.identity_anatomy(beta, corpus.canonical)
    lattice = voxelize(anatomy, config.lattice.h)
    embeddings = {tag: embed(lattice, mesh, tag)
                  for tag, mesh in (("skin", anatomy.skin), ("skull", anatomy.skull), ("jaw", anatomy.jaw))}
    provenance = f"{checkpoint_id(args.checkpoint)}:id{args.identity}:ex{args.expression}"
    bundle = extract_constraints(model, beta, gamma, lattice, anatomy, provenance)
    save_bundle(bundle, run.path("constraints.cbv1"))
    save_lattice(lattice, run.path("lattice.latv1"), embeddings)
    for tag, mesh in (("skin", anatomy.skin), ("skull", anatomy.skull), ("jaw", anatomy.jaw)):
        save_obj(mesh, run.path(f"material_{tag}.obj"))
    run.write_manifest("extract", config, {"provenance": provenance})
    print(f"✓ extracted {bundle.n_elements} actuations; jaw angle {bundle.jaw.angle():.4f} rad")
    if len(bundle.flagged):
        print(f"⚠ {len(bundle.flagged)} elements carry a non-PSD actuation")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _config(args)
    run = _run_dir(args, "simulate")
    corpus = _corpus(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    i, j = args.identity, args.expression
    beta, gamma = _pair_codes(model, corpus, i, j)
    source = corpus.identities[i]
    spec = source.specs[j]
    ground_truth, true_jaw = source.skins[j], jaw_transform(source.anatomy, spec)
    if args.blend is not None and args.target_identity is None:
        raise InvalidInputError("--blend needs --target-identity")

    if args.target_identity is not None:
        target = corpus.identities[args.target_identity]
        target_beta, _ = _pair_codes(model, corpus, args.target_identity, 0)
        if args.blend is None:
            beta = target_beta
            # the phantom replays any expression spec on any identity
            gt_map = ground_truth_map(target.anatomy, spec)
            ground_truth = target.anatomy.skin.with_vertices(gt_map.eval(target.anatomy.skin.vertices))
            true_jaw = jaw_transform(target.anatomy, spec)
        else:
            beta = interpolate_identity(beta, target_beta, args.blend)
            ground_truth, true_jaw = None, None
        with torch.no_grad():
            skin = retarget(model, gamma, beta).eval(as_tensor(corpus.canonical.skin.vertices)).cpu().numpy()
        save_obj(corpus.canonical.skin.with_vertices(skin), run.path("retargeted_skin.obj"))

    state = run_round_trip(
        config, model=model, beta=beta, gamma=gamma, canonical=corpus.canonical,
        ground_truth=ground_truth, true_jaw=true_jaw,
        report_dir=str(run.root), provenance=checkpoint_id(args.checkpoint),
    )
    save_obj(state["sim_skin"], run.path("simulated_skin.obj"))
    save_obj(state["field_skin"], run.path("field_skin.obj"))
    report = state["report"]
    run.write_csv("metrics.csv", [report.row(identity=i, expression=j, target=args.target_identity,
                                             blend=args.blend, h=config.lattice.h,
                                             field_v2v=state["field_v2v"])])
    run.write_manifest("simulate", config, {"checkpoint": checkpoint_id(args.checkpoint)})
    result = state["result"]
    print(f"✓ simulated in {result.iterations} iterations; v2v {report.v2v:.4f} mm, "
          f"v2v to field {state['field_v2v']:.4f} mm, penetrations {report.penetration_pairs}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    run = _run_dir(args, "evaluate")
    gt = load_obj(args.gt)
    result = load_obj(args.result)
    report = evaluate_surfaces(gt, result, None, config.eval.fscore_samples, config.eval.fscore_threshold, config.seed)
    run.write_csv("metrics.csv", [report.row(gt=str(args.gt), result=str(args.result))])
    run.write_manifest("evaluate", config)
    print(f"✓ v2v {report.v2v:.4f} mm, s2m {report.s2m:.4f} mm, fscore {report.fscore:.4f}, "
          f"normal error {report.normal_error:.4f}")
    return EXIT_OK


def cmd_study_resolution(args) -> int:
    config = _config(args)
    run = _run_dir(args, "study-resolution")
    corpus = _corpus(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    i, j = args.identity, args.expression
    beta, gamma = _pair_codes(model, corpus, i, j)
    ident = corpus.identities[i]
    truth = jaw_transform(ident.anatomy, ident.specs[j])
    network = network_report(model, beta, gamma, corpus.canonical, ident.skins[j], config,
                             true_jaw=truth, oracle_bones=_oracle(corpus, i))
    rows = resolution_rows(config, network, model=model, beta=beta, gamma=gamma, canonical=corpus.canonical,
                           ground_truth=ident.skins[j], true_jaw=truth, report_dir=str(run.root))
    run.write_csv("resolution.csv", rows)
    run.write_manifest("study-resolution", config, {"checkpoint": checkpoint_id(args.checkpoint)})
    for row in rows:
        print(f"  {row['source']:>10}: v2v {row['v2v']:.4f} mm, v2v to field {row['field_v2v']:.4f} mm")
    check_trend([r["field_v2v"] for r in rows[:-1]], "v2v to the field output")
    check_network_floor(rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _config(args)
    run = _run_dir(args, "ablate")
    corpus = _corpus(args, config)
    pairs = _test_pairs(corpus, config)
    variants = [("full", config.weights)] + [(f"no_{t}", config.weights.without(t)) for t in args.drop]
    rows = []
    for name, weights in variants:
        variant = config.model_copy(update={"weights": weights})
        model = FaceModel.from_config(config.field, config.seed)
        train(corpus, model, variant, run_dir=run.root / name, max_steps=args.max_steps)
        for i, j in pairs:
            ident = corpus.identities[i]
            beta, gamma = _pair_codes(model, corpus, i, j)
            report = network_report(model, beta, gamma, corpus.canonical, ident.skins[j], config,
                                    true_jaw=jaw_transform(ident.anatomy, ident.specs[j]),
                                    oracle_bones=_oracle(corpus, i))
            rows.append(report.row(variant=name, identity=i, expression=j, jaw_angle=ident.specs[j].jaw_angle))
        logger.info(f"✓ ablation variant {name} done")
    run.write_csv("ablation.csv", rows)
    verdicts = ablation_verdicts(rows, config.eval.ablation_factor)
    run.write_manifest("ablate", config, {"variants": [v for v, _ in variants], "verdicts": verdicts})

    by_variant = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    for name, items in by_variant.items():
        rigidity = float(np.mean([r["jaw_rigidity"] for r in items]))
        recovery = float(np.mean([r["jaw_recovery"] for r in items]))
        print(f"  {name:>10}: jaw rigidity {rigidity:.4f} mm, jaw recovery {recovery:.4f} mm")
    for name, verdict in verdicts.items():
        mark = "✓" if verdict["passed"] else "⚠"
        print(f"{mark} {name}: {verdict['metric']} {verdict['ratio']:.2f}x the full model "
              f"(needs {config.eval.ablation_factor:g}x)")
    return EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, help="run directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def _pair(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    p.add_argument("--corpus", type=Path, help="corpus directory (default: config corpus.path)")
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--identity", type=int, default=0)
    p.add_argument("--expression", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="physface", description="Simulation-free facial actuation design")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic phantom corpus")
    _common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the face model on a corpus")
    _common(p)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit latent codes to a corpus scan or its landmarks")
    _common(p)
    _pair(p)
    p.add_argument("--landmarks", action="store_true", help="fit to projected 2D landmarks only")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", help="extract actuations and jaw kinematics")
    _common(p)
    _pair(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("simulate", help="extract, simulate and evaluate one expression")
    _common(p)
    _pair(p)
    p.add_argument("--target-identity", type=int, help="replay the expression on this identity (retargeting)")
    p.add_argument("--blend", type=float, help="interpolate the identity code towards the target, 0..1")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="surface metrics between two meshes in correspondence")
    _common(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--result", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study-resolution", help="round trip over the lattice-size ladder")
    _common(p)
    _pair(p)
    p.set_defaults(func=cmd_study_resolution)

    p = sub.add_parser("ablate", help="retrain without single loss terms")
    _common(p)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--drop", nargs="+", choices=ABLATION_TERMS, default=["rigid", "soft"])
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"⚠ configuration error at {e.key or 'config'}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailureError as e:
        print(f"⚠ numerical failure: {e}", file=sys.stderr)
        if e.report_path:
            print(f"  solve report: {e.report_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DivergenceError, ConvergenceError) as e:
        print(f"⚠ numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except PhysFaceError as e:
        print(f"⚠ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
