import numpy as np
import pytest

from config.settings import EffectsConfig, create_run_config
from errors import ConvergenceError, InvalidInputError
from field import AffineMap, AnalyticMap
from lattice import voxelize
from losses import MaterialParams
from metrics import MetricReport
from numerics import RigidTransform
from phantom import ExpressionSpec, ground_truth_map, jaw_transform
from workflow import (
    ablation_verdicts,
    build_effects,
    check_network_floor,
    check_trend,
    field_constraint_metrics,
    network_report,
    resolution_rows,
    run_round_trip,
)


@pytest.fixture
def config(monkeypatch):
    monkeypatch.delenv("PHYSFACE_PROFILE", raising=False)
    monkeypatch.delenv("PHYSFACE_SEED", raising=False)
    return create_run_config(overrides=["eval.fscore_samples=1000", "lattice.h=6"])


def test_identity_round_trip_is_exact(config, canonical):
    state = run_round_trip(config, fmap=AffineMap(np.eye(3)), anatomy=canonical, provenance="identity")
    result = state["result"]
    assert result.converged
    report = state["report"]
    assert report.v2v == pytest.approx(0.0, abs=1e-9)
    assert report.fscore == 1.0
    assert report.jaw_rigidity == pytest.approx(0.0, abs=1e-9)
    assert report.skull_fixation == pytest.approx(0.0, abs=1e-9)
    assert report.penetration_pairs == 0
    assert state["field_v2v"] == pytest.approx(0.0, abs=1e-9)
    assert state["bundle"].provenance == "identity"
    assert state["lattice"].h == 6.0


@pytest.mark.slow
def test_ground_truth_round_trip_recovers_jaw(config, canonical):
    spec = ExpressionSpec.from_code([0.5, 0.3, 0.2, 0.0, -0.2, 0.0])
    gt = ground_truth_map(canonical, spec)
    truth = jaw_transform(canonical, spec)
    gt_skin = canonical.skin.with_vertices(gt.eval_with_jacobian(canonical.skin.vertices)[0])
    state = run_round_trip(config, fmap=AnalyticMap(gt), anatomy=canonical, ground_truth=gt_skin, true_jaw=truth)
    report = state["report"]
    assert report.jaw_recovery == pytest.approx(0.0, abs=1e-6)
    assert report.skull_fixation == pytest.approx(0.0, abs=1e-9)
    assert report.jaw_rigidity < 1e-6
    assert np.isfinite(report.v2v) and report.v2v < 5.0
    np.testing.assert_allclose(state["sim_skin"].vertices.shape, canonical.skin.vertices.shape)


def test_round_trip_from_model(config, canonical, tiny_model, tmp_path):
    beta, gamma = tiny_model.codes(np.zeros(6), np.zeros(6))
    state = run_round_trip(config, model=tiny_model, beta=beta, gamma=gamma, canonical=canonical,
                           report_dir=str(tmp_path))
    assert state["report"].v2v == pytest.approx(0.0, abs=1e-9)
    assert (tmp_path / "solve_h6.txt").read_text().startswith("solve report")


def test_round_trip_needs_inputs(config, canonical):
    with pytest.raises(InvalidInputError):
        run_round_trip(config, canonical=canonical)


def test_build_effects(canonical):
    lattice = voxelize(canonical, 6.0)
    material = MaterialParams()
    assert build_effects(EffectsConfig(), lattice, canonical, material).gravity is None
    effects = build_effects(
        EffectsConfig(gravity=[0.0, -9.81, 0.0], collision=True, paralysis_alpha=0.4, jaw_scale=0.9),
        lattice, canonical, material,
    )
    np.testing.assert_array_equal(effects.gravity, [0.0, -9.81, 0.0])
    assert effects.density == material.density
    assert effects.collision.pairs == [("upper_lip", "lower_lip")]
    np.testing.assert_array_equal(effects.paralysis.mask, lattice.element_centers()[:, 0] > 0.0)
    assert effects.paralysis.alpha == 0.4
    np.testing.assert_array_equal(effects.jaw_edit.pivot, canonical.hinge_pivot)


# ============================================================================
# FIELD METRICS AND RESOLUTION STUDY
# ============================================================================

def test_untrained_network_metrics(config, canonical, tiny_model):
    beta, gamma = tiny_model.codes(np.zeros(6), np.zeros(6))
    out = field_constraint_metrics(tiny_model, beta, gamma, canonical, true_jaw=RigidTransform.identity(),
                                   oracle_bones=canonical.bones())
    assert out["jaw_rigidity"] == pytest.approx(0.0, abs=1e-9)
    assert out["skull_fixation"] == pytest.approx(0.0, abs=1e-12)
    assert out["bone_fidelity"] == pytest.approx(0.0, abs=1e-9)
    assert out["jaw_recovery"] == pytest.approx(0.0, abs=1e-6)
    report = network_report(tiny_model, beta, gamma, canonical, canonical.skin, config)
    assert report.v2v == pytest.approx(0.0, abs=1e-12)


def test_check_trend():
    check_trend([3.0, 2.0, 1.5])
    check_trend([1.0])
    with pytest.raises(ConvergenceError):
        check_trend([3.0, 2.0, 2.0])
    with pytest.raises(ConvergenceError, match="field_v2v"):
        check_trend([1.0, 2.0], label="field_v2v")


def test_check_network_floor():
    rows = [{"source": "h=8", "v2v": 0.9}, {"source": "h=6", "v2v": 0.6}, {"source": "network", "v2v": 0.6}]
    check_network_floor(rows)
    rows[1]["v2v"] = 0.4
    with pytest.raises(ConvergenceError, match="h=6"):
        check_network_floor(rows)


def test_resolution_rows(config, canonical):
    rows = resolution_rows(config, MetricReport(v2v=0.25), ladder=[6.0, 8.0],
                           fmap=AffineMap(np.eye(3)), anatomy=canonical)
    assert [r["source"] for r in rows] == ["h=8", "h=6", "network"]
    assert rows[0]["h"] == 8.0 and rows[-1]["h"] == ""
    assert rows[-1]["v2v"] == 0.25
    assert all(r["field_v2v"] == pytest.approx(0.0, abs=1e-9) for r in rows)


def ablation_rows(full, no_rigid, no_soft):
    rows = []
    for variant, (rigidity, recovery) in (("full", full), ("no_rigid", no_rigid), ("no_soft", no_soft)):
        rows.append({"variant": variant, "jaw_angle": 0.3, "jaw_rigidity": rigidity, "jaw_recovery": recovery})
        rows.append({"variant": variant, "jaw_angle": 0.0, "jaw_rigidity": rigidity, "jaw_recovery": 100.0})
    return rows


def test_ablation_verdicts_pass_and_fail():
    verdicts = ablation_verdicts(ablation_rows((0.1, 0.2), (0.6, 0.2), (0.1, 1.5)))
    assert verdicts["no_rigid"]["ratio"] == pytest.approx(6.0)
    assert verdicts["no_soft"]["ratio"] == pytest.approx(7.5)
    assert all(v["passed"] for v in verdicts.values())

    verdicts = ablation_verdicts(ablation_rows((0.1, 0.2), (0.3, 0.2), (0.1, 0.4)))
    assert not verdicts["no_rigid"]["passed"]
    assert not verdicts["no_soft"]["passed"]


def test_ablation_verdicts_skip_missing_variants():
    rows = [r for r in ablation_rows((0.1, 0.2), (0.6, 0.2), (0.1, 1.5)) if r["variant"] != "no_soft"]
    assert set(ablation_verdicts(rows)) == {"no_rigid"}
    with pytest.raises(InvalidInputError):
        ablation_verdicts([r for r in rows if r["variant"] != "full"])
