"""Long runs over the whole pipeline; enabled with --runslow."""

import numpy as np
import pytest

from cli import EXIT_OK, main
from config.settings import create_run_config
from field import AnalyticMap
from metrics import MetricReport
from persistence import RunDirectory
from phantom import ExpressionSpec, ground_truth_map
from training import train
from workflow import check_trend, resolution_rows

pytestmark = pytest.mark.slow


@pytest.fixture
def config(monkeypatch):
    monkeypatch.delenv("PHYSFACE_PROFILE", raising=False)
    monkeypatch.delenv("PHYSFACE_SEED", raising=False)
    return create_run_config(overrides=["eval.fscore_samples=2000"])


def test_desk_training_lowers_skin_loss(tiny_corpus, tiny_run_config, tiny_model, tmp_path):
    schedule = tiny_run_config.schedule.model_copy(update={"epochs": 40, "decay_after": 30})
    config = tiny_run_config.model_copy(update={"schedule": schedule})
    rows = []
    result = train(tiny_corpus, tiny_model, config, run_dir=tmp_path, on_step=lambda s, r: rows.append(r))
    skin = np.array([r["skin"] for r in rows])
    assert result.steps == len(rows)
    assert skin[-4:].mean() < skin[:4].mean()


def test_simulation_approaches_field_with_refinement(config, canonical):
    spec = ExpressionSpec.from_code([0.6, 0.5, 0.3, -0.2, 0.4, 0.1])
    rows = resolution_rows(config, MetricReport(), ladder=[9.0, 6.0],
                           fmap=AnalyticMap(ground_truth_map(canonical, spec)), anatomy=canonical)
    check_trend([r["field_v2v"] for r in rows[:-1]])
    assert all(r["jaw_rigidity"] < 1e-6 for r in rows[:-1])


def test_ablation_command(tmp_path, tiny_corpus_dir):
    out = tmp_path / "ablate"
    tiny = ["field.grid_resolution=[4,4,4]", "field.d_id=3", "field.d_ex=3", "field.hidden=8",
            "sampling.n_volume=40", "sampling.n_bone=8", "sampling.n_fix=10", "sampling.n_skin=30",
            "schedule.batch_size=2", "eval.fscore_samples=500", "eval.test_expressions=1"]
    args = ["ablate", "--corpus", str(tiny_corpus_dir), "--out", str(out), "--drop", "rigid", "soft",
            "--max-steps", "3"]
    for item in tiny:
        args += ["--set", item]
    assert main(args) == EXIT_OK
    rows = RunDirectory(out).read_csv("ablation.csv")
    assert sorted({r["variant"] for r in rows}) == ["full", "no_rigid", "no_soft"]
    assert len(rows) == 3
    assert all(float(r["jaw_rigidity"]) >= 0.0 for r in rows)
    assert (out / "no_rigid" / "model.pt").exists()
    verdicts = RunDirectory(out).load_manifest()["verdicts"]
    assert set(verdicts) == {"no_rigid", "no_soft"}
    assert verdicts["no_rigid"]["metric"] == "jaw_rigidity"
    assert verdicts["no_soft"]["metric"] == "jaw_recovery"
    assert all(isinstance(v["passed"], bool) for v in verdicts.values())


def test_desk_ablation_degrades_the_jaw(tmp_path, monkeypatch):
    monkeypatch.delenv("PHYSFACE_PROFILE", raising=False)
    monkeypatch.delenv("PHYSFACE_SEED", raising=False)
    corpus = tmp_path / "corpus"
    assert main(["gen-corpus", "--out", str(corpus)]) == EXIT_OK
    out = tmp_path / "ablate"
    assert main(["ablate", "--corpus", str(corpus), "--out", str(out), "--drop", "rigid", "soft"]) == EXIT_OK
    verdicts = RunDirectory(out).load_manifest()["verdicts"]
    assert verdicts["no_rigid"]["ratio"] >= 5.0
    assert verdicts["no_soft"]["ratio"] >= 5.0
    assert all(v["passed"] for v in verdicts.values())
