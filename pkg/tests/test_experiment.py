import json
import math

import pytest

from privrec import experiment
from privrec.experiment import ConfigError, ExperimentConfig, RunRecord, aggregate, sweep


def make_config(ml_files, out, **overrides):
    ratings, movies = ml_files
    data = {
        "dataset": {"ratings_path": str(ratings), "movies_path": str(movies)},
        "model": {"kind": "BPR"},
        "privacy": {"regime": "dpsgd", "budgets": [0.8, 4.0], "clip_norm": 0.1, "include_baseline": False},
        "train": {"lr": 5.0, "max_epochs": 2, "batch_size": 64},
        "seeds": [0, 1, 2],
        "output_dir": str(out),
    }
    cfg = ExperimentConfig.from_dict(data)
    for key, value in overrides.items():
        cfg.set(key.replace("__", "."), value)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- config


def test_defaults_follow_reference_grid():
    cfg = ExperimentConfig()
    assert cfg.privacy.budgets == [0.2, 0.4, 0.8, 2.0, 4.0]
    assert cfg.train.batch_size == 256 and cfg.train.max_epochs == 400 and cfg.train.patience == 6
    assert cfg.k == 10 and cfg.seeds == [0, 1, 2]


def test_override_changes_only_that_key():
    cfg = ExperimentConfig()
    before = cfg.to_dict()
    cfg.apply_override("model.kind=BPR")
    after = cfg.to_dict()
    assert after["model"]["kind"] == "BPR"
    after["model"]["kind"] = before["model"]["kind"]
    assert after == before


def test_override_type_checks():
    cfg = ExperimentConfig()
    cfg.apply_override("train.lr=0.5")
    cfg.apply_override("train.max_epochs=3")
    cfg.apply_override("privacy.budgets=[1, 2]")
    assert cfg.train.lr == 0.5 and cfg.train.max_epochs == 3 and cfg.privacy.budgets == [1, 2]
    with pytest.raises(ConfigError):
        cfg.apply_override("train.max_epochs=2.5")
    with pytest.raises(ConfigError):
        cfg.apply_override("train.lr=fast")
    with pytest.raises(ConfigError):
        cfg.apply_override("no_equals_sign")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_dict({"model": {"layers": 3}})
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig().apply_override("optimizer.lr=1")
    with pytest.raises(ConfigError, match="section"):
        ExperimentConfig().set("train", 1)


def test_validation_ranges():
    for bad in ({"privacy": {"budgets": []}}, {"seeds": []}, {"privacy": {"delta": 1.0}},
                {"model": {"kind": "ALS"}}, {"privacy": {"regime": "central"}}, {"privacy": {"budgets": [-1]}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)


def test_load_file_and_environment(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"kind": "SVD"}}))
    monkeypatch.setenv("PRIVREC_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    monkeypatch.setenv("PRIVREC_WORKERS", "3")
    cfg = ExperimentConfig.load(path, ["k=5"])
    assert cfg.model.kind == "SVD" and cfg.k == 5
    assert cfg.output_dir == str(tmp_path / "elsewhere") and cfg.workers == 3
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(path)


def test_config_keys_exhaustive():
    keys = dict(experiment.config_keys())
    assert keys["train.lr"] == 0.05 and keys["privacy.delta"] == 1e-5 and keys["model.kind"] == "NCF"
    assert len(keys) == len(set(keys))
    for key in keys:
        ExperimentConfig().set(key, keys[key])


def test_fingerprint_ignores_sweep_axes():
    a, b = ExperimentConfig(), ExperimentConfig()
    b.seeds, b.privacy.budgets, b.output_dir, b.workers = [9], [1.0], "x", 4
    assert a.fingerprint() == b.fingerprint()
    b.train.lr = 1.0
    assert a.fingerprint() != b.fingerprint()


def test_budget_points():
    cfg = ExperimentConfig()
    assert cfg.budget_points()[0] == ("none", None) and len(cfg.budget_points()) == 6
    cfg.privacy.include_baseline = False
    assert cfg.budget_points() == [("dpsgd", b) for b in (0.2, 0.4, 0.8, 2.0, 4.0)]
    cfg.privacy.regime = "none"
    assert cfg.budget_points() == [("none", None)]


# ---------------------------------------------------------------- runs and sweeps


def test_sweep_counts_resume_and_aggregates(ml_files, tmp_path):
    cfg = make_config(ml_files, tmp_path / "run")
    first = sweep(cfg)
    assert len(first.records) == 6 and len(first.aggregates) == 2 and first.skipped == 0
    assert all(r.status == "ok" for r in first.records)
    assert {row["n"] for row in first.aggregates} == {3}
    files = sorted((tmp_path / "run" / "records").glob("*.json"))
    assert len(files) == 6

    again = sweep(cfg)
    assert again.skipped == 6 and len(again.records) == 6
    assert sorted((tmp_path / "run" / "records").glob("*.json")) == files

    # an interrupted sweep: drop two records and resume
    snapshot = {p.name: json.loads(p.read_text())["metrics"] for p in files}
    files[0].unlink()
    files[3].unlink()
    resumed = sweep(cfg)
    assert resumed.skipped == 4 and len(resumed.records) == 6
    assert {p.name: json.loads(p.read_text())["metrics"] for p in sorted((tmp_path / "run" / "records").glob("*.json"))} == snapshot

    # realized epsilon strictly decreasing in sigma at fixed steps
    eps = {row["budget"]: row["realized_epsilon"] for row in resumed.aggregates}
    assert eps[0.8] > eps[4.0] > 0

    stored = experiment.read_aggregates(tmp_path / "run" / "reports" / "aggregate.csv")
    recomputed = aggregate(experiment.load_records(tmp_path / "run" / "records"))
    assert len(stored) == len(recomputed)
    for s, r in zip(stored, recomputed):
        for key, value in r.items():
            if value is None:
                assert s[key] == ""
            elif isinstance(value, float):
                assert float(s[key]) == value, key
            else:
                assert s[key] == str(value), key


def test_run_one_deterministic_and_regimes(ml_files, tmp_path):
    cfg = make_config(ml_files, tmp_path / "det")
    a = experiment.run_one(cfg, "dpsgd", 0.8, 1, persist=False)
    b = experiment.run_one(cfg, "dpsgd", 0.8, 1, persist=False)
    assert a.status == "ok" and a.metrics == b.metrics
    assert a.ledger["steps"] > 0 and a.realized_epsilon == a.ledger["epsilon"]

    base = experiment.run_one(cfg, "none", None, 0)
    assert base.realized_epsilon == experiment.INF_MARKER and math.isinf(base.epsilon_value())
    stored = json.loads((tmp_path / "det" / "records" / f"{base.fingerprint}.json").read_text())
    assert stored["realized_epsilon"] == "inf"

    ldp = experiment.run_one(cfg, "ldp", 2.0, 0, persist=False)
    assert ldp.status == "ok" and ldp.realized_epsilon == 2.0 and ldp.ledger is None
    assert RunRecord.from_dict(json.loads(json.dumps(stored))).metrics == base.metrics


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_becomes_failed_record_and_reduces_n(ml_files, tmp_path):
    cfg = make_config(ml_files, tmp_path / "fail", model__kind="SVD", train__lr=1e6)
    cfg.privacy.regime, cfg.privacy.budgets, cfg.seeds = "none", [1.0], [0, 1]
    result = sweep(cfg)
    assert all(r.status == "failed" for r in result.records)
    assert "TrainingDiverged" in result.records[0].error
    assert result.aggregates[0]["n"] == 0 and result.aggregates[0]["failed"] == 2


def test_aggregate_mean_and_blank_std():
    def rec(seed, ndcg, budget=1.0):
        metrics = {"ndcg": ndcg, "kld": 0.1, "popularity_lift": 0.2, "novelty": 1.0, "coverage": 0.5, "dpf": 0.3,
                   "k": 10, "by_user_type": {}, "by_item_group": {}, "counts": {}, "flags": []}
        return RunRecord("f", "c", "movielens", "NCF", "dpsgd", budget, seed, 1.5, metrics=metrics)

    rows = aggregate([rec(0, 0.4), rec(1, 0.6), rec(0, 0.3, budget=2.0)])
    assert rows[0]["ndcg.mean"] == pytest.approx(0.5)
    assert rows[0]["ndcg.std"] == pytest.approx(math.sqrt(0.02))
    assert rows[1]["n"] == 1 and rows[1]["ndcg.std"] is None
