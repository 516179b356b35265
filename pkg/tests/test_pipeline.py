import copy
import json

import pytest

from mergeproof.cli import main
from mergeproof.config import ConfigError, ExperimentConfig, config_hash, fixture_config_dict
from mergeproof.params import load_checkpoint
from mergeproof.pipeline import StageError, aggregate_reports, run_pipeline


def small_config(**over):
    raw = fixture_config_dict()
    for t in raw["tasks"].values():
        t["n"] = 150
    raw["model"]["hidden_dims"] = [8]
    raw["train"]["finetune"]["epochs"] = 5
    raw["defense"]["stage1_train"]["epochs"] = 2
    raw["merges"] = [{"method": "ta"}, {"method": "ties"},
                     {"method": "adamerging", "ada": {"steps": 2, "unlabeled_n": 20}}]
    raw["seeds"] = [0, 1]
    raw.update(over)
    return raw


def test_pipeline_is_byte_deterministic(tmp_path):
    cfg = ExperimentConfig.from_dict(small_config())
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    for name in ("report.json", "report.csv", "analysis.csv", "seed_1/hat_merge_ta.mgf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_structure_and_provenance(tmp_path):
    cfg = ExperimentConfig.from_dict(small_config())
    rep = run_pipeline(cfg, tmp_path)
    assert rep["config_hash"] == cfg.hash
    table = rep["four_way_table"]["ta"]
    assert set(table) == {"theta_def", "theta_hat_def"}
    assert set(table["theta_def"]) == {"standalone", "merged"}
    run0 = rep["runs"][0]
    expected = {"theta_pre", "theta_def", "theta_fr", "theta_hat_def", "theta_hat_def_stage1",
                "theta_hat_def_stage2", "merge_ta", "hat_merge_ta", "hat_stage1_merge_ta",
                "attack_unmask_ta", "attack_graderase_ta", "merge_adamerging"}
    assert expected <= set(run0["eval"])
    for role, info in run0["checkpoints"].items():
        p = load_checkpoint(tmp_path / info["file"])
        assert p.meta["config_hash"] == cfg.hash and p.meta["role"] == role
        assert p.fingerprint() == info["fingerprint"]
    # parents form a DAG back to theta_pre
    fp = {info["fingerprint"]: role for role, info in run0["checkpoints"].items()}
    hm = run0["checkpoints"]["hat_merge_ta"]["parents"].split(",")
    assert [fp[h] for h in hm] == ["theta_hat_def", "theta_fr"]
    assert run0["attacks"]["graderase"]["max_relative_residual"] <= 1e-8
    assert "stage1_noise" in rep


def test_defense_disabled_reports_merges_only(tmp_path):
    rep = run_pipeline(ExperimentConfig.from_dict(small_config(defense_enabled=False, seeds=[0])), tmp_path)
    assert set(rep["runs"][0]["eval"]) == {"merge_ta", "merge_ties", "merge_adamerging"}
    assert set(rep["runs"][0]["eval"]["merge_ta"]) == {"T_def", "T_fr"}
    assert rep["four_way_table"] is None


def test_stage_failure_names_stage_and_keeps_artifacts(tmp_path):
    raw = small_config(seeds=[0])
    raw["merges"] = [{"method": "adamerging", "ada": {"steps": 1, "unlabeled_n": 0}}]
    cfg = ExperimentConfig.from_dict(raw)
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg, tmp_path)
    assert exc.value.stage == "merge"
    assert (tmp_path / "seed_0" / "theta_hat_def.mgf").exists()
    failed = json.loads((tmp_path / "failed.json").read_text())
    assert failed["stage"] == "merge" and failed["seed"] == 0
    assert main(["run", "--config", str(tmp_path / "config.json"), "--output-dir", str(tmp_path / "x")]) == 3


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(seeds=[]),
    lambda r: r.update(seeds=[1, 1]),
    lambda r: r["tasks"]["def"].update(csv="/does/not/exist.csv"),
    lambda r: r["defense"].update(k=0),
    lambda r: r.pop("model"),
    lambda r: r.update(merges=[{"method": "nope"}]),
    lambda r: r.update(eval_split="dev"),
])
def test_config_validation(mutate):
    raw = small_config()
    mutate(raw)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_config_hash_ignores_seeds_and_output_dir():
    a = small_config()
    b = copy.deepcopy(a)
    b["seeds"], b["output_dir"] = [5], "elsewhere"
    assert config_hash(a) == config_hash(b)
    b["defense"]["beta"] = 0.5
    assert config_hash(a) != config_hash(b)


def test_per_seed_runs_aggregate(tmp_path):
    cfg = small_config(seeds=[0], merges=[{"method": "ta"}], ablation=False)
    r0 = run_pipeline(ExperimentConfig.from_dict(cfg), tmp_path / "s0")
    r1 = run_pipeline(ExperimentConfig.from_dict({**cfg, "seeds": [1]}), tmp_path / "s1")
    agg = aggregate_reports([r1, r0])
    assert agg["seeds"] == [0, 1]
    with pytest.raises(ValueError):
        aggregate_reports([r0, r0])
    other = run_pipeline(ExperimentConfig.from_dict({**cfg, "eval_split": "val"}), tmp_path / "o")
    with pytest.raises(ValueError, match="different configs"):
        aggregate_reports([r0, other])
    assert main(["report", str(tmp_path / "s0"), str(tmp_path / "s1"), "--out", str(tmp_path / "agg")]) == 0
    assert json.loads((tmp_path / "agg" / "report.json").read_text())["seeds"] == [0, 1]


def test_csv_task_source(tmp_path):
    raw = small_config(seeds=[0], merges=[{"method": "ta"}], ablation=False)
    for task in ("def", "fr"):
        for split in ("train", "val", "test"):
            args = ["gen-data", "--config", "fixture", "--task", task, "--n", "150", "--split", split,
                    "--out", str(tmp_path / f"{task}.{split}.csv")]
            assert main(args) == 0
        raw["tasks"][task] = {"csv": str(tmp_path / f"{task}.csv")}
    (tmp_path / "def.csv").write_bytes((tmp_path / "def.train.csv").read_bytes())
    (tmp_path / "fr.csv").write_bytes((tmp_path / "fr.train.csv").read_bytes())
    from_csv = run_pipeline(ExperimentConfig.from_dict(raw), tmp_path / "csv")
    generated = run_pipeline(ExperimentConfig.from_dict(small_config(seeds=[0], merges=[{"method": "ta"}],
                                                                     ablation=False)), tmp_path / "gen")
    assert from_csv["runs"][0]["eval"] == generated["runs"][0]["eval"]
