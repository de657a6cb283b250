import os
import json
import numpy as np
import pandas as pd
import pytest
from conftest import tiny_dict
from xlinfluence.cli import main
from xlinfluence.config import ExperimentConfig, load_config, save_config
from xlinfluence.enums import EXIT, FILES, REPORT, CHECKPOINTS
from xlinfluence.errors import DependencyError, LockedError, StaleCacheError
from xlinfluence.pipeline import (Experiment, Report, artifact_lock, cmd_gen_data, cmd_report, cmd_seed_summary,
                                  cmd_train, train_node, prune_node, influence_node, GEN_DATA, ANALYZE)


def config_at(path, **corpus) -> ExperimentConfig:
    data = tiny_dict()
    data["output_dir"] = str(path)
    data["corpus"].update(corpus)
    return ExperimentConfig(**data)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """A complete tiny experiment, shared by the report tests."""
    cfg = config_at(tmp_path_factory.mktemp("experiment"))
    root = cmd_report(cfg)
    return cfg, Experiment(cfg, progress=False), root


def test_stage_graph(tiny_config):
    x = Experiment(tiny_config, progress=False)
    order = x.order()
    assert order[0] == GEN_DATA and order[-1] == ANALYZE
    assert order.index(train_node("full")) < order.index(prune_node("en")) < order.index(train_node("sft"))
    assert set(x.G.predecessors(influence_node("full"))) == {train_node("full")}
    assert prune_node("ko") in x.G.predecessors(influence_node("ko-mask-on-en"))
    assert train_node("sft-random") in x.G.predecessors(influence_node("sft-random-subnetwork"))


def test_sft_random_node_only_when_used(tmp_path):
    data = tiny_dict()
    data["variants"] = [v for v in data["variants"] if v.get("checkpoints") != "sft-random"]
    x = Experiment(ExperimentConfig(**data), out_dir=str(tmp_path), progress=False)
    assert train_node("sft-random") not in x.G and train_node("sft") in x.G


def test_stage_hash_follows_upstream(tmp_path):
    a = Experiment(config_at(tmp_path), progress=False)
    b = Experiment(config_at(tmp_path, seed=1), progress=False)
    assert a.stage_hash(GEN_DATA) != b.stage_hash(GEN_DATA)
    assert a.stage_hash(train_node("full")) != b.stage_hash(train_node("full")), "hashes must chain"
    c = Experiment(config_at(tmp_path), progress=False)
    assert a.stage_hash(ANALYZE) == c.stage_hash(ANALYZE)


def test_gen_data_is_cached(tmp_path):
    cfg = config_at(tmp_path)
    d = cmd_gen_data(cfg)
    with open(os.path.join(d, FILES.MANIFEST.value)) as f:
        first = json.load(f)
    assert {"train.jsonl", "dev.jsonl", "test.jsonl", "experiment.json"} <= set(first["artifacts"])
    assert first["stage"] == GEN_DATA and "tool_version" in first and "wall_clock_seconds" in first
    cmd_gen_data(cfg)
    with open(os.path.join(d, FILES.MANIFEST.value)) as f:
        assert json.load(f) == first, "a cached stage must not be rewritten"


def test_stale_cache(tmp_path):
    cmd_gen_data(config_at(tmp_path))
    changed = config_at(tmp_path, seed=5)
    with pytest.raises(StaleCacheError):
        cmd_gen_data(changed)
    d = cmd_gen_data(changed, force=True)
    with open(os.path.join(d, FILES.MANIFEST.value)) as f:
        assert json.load(f)["config_hash"] == Experiment(changed).stage_hash(GEN_DATA)


def test_modified_artifact_is_stale(tmp_path):
    cfg = config_at(tmp_path)
    d = cmd_gen_data(cfg)
    with open(os.path.join(d, "train.jsonl"), "a") as f:
        f.write("\n")
    with pytest.raises(StaleCacheError):
        cmd_gen_data(cfg)
    cmd_gen_data(cfg, force=True)


def test_missing_dependency_names_producer(tmp_path):
    with pytest.raises(DependencyError) as e:
        cmd_train(config_at(tmp_path), "full")
    assert e.value.producer == "xlinfluence gen-data"


def test_lock(tmp_path):
    cfg = config_at(tmp_path)
    root = Experiment(cfg).root
    with artifact_lock(root):
        with pytest.raises(LockedError) as e:
            cmd_gen_data(cfg)
        assert e.value.lock_path == os.path.join(root, FILES.LOCK.value)
    assert not os.path.exists(os.path.join(root, FILES.LOCK.value))
    cmd_gen_data(cfg)


def test_cli_exit_codes(tmp_path):
    cfg_path = tmp_path / "tiny.json"
    save_config(config_at(tmp_path), cfg_path)
    assert main(["train", "--config", str(cfg_path)]) == EXIT.DEPENDENCY.value
    assert main(["gen-data", "--config", str(cfg_path)]) == EXIT.OK.value
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["gen-data", "--config", str(bad)]) == EXIT.CONTRACT.value
    assert main(["prune", "--config", str(cfg_path), "--language", "fi"]) == EXIT.CONTRACT.value
    with pytest.raises(SystemExit):
        main(["explode"])


def test_cli_seed_override(tmp_path):
    cfg_path = tmp_path / "tiny.json"
    save_config(config_at(tmp_path), cfg_path)
    out = tmp_path / "seeded"
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "3", "--out", str(out)]) == EXIT.OK.value
    stored = load_config(str(out / "data" / "experiment.json"))
    assert stored.corpus.seed == 3 and stored.model_seed == 3


def test_report_bundle(finished):
    cfg, x, root = finished
    for node in x.order():
        assert x.is_done(node), f"stage `{node}` has no matching manifest"
    expected = [REPORT.FULL_BASELINE, REPORT.SUBNETWORK_DELTA, REPORT.RANDOM_SUBNETWORKS, REPORT.RANDOM_SFT,
                REPORT.SPECIALIZATION_ACCURACY, REPORT.EPOCH_TRAJECTORIES, REPORT.COMPOSITION,
                REPORT.MASK_OVERLAP, REPORT.PERFORMANCE]
    for name in expected:
        assert os.path.isdir(os.path.join(root, name.value)), f"report section {name.value} missing"
    table = pd.read_csv(os.path.join(root, REPORT.FULL_BASELINE.value, "contribution_positive.csv"), index_col=0)
    assert list(table.columns) == ["en", "de", "ko"]
    assert ((table.sum(axis=1) - 100.0).abs() < 1e-9).all(), "contribution rows must sum to 100"
    with open(os.path.join(root, REPORT.FULL_BASELINE.value, "contribution_positive.json")) as f:
        assert json.load(f)["m"] == cfg.influence.top_m


def test_report_inputs(finished):
    cfg, x, _ = finished
    masks = x.masks()
    assert set(masks) == {"en", "de", "ko"}
    for lang in masks:
        trace = x.trace(lang)
        assert trace.selected_accuracy >= cfg.prune.threshold * trace.base_accuracy
    store = x.checkpoints(CHECKPOINTS.SFT)
    assert store.epochs == [1, 2]
    full = x.load_influence("full")
    assert full["meta"]["epochs"] == [1, 2]
    counts = pd.Series(list(full["test_languages"].values())).value_counts()
    assert (counts <= cfg.influence.max_tests_per_language).all()
    for r in full["rankings"]:
        assert len(r.positive) == cfg.influence.top_m


def test_rerun_reuses_everything(finished):
    cfg, x, root = finished
    before = {n: x._read_manifest(n)["wall_clock_seconds"] for n in x.order()}
    assert cmd_report(cfg) == root
    after = {n: x._read_manifest(n)["wall_clock_seconds"] for n in x.order()}
    assert before == after, "rerunning a finished experiment must not recompute any stage"


def test_cli_reports_a_held_lock(tmp_path):
    cfg = config_at(tmp_path)
    cfg_path = tmp_path / "tiny.json"
    save_config(cfg, cfg_path)
    with artifact_lock(Experiment(cfg).root):
        assert main(["gen-data", "--config", str(cfg_path)]) == EXIT.LOCKED.value
    assert main(["gen-data", "--config", str(cfg_path)]) == EXIT.OK.value


@pytest.mark.parametrize("section, folder", [
    (REPORT.SUBNETWORK_DELTA, "fig2_delta"),
    (REPORT.RANDOM_SFT, "fig6_random_sft"),
    (REPORT.SPECIALIZATION_ACCURACY, "fig7_corr"),
    (REPORT.SIMILARITY_INFLUENCE, "fig8_sim_corr"),
    (REPORT.LAYERWISE_SIMILARITY, "fig9_layerwise"),
    (REPORT.EPOCH_TRAJECTORIES, "fig10_epochs"),
    (REPORT.COMPOSITION, "appF_compose"),
])
def test_report_folder_names(finished, section, folder):
    assert section.value == folder, f"{section.name} is written to '{section.value}', expected '{folder}'"
    _, _, root = finished
    if section not in (REPORT.SIMILARITY_INFLUENCE, REPORT.LAYERWISE_SIMILARITY):
        assert os.path.isdir(os.path.join(root, folder)), f"report folder {folder} missing"


def test_overlap_correlation(finished):
    _, _, root = finished
    d = os.path.join(root, REPORT.MASK_OVERLAP.value)
    corr = pd.read_csv(os.path.join(d, "correlation.csv"))
    assert corr.analysis.tolist() == ["overlap_vs_positive_influence", "overlap_vs_negative_influence"]
    assert ((corr.r.abs() <= 1.0) | corr.r.isna()).all()
    pairs = pd.read_csv(os.path.join(d, "pairs_positive.csv"))
    assert list(pairs.columns) == ["test", "train", "similarity", "influence"]
    assert (pairs.test != pairs.train).all()
    assert pairs.similarity.between(0.0, 100.0).all(), "overlap percentages out of range"


def test_directional_outcomes(finished):
    _, x, _ = finished
    out = Report(x).directional()
    assert set(out["diagonal_delta"]) <= {"en", "de", "ko"}
    for key in ("sft_dev_accuracy", "sft_random_dev_accuracy"):
        assert 0.0 <= out[key] <= 1.0, f"{key}={out[key]}"
    for key in ("sft_specialization", "sft_random_specialization"):
        assert 0.0 <= out[key] <= 100.0, f"{key}={out[key]}"
    assert np.isnan(out["similarity_r"]) or -1.0 <= out["similarity_r"] <= 1.0


def test_seed_summary_bundle(tmp_path):
    cfg = config_at(tmp_path)
    d = cmd_seed_summary(cfg, [0, 1], out=str(tmp_path / "sweep"))
    assert d == str(tmp_path / "sweep" / REPORT.SEED_SUMMARY.value)
    for seed in (0, 1):
        assert os.path.isdir(tmp_path / "sweep" / f"seed_{seed}" / "report" / REPORT.FULL_BASELINE.value)
    criteria = pd.read_csv(os.path.join(d, "criteria.csv"))
    assert criteria.criterion.tolist() == ["diagonal_positive", "random_minus_identified_delta",
                                           "sft_random_minus_identified_specialization",
                                           "sft_random_minus_identified_accuracy", "similarity_r"]
    diagonal = pd.read_csv(os.path.join(d, "diagonal_delta.csv"), index_col=0)
    assert list(diagonal.index) == ["en", "de", "ko"] and "mean" in diagonal.columns
    with open(os.path.join(d, "criteria.json")) as f:
        assert json.load(f)["seeds"] == [0, 1]


def test_cli_seed_sweep(tmp_path):
    cfg_path = tmp_path / "tiny.json"
    save_config(config_at(tmp_path), cfg_path)
    out = tmp_path / "sweep"
    assert main(["report", "--config", str(cfg_path), "--seeds", "2", "--out", str(out)]) == EXIT.OK.value
    assert (out / REPORT.SEED_SUMMARY.value / "criteria.csv").is_file()
