import os
import pandas as pd
import pytest
from xlinfluence.config import ExperimentConfig, load_config
from xlinfluence.enums import REPORT
from xlinfluence.pipeline import Experiment, cmd_report, cmd_seed_summary
from xlinfluence.verify import gradient_checks, run_checks


SEEDS = [0, 1, 2]


def uniform_overlap(cfg: ExperimentConfig, overlap: float) -> ExperimentConfig:
    data = cfg.model_dump(mode="json")
    for lang in data["corpus"]["languages"]:
        if lang["id"] != cfg.corpus.base:
            lang["overlap"] = overlap
    data["name"] = f"{cfg.name}-overlap-{overlap}"
    return ExperimentConfig(**data)


def criteria_of(directory: str) -> dict:
    df = pd.read_csv(os.path.join(directory, "criteria.csv"))
    return {row.criterion: (row.value, bool(row.holds)) for row in df.itertuples()}


@pytest.mark.slow
def test_gradient_checks_on_every_coordinate():
    for r in gradient_checks(seeds=range(5)):
        assert r.passed, f"{r.name} ({r.detail}): relative error {r.value:.2e}"


@pytest.mark.slow
def test_ci_scale_end_to_end(tmp_path):
    cfg = load_config("ci-scale")
    root = cmd_report(cfg, out=str(tmp_path))
    for section in (REPORT.FULL_BASELINE, REPORT.SUBNETWORK_DELTA, REPORT.RANDOM_SUBNETWORKS,
                    REPORT.SIMILARITY_INFLUENCE, REPORT.EPOCH_TRAJECTORIES, REPORT.COMPOSITION,
                    REPORT.MASK_OVERLAP, REPORT.PERFORMANCE):
        assert os.path.isdir(os.path.join(root, section.value)), f"report section {section.value} missing"
    x = Experiment(cfg, out_dir=str(tmp_path), progress=False)
    assert run_checks(cfg, str(tmp_path / "verify"), experiment=x, progress=False), \
        f"see {tmp_path / 'verify' / 'failed_checks.csv'}"


@pytest.mark.slow
def test_subnetworks_specialize_over_seeds(tmp_path):
    cfg = uniform_overlap(load_config("ci-scale"), 0.5)
    criteria = criteria_of(cmd_seed_summary(cfg, SEEDS, out=str(tmp_path)))
    for name in ("diagonal_positive", "random_minus_identified_delta"):
        value, holds = criteria[name]
        assert holds, f"{name}={value:.4f} over seeds {SEEDS}"


@pytest.mark.slow
def test_sft_and_similarity_directions_over_seeds(tmp_path):
    cfg = load_config("ci-scale")
    criteria = criteria_of(cmd_seed_summary(cfg, SEEDS, out=str(tmp_path)))
    for name in ("sft_random_minus_identified_specialization", "sft_random_minus_identified_accuracy",
                 "similarity_r"):
        value, holds = criteria[name]
        assert holds, f"{name}={value:.4f} over seeds {SEEDS}"
