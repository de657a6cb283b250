import copy
import pytest
from xlinfluence.config import ExperimentConfig, ModelConfig


TINY = {
    "name": "tiny",
    "corpus": {
        "task": "pair-paraphrase",
        "languages": [{"id": "en", "offset": 4},
                      {"id": "de", "offset": 16, "overlap": 0.5},
                      {"id": "ko", "offset": 28, "overlap": 0.0}],
        "base_language": "en",
        "train_size": 12,
        "test_size": 8,
        "parallel": True,
        "seed": 0,
        "vocab_size": 40,
        "max_seq_len": 10,
        "alphabet_size": 12,
        "segment_length": [2, 4],
        "dev_fraction": 0.25
    },
    "model": {"num_layers": 1, "heads_per_layer": 2, "model_dim": 8, "ffn_dim": 16, "vocab_size": 40,
              "max_seq_len": 10, "classifier_hidden_dim": 8},
    "model_seed": 0,
    "train_full": {"learning_rate": 0.01, "batch_size": 4, "epochs": 2, "mode": "full"},
    "train_sft": {"learning_rate": 0.01, "batch_size": 4, "epochs": 2, "mode": "sft"},
    "prune": {"threshold": 0.5, "rate": 0.4},
    "influence": {"sketch_dim": 16, "top_m": 3, "max_tests_per_language": 4},
    "random_seeds": [0],
    "variants": [
        {"name": "full", "kind": "full"},
        {"name": "subnetwork", "kind": "subnetwork"},
        {"name": "random-0", "kind": "random", "seed": 0},
        {"name": "ko-mask-on-en", "kind": "suboptimal", "source_language": "ko", "target_language": "en"},
        {"name": "en-de-union", "kind": "composed", "pair": ["en", "de"], "op": "union"},
        {"name": "sft-subnetwork", "kind": "subnetwork", "checkpoints": "sft"},
        {"name": "sft-random-subnetwork", "kind": "subnetwork", "checkpoints": "sft-random"}
    ]
}


def tiny_dict() -> dict:
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    data = tiny_dict()
    data["output_dir"] = str(tmp_path)
    return ExperimentConfig(**data)


@pytest.fixture
def micro_config() -> ModelConfig:
    return ModelConfig(num_layers=2, heads_per_layer=2, model_dim=8, ffn_dim=16, vocab_size=16,
                       max_seq_len=8, classifier_hidden_dim=8)
