import os
import json
import math
import logging
from typing import Any, Optional, Union
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from xlinfluence.enums import (ASSETS, TASK, MODE, BATCHING, INIT_FROM, PRUNE_SOURCE, SCHEME,
                               NORMALIZATION, VARIANT_KIND, CHECKPOINTS, COMPOSE_OP, TASK_LR,
                               ADAMW, PRUNING, INFLUENCE, TOKENS)
from xlinfluence.errors import ConfigurationError
from xlinfluence.utils.hashing_utils import sha256_text


logger = logging.getLogger("root_logger")


class ConfigModel(BaseModel):
    """
    Base of all configuration models. Validation failures surface as
    `ConfigurationError` instead of pydantic's `ValidationError`.
    """
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    def __init__(self, **data: Any) -> None:
        try:
            super().__init__(**data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid {type(self).__name__}:\n{e}") from e

    @classmethod
    def from_json(cls, text: str):
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid {cls.__name__}:\n{e}") from e

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def content_hash(self) -> str:
        return sha256_text(self.model_dump_json())


class ModelConfig(ConfigModel):
    num_layers: int = Field(gt=0)
    heads_per_layer: int = Field(gt=0)
    model_dim: int = Field(gt=0)
    ffn_dim: int = Field(gt=0)
    vocab_size: int = Field(gt=0)
    max_seq_len: int = Field(gt=0)
    num_classes: int = Field(default=2, ge=2)
    classifier_hidden_dim: int = Field(gt=0)

    @model_validator(mode="after")
    def _divisible_heads(self):
        if self.model_dim % self.heads_per_layer != 0:
            raise ValueError(f"model_dim ({self.model_dim}) must be divisible by "
                             f"heads_per_layer ({self.heads_per_layer})")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads_per_layer

    @property
    def total_heads(self) -> int:
        return self.num_layers * self.heads_per_layer


class LanguageSpec(ConfigModel):
    """
    A synthetic language: a symbol mapping from the latent alphabet into the
    global vocabulary.

    Attributes
    ----------
    id: str
        Language id, e.g. "de".
    offset: int
        First token id of the language's own token range.
    overlap: float
        Fraction of latent symbols rendered with the base language's tokens.
    """
    id: str = Field(min_length=1)
    offset: int = Field(ge=0)
    overlap: float = Field(default=0.0, ge=0.0, le=1.0)


class CorpusConfig(ConfigModel):
    task: TASK
    languages: list[LanguageSpec] = Field(min_length=1)
    base_language: Optional[str] = None
    train_size: int = Field(gt=0)
    test_size: int = Field(gt=0)
    parallel: bool = True
    seed: int = 0
    vocab_size: int = Field(gt=0)
    max_seq_len: int = Field(gt=0)
    alphabet_size: int = Field(default=24, gt=1)
    segment_length: tuple[int, int] = (3, 6)
    dev_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _consistent(self):
        ids = [lang.id for lang in self.languages]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate language ids: {ids}")
        if self.parallel and not self.task.is_pair:
            raise ValueError(f"parallel corpora are only defined for pair tasks, not {self.task.value}")
        if self.base_language is not None and self.base_language not in ids:
            raise ValueError(f"base_language {self.base_language} not among {ids}")
        lo, hi = self.segment_length
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid segment_length {self.segment_length}")
        return self

    @property
    def language_ids(self) -> list[str]:
        return [lang.id for lang in self.languages]

    @property
    def base(self) -> str:
        return self.base_language or self.languages[0].id


class CsvSchema(ConfigModel):
    languages: list[str] = Field(min_length=1)
    pair: bool = True
    num_classes: int = Field(default=2, ge=2)
    vocab_size: int = Field(gt=TOKENS.FIRST_FREE.value)
    max_seq_len: int = Field(gt=0)


class TrainConfig(ConfigModel):
    """
    Fine-tuning hyperparameters. `masks` (language id -> SubnetworkMask) is
    runtime-only and never serialized.
    """
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=(),
                              arbitrary_types_allowed=True)

    learning_rate: Optional[float] = Field(default=None, ge=0.0)
    weight_decay: float = Field(default=ADAMW.WEIGHT_DECAY.value, ge=0.0)
    batch_size: int = Field(default=ADAMW.BATCH_SIZE.value, gt=0)
    epochs: int = Field(default=5, ge=1)
    seed: int = 0
    mode: MODE = MODE.FULL
    batching: BATCHING = BATCHING.MIXED
    init_from: INIT_FROM = INIT_FROM.INIT
    beta1: float = Field(default=ADAMW.BETA1.value, ge=0.0, lt=1.0)
    beta2: float = Field(default=ADAMW.BETA2.value, ge=0.0, lt=1.0)
    eps: float = Field(default=ADAMW.EPS.value, gt=0.0)
    masks: Optional[dict[str, Any]] = Field(default=None, exclude=True)

    def resolved_learning_rate(self, task: Optional[TASK] = None) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        defaults = {TASK.INFERENCE: TASK_LR.INFERENCE.value,
                    TASK.PARAPHRASE: TASK_LR.PARAPHRASE.value,
                    TASK.SENTIMENT: TASK_LR.SENTIMENT.value}
        return defaults.get(task, TASK_LR.INFERENCE.value)

    def with_masks(self, masks: dict, mode: MODE = MODE.SFT) -> "TrainConfig":
        fields = self.model_dump()
        fields.update(mode=mode, masks=dict(masks))
        return TrainConfig(**fields)


class PruneConfig(ConfigModel):
    threshold: float = Field(default=PRUNING.THRESHOLD.value, ge=0.0, le=1.0)
    rate: float = Field(default=PRUNING.RATE.value, gt=0.0, lt=1.0)
    source: PRUNE_SOURCE = PRUNE_SOURCE.MULTILINGUAL


class InfluenceConfig(ConfigModel):
    sketch_dim: int = Field(default=INFLUENCE.SKETCH_DIM.value, ge=1)
    top_m: int = Field(default=INFLUENCE.TOP_M.value, ge=1)
    normalization: NORMALIZATION = NORMALIZATION.COSINE
    projector_seed: int = 0
    scheme: SCHEME = SCHEME.DENSE
    include_classifier: bool = True
    max_tests_per_language: Optional[int] = Field(default=None, gt=0)
    store_dtype: str = "float32"
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _square_for_factored(self):
        if self.scheme == SCHEME.FACTORED and math.isqrt(self.sketch_dim) ** 2 != self.sketch_dim:
            raise ValueError(f"factored sketches need a perfect-square dimension, got {self.sketch_dim}")
        if self.store_dtype not in ("float32", "float64"):
            raise ValueError(f"store_dtype must be float32 or float64, got {self.store_dtype}")
        return self


class VariantSpec(ConfigModel):
    """
    A model variant evaluated by TracIn.

    Attributes
    ----------
    name: str
        Unique variant name used as artifact directory.
    kind: VARIANT_KIND
        full | subnetwork | random | suboptimal | composed.
    checkpoints: CHECKPOINTS
        Which training run supplies the checkpoints (full, sft, sft-random).
    seed: Optional[int]
        Shuffle seed (random variants).
    source_language / target_language: Optional[str]
        Suboptimal variants apply the source language's mask to the target
        language's tests.
    pair: Optional[tuple[str, str]]
        Composed variants merge the masks of these two languages.
    op: Optional[COMPOSE_OP]
        union | intersect (composed variants).
    """
    name: str = Field(min_length=1)
    kind: VARIANT_KIND
    checkpoints: CHECKPOINTS = CHECKPOINTS.FULL
    seed: Optional[int] = None
    source_language: Optional[str] = None
    target_language: Optional[str] = None
    pair: Optional[tuple[str, str]] = None
    op: Optional[COMPOSE_OP] = None

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind == VARIANT_KIND.RANDOM and self.seed is None:
            raise ValueError(f"random variant '{self.name}' needs a seed")
        if self.kind == VARIANT_KIND.SUBOPTIMAL and not (self.source_language and self.target_language):
            raise ValueError(f"suboptimal variant '{self.name}' needs source_language and target_language")
        if self.kind == VARIANT_KIND.COMPOSED and (self.pair is None or self.op is None):
            raise ValueError(f"composed variant '{self.name}' needs pair and op")
        return self

    @property
    def languages_referenced(self) -> list[str]:
        langs = [self.source_language, self.target_language]
        langs += list(self.pair) if self.pair else []
        return [lang for lang in langs if lang]


class ExperimentConfig(ConfigModel):
    name: str = "experiment"
    corpus: CorpusConfig
    model: ModelConfig
    model_seed: int = 0
    train_full: TrainConfig
    train_sft: TrainConfig
    prune: PruneConfig = PruneConfig()
    influence: InfluenceConfig = InfluenceConfig()
    random_seeds: list[int] = [0, 1, 2]
    variants: list[VariantSpec] = []
    output_dir: str = "runs"

    @field_validator("train_sft")
    @classmethod
    def _sft_mode(cls, value: TrainConfig) -> TrainConfig:
        if value.mode != MODE.SFT:
            raise ValueError("train_sft.mode must be 'sft'")
        return value

    @model_validator(mode="after")
    def _references(self):
        ids = set(self.corpus.language_ids)
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variant names: {names}")
        for v in self.variants:
            missing = [lang for lang in v.languages_referenced if lang not in ids]
            if missing:
                raise ValueError(f"variant '{v.name}' references unknown languages {missing}")
        if self.corpus.vocab_size > self.model.vocab_size:
            raise ValueError("corpus vocab_size exceeds model vocab_size")
        if self.corpus.max_seq_len > self.model.max_seq_len:
            raise ValueError("corpus max_seq_len exceeds model max_seq_len")
        return self


def bundled_configs() -> list[str]:
    """
    Return the names of the configs shipped with the package.
    """
    return sorted(os.path.splitext(f)[0] for f in os.listdir(ASSETS.CONFIGS.value)
                  if f.endswith(".json"))


def load_config(path_or_name: Union[str, os.PathLike]) -> ExperimentConfig:
    """
    Load an experiment config from a JSON file, or by bundled name
    (`ci-scale`, `paper-scale`).

    Raises
    -------
    FileNotFoundError:
        If neither a file nor a bundled config matches.
    ConfigurationError:
        If the content does not validate.
    """
    path = str(path_or_name)
    if not os.path.isfile(path):
        bundled = os.path.join(ASSETS.CONFIGS.value, f"{path}.json")
        if not os.path.isfile(bundled):
            raise FileNotFoundError(f"Config not found at {path} and no bundled config named "
                                    f"'{path}' (available: {bundled_configs()})")
        path = bundled
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    cfg = ExperimentConfig.from_json(text)
    logger.debug(f"Loaded config '{cfg.name}' from {path}")
    return cfg


def save_config(cfg: ExperimentConfig, path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(cfg.to_json())
    return


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """
    Copy of `cfg` with the corpus and model-initialization seeds replaced.
    """
    data = cfg.model_dump(mode="json")
    data["corpus"]["seed"] = seed
    data["model_seed"] = seed
    return ExperimentConfig(**data)
