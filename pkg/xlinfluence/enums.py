import os
from enum import Enum


class RootEnum(Enum):
    ...


class ASSETS(RootEnum):
    DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "assets")
    CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "assets", "configs")


class TASK(str, Enum):
    PARAPHRASE = "pair-paraphrase"
    INFERENCE = "pair-inference-binary"
    SENTIMENT = "single-sentiment-binary"

    @property
    def is_pair(self) -> bool:
        return self is not TASK.SENTIMENT


class SPLIT(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


class MODE(str, Enum):
    FULL = "full"
    SFT = "sft"


class BATCHING(str, Enum):
    MIXED = "mixed"
    HOMOGENEOUS = "homogeneous"


class INIT_FROM(str, Enum):
    INIT = "init"
    FULL = "full"


class PRUNE_SOURCE(str, Enum):
    MULTILINGUAL = "multilingual"
    MONOLINGUAL = "monolingual"


class STOP_REASON(str, Enum):
    THRESHOLD = "threshold"
    EXHAUSTED = "exhausted"
    NONE_PRUNABLE = "none-prunable"


class SCHEME(str, Enum):
    DENSE = "dense-full"
    FACTORED = "factored-per-matrix"
    EXACT = "exact"


class NORMALIZATION(str, Enum):
    NONE = "none"
    COSINE = "cosine"
    TRAIN = "train"


class SIGN(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class VARIANT_KIND(str, Enum):
    FULL = "full"
    SUBNETWORK = "subnetwork"
    RANDOM = "random"
    SUBOPTIMAL = "suboptimal"
    COMPOSED = "composed"


class CHECKPOINTS(str, Enum):
    """Which training run a variant's checkpoints come from."""
    FULL = "full"
    SFT = "sft"
    SFT_RANDOM = "sft-random"


class COMPOSE_OP(str, Enum):
    UNION = "union"
    INTERSECT = "intersect"


class TOKENS(RootEnum):
    """
    Reserved token ids shared by generated and CSV-loaded corpora.

    Attributes
    ----------
    PAD, CLS, SEP, UNK
    FIRST_FREE: first id available to language vocabularies.
    """
    PAD = 0
    CLS = 1
    SEP = 2
    UNK = 3
    FIRST_FREE = 4
    WORDS = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"]


class TASK_LR(RootEnum):
    """Per-task AdamW learning rates used when a TrainConfig leaves it unset."""
    INFERENCE = 2e-5
    PARAPHRASE = 9e-6
    SENTIMENT = 2e-5


class ADAMW(RootEnum):
    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8
    WEIGHT_DECAY = 0.01
    BATCH_SIZE = 16


class PRUNING(RootEnum):
    THRESHOLD = 0.95
    RATE = 0.10


class INFLUENCE(RootEnum):
    SKETCH_DIM = 256
    TOP_M = 100
    FIDELITY_DIMS = (256, 64)
    FIDELITY_PAIRS = (50, 20)


class FILES(RootEnum):
    PARAMS_MAGIC = b"XLIP"
    SKETCH_MAGIC = b"XLIS"
    FORMAT_VERSION = 1
    MANIFEST = "manifest.json"
    LOCK = ".lock"
    MASK_SUFFIX = ".mask.json"
    PARAMS_SUFFIX = ".params"
    SKETCH_SUFFIX = ".sketch"


class REPORT(RootEnum):
    SUBNETWORK_DELTA = "fig2_delta"
    RANDOM_SUBNETWORKS = "random_subnetworks"
    SFT_DELTA = "sft_delta"
    SFT_ABSOLUTE = "sft_absolute"
    RANDOM_SFT = "fig6_random_sft"
    SPECIALIZATION_ACCURACY = "fig7_corr"
    SIMILARITY_INFLUENCE = "fig8_sim_corr"
    LAYERWISE_SIMILARITY = "fig9_layerwise"
    EPOCH_TRAJECTORIES = "fig10_epochs"
    COMPOSITION = "appF_compose"
    FULL_BASELINE = "full_baseline"
    MASK_OVERLAP = "mask_overlap"
    PERFORMANCE = "performance"
    SEED_SUMMARY = "seed_summary"


class EXIT(RootEnum):
    OK = 0
    FAILURE = 1
    CONTRACT = 2
    DEPENDENCY = 3
    LOCKED = 4
