"""
TracIn influence over per-epoch checkpoints, with random-projection gradient
sketches, cosine normalization and top-m ranking.
"""
import os
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union
import numpy as np
import pandas as pd
from tqdm import tqdm
from xlinfluence.config import InfluenceConfig
from xlinfluence.enums import SCHEME, NORMALIZATION, SIGN, FILES
from xlinfluence.errors import ConfigurationError, ContractViolation, FormatError
from xlinfluence.model import (Example, GradVector, ParameterLayout, Parameters, SubnetworkMask,
                               per_example_gradients, predict)
from xlinfluence.stores.sketch_store import SketchFile
from xlinfluence.utils.hashing_utils import sha256_text


logger = logging.getLogger("root_logger")
CHUNK = 256


class SketchProjector:
    """
    Random linear map from the flat gradient (length p) to a d-dimensional
    sketch.

    Attributes
    ----------
    seed: int
    d: int
        Sketch dimension (p for the `exact` scheme).
    layout: ParameterLayout
    scheme: SCHEME
        `dense-full` draws one d x p matrix with N(0, 1/d) entries.
        `factored-per-matrix` draws, for every parameter block viewed as an
        r x c matrix, a pair G1 (sqrt(d) x r) and G2 (sqrt(d) x c) with
        N(0, 1/sqrt(d)) entries and maps the block M to vec(G1 M G2^T); block
        sketches are summed. `exact` is the identity.
    selector: Optional[np.ndarray]
        Boolean vector of coordinates entering the sketch; others are zeroed.
    """
    def __init__(self,
                 seed: int,
                 d: int,
                 layout: ParameterLayout,
                 scheme: SCHEME,
                 selector: Optional[np.ndarray] = None
                 ) -> None:
        self.seed, self.layout, self.scheme = seed, layout, SCHEME(scheme)
        self.selector = selector
        self.d = layout.size if self.scheme == SCHEME.EXACT else d
        rng = np.random.default_rng(seed)
        self.dense, self.factors = None, []
        if self.scheme == SCHEME.DENSE:
            self.dense = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, layout.size))
        elif self.scheme == SCHEME.FACTORED:
            side = math.isqrt(d)
            for b in layout.blocks:
                r, c = b.matrix_shape
                g1 = rng.normal(0.0, 1.0 / math.sqrt(side), size=(side, r))
                g2 = rng.normal(0.0, 1.0 / math.sqrt(side), size=(side, c))
                self.factors.append((b, g1, g2))

    def __repr__(self):
        return f"SketchProjector(scheme={self.scheme.value}, d={self.d}, seed={self.seed})"

    @property
    def side(self) -> Optional[int]:
        return math.isqrt(self.d) if self.scheme == SCHEME.FACTORED else None

    def key(self) -> dict:
        return {"seed": self.seed, "d": self.d, "scheme": self.scheme.value,
                "layout": self.layout.content_hash(),
                "selector": None if self.selector is None else sha256_text(
                    np.packbits(self.selector).tobytes().hex())}

    def project(self, values: np.ndarray) -> np.ndarray:
        """
        Sketch one gradient (p,) or a stack of gradients (n, p).
        """
        values = np.asarray(values, dtype=np.float64)
        single = values.ndim == 1
        rows = values.reshape(1, -1) if single else values
        if rows.shape[1] != self.layout.size:
            raise ContractViolation(f"Gradient length {rows.shape[1]} does not match the projector "
                                    f"layout (p={self.layout.size})")
        if self.selector is not None:
            rows = np.where(self.selector, rows, 0.0)
        if self.scheme == SCHEME.EXACT:
            out = rows.copy()
        elif self.scheme == SCHEME.DENSE:
            out = rows @ self.dense.T
        else:
            out = np.zeros((rows.shape[0], self.d))
            for b, g1, g2 in self.factors:
                block = rows[:, b.offset:b.stop].reshape(rows.shape[0], *b.matrix_shape)
                out += (np.einsum("ir,nrc->nic", g1, block) @ g2.T).reshape(rows.shape[0], self.d)
        return out[0] if single else out


def build_projector(seed: int,
                    d: int,
                    layout: ParameterLayout,
                    scheme: Union[SCHEME, str] = SCHEME.DENSE,
                    include_classifier: bool = True
                    ) -> SketchProjector:
    """
    Build a deterministic sketch projector.

    Raises
    -------
    ConfigurationError:
        If d < 1, or the factored scheme is asked for a non-square d.
    """
    scheme = SCHEME(scheme)
    if d < 1:
        raise ConfigurationError(f"Sketch dimension must be >= 1, got {d}")
    if scheme == SCHEME.FACTORED and math.isqrt(d) ** 2 != d:
        raise ConfigurationError(f"Factored sketches need a perfect-square dimension, got {d}")
    selector = None if include_classifier else ~layout.prefix_selector("classifier.")
    return SketchProjector(seed, d, layout, scheme, selector)


@dataclass(frozen=True)
class GradSketch:
    values: np.ndarray
    grad_norm: Optional[float] = None


def sketch_gradient(projector: SketchProjector, grad: Union[GradVector, np.ndarray]) -> GradSketch:
    """
    Project one gradient; linear in `grad`.
    """
    values = grad.values if isinstance(grad, GradVector) else np.asarray(grad)
    return GradSketch(values=projector.project(values), grad_norm=float(np.linalg.norm(values)))


def _normalized(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)


def _as_mode(normalize: Union[bool, NORMALIZATION, str]) -> NORMALIZATION:
    if isinstance(normalize, bool):
        return NORMALIZATION.COSINE if normalize else NORMALIZATION.NONE
    return NORMALIZATION(normalize)


def tracin_scores(train_sketches: np.ndarray,
                  test_sketches: np.ndarray,
                  normalize: Union[bool, NORMALIZATION, str] = NORMALIZATION.COSINE,
                  per_checkpoint: bool = False
                  ) -> np.ndarray:
    """
    TracIn scores of every test row against every training row.

    Parameters
    ----------
    train_sketches: np.ndarray
        (E, N, d) sketches of N training examples at E checkpoints.
    test_sketches: np.ndarray
        (E, T, d) or (E, d).
    normalize: bool or NORMALIZATION
        `none`: sum of dot products; `cosine`: sum of cosines; `train`:
        dot products divided by the training-gradient norm. Zero vectors
        contribute 0.
    per_checkpoint: bool
        Return the (E, T, N) terms instead of their sum.

    Raises
    -------
    ContractViolation:
        On mismatched checkpoint counts or sketch dimensions.

    Returns
    -------
    np.ndarray
        (T, N) or (N,) when a single test was passed.
    """
    train = np.asarray(train_sketches, dtype=np.float64)
    test = np.asarray(test_sketches, dtype=np.float64)
    single = test.ndim == 2
    if single:
        test = test[:, None, :]
    if train.ndim != 3 or train.shape[0] != test.shape[0] or train.shape[2] != test.shape[2]:
        raise ContractViolation(f"Incompatible sketch stacks: train {train.shape}, test {test.shape}")
    mode = _as_mode(normalize)
    if mode in (NORMALIZATION.COSINE, NORMALIZATION.TRAIN):
        train = _normalized(train)
    if mode == NORMALIZATION.COSINE:
        test = _normalized(test)
    terms = np.einsum("etd,end->etn", test, train)
    out = terms if per_checkpoint else terms.sum(axis=0)
    if single:
        out = out[..., 0, :]
    return out


def tracin_score(train_sketches: np.ndarray,
                 test_sketches: np.ndarray,
                 normalize: Union[bool, NORMALIZATION, str] = True
                 ) -> float:
    """
    Score of one (train, test) pair from their (E, d) sketch stacks.
    """
    train = np.asarray(train_sketches, dtype=np.float64)
    test = np.asarray(test_sketches, dtype=np.float64)
    if train.shape != test.shape or train.ndim != 2:
        raise ContractViolation(f"Expected two (E, d) stacks of equal shape, got {train.shape} "
                                f"and {test.shape}")
    return float(tracin_scores(train[:, None, :], test, normalize)[0])


def eligible_tests(test_corpus: Sequence[Example],
                   variants: Sequence[tuple[Parameters, Optional[SubnetworkMask]]]
                   ) -> set[int]:
    """
    Ids of test examples classified correctly by every (params, mask) variant.
    """
    examples = list(getattr(test_corpus, "examples", test_corpus))
    if not variants:
        raise ContractViolation("eligible_tests needs at least one model variant.")
    labels = np.array([ex.label for ex in examples])
    ok = np.ones(len(examples), dtype=bool)
    for params, mask in variants:
        if len(examples):
            ok &= predict(params, examples, mask) == labels
    return {ex.uid for ex, keep in zip(examples, ok) if keep}


@dataclass(frozen=True)
class InfluenceRanking:
    """
    Top-m most positive (descending) and most negative (ascending) training
    examples for one test example.
    """
    test_id: int
    positive: tuple
    negative: tuple
    m: int

    def train_ids(self, sign: SIGN) -> np.ndarray:
        rows = self.positive if SIGN(sign) == SIGN.POSITIVE else self.negative
        return np.array([tid for tid, _ in rows], dtype=np.int64)


def rank_top_m(scores: np.ndarray,
               m: int,
               train_ids: Optional[np.ndarray] = None,
               test_id: int = -1,
               strict_sign: bool = False
               ) -> InfluenceRanking:
    """
    Rank one test example's scores over all training examples.

    Ties are broken by train id ascending. With `strict_sign`, non-positive
    scores are dropped from the positive list and non-negative ones from the
    negative list.

    Raises
    -------
    ContractViolation:
        If m exceeds the number of training examples or is < 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(scores.size) if train_ids is None else np.asarray(train_ids, dtype=np.int64)
    if not 1 <= m <= scores.size:
        raise ContractViolation(f"m={m} must lie in [1, {scores.size}]")
    pos = np.lexsort((ids, -scores))[:m]
    neg = np.lexsort((ids, scores))[:m]
    if strict_sign:
        pos = pos[scores[pos] > 0]
        neg = neg[scores[neg] < 0]
    return InfluenceRanking(test_id=int(test_id),
                            positive=tuple((int(ids[i]), float(scores[i])) for i in pos),
                            negative=tuple((int(ids[i]), float(scores[i])) for i in neg),
                            m=m)


def rankings_frame(rankings: Sequence[InfluenceRanking]) -> pd.DataFrame:
    rows = []
    for r in rankings:
        for sign, lst in ((SIGN.POSITIVE, r.positive), (SIGN.NEGATIVE, r.negative)):
            rows += [(r.test_id, k + 1, tid, score, sign.value) for k, (tid, score) in enumerate(lst)]
    return pd.DataFrame(rows, columns=["test_id", "rank", "train_id", "score", "sign"])


def rankings_from_frame(df: pd.DataFrame, m: int) -> list[InfluenceRanking]:
    missing = {"test_id", "rank", "train_id", "score", "sign"} - set(df.columns)
    if missing:
        raise FormatError(f"Rankings table lacks columns {sorted(missing)}")
    out = []
    for test_id, group in df.groupby("test_id", sort=False):
        group = group.sort_values("rank", kind="stable")
        lists = {s: tuple((int(t), float(v)) for t, v in
                          zip(group.loc[group.sign == s.value, "train_id"],
                              group.loc[group.sign == s.value, "score"]))
                 for s in SIGN}
        out.append(InfluenceRanking(test_id=int(test_id), positive=lists[SIGN.POSITIVE],
                                    negative=lists[SIGN.NEGATIVE], m=m))
    return out


class SketchCache:
    """
    On-disk sketch store keyed by corpus hash, checkpoint epoch, projector
    key and mask hash, with a JSON index of what each file holds.
    """
    def __init__(self, directory: Union[str, os.PathLike], dtype: str = "float32") -> None:
        self.directory = str(directory)
        self.dtype = dtype
        self.index_path = os.path.join(self.directory, "index.json")

    def _index(self) -> dict:
        if not os.path.isfile(self.index_path):
            return {}
        with open(self.index_path, encoding="utf-8") as f:
            return json.load(f)

    @staticmethod
    def key(corpus_hash: str, epoch: int, projector: SketchProjector, mask_hash: str) -> dict:
        return {"corpus": corpus_hash, "epoch": epoch, "projector": projector.key(), "mask": mask_hash}

    def path(self, key: dict) -> str:
        name = sha256_text(json.dumps(key, sort_keys=True))[:24]
        return os.path.join(self.directory, f"{name}{FILES.SKETCH_SUFFIX.value}")

    def get(self, key: dict) -> Optional[np.ndarray]:
        path = self.path(key)
        sf = SketchFile(path)
        if not sf.is_valid:
            return None
        rows, head = sf.read()
        if head["meta"] != json.loads(json.dumps(key, sort_keys=True)):
            raise FormatError(f"Sketch file {path} holds a different key than requested")
        return rows

    def put(self, key: dict, rows: np.ndarray) -> str:
        path = self.path(key)
        SketchFile(path).write(rows, seed=key["projector"]["seed"], meta=key, dtype=self.dtype)
        index = self._index()
        index[os.path.basename(path)] = key
        with open(self.index_path, "w", encoding="utf-8") as f:
            json.dump(index, f, indent=2, sort_keys=True)
        return path

    def files(self) -> list[str]:
        return sorted(os.path.join(self.directory, f) for f in self._index())


def compute_sketches(params: Parameters,
                     examples: Sequence[Example],
                     mask: Optional[SubnetworkMask],
                     projector: SketchProjector,
                     workers: int = 1,
                     store_dtype: str = "float64",
                     progress: bool = False
                     ) -> np.ndarray:
    """
    Sketch the loss gradient of every example, in chunks, in input order.

    Values are rounded through `store_dtype` so freshly computed and cached
    sketches agree.
    """
    out = np.empty((len(examples), projector.d), dtype=np.float64)
    for start in tqdm(range(0, len(examples), CHUNK), desc="sketches", disable=not progress):
        grads, _ = per_example_gradients(params, examples[start:start + CHUNK], mask, workers=workers)
        out[start:start + CHUNK] = projector.project(grads)
    return out.astype(store_dtype).astype(np.float64)


@dataclass
class InfluenceResult:
    """
    Summed-score rankings of every scored test example plus the rankings from
    each checkpoint's scores alone.
    """
    rankings: list
    per_epoch: dict
    test_languages: dict
    train_languages: dict
    m: int
    epochs: list = field(default_factory=list)


def compute_influence(checkpoints: Sequence[tuple[int, Parameters]],
                      train: Sequence[Example],
                      tests: Sequence[Example],
                      masks: dict,
                      config: InfluenceConfig,
                      cache: Optional[SketchCache] = None,
                      corpus_hash: str = "",
                      progress: bool = False
                      ) -> InfluenceResult:
    """
    TracIn rankings of `tests` over `train` for one model variant.

    Parameters
    ----------
    checkpoints: Sequence[tuple[int, Parameters]]
        (epoch, parameters) pairs entering the TracIn sum.
    train, tests: Sequence[Example]
    masks: dict
        Test language -> SubnetworkMask (or None for the ungated model). Train
        gradients are taken under the mask of the test language being scored.
    config: InfluenceConfig
    cache: Optional[SketchCache]
        Reused when a sketch with the same key exists.

    Returns
    -------
    InfluenceResult
    """
    if not checkpoints:
        raise ContractViolation("compute_influence needs at least one checkpoint.")
    train, tests = list(train), list(tests)
    layout = checkpoints[0][1].layout
    projector = build_projector(config.projector_seed, config.sketch_dim, layout, config.scheme,
                                config.include_classifier)
    store_dtype = config.store_dtype
    memo = {}

    def train_stack(mask):
        mhash = mask.content_hash() if mask is not None else "ungated"
        if mhash not in memo:
            stack = []
            for epoch, params in checkpoints:
                key = SketchCache.key(corpus_hash, epoch, projector, mhash) if cache is not None else None
                rows = cache.get(key) if cache is not None else None
                if rows is None or rows.shape[0] != len(train):
                    rows = compute_sketches(params, train, mask, projector, config.workers, store_dtype, progress)
                    if cache is not None:
                        cache.put(key, rows)
                stack.append(rows)
            memo[mhash] = np.stack(stack)
        return memo[mhash]

    train_ids = np.array([ex.uid for ex in train], dtype=np.int64)
    m = config.top_m
    rankings, per_epoch = [], {epoch: [] for epoch, _ in checkpoints}
    test_langs = list(dict.fromkeys(ex.language for ex in tests))
    for lang in test_langs:
        group = [ex for ex in tests if ex.language == lang]
        mask = masks.get(lang)
        test_stack = np.stack([compute_sketches(params, group, mask, projector, config.workers, "float64")
                               for _, params in checkpoints])
        terms = tracin_scores(train_stack(mask), test_stack, config.normalization, per_checkpoint=True)
        totals = terms.sum(axis=0)
        for t, ex in enumerate(group):
            rankings.append(rank_top_m(totals[t], m, train_ids, ex.uid))
            for e, (epoch, _) in enumerate(checkpoints):
                per_epoch[epoch].append(rank_top_m(terms[e, t], m, train_ids, ex.uid))
        logger.info(f"Scored {len(group)} '{lang}' tests against {len(train)} training examples")
    return InfluenceResult(rankings=rankings, per_epoch=per_epoch,
                           test_languages={ex.uid: ex.language for ex in tests},
                           train_languages={ex.uid: ex.language for ex in train},
                           m=m, epochs=[e for e, _ in checkpoints])


def exact_tracin_scores(checkpoints: Sequence[Parameters],
                        train: Sequence[Example],
                        tests: Sequence[Example],
                        mask: Optional[SubnetworkMask] = None,
                        normalize: Union[bool, NORMALIZATION, str] = NORMALIZATION.COSINE
                        ) -> np.ndarray:
    """
    (T, N) TracIn scores from unprojected per-example gradients, computed pair
    by pair. Used as the reference for sketch fidelity checks.
    """
    mode = _as_mode(normalize)
    total = np.zeros((len(tests), len(train)))
    for params in checkpoints:
        g_train, _ = per_example_gradients(params, list(train), mask)
        g_test, _ = per_example_gradients(params, list(tests), mask)
        for t in range(len(tests)):
            for n in range(len(train)):
                dot = float(g_test[t] @ g_train[n])
                nu, nv = np.linalg.norm(g_train[n]), np.linalg.norm(g_test[t])
                if mode == NORMALIZATION.COSINE:
                    dot = dot / (nu * nv) if nu > 0 and nv > 0 else 0.0
                elif mode == NORMALIZATION.TRAIN:
                    dot = dot / nu if nu > 0 else 0.0
                total[t, n] += dot
    return total
