"""
Contribution matrices and the statistics derived from them: deltas, language
specialization, mask similarity, correlations, epoch trajectories, mask
composition and overlap counts.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union
import numpy as np
import pandas as pd
from scipy import stats
from xlinfluence.enums import SIGN, COMPOSE_OP
from xlinfluence.errors import ContractViolation, UndefinedSimilarityError, UndefinedCorrelationError
from xlinfluence.influence import InfluenceRanking
from xlinfluence.model import SubnetworkMask


logger = logging.getLogger("root_logger")


@dataclass(frozen=True)
class ContributionMatrix:
    """
    Mean percentage of each test language's top-m training examples (rows)
    drawn from each training language (columns).
    """
    table: pd.DataFrame
    m: int
    sign: SIGN
    variant: str = "full"

    @property
    def languages(self) -> list[str]:
        return list(self.table.index)

    def row_sums(self) -> pd.Series:
        return self.table.sum(axis=1)

    def meta(self) -> dict:
        return {"m": self.m, "sign": SIGN(self.sign).value, "variant": self.variant}


@dataclass(frozen=True)
class DeltaMatrix:
    table: pd.DataFrame
    m: int
    sign: SIGN
    variant: str
    baseline: str

    def row_sums(self) -> pd.Series:
        return self.table.sum(axis=1)

    def meta(self) -> dict:
        return {"m": self.m, "sign": SIGN(self.sign).value, "variant": self.variant,
                "baseline": self.baseline}


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    count: int
    p_value: float
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)


def group_by_language(rankings: Sequence[InfluenceRanking], test_languages: dict) -> dict[str, list]:
    groups = {}
    for r in rankings:
        groups.setdefault(test_languages[r.test_id], []).append(r)
    return groups


def contribution_matrix(rankings: dict,
                        train_languages: dict,
                        sign: Union[SIGN, str] = SIGN.POSITIVE,
                        languages: Optional[Sequence[str]] = None,
                        variant: str = "full",
                        rows: Optional[Sequence[str]] = None
                        ) -> ContributionMatrix:
    """
    Parameters
    ----------
    rankings: dict
        Test language -> rankings of that language's eligible tests.
    train_languages: dict
        Train id -> language.
    sign: SIGN
        Which list of each ranking is counted.
    languages: Optional[Sequence[str]]
        Column (training language) order; defaults to the order of
        `rankings` keys.
    rows: Optional[Sequence[str]]
        Test languages to report, in order; defaults to the languages of
        `languages` that have rankings. Variants scoring every language give a
        square matrix.

    Raises
    -------
    ContractViolation:
        If a requested test-language group is empty or the rankings disagree
        on m.

    Returns
    -------
    ContributionMatrix
    """
    sign = SIGN(sign)
    languages = list(languages) if languages is not None else list(rankings)
    rows = list(rows) if rows is not None else [lang for lang in languages if rankings.get(lang)]
    ms = {r.m for lang in rows for r in rankings.get(lang, [])}
    if len(ms) > 1:
        raise ContractViolation(f"Rankings use different m values: {sorted(ms)}")
    col = {lang: j for j, lang in enumerate(languages)}
    table = np.zeros((len(rows), len(languages)))
    for i, lang in enumerate(rows):
        group = rankings.get(lang, [])
        if not group:
            raise ContractViolation(f"No rankings for test language '{lang}'")
        for r in group:
            for tid in r.train_ids(sign):
                table[i, col[train_languages[int(tid)]]] += 100.0 / r.m
        table[i] /= len(group)
    if not rows:
        raise ContractViolation("No test language has rankings.")
    return ContributionMatrix(table=pd.DataFrame(table, index=pd.Index(rows, name="test"),
                                                 columns=pd.Index(languages, name="train")),
                              m=ms.pop(), sign=sign, variant=variant)


def delta_matrix(variant: ContributionMatrix, baseline: ContributionMatrix) -> DeltaMatrix:
    """
    Elementwise `variant - baseline`.

    Raises
    -------
    ContractViolation:
        On differing labels, sign or m.
    """
    if (list(variant.table.index) != list(baseline.table.index)
            or list(variant.table.columns) != list(baseline.table.columns)):
        raise ContractViolation("Contribution matrices have different language labels.")
    if SIGN(variant.sign) != SIGN(baseline.sign) or variant.m != baseline.m:
        raise ContractViolation(f"Cannot subtract a {SIGN(baseline.sign).value}/m={baseline.m} matrix "
                                f"from a {SIGN(variant.sign).value}/m={variant.m} matrix")
    return DeltaMatrix(table=variant.table - baseline.table, m=variant.m, sign=variant.sign,
                       variant=variant.variant, baseline=baseline.variant)


def specialization(matrix: Union[ContributionMatrix, DeltaMatrix]) -> pd.Series:
    """
    In-language share per test language (the diagonal).

    Raises
    -------
    ContractViolation:
        If a row language is not among the columns.
    """
    table = matrix.table
    missing = [lang for lang in table.index if lang not in table.columns]
    if missing:
        raise ContractViolation(f"Row languages {missing} have no aligned column.")
    return pd.Series([float(table.loc[lang, lang]) for lang in table.index],
                     index=table.index, name="specialization")


def mask_cosine(a: SubnetworkMask, b: SubnetworkMask, layer: Optional[int] = None) -> float:
    """
    Cosine similarity of two flattened masks, or of one layer's bits.

    Raises
    -------
    ContractViolation:
        On shape mismatch or an out-of-range layer.
    UndefinedSimilarityError:
        If either operand has no enabled head.
    """
    if a.bits.shape != b.bits.shape:
        raise ContractViolation(f"Mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    if layer is not None and not 0 <= layer < a.layers:
        raise ContractViolation(f"Layer {layer} outside [0, {a.layers})")
    u = a.flat() if layer is None else a.layer_bits(layer).astype(np.float64)
    v = b.flat() if layer is None else b.layer_bits(layer).astype(np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise UndefinedSimilarityError("Cosine similarity is undefined for an all-zero mask"
                                       + ("" if layer is None else f" (layer {layer})"))
    return float(u @ v / (nu * nv))


def similarity_matrix(masks: dict, layer: Optional[int] = None) -> pd.DataFrame:
    langs = list(masks)
    table = np.zeros((len(langs), len(langs)))
    for i, a in enumerate(langs):
        for j in range(i, len(langs)):
            table[i, j] = table[j, i] = mask_cosine(masks[a], masks[langs[j]], layer)
    return pd.DataFrame(table, index=langs, columns=langs)


def layerwise_similarity(masks: dict) -> dict[int, pd.DataFrame]:
    """
    Similarity matrix of every layer whose bits are non-empty for all masks.
    """
    layers = next(iter(masks.values())).layers
    out = {}
    for layer in range(layers):
        try:
            out[layer] = similarity_matrix(masks, layer)
        except UndefinedSimilarityError:
            logger.debug(f"Layer {layer} has an empty mask row; skipped")
    return out


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """
    Pearson product-moment correlation.

    Raises
    -------
    ContractViolation:
        If lengths differ or fewer than 3 points are given.
    UndefinedCorrelationError:
        If either series is constant.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation(f"Series must be 1-D of equal length, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise ContractViolation(f"Pearson r needs at least 3 points, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("Pearson r is undefined for a constant series.")
    r, p = stats.pearsonr(x, y)
    return CorrelationResult(r=float(np.clip(r, -1.0, 1.0)), count=int(x.size), p_value=float(p), x=x, y=y)


def off_diagonal_pairs(similarity: pd.DataFrame, influence: pd.DataFrame) -> pd.DataFrame:
    """
    Ordered language pairs (test, train) with their mask similarity and
    cross-language influence entry. Test languages missing from `influence`
    are skipped.
    """
    rows = []
    for a in similarity.index:
        if a not in influence.index:
            continue
        for b in similarity.columns:
            if a != b:
                rows.append((a, b, float(similarity.loc[a, b]), float(influence.loc[a, b])))
    return pd.DataFrame(rows, columns=["test", "train", "similarity", "influence"])


def epoch_trajectory(per_epoch: dict,
                     test_languages: dict,
                     train_languages: dict,
                     languages: Sequence[str],
                     epochs: Optional[Sequence[int]] = None
                     ) -> pd.DataFrame:
    """
    Positive-sign specialization per (language, epoch) from rankings built
    on each checkpoint's scores alone.

    Raises
    -------
    ContractViolation:
        If an expected epoch has no rankings.
    """
    epochs = list(epochs) if epochs is not None else sorted(per_epoch)
    columns = {}
    for e in epochs:
        if not per_epoch.get(e):
            raise ContractViolation(f"No rankings for epoch {e}")
        cm = contribution_matrix(group_by_language(per_epoch[e], test_languages), train_languages,
                                 SIGN.POSITIVE, languages)
        columns[e] = specialization(cm)
    df = pd.DataFrame(columns)
    df.columns.name = "epoch"
    return df


def compose(a: SubnetworkMask, b: SubnetworkMask, op: Union[COMPOSE_OP, str]) -> SubnetworkMask:
    if a.bits.shape != b.bits.shape:
        raise ContractViolation(f"Mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    if COMPOSE_OP(op) == COMPOSE_OP.UNION:
        return SubnetworkMask(a.bits | b.bits)
    return SubnetworkMask(a.bits & b.bits)


def head_share_counts(masks: dict) -> pd.DataFrame:
    """
    Number of languages enabling each head (rows: layer, columns: head).
    """
    total = sum(m.bits.astype(np.int64) for m in masks.values())
    heads, layers = total.shape
    return pd.DataFrame(total.T, index=pd.Index(range(layers), name="layer"),
                        columns=pd.Index(range(heads), name="head"))


def overlap_counts(masks: dict) -> pd.DataFrame:
    langs = list(masks)
    table = [[int(np.sum(masks[a].bits & masks[b].bits)) for b in langs] for a in langs]
    return pd.DataFrame(table, index=langs, columns=langs)


def overlap_percentages(masks: dict) -> pd.DataFrame:
    """
    Row language's enabled heads that are also enabled by the column language,
    as a percentage of the row language's enabled heads (not symmetric).
    """
    counts = overlap_counts(masks).astype(np.float64)
    enabled = pd.Series({lang: m.enabled_count for lang, m in masks.items()})
    return counts.div(enabled.where(enabled > 0), axis=0).fillna(0.0) * 100.0


def sparsity_table(masks: dict) -> pd.Series:
    return pd.Series({lang: m.sparsity for lang, m in masks.items()}, name="disabled_heads")


def performance_table(columns: dict, languages: Sequence[str]) -> pd.DataFrame:
    """
    Per-language accuracies; `columns` maps a setting name (e.g. subnetwork
    under full fine-tuning, SFT) to language -> accuracy.
    """
    return pd.DataFrame({name: [acc.get(lang, np.nan) for lang in languages]
                         for name, acc in columns.items()},
                        index=pd.Index(languages, name="language"))


@dataclass(frozen=True)
class SeedSummary:
    """
    Directional outcomes of one experiment repeated over corpus seeds.

    Attributes
    ----------
    diagonal: pandas.DataFrame
        In-language delta per language (rows) and seed (columns), plus a
        "mean" column averaged over the seeds that have a value.
    criteria: pandas.DataFrame
        One row per criterion with its seed-averaged `value` and whether it `holds`.
    """
    diagonal: pd.DataFrame
    criteria: pd.DataFrame

    def holds(self, name: str) -> bool:
        row = self.criteria.loc[self.criteria.criterion == name]
        if row.empty:
            raise ContractViolation(f"Unknown criterion '{name}'")
        return bool(row.holds.iloc[0])


def _seed_mean(runs: dict, key: str) -> float:
    values = np.array([runs[s].get(key, np.nan) for s in runs], dtype=np.float64)
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else np.nan


def summarize_seeds(runs: dict, languages: Sequence[str], min_positive_share: float = 0.8) -> SeedSummary:
    """
    Average per-seed directional outcomes and test each expected direction.

    `runs` maps a seed to the outcomes of that seed's report: `diagonal_delta`
    (language -> in-language delta of the identified subnetwork),
    `subnetwork_delta`, `random_delta`, `sft_specialization`,
    `sft_random_specialization`, `sft_dev_accuracy`, `sft_random_dev_accuracy`
    and `similarity_r`. Missing or NaN outcomes are skipped when averaging; a
    criterion whose average is NaN does not hold.
    """
    if not runs:
        raise ContractViolation("No seeds to summarize.")
    diagonal = pd.DataFrame({s: pd.Series(runs[s].get("diagonal_delta", {}), dtype=np.float64)
                             for s in runs}).reindex(list(languages))
    diagonal["mean"] = diagonal.mean(axis=1, skipna=True)
    positive = int((diagonal["mean"] > 0).sum())
    needed = math.ceil(min_positive_share * len(languages))

    def diff(a: str, b: str) -> float:
        return _seed_mean(runs, a) - _seed_mean(runs, b)

    rows = [("diagonal_positive", float(positive), positive >= needed),
            ("random_minus_identified_delta", diff("random_delta", "subnetwork_delta"), None),
            ("sft_random_minus_identified_specialization",
             diff("sft_random_specialization", "sft_specialization"), None),
            ("sft_random_minus_identified_accuracy",
             diff("sft_random_dev_accuracy", "sft_dev_accuracy"), None),
            ("similarity_r", _seed_mean(runs, "similarity_r"), None)]
    expected = {"random_minus_identified_delta": -1, "sft_random_minus_identified_specialization": 1,
                "sft_random_minus_identified_accuracy": -1, "similarity_r": 1}
    criteria = []
    for name, value, holds in rows:
        if holds is None:
            holds = not np.isnan(value) and np.sign(value) == expected[name]
        criteria.append({"criterion": name, "value": value, "holds": bool(holds)})
    return SeedSummary(diagonal=diagonal, criteria=pd.DataFrame(criteria))
