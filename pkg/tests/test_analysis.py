import numpy as np
import pandas as pd
import pytest
from xlinfluence.analysis import (ContributionMatrix, contribution_matrix, delta_matrix, specialization,
                                  mask_cosine, similarity_matrix, layerwise_similarity, pearson, off_diagonal_pairs,
                                  epoch_trajectory, compose, head_share_counts, overlap_counts,
                                  overlap_percentages, sparsity_table, performance_table, group_by_language,
                                  summarize_seeds)
from xlinfluence.enums import SIGN
from xlinfluence.errors import ContractViolation, UndefinedCorrelationError, UndefinedSimilarityError
from xlinfluence.influence import InfluenceRanking, rank_top_m
from xlinfluence.model import SubnetworkMask


TRAIN_LANGUAGES = {0: "en", 1: "en", 2: "de", 3: "de", 4: "ko", 5: "ko"}


def ranking(test_id, positive, negative):
    return InfluenceRanking(test_id=test_id, positive=tuple((t, 1.0) for t in positive),
                            negative=tuple((t, -1.0) for t in negative), m=len(positive))


def rankings():
    return {"en": [ranking(100, [0, 1], [4, 5]), ranking(101, [0, 2], [4, 2])],
            "de": [ranking(200, [2, 3], [0, 1]), ranking(201, [2, 4], [0, 5])]}


def test_contribution_matrix():
    cm = contribution_matrix(rankings(), TRAIN_LANGUAGES, SIGN.POSITIVE, ["en", "de", "ko"])
    assert cm.table.loc["en"].tolist() == [75.0, 25.0, 0.0]
    assert cm.table.loc["de"].tolist() == [0.0, 75.0, 25.0]
    assert np.allclose(cm.row_sums(), 100.0)
    assert cm.languages == ["en", "de"] and cm.m == 2
    neg = contribution_matrix(rankings(), TRAIN_LANGUAGES, "negative", ["en", "de", "ko"])
    assert neg.table.loc["en"].tolist() == [0.0, 25.0, 75.0]
    assert neg.meta() == {"m": 2, "sign": "negative", "variant": "full"}


def test_contribution_matrix_contract():
    with pytest.raises(ContractViolation):
        contribution_matrix(rankings(), TRAIN_LANGUAGES, SIGN.POSITIVE, ["en", "de", "ko"], rows=["ko"])
    mixed = rankings()
    mixed["de"].append(InfluenceRanking(test_id=202, positive=((2, 1.0),), negative=((0, -1.0),), m=1))
    with pytest.raises(ContractViolation):
        contribution_matrix(mixed, TRAIN_LANGUAGES)


def test_delta_matrix():
    base = contribution_matrix(rankings(), TRAIN_LANGUAGES, SIGN.POSITIVE, ["en", "de", "ko"])
    other = rankings()
    other["en"][0] = ranking(100, [4, 5], [0, 1])
    var = contribution_matrix(other, TRAIN_LANGUAGES, SIGN.POSITIVE, ["en", "de", "ko"], variant="random-0")
    delta = delta_matrix(var, base)
    assert delta.table.loc["en"].tolist() == [-50.0, 0.0, 50.0]
    assert np.allclose(delta.row_sums(), 0.0)
    assert delta.meta()["baseline"] == "full"
    neg = contribution_matrix(rankings(), TRAIN_LANGUAGES, SIGN.NEGATIVE, ["en", "de", "ko"])
    with pytest.raises(ContractViolation):
        delta_matrix(var, neg)
    with pytest.raises(ContractViolation):
        delta_matrix(var, contribution_matrix(rankings(), TRAIN_LANGUAGES, SIGN.POSITIVE, ["de", "en", "ko"]))


def test_specialization():
    cm = contribution_matrix(rankings(), TRAIN_LANGUAGES, SIGN.POSITIVE, ["en", "de", "ko"])
    assert specialization(cm).to_dict() == {"en": 75.0, "de": 75.0}
    misaligned = ContributionMatrix(table=pd.DataFrame([[1.0]], index=["de"], columns=["en"]), m=2,
                                    sign=SIGN.POSITIVE)
    with pytest.raises(ContractViolation):
        specialization(misaligned)


@pytest.mark.parametrize("a, b, expected", [
    ([[1, 0], [1, 1]], [[1, 0], [1, 1]], 1.0),
    ([[1, 0], [0, 0]], [[0, 1], [0, 0]], 0.0),
    ([[1, 1], [0, 0]], [[1, 0], [0, 0]], 1 / np.sqrt(2)),
])
def test_mask_cosine(a, b, expected):
    assert mask_cosine(SubnetworkMask(np.array(a)), SubnetworkMask(np.array(b))) == pytest.approx(expected)


def test_mask_cosine_errors():
    a = SubnetworkMask(np.array([[1, 0], [1, 0]]))
    with pytest.raises(UndefinedSimilarityError):
        mask_cosine(a, SubnetworkMask.zeros(2, 2))
    with pytest.raises(UndefinedSimilarityError):
        mask_cosine(a, a, layer=1)
    with pytest.raises(ContractViolation):
        mask_cosine(a, SubnetworkMask.ones(2, 3))
    with pytest.raises(ContractViolation):
        mask_cosine(a, a, layer=2)


def test_similarity_matrices():
    masks = {"en": SubnetworkMask(np.array([[1, 0], [1, 1]])),
             "de": SubnetworkMask(np.array([[1, 1], [0, 1]])),
             "ko": SubnetworkMask(np.array([[0, 1], [0, 1]]))}
    sim = similarity_matrix(masks)
    assert np.allclose(sim.to_numpy(), sim.to_numpy().T)
    assert np.allclose(np.diag(sim), 1.0)
    layers = layerwise_similarity(masks)
    assert list(layers) == [1], "layer 0 is empty for ko and must be skipped"


def test_pearson():
    x = np.arange(10.0)
    assert abs(pearson(x, 3 * x + 1).r - 1.0) < 1e-12
    assert abs(pearson(x, -x).r + 1.0) < 1e-12
    r = pearson([1, 2, 3, 4], [2, 1, 4, 3])
    assert r.count == 4 and -1.0 <= r.r <= 1.0
    with pytest.raises(UndefinedCorrelationError):
        pearson(x, np.ones(10))
    with pytest.raises(ContractViolation):
        pearson([1, 2], [2, 1])
    with pytest.raises(ContractViolation):
        pearson([1, 2, 3], [1, 2])


def test_off_diagonal_pairs():
    langs = ["en", "de", "ko"]
    sim = pd.DataFrame(np.eye(3) + 0.5, index=langs, columns=langs)
    infl = pd.DataFrame(np.arange(9.0).reshape(3, 3), index=langs, columns=langs).drop(index="ko")
    pairs = off_diagonal_pairs(sim, infl)
    assert len(pairs) == 4
    assert pairs.loc[(pairs.test == "en") & (pairs.train == "ko"), "influence"].item() == 2.0
    assert set(pairs.similarity) == {0.5}


def test_epoch_trajectory():
    test_languages = {100: "en", 101: "en", 200: "de", 201: "de"}
    per_epoch = {1: [r for rs in rankings().values() for r in rs],
                 2: [ranking(t, [0, 1] if t < 200 else [2, 3], [4, 5]) for t in test_languages]}
    df = epoch_trajectory(per_epoch, test_languages, TRAIN_LANGUAGES, ["en", "de", "ko"])
    assert list(df.columns) == [1, 2]
    assert df.loc["en"].tolist() == [75.0, 100.0]
    with pytest.raises(ContractViolation):
        epoch_trajectory(per_epoch, test_languages, TRAIN_LANGUAGES, ["en", "de", "ko"], epochs=[1, 3])


def test_compose():
    a = SubnetworkMask(np.array([[1, 0], [1, 1]]))
    b = SubnetworkMask(np.array([[0, 0], [1, 1]]))
    assert compose(a, b, "union") == a
    assert compose(a, b, "intersect") == b
    assert compose(a, b, "union").enabled() == a.enabled() | b.enabled()
    with pytest.raises(ContractViolation):
        compose(a, SubnetworkMask.ones(2, 3), "union")


def test_overlap_tables():
    masks = {"en": SubnetworkMask(np.array([[1, 0], [1, 1]])),
             "de": SubnetworkMask(np.array([[1, 1], [0, 1]]))}
    counts = overlap_counts(masks)
    assert counts.loc["en", "de"] == 2 and counts.loc["en", "en"] == 3
    pct = overlap_percentages(masks)
    assert pct.loc["en", "de"] == pytest.approx(200 / 3) and pct.loc["de", "de"] == 100.0
    shares = head_share_counts(masks)
    assert shares.loc[0].tolist() == [2, 1] and shares.loc[1].tolist() == [1, 2]
    assert sparsity_table(masks).to_dict() == {"en": 1, "de": 1}


def test_performance_table():
    df = performance_table({"subnetwork": {"en": 0.9, "de": 0.8}, "sft": {"en": 0.7}}, ["en", "de"])
    assert df.loc["en"].tolist() == [0.9, 0.7]
    assert np.isnan(df.loc["de", "sft"])


def test_group_by_language():
    rs = [rank_top_m(np.arange(3.0), 1, test_id=t) for t in (1, 2, 3)]
    groups = group_by_language(rs, {1: "en", 2: "de", 3: "en"})
    assert [r.test_id for r in groups["en"]] == [1, 3] and len(groups["de"]) == 1


def seed_outcomes(diagonal: dict, **fields) -> dict:
    out = {"diagonal_delta": diagonal, "subnetwork_delta": float(np.mean(list(diagonal.values()))),
           "random_delta": -1.0, "sft_specialization": 40.0, "sft_random_specialization": 60.0,
           "sft_dev_accuracy": 0.8, "sft_random_dev_accuracy": 0.7, "similarity_r": 0.3}
    out.update(fields)
    return out


def test_summarize_seeds():
    languages = ["en", "de", "ko", "fi", "sw"]
    runs = {0: seed_outcomes({"en": 5.0, "de": 2.0, "ko": 1.0, "fi": -1.0, "sw": 3.0}),
            1: seed_outcomes({"en": 3.0, "de": 2.0, "ko": 1.0, "fi": -2.0, "sw": np.nan}, similarity_r=np.nan),
            2: seed_outcomes({"en": 4.0, "de": -1.0, "ko": 1.0, "fi": 0.5, "sw": 1.0}, random_delta=0.5)}
    summary = summarize_seeds(runs, languages)
    assert summary.diagonal.loc["sw", "mean"] == pytest.approx(2.0), "NaN seeds must be skipped"
    assert summary.diagonal.loc["fi", "mean"] == pytest.approx(-2.5 / 3)
    values = summary.criteria.set_index("criterion").value
    assert values["diagonal_positive"] == 4.0
    assert summary.holds("diagonal_positive"), "4 of 5 positive languages should pass"
    assert summary.holds("random_minus_identified_delta")
    assert summary.holds("sft_random_minus_identified_specialization")
    assert summary.holds("sft_random_minus_identified_accuracy")
    assert values["similarity_r"] == pytest.approx(0.3)
    with pytest.raises(ContractViolation):
        summary.holds("unknown")


@pytest.mark.parametrize("field, criterion", [
    ("random_delta", "random_minus_identified_delta"),
    ("sft_random_specialization", "sft_random_minus_identified_specialization"),
    ("sft_random_dev_accuracy", "sft_random_minus_identified_accuracy"),
    ("similarity_r", "similarity_r"),
])
def test_summarize_seeds_missing_outcome_fails(field, criterion):
    runs = {s: seed_outcomes({"en": 1.0, "de": 1.0}, **{field: np.nan}) for s in range(3)}
    summary = summarize_seeds(runs, ["en", "de"])
    assert not summary.holds(criterion), f"{criterion} holds without any {field}"
    assert summary.holds("diagonal_positive")


def test_summarize_seeds_needs_runs():
    with pytest.raises(ContractViolation):
        summarize_seeds({}, ["en"])
