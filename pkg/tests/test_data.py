import numpy as np
import pandas as pd
import pytest
from conftest import tiny_dict
from xlinfluence.config import CorpusConfig, CsvSchema
from xlinfluence.data import (generate, symbol_maps, measured_overlap, language_slice, corpus_hash, save_jsonl,
                              load_jsonl, load_csv, save_csv)
from xlinfluence.enums import SPLIT, TOKENS
from xlinfluence.errors import ConfigurationError, FormatError, LanguageNotFoundError


def corpus_config(**overrides) -> CorpusConfig:
    data = tiny_dict()["corpus"]
    data.update(overrides)
    return CorpusConfig(**data)


def segments(ex):
    body = list(ex.tokens[1:])
    cut = body.index(TOKENS.SEP.value)
    return body[:cut], body[cut + 1:]


def test_generate_is_deterministic():
    a, b = generate(corpus_config()), generate(corpus_config())
    for x, y in zip(a, b):
        assert corpus_hash(x) == corpus_hash(y), f"{x.split.value} split differs between runs"
    other = generate(corpus_config(seed=1))
    assert corpus_hash(other[0]) != corpus_hash(a[0])


def test_split_sizes():
    train, dev, test = generate(corpus_config())
    assert len(train) == 12 * 3 and len(dev) == 3 * 3 and len(test) == 8 * 3
    assert train.split == SPLIT.TRAIN and dev.split == SPLIT.DEV and test.split == SPLIT.TEST
    assert len(set(train.ids.tolist())) == len(train), "uids are not unique"


@pytest.mark.parametrize("task", ["pair-paraphrase", "pair-inference-binary"])
def test_parallel_alignment(task):
    train, _, _ = generate(corpus_config(task=task))
    by_lang = {lang: list(language_slice(train, lang)) for lang in train.languages}
    for en, de, ko in zip(by_lang["en"], by_lang["de"], by_lang["ko"]):
        assert en.latent_id == de.latent_id == ko.latent_id
        assert en.label == de.label == ko.label, f"labels differ for latent {en.latent_id}"
        assert len(en.tokens) == len(de.tokens) == len(ko.tokens)


@pytest.mark.parametrize("task", ["pair-paraphrase", "pair-inference-binary", "single-sentiment-binary"])
def test_labels_are_balanced(task):
    train, _, _ = generate(corpus_config(task=task, parallel=task != "single-sentiment-binary"))
    for lang in train.languages:
        labels = language_slice(train, lang).labels
        assert labels.sum() == len(labels) // 2, f"unbalanced labels for {lang} ({task})"


def test_paraphrase_semantics():
    train, _, _ = generate(corpus_config())
    for ex in language_slice(train, "en"):
        a, b = segments(ex)
        same = sorted(a) == sorted(b)
        assert same == (ex.label == 1), f"example {ex.uid} label {ex.label} disagrees with its segments"


def test_inference_semantics():
    train, _, _ = generate(corpus_config(task="pair-inference-binary"))
    for ex in language_slice(train, "en"):
        a, b = segments(ex)
        if ex.label == 1:
            it = iter(a)
            assert all(t in it for t in b), f"example {ex.uid}: b is not a subsequence of a"
        else:
            assert any(t not in a for t in b), f"example {ex.uid}: negative without a foreign symbol"


def test_symbol_maps_overlap():
    maps = symbol_maps(corpus_config(languages=[{"id": "en", "offset": 4},
                                               {"id": "de", "offset": 16, "overlap": 1.0},
                                               {"id": "ko", "offset": 28, "overlap": 0.5}]))
    assert np.array_equal(maps["de"], maps["en"])
    assert np.sum(maps["ko"] == maps["en"]) == 6
    assert np.all(maps["en"] == 4 + np.arange(12))


def test_measured_overlap():
    train, _, _ = generate(corpus_config())
    assert measured_overlap(train, "ko", "en") == 0.0
    assert measured_overlap(train, "en", "en") == 1.0
    assert 0.0 < measured_overlap(train, "de", "en") < 1.0


def test_vocabulary_overflow():
    with pytest.raises(ConfigurationError):
        generate(corpus_config(vocab_size=30))


def test_sequence_too_long():
    with pytest.raises(ConfigurationError):
        generate(corpus_config(segment_length=[2, 5]))


def test_non_parallel_latent_ids():
    train, _, _ = generate(corpus_config(parallel=False))
    ids = [ex.latent_id for ex in train]
    assert len(set(ids)) == len(ids), "non-parallel corpora must not share latent ids"


def test_language_slice_unknown():
    train, _, _ = generate(corpus_config())
    with pytest.raises(LanguageNotFoundError):
        language_slice(train, "fi")


def test_jsonl_round_trip(tmp_path):
    train, _, _ = generate(corpus_config())
    path = str(tmp_path / "train.jsonl")
    save_jsonl(train, path)
    again = load_jsonl(path, SPLIT.TRAIN, train.languages, train.pair)
    assert again == train
    assert corpus_hash(again) == corpus_hash(train)


def write_csv(path, rows, columns=("text_a", "text_b", "label", "language")):
    pd.DataFrame(rows, columns=list(columns)).to_csv(path, index=False)
    return str(path)


def schema(**kw) -> CsvSchema:
    return CsvSchema(**{"languages": ["en", "de"], "vocab_size": 12, "max_seq_len": 12, **kw})


def test_load_csv_vocabulary(tmp_path):
    path = write_csv(tmp_path / "a.csv", [["the cat", "a cat", 1, "en"], ["der hund", "the cat", 0, "de"]])
    corpus = load_csv(path, schema())
    assert corpus.vocab[:TOKENS.FIRST_FREE.value] == tuple(TOKENS.WORDS.value)
    assert corpus.vocab[4:] == ("the", "cat", "a", "der", "hund")
    assert corpus[0].tokens == (TOKENS.CLS.value, 4, 5, TOKENS.SEP.value, 6, 5)
    assert [ex.language for ex in corpus] == ["en", "de"]
    assert corpus.labels.tolist() == [1, 0]


def test_load_csv_unknown_words(tmp_path):
    path = write_csv(tmp_path / "a.csv", [["w1 w2 w3", "w4 w5 [SEP]", 1, "en"]])
    corpus = load_csv(path, schema(vocab_size=7))
    assert corpus[0].tokens == (1, 4, 5, 6, 2, 3, 3, 2), "words beyond the vocabulary cap must map to [UNK]"


@pytest.mark.parametrize("rows, row", [
    ([["a", "b", 1, "en"], ["a", "b", 1, "fi"]], 2),
    ([["a", "b", 1, "en"], ["a", "b", "yes", "en"]], 2),
    ([["a", "b", 5, "en"]], 1),
    ([["a", "b", 1, "en"], ["a", "b", 1, "en"], ["", "b", 1, "en"]], 3),
    ([["a", "b", 1, "en"], ["x [SEP] y", "b", 1, "en"]], 2),
    ([["a", "b [SEP]", 1, "en"]], 1),
])
def test_load_csv_errors(tmp_path, rows, row):
    path = write_csv(tmp_path / "bad.csv", rows)
    with pytest.raises(FormatError) as e:
        load_csv(path, schema())
    assert e.value.row == row, f"expected the error on row {row}, got {e.value.row}"


def test_load_csv_missing_column(tmp_path):
    path = write_csv(tmp_path / "bad.csv", [["a", 1, "en"]], columns=("text_a", "label", "language"))
    with pytest.raises(FormatError):
        load_csv(path, schema())
    assert load_csv(path, schema(pair=False))[0].tokens == (1, 4)


def test_load_csv_too_long(tmp_path):
    path = write_csv(tmp_path / "long.csv", [[" ".join("abcdefgh"), "x y z", 1, "en"]])
    with pytest.raises(FormatError):
        load_csv(path, schema())


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "a.csv", [["the cat", "a cat", 1, "en"], ["der hund", "the cat", 0, "de"]])
    corpus = load_csv(path, schema())
    out = str(tmp_path / "b.csv")
    save_csv(corpus, out)
    again = load_csv(out, schema())
    assert [ex.tokens for ex in again] == [ex.tokens for ex in corpus]
    assert [ex.latent_id for ex in again] == [ex.latent_id for ex in corpus]
