"""
Synthetic multilingual corpora and external CSV ingestion.

Every language renders the same latent alphabet into its own token range; a
configurable fraction of latent symbols is rendered with the base language's
tokens instead, which is the only notion of language similarity used here.
"""
import os
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional, Sequence, Union
import numpy as np
import pandas as pd
from xlinfluence.config import CorpusConfig, CsvSchema
from xlinfluence.enums import TASK, SPLIT, TOKENS
from xlinfluence.errors import ConfigurationError, FormatError, LanguageNotFoundError
from xlinfluence.model import Example
from xlinfluence.utils.hashing_utils import sha256_text


logger = logging.getLogger("root_logger")
POSITIVE_MARKER, NEGATIVE_MARKER = 0, 1


@dataclass(frozen=True)
class Corpus:
    """
    An immutable, ordered collection of examples of one split.

    Attributes
    ----------
    examples: tuple[Example, ...]
    split: SPLIT
    languages: tuple[str, ...]
        Language order used for reports; a superset of the languages present.
    pair: bool
        True for two-segment inputs.
    vocab: Optional[tuple[str, ...]]
        Word of every token id for CSV-backed corpora (index = token id).
    """
    examples: tuple
    split: SPLIT = SPLIT.TRAIN
    languages: tuple = ()
    pair: bool = True
    vocab: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if not self.languages:
            seen = dict.fromkeys(ex.language for ex in self.examples)
            object.__setattr__(self, "languages", tuple(seen))
        object.__setattr__(self, "languages", tuple(self.languages))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __repr__(self):
        return (f"Corpus(split={self.split.value}, size={len(self)}, "
                f"languages={list(self.languages)})")

    @cached_property
    def index(self) -> dict[str, tuple[int, ...]]:
        """Positions of each language's examples."""
        idx = {lang: [] for lang in self.languages}
        for i, ex in enumerate(self.examples):
            idx.setdefault(ex.language, []).append(i)
        return {k: tuple(v) for k, v in idx.items()}

    @property
    def ids(self) -> np.ndarray:
        return np.array([ex.uid for ex in self.examples], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    @property
    def example_languages(self) -> np.ndarray:
        return np.array([ex.language for ex in self.examples], dtype=object)

    def by_uid(self) -> dict[int, Example]:
        return {ex.uid: ex for ex in self.examples}

    def subset(self, uids: Sequence[int]) -> "Corpus":
        keep = set(int(u) for u in uids)
        return Corpus(examples=[ex for ex in self.examples if ex.uid in keep], split=self.split,
                      languages=self.languages, pair=self.pair, vocab=self.vocab)


def language_slice(corpus: Corpus, language: str) -> Corpus:
    """
    Order-preserving filter of `corpus` to one language.

    Raises
    -------
    LanguageNotFoundError:
        If `language` has no examples in the corpus.
    """
    positions = corpus.index.get(language, ())
    if language not in corpus.languages or not positions:
        raise LanguageNotFoundError(f"Language '{language}' not present in {corpus!r}")
    return Corpus(examples=[corpus.examples[i] for i in positions], split=corpus.split,
                  languages=(language,), pair=corpus.pair, vocab=corpus.vocab)


def symbol_maps(config: CorpusConfig) -> dict[str, np.ndarray]:
    """
    Token id of every latent symbol, per language.

    The base language renders symbol s as `offset + s`. Any other language
    renders `round(overlap * alphabet_size)` seeded-chosen symbols with the
    base language's tokens and the rest with its own range.

    Raises
    -------
    ConfigurationError:
        If a language's token range does not fit in the vocabulary.
    """
    A = config.alphabet_size
    for lang in config.languages:
        if lang.offset < TOKENS.FIRST_FREE.value or lang.offset + A > config.vocab_size:
            raise ConfigurationError(f"Token range [{lang.offset}, {lang.offset + A}) of language "
                                     f"'{lang.id}' does not fit in [{TOKENS.FIRST_FREE.value}, "
                                     f"{config.vocab_size})")
    base = next(lang for lang in config.languages if lang.id == config.base)
    base_map = base.offset + np.arange(A, dtype=np.int64)
    maps = {}
    for i, lang in enumerate(config.languages):
        if lang.id == base.id:
            maps[lang.id] = base_map.copy()
            continue
        rng = np.random.default_rng([config.seed, i])
        shared = rng.choice(A, size=int(round(lang.overlap * A)), replace=False)
        own = lang.offset + np.arange(A, dtype=np.int64)
        own[shared] = base_map[shared]
        maps[lang.id] = own
    return maps


def _latent_pair(task: TASK, label: int, rng: np.random.Generator, config: CorpusConfig):
    lo, hi = config.segment_length
    A = config.alphabet_size
    n = int(rng.integers(lo, hi + 1))
    a = rng.integers(0, A, size=n)
    if task == TASK.PARAPHRASE:
        if label == 1:
            b = a.copy()
            if n > 1:
                j = int(rng.integers(0, n - 1))
                b[j], b[j + 1] = b[j + 1], b[j]
        else:
            b = rng.integers(0, A, size=n)
            while np.array_equal(np.sort(b), np.sort(a)):
                b = rng.integers(0, A, size=n)
        return a, b
    # entailment: b is an order-preserving subsequence of a
    k = int(rng.integers(1, n + 1))
    b = a[np.sort(rng.choice(n, size=k, replace=False))]
    if label == 0:
        b = b.copy()
        b[int(rng.integers(0, b.size))] = rng.choice(np.setdiff1d(np.arange(A), a))
    return a, b


def _latent_single(label: int, rng: np.random.Generator, config: CorpusConfig):
    lo, hi = config.segment_length
    A = config.alphabet_size
    n = int(rng.integers(max(lo, 2), max(hi, 2) + 1))
    seq = rng.integers(2, A, size=n) if A > 2 else np.full(n, 2)
    markers = 1 if n < 3 else 3
    majority = POSITIVE_MARKER if label == 1 else NEGATIVE_MARKER
    minority = NEGATIVE_MARKER if label == 1 else POSITIVE_MARKER
    kinds = [majority] * (markers // 2 + 1) + [minority] * (markers // 2)
    seq[rng.choice(n, size=markers, replace=False)] = kinds
    return seq, None


def _latents(config: CorpusConfig, count: int, rng: np.random.Generator) -> list:
    """Balanced, shuffled latent examples: (label, segment_a, segment_b)."""
    labels = np.arange(count) % 2
    out = []
    for label in rng.permutation(labels):
        label = int(label)
        if config.task.is_pair:
            a, b = _latent_pair(config.task, label, rng, config)
        else:
            a, b = _latent_single(label, rng, config)
        out.append((label, a, b))
    return out


def _render(latent, mapping: np.ndarray) -> tuple:
    _, a, b = latent
    tokens = [TOKENS.CLS.value] + mapping[a].tolist()
    if b is not None:
        tokens += [TOKENS.SEP.value] + mapping[b].tolist()
    return tuple(int(t) for t in tokens)


def _check_lengths(config: CorpusConfig) -> None:
    hi = max(config.segment_length[1], 2)
    longest = 2 + 2 * hi if config.task.is_pair else 1 + hi
    if longest > config.max_seq_len:
        raise ConfigurationError(f"Segments up to {hi} symbols need max_seq_len >= {longest}, "
                                 f"got {config.max_seq_len}")
    if not config.task.is_pair and config.alphabet_size < 3:
        raise ConfigurationError("The sentiment task needs an alphabet of at least 3 symbols.")
    if config.task == TASK.INFERENCE and config.alphabet_size <= config.segment_length[1]:
        raise ConfigurationError("The inference task needs alphabet_size > longest segment "
                                 "so that contradicting symbols exist.")
    return


def _build_split(config: CorpusConfig,
                 split: SPLIT,
                 count: int,
                 maps: dict[str, np.ndarray],
                 rng: np.random.Generator
                 ) -> Corpus:
    examples, langs = [], config.language_ids
    if config.parallel:
        latents = _latents(config, count, rng)
        for lang in langs:
            for lid, latent in enumerate(latents):
                examples.append(Example(uid=len(examples), tokens=_render(latent, maps[lang]),
                                        label=latent[0], language=lang, latent_id=lid))
    else:
        for li, lang in enumerate(langs):
            for lid, latent in enumerate(_latents(config, count, rng)):
                examples.append(Example(uid=len(examples), tokens=_render(latent, maps[lang]),
                                        label=latent[0], language=lang, latent_id=li * count + lid))
    return Corpus(examples=examples, split=split, languages=tuple(langs), pair=config.task.is_pair)


def generate(config: CorpusConfig) -> tuple[Corpus, Corpus, Corpus]:
    """
    Generate train, dev and test corpora.

    Each split holds `train_size` (train), `round(dev_fraction * train_size)`
    (dev) and `test_size` (test) examples per language. Pair tasks build
    positives by label-preserving transformations of a latent sequence and
    negatives by distractors; every latent example is rendered into each
    language through that language's symbol map.

    Parameters
    ----------
    config: CorpusConfig

    Raises
    -------
    ConfigurationError:
        On vocabulary overflow or sequences longer than `max_seq_len`.

    Returns
    -------
    tuple[Corpus, Corpus, Corpus]
    """
    _check_lengths(config)
    maps = symbol_maps(config)
    rng = np.random.default_rng(config.seed)
    dev_size = int(round(config.dev_fraction * config.train_size))
    train = _build_split(config, SPLIT.TRAIN, config.train_size, maps, rng)
    dev = _build_split(config, SPLIT.DEV, dev_size, maps, rng)
    test = _build_split(config, SPLIT.TEST, config.test_size, maps, rng)
    logger.info(f"Generated {config.task.value} corpora: train={len(train)}, dev={len(dev)}, "
                f"test={len(test)} over {len(config.languages)} languages")
    return train, dev, test


def measured_overlap(corpus: Corpus, language: str, base: str) -> float:
    """
    Fraction of `language`'s word token types that also occur in `base`.
    """
    def types(lang):
        toks = np.concatenate([np.asarray(ex.tokens) for ex in language_slice(corpus, lang)])
        return set(toks[toks >= TOKENS.FIRST_FREE.value].tolist())
    own = types(language)
    if not own:
        return 0.0
    return len(own & types(base)) / len(own)


def _records(corpus: Corpus) -> pd.DataFrame:
    return pd.DataFrame({"uid": [ex.uid for ex in corpus],
                         "tokens": [list(ex.tokens) for ex in corpus],
                         "label": [ex.label for ex in corpus],
                         "language": [ex.language for ex in corpus],
                         "latent_id": [ex.latent_id for ex in corpus]},
                        columns=["uid", "tokens", "label", "language", "latent_id"])


def to_jsonl(corpus: Corpus) -> str:
    if len(corpus) == 0:
        return ""
    return _records(corpus).to_json(orient="records", lines=True)


def corpus_hash(corpus: Corpus) -> str:
    """sha256 of the corpus' JSON-lines rendering."""
    return sha256_text(f"{corpus.split.value}|{','.join(corpus.languages)}|{int(corpus.pair)}\n"
                       + to_jsonl(corpus))


def save_jsonl(corpus: Corpus, path: Union[str, os.PathLike]) -> None:
    """
    Write one example per line.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_jsonl(corpus))
    return


def load_jsonl(path: Union[str, os.PathLike],
               split: SPLIT,
               languages: Sequence[str] = (),
               pair: bool = True
               ) -> Corpus:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Corpus file not found at: {path}")
    if os.path.getsize(path) == 0:
        return Corpus(examples=(), split=split, languages=tuple(languages), pair=pair)
    try:
        df = pd.read_json(path, orient="records", lines=True, dtype=False)
    except ValueError as e:
        raise FormatError(f"Malformed JSON-lines corpus {path}: {e}") from e
    examples = [Example(uid=int(r.uid), tokens=tuple(int(t) for t in r.tokens), label=int(r.label),
                        language=str(r.language), latent_id=int(r.latent_id))
                for r in df.itertuples(index=False)]
    return Corpus(examples=examples, split=split, languages=tuple(languages), pair=pair)


def _words(value: str) -> list[str]:
    return value.split()


def load_csv(path: Union[str, os.PathLike], schema: CsvSchema, split: SPLIT = SPLIT.TRAIN) -> Corpus:
    """
    Load a UTF-8 CSV with columns `text_a[,text_b],label,language[,latent_id]`.

    Text is split on whitespace; words get ids in order of first appearance
    from `TOKENS.FIRST_FREE` on. Once `schema.vocab_size` ids are used, new
    words map to `[UNK]`. Reserved words (`[CLS]`, `[SEP]`, `[UNK]`, `[PAD]`)
    keep their reserved ids; in pair corpora the separator word may not
    appear inside either text.

    Raises
    -------
    FileNotFoundError:
        If the file is missing.
    FormatError:
        Missing column or value, unknown language, bad label, a separator word
        inside a pair text, or a row longer than `schema.max_seq_len`; the message names the 1-based data row.

    Returns
    -------
    Corpus
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"CSV file not found at: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"Unreadable CSV {path}: {e}") from e
    required = ["text_a"] + (["text_b"] if schema.pair else []) + ["label", "language"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise FormatError(f"missing column(s) {missing} in {path}", row=1)
    reserved = {w: i for i, w in enumerate(TOKENS.WORDS.value)}
    vocab = list(TOKENS.WORDS.value)
    lookup = dict(reserved)
    separator = TOKENS.WORDS.value[TOKENS.SEP.value]

    def encode(text: str) -> list[int]:
        ids = []
        for w in _words(text):
            if w not in lookup:
                if len(vocab) >= schema.vocab_size:
                    ids.append(TOKENS.UNK.value)
                    continue
                lookup[w] = len(vocab)
                vocab.append(w)
            ids.append(lookup[w])
        return ids

    examples = []
    for i, row in enumerate(df.to_dict(orient="records")):
        n = i + 1
        for col in required:
            if str(row[col]).strip() == "":
                raise FormatError(f"missing value in column '{col}'", row=n)
        if row["language"] not in schema.languages:
            raise FormatError(f"unknown language id '{row['language']}'", row=n)
        try:
            label = int(row["label"])
        except ValueError:
            raise FormatError(f"label '{row['label']}' is not an integer", row=n)
        if not 0 <= label < schema.num_classes:
            raise FormatError(f"label {label} outside 0..{schema.num_classes - 1}", row=n)
        if schema.pair:
            for col in ("text_a", "text_b"):
                if separator in _words(row[col]):
                    raise FormatError(f"separator word '{separator}' inside column '{col}'", row=n)
        tokens = [TOKENS.CLS.value] + encode(row["text_a"])
        if schema.pair:
            tokens += [TOKENS.SEP.value] + encode(row["text_b"])
        if len(tokens) > schema.max_seq_len:
            raise FormatError(f"{len(tokens)} tokens exceed max_seq_len={schema.max_seq_len}", row=n)
        latent = str(row.get("latent_id", "")).strip()
        try:
            latent_id = int(latent) if latent else i
        except ValueError:
            raise FormatError(f"latent_id '{latent}' is not an integer", row=n)
        examples.append(Example(uid=i, tokens=tuple(tokens), label=label,
                                language=row["language"], latent_id=latent_id))
    logger.info(f"Loaded {len(examples)} examples from {path} (vocabulary {len(vocab)} ids)")
    return Corpus(examples=examples, split=split, languages=tuple(schema.languages),
                  pair=schema.pair, vocab=tuple(vocab))


def save_csv(corpus: Corpus, path: Union[str, os.PathLike]) -> None:
    """
    Inverse of `load_csv`. Corpora without a vocabulary (generated ones) are
    written with placeholder words `t<id>`.
    """
    def word(t: int) -> str:
        if corpus.vocab is not None and t < len(corpus.vocab):
            return corpus.vocab[t]
        return TOKENS.WORDS.value[t] if t < TOKENS.FIRST_FREE.value else f"t{t}"

    rows = []
    for ex in corpus:
        body = list(ex.tokens[1:])
        if corpus.pair:
            cut = body.index(TOKENS.SEP.value)
            a, b = body[:cut], body[cut + 1:]
        else:
            a, b = body, None
        row = {"text_a": " ".join(word(t) for t in a)}
        if corpus.pair:
            row["text_b"] = " ".join(word(t) for t in b)
        row.update(label=ex.label, language=ex.language, latent_id=ex.latent_id)
        rows.append(row)
    columns = ["text_a"] + (["text_b"] if corpus.pair else []) + ["label", "language", "latent_id"]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    return
