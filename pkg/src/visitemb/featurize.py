"""Fitted preprocessing: vocabulary, truncation length, time-summed structured
features and chi-square feature selection."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import N_LABELS, Stay
from .errors import ConfigError, IntegrityError, ParseError

PAD = 0
UNK = 1
PREPROCESSING_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    words: tuple  # ordered by index, starting at index 2
    min_count: int = 5

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "_index", {w: i + 2 for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words) + 2

    def __contains__(self, word):
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, UNK)


def build_vocabulary(train_stays: Iterable[Stay], min_count: int = 5) -> Vocabulary:
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts = Counter()
    for stay in train_stays:
        for doc in stay.documents:
            counts.update(doc)
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(kept, min_count)


def text_length(stay: Stay) -> int:
    return sum(len(d) for d in stay.documents)


def compute_truncation_length(train_stays: Sequence[Stay], percentile: float = 90.0) -> int:
    """Nearest-rank percentile of per-stay concatenated text length."""
    if not 0.0 < percentile <= 100.0:
        raise ConfigError(f"percentile must be in (0, 100], got {percentile}")
    lengths = sorted(text_length(s) for s in train_stays)
    if not lengths:
        raise ConfigError("cannot compute a truncation length from an empty training set")
    rank = max(1, math.ceil(percentile / 100.0 * len(lengths)))
    return max(1, lengths[rank - 1])


def encode_text(stay: Stay, vocabulary: Vocabulary, max_len: int) -> list[int]:
    ids = []
    for doc in stay.documents:
        for w in doc:
            if len(ids) >= max_len:
                return ids
            ids.append(vocabulary.index(w))
    return ids


def aggregate_structured(stay: Stay) -> dict[str, float]:
    totals: dict[str, float] = {}
    for feature, value, _time in stay.events:
        if value < 0:
            raise IntegrityError(f"stay {stay.stay_id}: negative value for {feature!r}")
        totals[feature] = totals.get(feature, 0.0) + value
    return totals


def chi2_matrix(X, Y) -> np.ndarray:
    """Per-(label, feature) chi-square statistics, shape ``(n_labels, n_features)``.

    For each label the two classes are label-off/label-on; the observed mass of
    a feature in a class is the sum of its values there and the expected mass is
    the class frequency times the feature's total.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(X < 0):
        raise IntegrityError("chi-square needs non-negative feature values")
    n = X.shape[0]
    if n == 0:
        return np.zeros((Y.shape[1] if Y.ndim == 2 else N_LABELS, X.shape[1]))
    total = X.sum(axis=0)
    freq_on = Y.mean(axis=0)
    obs_on = Y.T @ X
    obs_off = total[None, :] - obs_on
    exp_on = freq_on[:, None] * total[None, :]
    exp_off = (1.0 - freq_on)[:, None] * total[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_on = np.where(exp_on > 0, (obs_on - exp_on) ** 2 / exp_on, 0.0)
        t_off = np.where(exp_off > 0, (obs_off - exp_off) ** 2 / exp_off, 0.0)
    return t_on + t_off


def chi2_scores(X, Y) -> np.ndarray:
    """Score per feature column: the largest chi-square statistic over labels."""
    stats = chi2_matrix(X, Y)
    if stats.shape[0] == 0:
        return np.zeros(stats.shape[1])
    return stats.max(axis=0)


@dataclass(frozen=True)
class FeatureSelector:
    names: tuple  # kept features in column order
    scores: tuple  # score of each kept feature, same order
    candidate_scores: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        object.__setattr__(self, "_column", {n: i for i, n in enumerate(self.names)})

    @property
    def k(self) -> int:
        return len(self.names)

    def column(self, name: str):
        return self._column.get(name)


def select_features(scores: Mapping[str, float], k: int) -> FeatureSelector:
    if k < 0 or k > len(scores):
        raise ConfigError(f"cannot keep {k} features out of {len(scores)} candidates")
    ranked = sorted(scores, key=lambda n: (-scores[n], n))[:k]
    return FeatureSelector(ranked, [scores[n] for n in ranked], dict(scores))


def structured_matrix(stays: Sequence[Stay], names: Sequence[str]) -> np.ndarray:
    col = {n: i for i, n in enumerate(names)}
    X = np.zeros((len(stays), len(names)))
    for r, stay in enumerate(stays):
        for f, v in aggregate_structured(stay).items():
            c = col.get(f)
            if c is not None:
                X[r, c] = v
    return X


def score_candidates(train_stays: Sequence[Stay]) -> dict[str, float]:
    aggregated = [aggregate_structured(s) for s in train_stays]
    names = sorted({f for a in aggregated for f in a})
    col = {n: i for i, n in enumerate(names)}
    X = np.zeros((len(aggregated), len(names)))
    for r, agg in enumerate(aggregated):
        for f, v in agg.items():
            X[r, col[f]] = v
    Y = np.array([s.labels for s in train_stays], dtype=np.float64).reshape(-1, N_LABELS)
    return dict(zip(names, chi2_scores(X, Y).tolist()))


@dataclass(frozen=True)
class EncodedStay:
    stay_id: str
    token_ids: tuple
    structured: Mapping  # column index -> value
    labels: tuple

    def dense_structured(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        for c, v in self.structured.items():
            out[c] = v
        return out


def apply(selector: FeatureSelector, vocabulary: Vocabulary, max_len: int, stay: Stay) -> EncodedStay:
    structured = {}
    for f, v in aggregate_structured(stay).items():
        c = selector.column(f)
        if c is not None:
            structured[c] = v
    return EncodedStay(
        stay.stay_id,
        tuple(encode_text(stay, vocabulary, max_len)),
        dict(sorted(structured.items())),
        stay.labels,
    )


@dataclass(frozen=True)
class Preprocessing:
    """Everything fitted on the training split, plus the settings that produced it."""

    vocabulary: Vocabulary
    max_len: int
    selector: FeatureSelector
    config: Mapping = field(default_factory=dict, compare=False)

    @property
    def n_structured(self) -> int:
        return self.selector.k

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def encode(self, stay: Stay) -> EncodedStay:
        return apply(self.selector, self.vocabulary, self.max_len, stay)

    def encode_all(self, stays: Iterable[Stay]) -> list[EncodedStay]:
        return [self.encode(s) for s in stays]

    def to_json(self) -> str:
        doc = {
            "version": PREPROCESSING_VERSION,
            "vocabulary": ["<pad>", "<unk>", *self.vocabulary.words],
            "min_count": self.vocabulary.min_count,
            "truncation_length": self.max_len,
            "selector": [[n, s] for n, s in zip(self.selector.names, self.selector.scores)],
            "config": dict(self.config),
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Preprocessing":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"preprocessing file is not valid JSON ({exc.msg})") from None
        if doc.get("version") != PREPROCESSING_VERSION:
            raise ParseError(f"unsupported preprocessing version {doc.get('version')!r}")
        vocab = doc["vocabulary"]
        sel = doc["selector"]
        return cls(
            Vocabulary(vocab[2:], doc["min_count"]),
            int(doc["truncation_length"]),
            FeatureSelector([n for n, _ in sel], [s for _, s in sel]),
            doc.get("config", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Preprocessing":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def fit_preprocessing(train_stays: Sequence[Stay], k_features: int, min_count: int = 5,
                      percentile: float = 90.0, max_len: int | None = None) -> Preprocessing:
    """Fit all preprocessing state on training stays only.

    ``max_len`` overrides the percentile-derived truncation length when given.
    """
    train_stays = list(train_stays)
    vocab = build_vocabulary(train_stays, min_count)
    percentile_len = compute_truncation_length(train_stays, percentile)
    scores = score_candidates(train_stays)
    selector = select_features(scores, k_features)
    config = {
        "min_count": min_count,
        "percentile": percentile,
        "percentile_length": percentile_len,
        "max_len": max_len,
        "k_features": k_features,
        "n_candidates": len(scores),
    }
    return Preprocessing(vocab, max_len if max_len is not None else percentile_len, selector, config)
