"""Visit records, a seeded synthetic corpus with planted signal, dataset I/O and
patient-level splits."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError, SplitError

N_LABELS = 19

CHAPTERS = (
    "Diseases Of The Circulatory System",
    "Endocrine, Nutritional And Metabolic Diseases",
    "Supplementary Classification (V codes)",
    "Diseases Of The Respiratory System",
    "Injury And Poisoning",
    "Diseases Of The Genitourinary System",
    "Diseases Of The Digestive System",
    "Symptoms, Signs, And Ill-Defined Conditions",
    "Diseases Of The Blood And Blood-Forming Organs",
    "Mental Disorders",
    "Supplementary Classification (E codes)",
    "Diseases Of The Nervous System",
    "Infectious And Parasitic Diseases",
    "Diseases Of The Musculoskeletal System",
    "Neoplasms",
    "Diseases Of The Skin And Subcutaneous Tissue",
    "Certain Conditions Originating In The Perinatal Period",
    "Congenital Anomalies",
    "Complications Of Pregnancy, Childbirth, And The Puerperium",
)

# chapter presence on the reference test set, same order as CHAPTERS
REFERENCE_PREVALENCES = (
    0.718, 0.595, 0.572, 0.418, 0.387, 0.366, 0.354, 0.341, 0.325, 0.279,
    0.278, 0.263, 0.245, 0.168, 0.151, 0.101, 0.093, 0.051, 0.003,
)

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Stay:
    stay_id: str
    patient_id: str
    documents: tuple = ()
    events: tuple = ()
    labels: tuple = (0,) * N_LABELS
    tags: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "documents", tuple(tuple(str(w) for w in doc) for doc in self.documents))
        object.__setattr__(
            self, "events", tuple((str(f), float(v), float(t)) for f, v, t in self.events)
        )
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        object.__setattr__(self, "tags", frozenset(self.tags))
        if len(self.labels) != N_LABELS:
            raise IntegrityError(f"stay {self.stay_id}: labels length {len(self.labels)} != {N_LABELS}")
        if any(x not in (0, 1) for x in self.labels):
            raise IntegrityError(f"stay {self.stay_id}: labels must be 0/1")
        for f, v, t in self.events:
            if not (v >= 0 and math.isfinite(v)):
                raise IntegrityError(f"stay {self.stay_id}: event {f!r} has invalid value {v}")
            if not (t >= 0 and math.isfinite(t)):
                raise IntegrityError(f"stay {self.stay_id}: event {f!r} has invalid time {t}")

    @property
    def n_codes(self) -> int:
        return sum(self.labels)

    def to_record(self) -> dict:
        return {
            "stay_id": self.stay_id,
            "patient_id": self.patient_id,
            "documents": [list(d) for d in self.documents],
            "events": [[f, v, t] for f, v, t in self.events],
            "labels": list(self.labels),
            "tags": sorted(self.tags),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Stay":
        return cls(
            stay_id=rec["stay_id"],
            patient_id=rec["patient_id"],
            documents=rec["documents"],
            events=rec["events"],
            labels=rec["labels"],
            tags=rec["tags"],
        )


@dataclass
class Dataset:
    stays: list
    provenance: str = ""

    def __post_init__(self):
        self.stays = list(self.stays)
        seen = set()
        for s in self.stays:
            if s.stay_id in seen:
                raise IntegrityError(f"duplicate stay_id {s.stay_id!r}")
            seen.add(s.stay_id)

    def __len__(self):
        return len(self.stays)

    def __iter__(self):
        return iter(self.stays)

    @property
    def patient_ids(self) -> list[str]:
        return sorted({s.patient_id for s in self.stays})

    def label_matrix(self) -> np.ndarray:
        return np.array([s.labels for s in self.stays], dtype=np.int64).reshape(-1, N_LABELS)


# -- generator ---------------------------------------------------------------


@dataclass(frozen=True)
class ConceptPair:
    """Two entities crossed with two modifier states.

    Every state owns a word set and a feature set whose shift is the same for
    both entities; each entity owns its own word/feature set too. The second
    state is drawn with probability ``coupling`` when ``label`` is active and
    ``1 - coupling`` otherwise, which makes the modifier useful for prediction.
    """

    name: str
    entities: tuple = ("A", "B")
    states: tuple = ("sensitive", "resistant")
    rate: float = 0.2
    label: int = 12
    coupling: float = 0.8
    n_words: int = 6
    n_features: int = 4

    def tag(self, entity: str, state: str) -> str:
        return f"{self.name}:{entity}:{state}"


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 1575
    extra_stays_mean: float = 0.27
    label_prevalences: tuple = REFERENCE_PREVALENCES
    vocab_size: int = 500
    doc_length: int = 60
    docs_per_stay: float = 3.0
    zipf_exponent: float = 1.0
    topic_size: int = 8
    n_structured_features: int = 200
    features_per_label: int = 3
    base_event_rate: float = 0.05
    label_event_rate: float = 1.0
    signal_strength: float = 3.0
    text_weight: float = 1.0
    structured_weight: float = 1.0
    concept_pairs: tuple = (ConceptPair("bact"),)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label_prevalences", tuple(float(p) for p in self.label_prevalences))
        pairs = tuple(p if isinstance(p, ConceptPair) else ConceptPair(**p) for p in self.concept_pairs)
        pairs = tuple(
            ConceptPair(**{**asdict(p), "entities": tuple(p.entities), "states": tuple(p.states)}) for p in pairs
        )
        object.__setattr__(self, "concept_pairs", pairs)
        self.validate()

    def validate(self):
        if len(self.label_prevalences) != N_LABELS:
            raise ConfigError(f"need {N_LABELS} label prevalences, got {len(self.label_prevalences)}")
        for i, p in enumerate(self.label_prevalences):
            if not 0.0 < p < 1.0:
                raise ConfigError(f"label prevalence {i} = {p} outside (0, 1)")
        if self.n_patients < 0:
            raise ConfigError("n_patients must be non-negative")
        for name in ("vocab_size", "doc_length", "n_structured_features", "topic_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        words = N_LABELS * self.topic_size
        feats = N_LABELS * self.features_per_label
        for cp in self.concept_pairs:
            if len(cp.states) != 2 or len(cp.entities) < 1:
                raise ConfigError(f"concept {cp.name!r} needs >= 1 entity and exactly 2 states")
            if not 0 <= cp.label < N_LABELS or not 0.0 <= cp.rate <= 1.0 or not 0.0 <= cp.coupling <= 1.0:
                raise ConfigError(f"concept {cp.name!r} has an invalid label/rate/coupling")
            groups = len(cp.entities) + 2
            words += groups * cp.n_words
            feats += groups * cp.n_features
        if words > self.vocab_size:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for {words} planted words")
        if feats > self.n_structured_features:
            raise ConfigError(f"n_structured_features {self.n_structured_features} too small for {feats} planted features")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_prevalences"] = list(self.label_prevalences)
        d["concept_pairs"] = [
            {**asdict(cp), "entities": list(cp.entities), "states": list(cp.states)} for cp in self.concept_pairs
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _word(i):
    return f"w{i:04d}"


def _feature(i):
    return f"f{i:04d}"


@dataclass
class _Layout:
    """Which word/feature indices carry which planted signal."""

    label_words: list
    label_features: list
    concept_words: list = field(default_factory=list)  # per concept: {entity/state: idx array}
    concept_features: list = field(default_factory=list)


def _plan_layout(config, rng) -> _Layout:
    words = rng.permutation(config.vocab_size)
    feats = rng.permutation(config.n_structured_features)
    wpos = fpos = 0

    def take_w(n):
        nonlocal wpos
        out = np.sort(words[wpos : wpos + n])
        wpos += n
        return out

    def take_f(n):
        nonlocal fpos
        out = np.sort(feats[fpos : fpos + n])
        fpos += n
        return out

    layout = _Layout(
        label_words=[take_w(config.topic_size) for _ in range(N_LABELS)],
        label_features=[take_f(config.features_per_label) for _ in range(N_LABELS)],
    )
    for cp in config.concept_pairs:
        keys = [("entity", e) for e in cp.entities] + [("state", s) for s in cp.states]
        layout.concept_words.append({k: take_w(cp.n_words) for k in keys})
        layout.concept_features.append({k: take_f(cp.n_features) for k in keys})
    return layout


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Draw a synthetic corpus; ``config`` (seed included) fully determines the output."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    layout = _plan_layout(config, rng)

    V = config.vocab_size
    ranks = rng.permutation(V)
    base_logp = -config.zipf_exponent * np.log1p(ranks.astype(np.float64))
    base_logp -= np.logaddexp.reduce(base_logp)
    F = config.n_structured_features
    base_rates = config.base_event_rate * np.exp(rng.normal(0.0, 1.0, size=F) - 0.5)
    prev = np.array(config.label_prevalences)
    text_shift = config.signal_strength * config.text_weight
    rate_shift = config.signal_strength * config.structured_weight * config.label_event_rate
    vocab = [_word(i) for i in range(V)]
    fnames = [_feature(i) for i in range(F)]

    stays = []
    for p in range(config.n_patients):
        pid = f"p{p:06d}"
        n_stays = 1 + int(rng.poisson(config.extra_stays_mean))
        for _ in range(n_stays):
            sid = f"s{len(stays):07d}"
            labels = (rng.random(N_LABELS) < prev).astype(int)
            logits = base_logp.copy()
            rates = base_rates.copy()
            for lab in np.flatnonzero(labels):
                logits[layout.label_words[lab]] += text_shift
                rates[layout.label_features[lab]] += rate_shift
            tags = []
            for ci, cp in enumerate(config.concept_pairs):
                if rng.random() >= cp.rate:
                    continue
                entity = cp.entities[int(rng.integers(len(cp.entities)))]
                p_second = cp.coupling if labels[cp.label] else 1.0 - cp.coupling
                state = cp.states[1] if rng.random() < p_second else cp.states[0]
                tags.append(cp.tag(entity, state))
                for key in (("entity", entity), ("state", state)):
                    logits[layout.concept_words[ci][key]] += text_shift
                    rates[layout.concept_features[ci][key]] += rate_shift
            probs = np.exp(logits - np.logaddexp.reduce(logits))
            n_docs = 1 + int(rng.poisson(max(config.docs_per_stay - 1.0, 0.0)))
            documents = []
            for _ in range(n_docs):
                length = max(1, int(rng.poisson(config.doc_length)))
                ids = rng.choice(V, size=length, p=probs)
                documents.append([vocab[i] for i in ids])
            los = float(rng.exponential(72.0))
            counts = rng.poisson(rates)
            events = []
            for fi in np.flatnonzero(counts):
                for _ in range(int(counts[fi])):
                    events.append((fnames[fi], float(rng.gamma(2.0, 1.0)), float(rng.uniform(0.0, los))))
            events.sort(key=lambda e: (e[2], e[0]))
            stays.append(Stay(sid, pid, documents, events, labels, tags))
    return Dataset(stays, provenance=f"generator:{config.digest()}")


# -- file I/O ----------------------------------------------------------------


def dumps_stay(stay: Stay) -> str:
    return json.dumps(stay.to_record(), separators=(",", ":"), ensure_ascii=False)


def write_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for stay in dataset.stays:
            fh.write(dumps_stay(stay))
            fh.write("\n")


_KEYS = {"stay_id", "patient_id", "documents", "events", "labels", "tags"}


def _check_record(rec, lineno):
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", lineno)
    missing = _KEYS - rec.keys()
    if missing:
        raise ParseError(f"missing keys {sorted(missing)}", lineno)
    extra = rec.keys() - _KEYS
    if extra:
        raise ParseError(f"unexpected keys {sorted(extra)}", lineno)
    if not isinstance(rec["stay_id"], str) or not isinstance(rec["patient_id"], str):
        raise ParseError("stay_id and patient_id must be strings", lineno)
    docs = rec["documents"]
    if not isinstance(docs, list) or not all(isinstance(d, list) and all(isinstance(w, str) for w in d) for d in docs):
        raise ParseError("documents must be an array of arrays of strings", lineno)
    ev = rec["events"]
    if not isinstance(ev, list) or not all(
        isinstance(e, list) and len(e) == 3 and isinstance(e[0], str)
        and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in e[1:])
        for e in ev
    ):
        raise ParseError("events must be an array of [feature, value, time]", lineno)
    if not isinstance(rec["labels"], list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in rec["labels"]):
        raise ParseError("labels must be an array of integers", lineno)
    if not isinstance(rec["tags"], list) or not all(isinstance(t, str) for t in rec["tags"]):
        raise ParseError("tags must be an array of strings", lineno)


def read_dataset(path) -> Dataset:
    path = Path(path)
    stays = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            _check_record(rec, lineno)
            try:
                stay = Stay.from_record(rec)
            except IntegrityError as exc:
                raise IntegrityError(f"line {lineno}: {exc}") from None
            if stay.stay_id in seen:
                raise IntegrityError(f"line {lineno}: duplicate stay_id {stay.stay_id!r}")
            seen.add(stay.stay_id)
            stays.append(stay)
    return Dataset(stays, provenance=str(path))


# -- splits ------------------------------------------------------------------


class SplitAssignment(dict):
    """patient_id -> one of ``SPLITS``."""

    def stays(self, dataset: Dataset, *splits: str) -> list[Stay]:
        return [s for s in dataset.stays if self[s.patient_id] in splits]

    def patients(self, split: str) -> list[str]:
        return sorted(p for p, s in self.items() if s == split)


def eligible_patients(dataset: Dataset, min_distinct_codes: int) -> list[str]:
    return sorted({s.patient_id for s in dataset.stays if s.n_codes >= min_distinct_codes})


def split_patients(dataset: Dataset, n_val_patients: int, n_test_patients: int,
                   min_distinct_codes: int = 5, seed: int = 0) -> SplitAssignment:
    """Sample validation/test patients among the eligible ones; everyone else trains."""
    eligible = eligible_patients(dataset, min_distinct_codes)
    need = n_val_patients + n_test_patients
    if n_val_patients < 0 or n_test_patients < 0:
        raise SplitError("split sizes must be non-negative")
    if len(eligible) < need:
        raise SplitError(
            f"only {len(eligible)} patients have a stay with >= {min_distinct_codes} distinct codes; "
            f"{need} needed ({n_val_patients} validation + {n_test_patients} test)"
        )
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(eligible), size=need, replace=False)
    assignment = SplitAssignment({p: "train" for p in dataset.patient_ids})
    for rank, idx in enumerate(picked):
        assignment[eligible[idx]] = "validation" if rank < n_val_patients else "test"
    return SplitAssignment(sorted(assignment.items()))


def write_splits(assignment: SplitAssignment, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "split"])
        for pid in sorted(assignment):
            w.writerow([pid, assignment[pid]])


def read_splits(path) -> SplitAssignment:
    out = SplitAssignment()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "split"]:
            raise ParseError("split file header must be patient_id,split", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[1] not in SPLITS:
                raise ParseError(f"bad split row {row!r}", lineno)
            if row[0] in out:
                raise IntegrityError(f"line {lineno}: patient {row[0]!r} assigned twice")
            out[row[0]] = row[1]
    return out


def check_split_covers(assignment: SplitAssignment, dataset: Dataset) -> None:
    missing = [p for p in dataset.patient_ids if p not in assignment]
    if missing:
        raise IntegrityError(f"{len(missing)} patients have no split (first: {missing[0]!r})")

