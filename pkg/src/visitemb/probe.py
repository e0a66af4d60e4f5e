"""Centroid-difference directions in embedding space and how well they align
across entities, against a random-vector baseline."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateDirectionError, ValidationError

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class GroupSpec:
    name: str
    required_tags: frozenset
    members: tuple = ()
    min_size: int = 25

    @property
    def size(self) -> int:
        return len(self.members)


def resolve_group(name: str, required_tags, stays, min_size: int = 25) -> GroupSpec:
    """Members are the stays carrying every required tag."""
    req = frozenset(required_tags)
    members = tuple(s.stay_id for s in stays if req <= s.tags)
    return GroupSpec(name, req, members, min_size)


@dataclass
class DirectionResult:
    pair: tuple
    v1: np.ndarray = field(repr=False)
    v2: np.ndarray = field(repr=False)
    cosine: float
    sizes: tuple


def centroid(vectors) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("centroid of an empty group")
    return X.mean(axis=0)


def _rows(embeddings: Mapping[str, np.ndarray], group: GroupSpec):
    if not group.members:
        raise ValidationError(f"group {group.name!r} is empty")
    return np.array([embeddings[m] for m in group.members])


def cosine(v1, v2, label="") -> float:
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 < DEGENERATE_NORM or n2 < DEGENERATE_NORM:
        raise DegenerateDirectionError(f"degenerate direction vector for {label or 'pair'}")
    return float(np.clip(np.dot(v1, v2) / (n1 * n2), -1.0, 1.0))


def direction_cosine(group_a: GroupSpec, group_b: GroupSpec, group_c: GroupSpec, group_d: GroupSpec,
                     embeddings: Mapping[str, np.ndarray]) -> DirectionResult:
    """Cosine between centroid(b) - centroid(a) and centroid(d) - centroid(c)."""
    v1 = centroid(_rows(embeddings, group_b)) - centroid(_rows(embeddings, group_a))
    v2 = centroid(_rows(embeddings, group_d)) - centroid(_rows(embeddings, group_c))
    label = f"({group_a.name}->{group_b.name}) vs ({group_c.name}->{group_d.name})"
    return DirectionResult(
        (group_a.name, group_b.name, group_c.name, group_d.name),
        v1, v2, cosine(v1, v2, label),
        (group_a.size, group_b.size, group_c.size, group_d.size),
    )


def random_cosine_baseline(dim: int, n_samples: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation of the cosine between independent standard-normal vectors."""
    if dim < 2:
        raise ValidationError("dim must be >= 2")
    if n_samples < 1000:
        raise ValidationError("n_samples must be >= 1000")
    cos = random_cosines(dim, n_samples, seed)
    return float(cos.mean()), float(cos.std(ddof=1))


def random_cosines(dim: int, n_samples: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n_samples, dim))
    b = rng.standard_normal((n_samples, dim))
    return np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def concept_scan(entity_tags: Sequence[str], modifier_pair: Sequence[str], stays,
                 embeddings: Mapping[str, np.ndarray], min_size: int = 25) -> list[DirectionResult]:
    """Cosines between the modifier directions of every pair of qualifying entities.

    The group for entity ``e`` in state ``s`` is the stays tagged ``"{e}:{s}"``;
    the entity's direction is centroid(second state) - centroid(first state).
    Entities where either group is smaller than ``min_size`` are skipped.
    Results are sorted by cosine, descending.
    """
    s0, s1 = modifier_pair
    groups = {}
    for ent in entity_tags:
        g0 = resolve_group(f"{ent}:{s0}", {f"{ent}:{s0}"}, stays, min_size)
        g1 = resolve_group(f"{ent}:{s1}", {f"{ent}:{s1}"}, stays, min_size)
        if g0.size >= min_size and g1.size >= min_size:
            groups[ent] = (g0, g1)
    if len(groups) < 2:
        raise ValidationError(
            f"need >= 2 entities with both modifier groups of size >= {min_size}, found {len(groups)}"
        )
    results = []
    for a, b in itertools.combinations(sorted(groups), 2):
        res = direction_cosine(groups[a][0], groups[a][1], groups[b][0], groups[b][1], embeddings)
        res.pair = (a, b)
        results.append(res)
    results.sort(key=lambda r: (-r.cosine, r.pair))
    return results


def scan_csv(results: Sequence[DirectionResult]) -> str:
    lines = ["entity_a,entity_b,cosine,n_a_state0,n_a_state1,n_b_state0,n_b_state1"]
    for r in results:
        lines.append(f"{r.pair[0]},{r.pair[1]},{r.cosine:.6f}," + ",".join(str(n) for n in r.sizes))
    return "\n".join(lines) + "\n"


def concept_entities(stays, concept: str) -> tuple[list[str], list[str]]:
    """Entity prefixes and states seen in ``concept:entity:state`` tags."""
    entities, states = set(), set()
    for s in stays:
        for tag in s.tags:
            parts = tag.split(":")
            if len(parts) == 3 and parts[0] == concept:
                entities.add(f"{parts[0]}:{parts[1]}")
                states.add(parts[2])
    return sorted(entities), sorted(states)
