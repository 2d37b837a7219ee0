"""Labelled random finite set data model.

Labels are natural numbers and a label set is stored as a strictly ascending
tuple, which is also the ordering used to pair labels with state vectors.
Particles with the same label set are stored together in a
:class:`ParticleGroup` so that they can be processed as arrays.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, permutations
from math import factorial
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import PermutationLimitError

LabelSet = Tuple[int, ...]
LabelSetPmf = Dict[LabelSet, float]

DEFAULT_PERMUTATION_CAP = 6


def as_label_set(labels) -> LabelSet:
    """Validate ``labels`` and return them as an ascending tuple."""
    out = tuple(int(l) for l in labels)
    if any(l < 1 for l in out):
        raise ValueError(f"labels must be natural numbers >= 1, got {out}")
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate labels in {out}")
    return tuple(sorted(out))


def enumerate_permutations(t: int, cap: int = DEFAULT_PERMUTATION_CAP) -> List[Tuple[int, ...]]:
    """All ``t!`` permutations of ``range(t)`` in lexicographic order.

    A permutation ``p`` acts on a state vector as ``x[list(p)]``, i.e. the
    j-th slot of the permuted vector holds ``x[p[j]]``.  Indices are 0-based.

    Raises
    ------
    PermutationLimitError
        If ``t`` exceeds ``cap``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    if t > cap:
        raise PermutationLimitError(
            f"{t}! = {factorial(t)} permutations exceeds the cap of {cap} elements"
        )
    return list(permutations(range(t)))


def permutation_array(t: int, cap: int = DEFAULT_PERMUTATION_CAP) -> np.ndarray:
    """``enumerate_permutations`` as an int array of shape (t!, t)."""
    perms = enumerate_permutations(t, cap)
    return np.array(perms, dtype=int).reshape(len(perms), t)


def all_subsets(labels: Sequence[int]) -> List[LabelSet]:
    """Every subset of ``labels``, ordered by size then lexicographically."""
    labels = as_label_set(labels)
    out = []
    for size in range(len(labels) + 1):
        out.extend(combinations(labels, size))
    return out


def lmb_pmf(existences: Sequence[float], labels) -> float:
    """Probability of label set ``labels`` under an LMB with labels 1..kappa.

    ``existences[j - 1]`` is the existence probability of label ``j``.  The
    product form is used directly so that existences of exactly 0 or 1 need
    no special casing.
    """
    p = np.asarray(existences, dtype=float)
    L = as_label_set(labels)
    if L and L[-1] > p.size:
        raise ValueError(f"label {L[-1]} exceeds kappa = {p.size}")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("existence probabilities must lie in [0, 1]")
    member = np.zeros(p.size, dtype=bool)
    member[[l - 1 for l in L]] = True
    return float(np.prod(np.where(member, p, 1.0 - p)))


def lmb_log_pmf(existence: Dict[int, float], labels: LabelSet) -> float:
    """Log-probability of ``labels`` for an LMB with arbitrary label ids."""
    total = 0.0
    L = set(labels)
    with np.errstate(divide="ignore"):
        for j, p in existence.items():
            total += float(np.log(p if j in L else 1.0 - p))
    return total


@dataclass(frozen=True)
class LabelledParticle:
    """One posterior sample: label set, per-label states, ancestors, weight."""

    labels: LabelSet
    states: np.ndarray
    ancestors: Tuple[int, ...]
    log_weight: float = 0.0

    def __post_init__(self):
        if as_label_set(self.labels) != tuple(self.labels):
            raise ValueError("labels must be ascending and unique")
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[0] != len(self.labels):
            raise ValueError("need one state row per label")
        if len(self.ancestors) != len(self.labels):
            raise ValueError("need one ancestor index per label")
        object.__setattr__(self, "states", states)


@dataclass
class ParticleGroup:
    """All particles sharing one label set, stored as arrays.

    Attributes
    ----------
    labels : tuple of int
        Ascending label set.
    states : ndarray, shape (n, t, n_x)
    ancestors : ndarray of int, shape (n, t)
        0-based index of the previous-step mixture component per label.
    log_weights : ndarray, shape (n,)
    """

    labels: LabelSet
    states: np.ndarray
    ancestors: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        self.labels = tuple(self.labels)
        n, t = self.states.shape[:2]
        if t != len(self.labels):
            raise ValueError("state array does not match the label set size")
        if self.ancestors.shape != (n, t) or self.log_weights.shape != (n,):
            raise ValueError("inconsistent group array shapes")

    def __len__(self):
        return self.states.shape[0]

    def take(self, idx) -> "ParticleGroup":
        idx = np.asarray(idx, dtype=int)
        return ParticleGroup(self.labels, self.states[idx], self.ancestors[idx],
                             self.log_weights[idx])


@dataclass
class ParticlePosterior:
    """N labelled particles grouped by label set.

    Group order is part of the value: it is fixed by whoever builds the
    posterior and every operation preserves it, which keeps seeded runs
    reproducible.
    """

    groups: List[ParticleGroup]
    n_dim: int
    normalized: bool = False
    ess: float = field(default=float("nan"))

    @classmethod
    def from_particles(cls, particles: Sequence[LabelledParticle], n_dim=None,
                       normalized=False) -> "ParticlePosterior":
        if n_dim is None:
            dims = [p.states.shape[1] for p in particles if len(p.labels)]
            n_dim = dims[0] if dims else 0
        buckets: Dict[LabelSet, list] = {}
        for p in particles:
            buckets.setdefault(tuple(p.labels), []).append(p)
        groups = []
        for L in sorted(buckets, key=lambda s: (len(s), s)):
            ps = buckets[L]
            states = np.array([p.states for p in ps], dtype=float).reshape(len(ps), len(L), n_dim)
            anc = np.array([p.ancestors for p in ps], dtype=int).reshape(len(ps), len(L))
            lw = np.array([p.log_weight for p in ps], dtype=float)
            groups.append(ParticleGroup(L, states, anc, lw))
        return cls(groups, n_dim, normalized)

    @property
    def n_particles(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def label_sets(self) -> List[LabelSet]:
        return [g.labels for g in self.groups]

    @property
    def labels(self) -> LabelSet:
        return tuple(sorted({l for g in self.groups for l in g.labels}))

    def log_weights(self) -> np.ndarray:
        if not self.groups:
            return np.zeros(0)
        return np.concatenate([g.log_weights for g in self.groups])

    def weights(self) -> np.ndarray:
        lw = self.log_weights()
        return np.exp(lw - logsumexp(lw)) if lw.size else lw

    def particles(self) -> Iterator[LabelledParticle]:
        for g in self.groups:
            for i in range(len(g)):
                yield LabelledParticle(g.labels, g.states[i], tuple(int(a) for a in g.ancestors[i]),
                                       float(g.log_weights[i]))

    def cardinalities(self) -> np.ndarray:
        """Cardinality of every particle in storage order."""
        if not self.groups:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.full(len(g), len(g.labels)) for g in self.groups])

    def label_set_counts(self) -> Dict[LabelSet, int]:
        counts: Dict[LabelSet, int] = {}
        for g in self.groups:
            counts[g.labels] = counts.get(g.labels, 0) + len(g)
        return counts

    def normalize(self) -> "ParticlePosterior":
        """Return a copy with log-weights normalised by log-sum-exp."""
        lw = self.log_weights()
        total = logsumexp(lw) if lw.size else 0.0
        groups = [ParticleGroup(g.labels, g.states, g.ancestors, g.log_weights - total)
                  for g in self.groups]
        w = np.exp(lw - total) if lw.size else lw
        ess = float(1.0 / np.sum(w ** 2)) if lw.size else 0.0
        return ParticlePosterior(groups, self.n_dim, True, ess)

    def with_even_weights(self) -> "ParticlePosterior":
        n = self.n_particles
        groups = [ParticleGroup(g.labels, g.states, g.ancestors, np.full(len(g), -np.log(n)))
                  for g in self.groups]
        return ParticlePosterior(groups, self.n_dim, True, float(n))

    def pooled_positions(self, position_index=(0, 2)) -> np.ndarray:
        """Per-target position subvectors of all particles, labels discarded."""
        chunks = [g.states[:, :, list(position_index)].reshape(-1, len(position_index))
                  for g in self.groups if g.labels]
        if not chunks:
            return np.zeros((0, len(position_index)))
        return np.concatenate(chunks, axis=0)


@dataclass(frozen=True)
class LmbBelief:
    """Labelled multi-Bernoulli density at particle level.

    ``existence[j]`` is the existence probability of label ``j`` and
    ``clouds[j]`` an (N_j, n_x) array of evenly weighted particles.
    """

    existence: Dict[int, float]
    clouds: Dict[int, np.ndarray]

    def __post_init__(self):
        if set(self.existence) != set(self.clouds):
            raise ValueError("existence and cloud label sets differ")
        for j, p in self.existence.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"existence of label {j} outside [0, 1]: {p}")
            if self.clouds[j].ndim != 2 or self.clouds[j].shape[0] < 1:
                raise ValueError(f"label {j} needs a non-empty 2-D particle cloud")

    @classmethod
    def empty(cls) -> "LmbBelief":
        return cls({}, {})

    @property
    def labels(self) -> LabelSet:
        return tuple(sorted(self.existence))

    def __len__(self):
        return len(self.existence)

    def expected_cardinality(self) -> float:
        return float(sum(self.existence.values()))


def pmf_from_particles(post: ParticlePosterior) -> LabelSetPmf:
    """Label-set PMF of an evenly weighted posterior: P(L) = N_L / N."""
    counts = post.label_set_counts()
    n = sum(counts.values())
    if n == 0:
        raise ValueError("empty posterior")
    return {L: c / n for L, c in counts.items()}


def exact_pmf_from_particles(post: ParticlePosterior) -> Dict[LabelSet, Fraction]:
    """Same as :func:`pmf_from_particles` in rational arithmetic."""
    counts = post.label_set_counts()
    n = sum(counts.values())
    if n == 0:
        raise ValueError("empty posterior")
    return {L: Fraction(c, n) for L, c in counts.items()}
