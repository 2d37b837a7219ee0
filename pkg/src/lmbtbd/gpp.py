"""Generalised parallel partition (GPP) particle filter.

One filter step turns an LMB belief into ``N`` evenly weighted labelled
particles: label sets are drawn with the predicted states and the current
measurement, then each target's state is drawn from its prior mixture
scored by the likelihood with the other targets held at their predicted
states.  An LMB belief for the next step is read off by counting labels.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import DegeneratePosteriorError, PermutationLimitError
from .models import BirthModel, MotionModel, _psd_sqrt, gaussian_log_norm, gaussian_logpdf
from .rfs import (LabelSet, LmbBelief, ParticleGroup, ParticlePosterior, all_subsets,
                  lmb_log_pmf)
from .rng import Streams

log = logging.getLogger(__name__)

# Log-likelihood of a batch of equal-cardinality target sets, (..., t, n_x) -> (...).
LikelihoodFn = Callable[[np.ndarray], np.ndarray]

MAX_ACTIVE_LABELS = 12
PRUNE_THRESHOLD = 1e-4


class LabelPrior:
    """Predicted density of one label: an even mixture of Gaussians.

    Survivors have one component ``N(F x^{-i}, Q)`` per previous particle;
    new-born labels repeat the birth density once per particle.

    Parameters
    ----------
    label : int
    existence : float
    means : ndarray, shape (n_components, n_x)
    cov : ndarray, shape (n_x, n_x)
        Covariance shared by all components.
    born : bool
    """

    def __init__(self, label, existence, means, cov, born=False):
        self.label = int(label)
        self.existence = float(existence)
        self.means = np.asarray(means, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.born = born
        self._sqrt = _psd_sqrt(self.cov)
        self._inv = None
        self._log_norm = None

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def predicted_state(self) -> np.ndarray:
        """Average of the component means."""
        return self.means.mean(axis=0)

    def sample_components(self, rng) -> np.ndarray:
        """One draw from every component, shape (n_components, n_x)."""
        z = rng.standard_normal(self.means.shape)
        return self.means + z @ self._sqrt.T

    def _cache(self):
        if self._inv is None:
            cov = self.cov
            if np.linalg.matrix_rank(cov) < cov.shape[0]:
                cov = cov + 1e-9 * np.eye(cov.shape[0])
            self._inv = np.linalg.inv(cov)
            self._log_norm = gaussian_log_norm(cov)

    def component_logpdf(self, x: np.ndarray, component: np.ndarray) -> np.ndarray:
        """``log g^{component}(x)`` broadcasting ``component`` against ``x[..., :]``."""
        self._cache()
        return gaussian_logpdf(x, self.means[component], self._inv, self._log_norm)


@dataclass
class PredictedPrior:
    """Per-label predicted mixtures plus the next free label id."""

    labels: Dict[int, LabelPrior]
    next_label: int

    @property
    def active(self) -> Tuple[int, ...]:
        return tuple(sorted(self.labels))

    def existence(self) -> Dict[int, float]:
        return {j: lp.existence for j, lp in self.labels.items()}


def predict(prev: LmbBelief, motion: MotionModel, births: Optional[BirthModel],
            n_particles: int, next_label: int, prune_threshold: float = 0.0) -> PredictedPrior:
    """Survival-thinned, motion-propagated prior plus fresh birth labels.

    Survivor existence becomes ``gamma * p``; labels whose predicted
    existence falls below ``prune_threshold`` are dropped.
    """
    labels: Dict[int, LabelPrior] = {}
    F, Q = motion.F, motion.Q
    for j in prev.labels:
        p = motion.gamma * prev.existence[j]
        if p < prune_threshold:
            continue
        labels[j] = LabelPrior(j, p, prev.clouds[j] @ F.T, Q)
    if births is not None:
        for site in births.sites:
            if site.prob < prune_threshold or site.prob <= 0:
                next_label += 1
                continue
            means = np.repeat(site.mean[None, :], n_particles, axis=0)
            labels[next_label] = LabelPrior(next_label, site.prob, means, site.cov, born=True)
            next_label += 1
    return PredictedPrior(labels, next_label)


def predicted_states(prior: PredictedPrior) -> Dict[int, np.ndarray]:
    return {j: lp.predicted_state for j, lp in prior.labels.items()}


def _stack(xhat: Dict[int, np.ndarray], L: LabelSet, n_dim: int) -> np.ndarray:
    if not L:
        return np.zeros((0, n_dim))
    return np.stack([xhat[j] for j in L])


@dataclass
class LabelSetSample:
    """Label sets drawn from the importance PMF.

    ``distinct`` lists the sampled label sets in subset-enumeration order
    and ``counts`` how many particles carry each.
    """

    distinct: List[LabelSet]
    counts: List[int]
    log_q: Dict[LabelSet, float]

    @property
    def sets(self) -> List[LabelSet]:
        out = []
        for L, c in zip(self.distinct, self.counts):
            out.extend([L] * c)
        return out


def label_set_log_weights(prior: PredictedPrior, ell: LikelihoodFn,
                          xhat: Dict[int, np.ndarray], n_dim: int,
                          max_labels: int = MAX_ACTIVE_LABELS) -> Dict[LabelSet, float]:
    """Normalised log importance PMF ``P_omega(L) * ell(Xhat_L)`` over all subsets."""
    active = prior.active
    if len(active) > max_labels:
        raise PermutationLimitError(
            f"{len(active)} active labels exceed the enumeration limit of {max_labels}; "
            "raise the pruning threshold"
        )
    existence = prior.existence()
    subsets = all_subsets(active) if active else [()]
    logq = np.empty(len(subsets))
    by_size: Dict[int, List[int]] = {}
    for i, L in enumerate(subsets):
        logq[i] = lmb_log_pmf(existence, L)
        by_size.setdefault(len(L), []).append(i)
    for t, idx in by_size.items():
        batch = np.stack([_stack(xhat, subsets[i], n_dim) for i in idx])
        logq[idx] += ell(batch)
    logq = np.where(np.isnan(logq), -np.inf, logq)
    logq -= logsumexp(logq)
    return dict(zip(subsets, logq))


def sample_label_sets(prior: PredictedPrior, ell: LikelihoodFn, n: int, rng, n_dim=4,
                      max_labels: int = MAX_ACTIVE_LABELS,
                      xhat: Optional[Dict[int, np.ndarray]] = None) -> LabelSetSample:
    """Draw ``n`` label sets exactly from the importance PMF."""
    if xhat is None:
        xhat = predicted_states(prior)
    log_q = label_set_log_weights(prior, ell, xhat, n_dim, max_labels)
    subsets = list(log_q)
    probs = np.exp(np.array([log_q[L] for L in subsets]))
    counts = rng.multinomial(n, probs / probs.sum())
    distinct = [L for L, c in zip(subsets, counts) if c > 0]
    return LabelSetSample(distinct, [int(c) for c in counts if c > 0], log_q)


@dataclass
class StateDraws:
    states: np.ndarray      # (count, t, n_x)
    ancestors: np.ndarray   # (count, t)
    log_b: np.ndarray       # (count, t)
    log_beta: np.ndarray    # (t,)
    degenerate: bool = False


def sample_states_for_set(L: LabelSet, count: int, prior: PredictedPrior, ell: LikelihoodFn,
                          xhat: Dict[int, np.ndarray], rng, n_dim=4) -> StateDraws:
    """Parallel-partition sampling of the states of the targets in ``L``.

    For each target one candidate is drawn per mixture component and scored
    by the likelihood with the other targets at their predicted states;
    ``count`` candidates are then resampled according to the scores.  The
    ancestor of a draw is the index of the component it came from.
    """
    if not L:
        raise ValueError("label set must be non-empty")
    streams = Streams.wrap(rng)
    t = len(L)
    base = _stack(xhat, L, n_dim)
    states = np.empty((count, t, n_dim))
    anc = np.empty((count, t), dtype=int)
    log_b = np.empty((count, t))
    log_beta = np.empty(t)
    degenerate = False
    for k, j in enumerate(L):
        g = streams.get(j)
        comps = prior.labels[j]
        m = comps.n_components
        cand = comps.sample_components(g)
        batch = np.repeat(base[None], m, axis=0)
        batch[:, k] = cand
        logc = ell(batch)
        total = logsumexp(logc)
        if not np.isfinite(total):
            log.warning("all candidate scores vanish for label %d; uniform selection", j)
            degenerate = True
            logc = np.zeros(m)
            total = np.log(m)
        cnorm = np.exp(logc - total)
        idx = g.choice(m, size=count, p=cnorm / cnorm.sum())
        log_beta[k] = total - np.log(m)
        states[:, k] = cand[idx]
        anc[:, k] = idx
        log_b[:, k] = logc[idx] - log_beta[k]
    return StateDraws(states, anc, log_b, log_beta, degenerate)


def weight_particles(groups: Sequence[ParticleGroup], ell: LikelihoodFn,
                     xhat: Dict[int, np.ndarray], log_b: Sequence[np.ndarray],
                     n_dim=4) -> ParticlePosterior:
    """Importance weights ``ell(X) / (ell(Xhat_L) prod_j b_j)``, normalised."""
    out = []
    for grp, lb in zip(groups, log_b):
        if grp.labels:
            with np.errstate(invalid="ignore"):
                lw = ell(grp.states) - float(ell(_stack(xhat, grp.labels, n_dim))) - lb.sum(axis=1)
            lw = np.where(np.isnan(lw), -np.inf, lw)
        else:
            lw = np.zeros(len(grp))
        out.append(ParticleGroup(grp.labels, grp.states, grp.ancestors, lw))
    post = ParticlePosterior(out, n_dim)
    lw = post.log_weights()
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise DegeneratePosteriorError("every particle has zero weight")
    return post.normalize()


def systematic_indices(weights: np.ndarray, n: int, rng) -> np.ndarray:
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def resample(post: ParticlePosterior, rng, n: Optional[int] = None,
             scheme: str = "systematic") -> ParticlePosterior:
    """Resample to ``n`` (default: same size) evenly weighted particles."""
    n = post.n_particles if n is None else n
    w = post.weights()
    if scheme == "systematic":
        idx = systematic_indices(w, n, rng)
    elif scheme == "multinomial":
        idx = np.sort(rng.choice(w.size, size=n, p=w))
    else:
        raise ValueError(f"unknown resampling scheme '{scheme}'")
    offsets = np.cumsum([0] + [len(g) for g in post.groups])
    groups = []
    for h, grp in enumerate(post.groups):
        sel = idx[(idx >= offsets[h]) & (idx < offsets[h + 1])] - offsets[h]
        if sel.size:
            g = grp.take(sel)
            g.log_weights = np.full(sel.size, -np.log(n))
            groups.append(g)
    return ParticlePosterior(groups, post.n_dim, True, float(n))


def project_lmb(post: ParticlePosterior) -> LmbBelief:
    """LMB belief from evenly weighted particles: ``p_j = N_j / N``.

    The cloud of label ``j`` holds the states of ``j`` in every particle
    containing it; labels present in no particle are dropped.
    """
    n = post.n_particles
    chunks: Dict[int, List[np.ndarray]] = {}
    for grp in post.groups:
        for k, j in enumerate(grp.labels):
            chunks.setdefault(j, []).append(grp.states[:, k])
    existence, clouds = {}, {}
    for j in sorted(chunks):
        cloud = np.concatenate(chunks[j], axis=0)
        existence[j] = cloud.shape[0] / n
        clouds[j] = cloud
    return LmbBelief(existence, clouds)


@dataclass
class GppConfig:
    n_particles: int = 500
    prune_threshold: float = PRUNE_THRESHOLD
    max_labels: int = MAX_ACTIVE_LABELS
    resampling: str = "systematic"


@dataclass
class StepResult:
    posterior: ParticlePosterior      # after resampling, before refinement
    belief: LmbBelief
    prior: PredictedPrior
    refined: ParticlePosterior        # posterior after any refinement
    degenerate: bool = False


# refine(posterior, prior, ell, rng) -> (belief, refined posterior)
Refinement = Callable[[ParticlePosterior, PredictedPrior, LikelihoodFn, np.random.Generator],
                      Tuple[LmbBelief, ParticlePosterior]]


def gpp_step(prev: LmbBelief, ell: LikelihoodFn, motion: MotionModel,
             births: Optional[BirthModel], config: GppConfig, rng, next_label: int,
             refine: Optional[Refinement] = None, n_dim: int = 4) -> StepResult:
    """One LMB particle filter recursion.

    ``rng`` is a Generator or a :class:`~lmbtbd.rng.Streams`; with streams,
    every stage and every (label set, target) pair draws from its own named
    substream.
    """
    streams = Streams.wrap(rng)
    prior = predict(prev, motion, births, config.n_particles, next_label, config.prune_threshold)
    xhat = predicted_states(prior)
    sample = sample_label_sets(prior, ell, config.n_particles, streams.get(0), n_dim,
                               config.max_labels, xhat)
    groups, log_b = [], []
    degenerate = False
    for h, (L, count) in enumerate(zip(sample.distinct, sample.counts)):
        if not L:
            groups.append(ParticleGroup((), np.zeros((count, 0, n_dim)),
                                        np.zeros((count, 0), dtype=int), np.zeros(count)))
            log_b.append(np.zeros((count, 0)))
            continue
        draws = sample_states_for_set(L, count, prior, ell, xhat, streams.child(1, h), n_dim)
        degenerate |= draws.degenerate
        groups.append(ParticleGroup(L, draws.states, draws.ancestors, np.zeros(count)))
        log_b.append(draws.log_b)
    weighted = weight_particles(groups, ell, xhat, log_b, n_dim)
    post = resample(weighted, streams.get(2), config.n_particles, config.resampling)
    if refine is None:
        belief, refined = project_lmb(post), post
    else:
        belief, refined = refine(post, prior, ell, streams.get(3))
    return StepResult(post, belief, prior, refined, degenerate)
