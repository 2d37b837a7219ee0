"""Comparison filters: a labelled bootstrap SIR filter and the U-MCMC move.

The SIR filter carries full labelled particles and samples existence
straight from the prior (survival and birth coin flips), so it needs many
more particles than GPP.  U-MCMC refines GPP particles with plain
random-walk Metropolis-Hastings on each particle's joint state.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .exceptions import DegeneratePosteriorError
from .gpp import LikelihoodFn, PredictedPrior, project_lmb, systematic_indices
from .mcmc import gaussian_random_walk, kernel_log_matrix
from .models import BirthModel, InitialTrack, MotionModel, _psd_sqrt
from .rfs import LmbBelief, ParticleGroup, ParticlePosterior
from .rng import Streams
from .validation import check_rng

log = logging.getLogger(__name__)


@dataclass
class SirState:
    """Labelled particles as a table over every label seen so far.

    Attributes
    ----------
    labels : list of int
        Column labels, ascending.
    states : ndarray, shape (N, K, n_x)
        States; entries where ``mask`` is False are meaningless.
    mask : ndarray of bool, shape (N, K)
        Whether particle ``i`` contains label ``labels[k]``.
    next_label : int
    """

    labels: List[int]
    states: np.ndarray
    mask: np.ndarray
    next_label: int

    @property
    def n_particles(self) -> int:
        return self.mask.shape[0]

    def to_posterior(self, log_weights: Optional[np.ndarray] = None) -> ParticlePosterior:
        """Group the table by label set (groups ordered by size, then labels)."""
        n, _, n_dim = self.states.shape
        if log_weights is None:
            log_weights = np.full(n, -np.log(n))
        patterns, inverse = np.unique(self.mask, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        sets = [tuple(self.labels[k] for k in np.flatnonzero(pat)) for pat in patterns]
        order = sorted(range(len(sets)), key=lambda h: (len(sets[h]), sets[h]))
        groups = []
        for h in order:
            rows = np.flatnonzero(inverse == h)
            cols = np.flatnonzero(patterns[h])
            st = self.states[np.ix_(rows, cols)].reshape(rows.size, cols.size, n_dim)
            groups.append(ParticleGroup(sets[h], st, np.zeros((rows.size, cols.size), dtype=int),
                                        log_weights[rows]))
        return ParticlePosterior(groups, n_dim, True)


def sir_initial_state(tracks: Sequence[InitialTrack], n_particles: int, rng,
                      n_dim: int = 4) -> SirState:
    """Draw labelled particles from independent Gaussian track priors.

    Track ``k`` gets label ``k + 1``, exists with its prior existence
    probability and, if present, has state ``N(mean, cov_scale * I)``.
    """
    rng = check_rng(rng)
    K = len(tracks)
    states = np.zeros((n_particles, K, n_dim))
    mask = np.zeros((n_particles, K), dtype=bool)
    for k, tr in enumerate(tracks):
        states[:, k] = tr.mean + np.sqrt(tr.cov_scale) * rng.standard_normal((n_particles, n_dim))
        mask[:, k] = rng.random(n_particles) < tr.existence
    return SirState(list(range(1, K + 1)), states, mask, K + 1)


def sir_log_weights(state: SirState, ell: LikelihoodFn) -> np.ndarray:
    """``ell`` of every particle, batched by label-set pattern."""
    n, _, n_dim = state.states.shape
    lw = np.empty(n)
    patterns, inverse = np.unique(state.mask, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for h, pat in enumerate(patterns):
        rows = np.flatnonzero(inverse == h)
        cols = np.flatnonzero(pat)
        lw[rows] = ell(state.states[np.ix_(rows, cols)].reshape(rows.size, cols.size, n_dim))
    return lw


@dataclass
class SirStepResult:
    state: SirState
    posterior: ParticlePosterior
    belief: LmbBelief
    ess: float


def sir_pf_step(state: SirState, ell: LikelihoodFn, motion: MotionModel,
                births: Optional[BirthModel], rng) -> SirStepResult:
    """One bootstrap step: prior sampling of existence and states, weighting, resampling.

    Labels that no particle carries after resampling are retired.
    """
    streams = Streams.wrap(rng)
    g = streams.get(0)
    n, _, n_dim = state.states.shape
    mask = state.mask & (g.random(state.mask.shape) < motion.gamma)
    sqrtQ = _psd_sqrt(motion.Q)
    states = state.states @ motion.F.T + g.standard_normal(state.states.shape) @ sqrtQ.T
    labels = list(state.labels)
    next_label = state.next_label
    if births is not None and len(births):
        new_states, new_mask = [], []
        for site in births.sites:
            sq = np.sqrt(site.cov_scale)
            new_states.append(site.mean + sq * g.standard_normal((n, n_dim)))
            new_mask.append(g.random(n) < site.prob)
            labels.append(next_label)
            next_label += 1
        states = np.concatenate([states, np.stack(new_states, axis=1)], axis=1)
        mask = np.concatenate([mask, np.stack(new_mask, axis=1)], axis=1)
    prop = SirState(labels, states, mask, next_label)
    lw = sir_log_weights(prop, ell)
    if not np.any(np.isfinite(lw)):
        raise DegeneratePosteriorError("every SIR particle has zero weight")
    lw = lw - logsumexp(lw)
    w = np.exp(lw)
    ess = float(1.0 / np.sum(w ** 2))
    idx = systematic_indices(w, n, streams.get(1))
    keep = np.flatnonzero(mask[idx].any(axis=0))
    new = SirState([labels[k] for k in keep], states[idx][:, keep], mask[idx][:, keep], next_label)
    post = new.to_posterior()
    return SirStepResult(new, post, project_lmb(post), ess)


def u_mcmc_refine(post: ParticlePosterior, prior: PredictedPrior, ell: LikelihoodFn,
                  steps: int, proposal_cov: Optional[np.ndarray], rng) -> ParticlePosterior:
    """Random-walk Metropolis-Hastings on the joint state of every particle.

    The target of a particle with label set ``L`` and ancestors ``a`` is
    ``ell(x) prod_j g_{L_j}^{a_j}(x_j)``; label sets and ancestors are
    unchanged, so the label-set PMF is preserved exactly.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps == 0:
        return post
    rng = check_rng(rng)
    if proposal_cov is None:
        proposal_cov = next(iter(prior.labels.values())).cov
    propose = gaussian_random_walk(proposal_cov)
    groups = []
    for grp in post.groups:
        if not grp.labels:
            groups.append(grp)
            continue
        t = len(grp.labels)
        diag = np.arange(t)

        def log_target(x, ell_x):
            k = kernel_log_matrix(x, grp.ancestors, grp.labels, prior)
            return ell_x + k[:, diag, diag].sum(axis=1)

        x = grp.states
        ell_x = ell(x)
        lp = log_target(x, ell_x)
        for _ in range(steps):
            y = propose(x, rng)
            ell_y = ell(y)
            lp_y = log_target(y, ell_y)
            accept = np.log(rng.random(len(grp))) < lp_y - lp
            x = np.where(accept[:, None, None], y, x)
            ell_x = np.where(accept, ell_y, ell_x)
            lp = np.where(accept, lp_y, lp)
        groups.append(ParticleGroup(grp.labels, x, grp.ancestors, grp.log_weights))
    return ParticlePosterior(groups, post.n_dim, post.normalized, post.ess)
