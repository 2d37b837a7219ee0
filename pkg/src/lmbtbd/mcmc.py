"""Label-switching improvement of the LMB approximation by MCMC.

The particles of each label set are moved by a kernel that proposes a
random-walk perturbation and then picks among all permutations of the
current and proposed joint states, weighting every candidate by the
target density.  The target density reweights the posterior by the ratio
``alpha`` of a moment-matched product Gaussian to its permutation sum,
which moves the labelled density inside its unlabelled family towards a
product (LMB) form.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .gpp import LikelihoodFn, PredictedPrior, project_lmb
from .models import _psd_sqrt, gaussian_log_norm, gaussian_logpdf
from .rfs import (DEFAULT_PERMUTATION_CAP, LabelSet, ParticleGroup, ParticlePosterior,
                  permutation_array)
from .validation import check_rng

log = logging.getLogger(__name__)

COV_JITTER = 1e-9


def moment_match(post: ParticlePosterior, label: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and biased (1/N_j) covariance of label ``label`` pooled over all sets."""
    chunks = [g.states[:, g.labels.index(label)] for g in post.groups if label in g.labels]
    if not chunks:
        raise ValueError(f"label {label} is carried by no particle")
    x = np.concatenate(chunks, axis=0)
    mean = x.mean(axis=0)
    d = x - mean
    return mean, d.T @ d / x.shape[0]


class GaussianPerLabel:
    """Per-label Gaussians ``N(mean_j, cov_j)``.

    Singular covariances get ``COV_JITTER * I`` added before inversion.
    """

    def __init__(self, means: Dict[int, np.ndarray], covs: Dict[int, np.ndarray]):
        self.means = {j: np.asarray(m, float) for j, m in means.items()}
        self.covs = {}
        self._inv, self._log_norm = {}, {}
        for j, c in covs.items():
            c = 0.5 * (np.asarray(c, float) + np.asarray(c, float).T)
            if np.linalg.eigvalsh(c).min() <= COV_JITTER:
                c = c + COV_JITTER * np.eye(c.shape[0])
            self.covs[j] = c
            self._inv[j] = np.linalg.inv(c)
            self._log_norm[j] = gaussian_log_norm(c)

    @classmethod
    def from_posterior(cls, post: ParticlePosterior) -> "GaussianPerLabel":
        means, covs = {}, {}
        for j in post.labels:
            means[j], covs[j] = moment_match(post, j)
        return cls(means, covs)

    def logpdf(self, x: np.ndarray, label: int) -> np.ndarray:
        return gaussian_logpdf(x, self.means[label], self._inv[label], self._log_norm[label])

    def log_matrix(self, x: np.ndarray, L: LabelSet) -> np.ndarray:
        """``M[..., j, k] = log nu(x_k; L_j)`` for x of shape (..., t, n_x)."""
        return np.stack([self.logpdf(x, j) for j in L], axis=-2)


def _perm_sums(mat: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """``S[..., p] = sum_j mat[..., j, perms[p, j]]``."""
    t = perms.shape[1]
    rows = np.arange(t)
    return mat[..., rows, perms].sum(axis=-1)


def log_alpha(x: np.ndarray, L: LabelSet, nu: GaussianPerLabel,
              cap: int = DEFAULT_PERMUTATION_CAP) -> np.ndarray:
    """Log of the identity-permutation share of the product Gaussian.

    ``alpha(x) = prod_j nu(x_j; L_j) / sum_p prod_j nu(x_{p(j)}; L_j)``.
    """
    x = np.asarray(x, float)
    perms = permutation_array(len(L), cap)
    s = _perm_sums(nu.log_matrix(x, L), perms)
    return s[..., 0] - logsumexp(s, axis=-1)


def alpha(x, L, nu, cap=DEFAULT_PERMUTATION_CAP):
    return np.exp(log_alpha(x, L, nu, cap))


def kernel_log_matrix(x: np.ndarray, ancestors: np.ndarray, L: LabelSet,
                      prior: PredictedPrior) -> np.ndarray:
    """``K[..., j, k] = log g_{L_j}^{a_j}(x_k)``."""
    rows = []
    for j_idx, j in enumerate(L):
        comp = ancestors[..., j_idx][..., None]
        rows.append(prior.labels[j].component_logpdf(x, comp))
    return np.stack(rows, axis=-2)


class IlmbTarget:
    """Target density for the particles of one label set.

    ``log phi(x, a) = log alpha(x) + log ell(x) + log sum_p prod_j g_{L_j}^{a_j}(x_{p(j)})``

    :meth:`evaluate` returns the log-density of every permutation of each
    state at the cost of one likelihood evaluation.
    """

    def __init__(self, L: LabelSet, nu: GaussianPerLabel, prior: PredictedPrior,
                 ell: LikelihoodFn, ancestors: np.ndarray, cap: int = DEFAULT_PERMUTATION_CAP):
        self.L = tuple(L)
        self.nu = nu
        self.prior = prior
        self.ell = ell
        self.ancestors = ancestors
        self.perms = permutation_array(len(L), cap)
        self.composition = composition_table(self.perms)

    def evaluate(self, x: np.ndarray, ell_x: Optional[np.ndarray] = None):
        """Return (log phi(Gamma_p x) for all p, shape (n, t!), log ell(x))."""
        if ell_x is None:
            ell_x = self.ell(x)
        a = _perm_sums(self.nu.log_matrix(x, self.L), self.perms)
        b = _perm_sums(kernel_log_matrix(x, self.ancestors, self.L, self.prior), self.perms)
        logphi = (a - logsumexp(a, axis=-1, keepdims=True)
                  + (ell_x + logsumexp(b, axis=-1))[:, None])
        return logphi, ell_x


def phi_eval(x, ancestors, L, nu, ell, prior, cap=DEFAULT_PERMUTATION_CAP) -> np.ndarray:
    """Unnormalised log target density at ``x`` itself (identity permutation)."""
    x = np.asarray(x, float)
    squeeze = x.ndim == 2
    if squeeze:
        x, ancestors = x[None], np.asarray(ancestors)[None]
    logphi, _ = IlmbTarget(L, nu, prior, ell, np.asarray(ancestors), cap).evaluate(x)
    return logphi[0, 0] if squeeze else logphi[:, 0]


def gaussian_random_walk(cov: np.ndarray) -> Callable:
    sqrt = _psd_sqrt(np.asarray(cov, float))

    def propose(x, rng):
        return x + rng.standard_normal(x.shape) @ sqrt.T
    return propose


def selection_log_probs(lp_x: np.ndarray, lp_new: np.ndarray) -> np.ndarray:
    """Log selection probabilities over the 2 t! candidates of the kernel.

    Columns ``0..t!-1`` are the permutations of the current state and the
    remaining columns the permutations of the proposal; each candidate is
    chosen with probability proportional to its target density.
    """
    logits = np.concatenate([lp_x, lp_new], axis=-1)
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def composition_table(perms: np.ndarray) -> np.ndarray:
    """``T[c, p]`` is the index of the permutation ``perms[c][perms[p]]``.

    If ``y = x[perms[c]]`` then ``y[perms[p]] = x[perms[T[c, p]]]``.
    """
    index = {tuple(q): i for i, q in enumerate(perms.tolist())}
    return np.array([[index[tuple(c[q])] for q in perms] for c in perms], dtype=int)


def mcmc_move(x: np.ndarray, target, propose: Callable, rng, state=None):
    """Apply the permutation-aware kernel once to every chain in ``x``.

    ``x`` has shape (n, t, n_x).  The next state is drawn among all
    permutations of ``x`` and of the proposal, with probability
    proportional to the target density.  ``propose`` must be symmetric.
    ``target`` needs a ``perms`` array and an ``evaluate(x, ell_x)`` method
    returning per-permutation log-densities and a reusable likelihood term.

    Returns
    -------
    y : ndarray, shape (n, t, n_x)
    state : tuple
        Cached (log-likelihood, per-permutation log-density) of ``y``; pass
        it back on the next call to skip re-evaluating the current state.
    """
    rng = check_rng(rng)
    if state is None:
        lp_x, ell_x = target.evaluate(x, None)
    else:
        ell_x, lp_x = state
    x_new = propose(x, rng)
    lp_new, ell_new = target.evaluate(x_new, None)
    probs = np.exp(selection_log_probs(lp_x, lp_new))
    cum = np.cumsum(probs, axis=1)
    u = rng.random(x.shape[0])[:, None] * cum[:, -1:]
    choice = np.minimum((cum < u).sum(axis=1), probs.shape[1] - 1)
    n_perm = lp_x.shape[1]
    from_new = choice >= n_perm
    c = choice % n_perm
    perm = target.perms[c]
    src = np.where(from_new[:, None, None], x_new, x)
    y = np.take_along_axis(src, perm[:, :, None], axis=1)
    table = getattr(target, "composition", None)
    if table is None:
        table = composition_table(target.perms)
    lp_src = np.where(from_new[:, None], lp_new, lp_x)
    lp_y = np.take_along_axis(lp_src, table[c], axis=1)
    return y, (np.where(from_new, ell_new, ell_x), lp_y)


@dataclass
class IlmbConfig:
    n_outer: int = 1
    n_sweeps: int = 20
    proposal_cov: Optional[np.ndarray] = None
    permutation_cap: int = DEFAULT_PERMUTATION_CAP
    gate_radius: Optional[float] = None
    move_singletons: bool = True


def _eligible(L: LabelSet, nu: GaussianPerLabel, cfg: IlmbConfig, pos_index=(0, 2)) -> bool:
    if len(L) == 0:
        return False
    if len(L) > cfg.permutation_cap:
        log.info("label set %s exceeds the permutation cap; passed through", L)
        return False
    if len(L) == 1:
        return cfg.move_singletons and cfg.gate_radius is None
    if cfg.gate_radius is None:
        return True
    pos = np.stack([nu.means[j][list(pos_index)] for j in L])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    return bool(np.any(d[np.triu_indices(len(L), 1)] <= cfg.gate_radius))


def ilmb_mcmc(post: ParticlePosterior, prior: PredictedPrior, ell: LikelihoodFn,
              config: IlmbConfig, rng, return_posterior: bool = False):
    """Improve the LMB approximation of an evenly weighted labelled posterior.

    For each of ``n_outer`` iterations the per-label Gaussians are refitted
    from the current particles and every eligible label set runs
    ``n_sweeps`` kernel sweeps over all its particles.  Label sets never
    change, so the label PMF is preserved exactly.
    """
    if config.n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    rng = check_rng(rng)
    cov = config.proposal_cov
    if cov is None:
        cov = next(iter(prior.labels.values())).cov if prior.labels else np.eye(post.n_dim)
    propose = gaussian_random_walk(cov)
    groups = list(post.groups)
    for _ in range(config.n_outer):
        current = ParticlePosterior(groups, post.n_dim, True)
        nu = GaussianPerLabel.from_posterior(current) if current.labels else None
        new_groups = []
        for grp in groups:
            if nu is None or not _eligible(grp.labels, nu, config):
                new_groups.append(grp)
                continue
            target = IlmbTarget(grp.labels, nu, prior, ell, grp.ancestors,
                                config.permutation_cap)
            x, state = grp.states, None
            for _ in range(config.n_sweeps):
                x, state = mcmc_move(x, target, propose, rng, state)
            new_groups.append(ParticleGroup(grp.labels, x, grp.ancestors, grp.log_weights))
        groups = new_groups
    refined = ParticlePosterior(groups, post.n_dim, post.normalized, post.ess)
    belief = project_lmb(refined)
    if return_posterior:
        return belief, refined
    return belief
