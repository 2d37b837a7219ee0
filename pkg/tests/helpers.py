"""Shared fixtures for the MCMC tests and the acceptance suite."""
import itertools

import numpy as np

from lmbtbd.gpp import LabelPrior, PredictedPrior
from lmbtbd.mcmc import composition_table, selection_log_probs
from lmbtbd.rfs import ParticleGroup, ParticlePosterior, permutation_array


def flat_ell(x):
    return np.zeros(np.asarray(x).shape[:-2])


def posterior(groups):
    return ParticlePosterior(groups, groups[0].states.shape[-1], True).with_even_weights()


class TableTarget:
    """Discrete two-target density; states hold the grid index in slot 0."""

    def __init__(self, logphi):
        self.logphi = logphi
        self.perms = permutation_array(2)
        self.composition = composition_table(self.perms)

    def evaluate(self, x, ell_x=None):
        idx = np.asarray(x)[..., 0].astype(int)
        lp = np.stack([self.logphi[idx[:, p[0]], idx[:, p[1]]] for p in self.perms], axis=1)
        return lp, np.zeros(idx.shape[0])


def neighbour_proposal(S):
    """Symmetric proposal: each coordinate moves -1, 0 or +1 modulo S."""
    q = np.zeros((S, S))
    for a in range(S):
        for d in (-1, 0, 1):
            q[a, (a + d) % S] += 1 / 3

    def propose(x, rng):
        step = rng.integers(-1, 2, size=x.shape[:2])
        y = x.copy()
        y[..., 0] = (x[..., 0] + step) % S
        return y
    return q, propose


def library_kernel_matrix(logphi, q):
    """Transition matrix from the package's candidate-selection rule."""
    S = logphi.shape[0]
    target = TableTarget(logphi)
    states = list(itertools.product(range(S), repeat=2))
    index = {s: i for i, s in enumerate(states)}
    A = np.zeros((S * S, S * S))
    for (a, b) in states:
        x = np.array([[[a, 0.0], [b, 0.0]]])
        lp_x, _ = target.evaluate(x)
        for a2, b2 in itertools.product(range(S), repeat=2):
            pq = q[a, a2] * q[b, b2]
            if pq == 0:
                continue
            xt = np.array([[[a2, 0.0], [b2, 0.0]]])
            lp_t, _ = target.evaluate(xt)
            probs = np.exp(selection_log_probs(lp_x, lp_t))[0]
            cands = [(a, b), (b, a), (a2, b2), (b2, a2)]
            for c, pc in zip(cands, probs):
                A[index[(a, b)], index[c]] += pq * pc
    return A, states


def mixed_posterior(rng, n=400, split=0.65, sep=6.0):
    """Two labels with mixed identities: label 1 sits at A with prob ``split``.

    Every particle is an exact draw from the flat-likelihood posterior of
    its ancestors, so the chain starts in its target's unlabelled law.
    """
    A = np.array([-sep, 0.0, 0.0, 0.0])
    B = np.array([sep, 0.0, 0.0, 0.0])
    at_a = rng.random(n) < split
    m1 = np.where(at_a[:, None], A, B)
    m2 = np.where(at_a[:, None], B, A)
    pr = PredictedPrior({1: LabelPrior(1, 1.0, m1, np.eye(4)),
                         2: LabelPrior(2, 1.0, m2, np.eye(4))}, 3)
    x = np.stack([m1, m2], 1) + rng.normal(size=(n, 2, 4))
    anc = np.tile(np.arange(n)[:, None], (1, 2))
    anc1 = rng.integers(0, n, size=(50, 1))
    single = ParticleGroup((1,), m1[anc1] + rng.normal(size=(50, 1, 4)), anc1, np.zeros(50))
    post = posterior([single, ParticleGroup((1, 2), x, anc, np.zeros(n))])
    return post, pr


