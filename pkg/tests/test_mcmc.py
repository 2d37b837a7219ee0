import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from lmbtbd.gpp import LabelPrior, PredictedPrior, project_lmb
from lmbtbd.kld import LmbDiscrete, optimal_in_family, symmetrize
from lmbtbd.mcmc import (GaussianPerLabel, IlmbConfig, IlmbTarget, alpha, composition_table,
                         gaussian_random_walk, ilmb_mcmc, log_alpha, mcmc_move, moment_match,
                         phi_eval, selection_log_probs)
from lmbtbd.rfs import (ParticleGroup, exact_pmf_from_particles,
                        permutation_array)
from helpers import (TableTarget, flat_ell, library_kernel_matrix, mixed_posterior,
                     neighbour_proposal, posterior)
from oracles import kernel_matrix_2target, tv_distance


def test_detailed_balance_discrete_two_targets(rng):
    S = 4
    logphi = np.log(rng.random((S, S)) + 0.05)
    q, _ = neighbour_proposal(S)
    A, states = library_kernel_matrix(logphi, q)
    A_ref, _ = kernel_matrix_2target(logphi, q)
    assert np.allclose(A, A_ref, atol=1e-15)
    assert np.allclose(A.sum(axis=1), 1.0, atol=1e-12)
    pi = np.exp(np.array([logphi[s] for s in states]))
    pi /= pi.sum()
    flow = pi[:, None] * A
    assert np.max(np.abs(flow - flow.T)) < 1e-12


def test_long_run_distribution():
    S = 3
    rng = np.random.default_rng(5)
    logphi = np.log(np.array([[0.30, 0.05, 0.10], [0.02, 0.15, 0.08], [0.12, 0.03, 0.15]]))
    target = TableTarget(logphi)
    _, propose = neighbour_proposal(S)
    n_chains, n_steps = 20, 5000
    x = np.zeros((n_chains, 2, 2))
    counts = np.zeros((S, S))
    state = None
    for _ in range(n_steps):
        x, state = mcmc_move(x, target, propose, rng, state)
        idx = x[..., 0].astype(int)
        np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
    emp = counts / counts.sum()
    phi = np.exp(logphi) / np.exp(logphi).sum()
    assert tv_distance(emp.ravel(), phi.ravel()) < 0.02


def test_single_target_is_barker(rng):
    lp_x, lp_new = np.array([[np.log(0.2)]]), np.array([[np.log(0.6)]])
    p = np.exp(selection_log_probs(lp_x, lp_new))[0]
    assert p[1] == pytest.approx(0.6 / 0.8)


def test_symmetric_target_rejected_proposal_uniform_over_permutations():
    lp_x = np.array([[0.0, 0.0]])
    lp_new = np.array([[-np.inf, -np.inf]])
    p = np.exp(selection_log_probs(lp_x, lp_new))[0]
    assert np.allclose(p, [0.5, 0.5, 0.0, 0.0])


def test_cached_state_matches_fresh_evaluation(rng):
    logphi = np.log(rng.random((4, 4)) + 0.1)
    target = TableTarget(logphi)
    _, propose = neighbour_proposal(4)
    x = rng.integers(0, 4, size=(30, 2, 1)).astype(float)
    state = None
    for _ in range(10):
        x, state = mcmc_move(x, target, propose, rng, state)
        fresh, _ = target.evaluate(x)
        assert np.array_equal(fresh, state[1])


def test_composition_table(rng):
    perms = permutation_array(3)
    T = composition_table(perms)
    x = rng.normal(size=3)
    for c, p in itertools.product(range(6), repeat=2):
        assert np.array_equal(x[perms[c]][perms[p]], x[perms[T[c, p]]])


def test_moment_match_examples(rng):
    c = np.array([1.0, 2.0, 3.0, 4.0])
    g = ParticleGroup((1,), np.repeat(c[None, None], 5, 0), np.zeros((5, 1), int), np.zeros(5))
    mean, cov = moment_match(posterior([g]), 1)
    assert np.array_equal(mean, c) and np.all(cov == 0)
    nu = GaussianPerLabel({1: mean}, {1: cov})
    assert np.all(np.linalg.eigvalsh(nu.covs[1]) > 0)
    u = np.array([1.0, -2.0, 0.5, 3.0])
    g = ParticleGroup((1,), np.stack([u, -u])[:, None], np.zeros((2, 1), int), np.zeros(2))
    mean, cov = moment_match(posterior([g]), 1)
    assert np.allclose(mean, 0) and np.allclose(cov, np.outer(u, u))
    with pytest.raises(ValueError):
        moment_match(posterior([g]), 2)


def test_moment_match_pools_sets_and_recovers_gaussian(rng):
    true_mean = np.array([1.0, -1.0, 2.0, 0.5])
    A = rng.normal(size=(4, 4))
    true_cov = A @ A.T + np.eye(4)
    x = rng.multivariate_normal(true_mean, true_cov, size=10000)
    g1 = ParticleGroup((1,), x[:6000, None], np.zeros((6000, 1), int), np.zeros(6000))
    other = rng.normal(size=(4000, 1, 4))
    g2 = ParticleGroup((1, 2), np.concatenate([x[6000:, None], other], 1),
                       np.zeros((4000, 2), int), np.zeros(4000))
    mean, cov = moment_match(posterior([g1, g2]), 1)
    se = np.sqrt(np.diag(true_cov) / 10000)
    assert np.all(np.abs(mean - true_mean) < 3 * se)
    se_cov = np.sqrt((true_cov ** 2 + np.outer(np.diag(true_cov), np.diag(true_cov))) / 10000)
    assert np.all(np.abs(cov - true_cov) < 3 * se_cov + 1e-12)


def _nu(rng, labels):
    means, covs = {}, {}
    for j in labels:
        means[j] = rng.normal(scale=3, size=4)
        A = rng.normal(size=(4, 4))
        covs[j] = A @ A.T + np.eye(4)
    return GaussianPerLabel(means, covs)


def test_alpha_examples(rng):
    nu = _nu(rng, (1, 2, 3))
    x = rng.normal(size=(1, 4))
    assert alpha(x, (1,), nu) == pytest.approx(1.0, abs=1e-15)
    nu2 = _nu(rng, (1, 2))
    pt = rng.normal(size=4)
    assert alpha(np.stack([pt, pt]), (1, 2), nu2) == pytest.approx(0.5, abs=1e-15)
    x3 = rng.normal(size=(3, 4))
    total = sum(alpha(x3[list(p)], (1, 2, 3), nu) for p in itertools.permutations(range(3)))
    assert total == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.integers(1, 4))
def test_alpha_normalised_over_permutations(seed, t):
    rng = np.random.default_rng(seed)
    L = tuple(range(1, t + 1))
    nu = _nu(rng, L)
    x = rng.normal(scale=5, size=(t, 4))
    la = [log_alpha(x[list(p)], L, nu) for p in itertools.permutations(range(t))]
    assert abs(np.exp(logsumexp(la)) - 1.0) < 1e-12


def _prior(rng, comps):
    return PredictedPrior({j: LabelPrior(j, 1.0, m, np.eye(4)) for j, m in comps.items()},
                          max(comps) + 1)


def test_phi_eval_single_target(rng):
    pr = _prior(rng, {1: rng.normal(size=(3, 4))})
    nu = _nu(rng, (1,))
    ell = lambda x: -0.5 * np.sum(np.asarray(x)[..., 0] ** 2, axis=-1)
    x = rng.normal(size=(1, 4))
    val = phi_eval(x, np.array([2]), (1,), nu, ell, pr)
    expected = ell(x) + pr.labels[1].component_logpdf(x[0], np.array(2))
    assert val == pytest.approx(float(expected), abs=1e-12)


def test_swap_changes_only_alpha_and_pairing(rng):
    pr = _prior(rng, {1: rng.normal(size=(2, 4)), 2: rng.normal(size=(2, 4))})
    nu = _nu(rng, (1, 2))
    ell = lambda x: -0.1 * np.sum(np.asarray(x)[..., [0, 2]].sum(-2) ** 2, axis=-1)
    x = rng.normal(size=(1, 2, 4))
    anc = np.array([[0, 1]])
    target = IlmbTarget((1, 2), nu, pr, ell, anc)
    lp, ell_x = target.evaluate(x)
    lp_sw, ell_sw = target.evaluate(x[:, ::-1])
    assert ell_x[0] == ell_sw[0]
    assert np.allclose(lp[0, ::-1], lp_sw[0], atol=1e-12)
    diff = lp[0, 0] - lp[0, 1]
    assert diff == pytest.approx(float(log_alpha(x[0], (1, 2), nu) - log_alpha(x[0, ::-1], (1, 2), nu)))


def test_phi_eval_grid_normalisation_matches_optimal_family(rng):
    grid = np.linspace(-4, 4, 9)
    states = np.zeros((grid.size, 4))
    states[:, 0] = grid
    pr = _prior(rng, {1: np.array([[-1.0, 0, 0, 0]]), 2: np.array([[1.5, 0, 0, 0]])})
    nu = GaussianPerLabel({1: np.array([-0.5, 0, 0, 0]), 2: np.array([1.0, 0, 0, 0])},
                          {1: 2 * np.eye(4), 2: 3 * np.eye(4)})
    ell = lambda x: -0.3 * (np.asarray(x)[..., 0].sum(-1) - 0.7) ** 2
    X = np.array([[states[i], states[k]] for i, k in itertools.product(range(9), repeat=2)])
    anc = np.zeros((X.shape[0], 2), dtype=int)
    lp = phi_eval(X, anc, (1, 2), nu, ell, pr).reshape(9, 9)
    phi = np.exp(lp - logsumexp(lp))
    # exhaustive construction: alpha * symmetrised labelled posterior
    g1 = np.exp(pr.labels[1].component_logpdf(states, np.array(0)))
    g2 = np.exp(pr.labels[2].component_logpdf(states, np.array(0)))
    post = np.exp(ell(X)).reshape(9, 9) * np.outer(g1, g2)
    m1 = np.exp(nu.logpdf(states, 1))
    m2 = np.exp(nu.logpdf(states, 2))
    lmb = LmbDiscrete({1: 1.0, 2: 1.0}, {1: m1 / m1.sum(), 2: m2 / m2.sum()})
    ref = optimal_in_family(lmb, symmetrize(post / post.sum()), (1, 2))
    assert np.allclose(phi, ref / ref.sum(), atol=1e-12)


def test_ilmb_relabels_mixed_posterior_and_preserves_unlabelled(rng):
    post, pr = mixed_posterior(rng)
    before = project_lmb(post)
    cfg = IlmbConfig(n_outer=3, n_sweeps=10, proposal_cov=0.5 * np.eye(4))
    belief, refined = ilmb_mcmc(post, pr, flat_ell, cfg, rng, return_posterior=True)
    assert exact_pmf_from_particles(refined) == exact_pmf_from_particles(post)
    for j in (1, 2):
        det_before = np.linalg.det(np.cov(before.clouds[j].T))
        det_after = np.linalg.det(np.cov(belief.clouds[j].T))
        assert det_after < det_before
    g0, g1 = post.groups[1].states, refined.groups[1].states
    d = g1[:, :, [0, 2]].sum(1) - g0[:, :, [0, 2]].sum(1)
    assert np.all(np.abs(d.mean(0)) < 3 * d.std(0, ddof=1) / np.sqrt(len(d)))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_ilmb_preserves_label_pmf(seed):
    rng = np.random.default_rng(seed)
    post, pr = mixed_posterior(rng, n=60)
    cfg = IlmbConfig(2, 3, np.eye(4))
    _, refined = ilmb_mcmc(post, pr, flat_ell, cfg, rng, return_posterior=True)
    assert exact_pmf_from_particles(refined) == exact_pmf_from_particles(post)
    assert [g.labels for g in refined.groups] == [g.labels for g in post.groups]
    for a, b in zip(post.groups, refined.groups):
        assert np.array_equal(a.ancestors, b.ancestors)


def test_singletons_without_moves_equal_projection(rng):
    groups = [ParticleGroup((j,), rng.normal(size=(20, 1, 4)), np.zeros((20, 1), int),
                            np.zeros(20)) for j in (1, 2)]
    post = posterior(groups)
    pr = _prior(rng, {1: np.zeros((1, 4)), 2: np.zeros((1, 4))})
    b = ilmb_mcmc(post, pr, flat_ell, IlmbConfig(1, 20, move_singletons=False), rng)
    ref = project_lmb(post)
    assert b.existence == ref.existence
    for j in ref.clouds:
        assert np.array_equal(b.clouds[j], ref.clouds[j])


def test_singleton_moves_keep_distribution(rng):
    n = 2000
    pr = _prior(rng, {1: np.zeros((1, 4))})
    x = rng.normal(size=(n, 1, 4))
    post = posterior([ParticleGroup((1,), x, np.zeros((n, 1), int), np.zeros(n))])
    b = ilmb_mcmc(post, pr, flat_ell, IlmbConfig(1, 10, np.eye(4)), rng)
    m = b.clouds[1].mean(0)
    assert np.all(np.abs(m) < 3 * np.sqrt(2 / n))
    assert np.allclose(b.clouds[1].var(0), 1.0, atol=0.15)


def test_ilmb_config_validation_and_passthrough(rng, caplog):
    post, pr = mixed_posterior(rng, n=20)
    with pytest.raises(ValueError):
        ilmb_mcmc(post, pr, flat_ell, IlmbConfig(n_outer=0), rng)
    with caplog.at_level("INFO"):
        _, refined = ilmb_mcmc(post, pr, flat_ell, IlmbConfig(1, 2, permutation_cap=1), rng,
                               return_posterior=True)
    assert np.array_equal(refined.groups[1].states, post.groups[1].states)
    assert "permutation cap" in caplog.text


def test_gate_radius_skips_distant_sets(rng):
    post, pr = mixed_posterior(rng, n=30, sep=50.0, split=0.5)
    _, far = ilmb_mcmc(post, pr, flat_ell, IlmbConfig(1, 3, np.eye(4), gate_radius=1.0), rng,
                       return_posterior=True)
    assert np.array_equal(far.groups[1].states, post.groups[1].states)
    assert np.array_equal(far.groups[0].states, post.groups[0].states)


def test_random_walk_is_symmetric(rng):
    prop = gaussian_random_walk(np.diag([1.0, 2.0]))
    x = np.zeros((20000, 1, 2))
    y = prop(x, rng)
    assert np.allclose(y.reshape(-1, 2).mean(0), 0, atol=0.05)
    assert np.allclose(np.cov(y.reshape(-1, 2).T), np.diag([1.0, 2.0]), atol=0.08)
