import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmbtbd.exceptions import AbsoluteContinuityError, GridResolutionError
from lmbtbd.kld import (CASE_PMFS, DiscreteLabelledDensity, GaussianCaseSpec, LmbDiscrete,
                        best_lmb, improve_lmb, kld_decomposed, optimal_in_family,
                        permute_table, run_illustrative_case, symmetrize, write_kld_csv)
from oracles import lmb_tables, random_discrete_density, set_integral_kld


def _density(rng, kappa, G=3, sparse=False):
    pmf, cond = random_discrete_density(rng, kappa, G, sparse)
    return DiscreteLabelledDensity(pmf, cond)


def test_kld_identity_and_pmf_only_difference(rng):
    p = _density(rng, 2)
    assert kld_decomposed(p, p) == 0.0
    q_pmf = {L: v for L, v in zip(p.pmf, rng.dirichlet(np.ones(len(p.pmf))))}
    q = DiscreteLabelledDensity(q_pmf, p.conditionals)
    expected = sum(a * np.log(a / q_pmf[L]) for L, a in p.pmf.items())
    assert kld_decomposed(p, q) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_decomposition_matches_set_integral_kappa2(seed):
    rng = np.random.default_rng(seed)
    p, q = _density(rng, 2), _density(rng, 2)
    direct = set_integral_kld(p.pmf, p.conditionals, q.pmf, q.conditionals)
    assert abs(kld_decomposed(p, q) - direct) < 1e-10


def test_decomposition_against_lmb(rng):
    p = _density(rng, 2)
    nu = best_lmb(p)
    pmf_q, cond_q = lmb_tables(nu.existence, nu.marginals, (1, 2))
    direct = set_integral_kld(p.pmf, p.conditionals, pmf_q, cond_q)
    assert abs(kld_decomposed(p, nu) - direct) < 1e-10


def test_absolute_continuity_error_names_label_set(rng):
    p = _density(rng, 1)
    cond = dict(p.conditionals)
    tab = cond[(1,)].copy()
    tab[0] = 0.0
    tab /= tab.sum()
    q = DiscreteLabelledDensity(p.pmf, {**cond, (1,): tab})
    with pytest.raises(AbsoluteContinuityError, match=r"\(1,\)"):
        kld_decomposed(p, q)


def test_cell_measure_is_used():
    pmf = {(): 0.5, (1,): 0.5}
    p = DiscreteLabelledDensity(pmf, {(): np.array(1.0), (1,): np.array([0.5, 1.5])}, cell=0.5)
    q = DiscreteLabelledDensity(pmf, {(): np.array(1.0), (1,): np.array([1.0, 1.0])}, cell=0.5)
    direct = set_integral_kld(p.pmf, p.conditionals, q.pmf, q.conditionals, cell=0.5)
    assert kld_decomposed(p, q) == pytest.approx(direct, abs=1e-14)


def test_density_validation():
    with pytest.raises(ValueError):
        DiscreteLabelledDensity({(1,): 0.7}, {(1,): np.array([1.0])})
    with pytest.raises(ValueError):
        DiscreteLabelledDensity({(1,): 1.0}, {(1,): np.array([0.6, 0.6])})
    with pytest.raises(ValueError):
        DiscreteLabelledDensity({(1, 2): 1.0}, {(1, 2): np.array([0.5, 0.5])})


@pytest.mark.parametrize("case, p", [(1, 0.85), (2, 0.6)])
def test_best_lmb_existence_of_standard_cases(case, p):
    pmf = CASE_PMFS[case]
    cond = {(): np.array(1.0), (1,): np.array([1.0]), (2,): np.array([1.0]),
            (1, 2): np.array([[1.0]])}
    nu = best_lmb(DiscreteLabelledDensity(pmf, cond))
    assert nu.existence[1] == pytest.approx(p, abs=1e-15)
    assert nu.existence[2] == pytest.approx(p, abs=1e-15)


def test_best_lmb_fixed_point(rng):
    ex = {1: 0.3, 2: 0.8}
    marg = {1: rng.dirichlet(np.ones(3)), 2: rng.dirichlet(np.ones(3))}
    lmb = LmbDiscrete(ex, marg).to_density()
    nu = best_lmb(lmb)
    assert kld_decomposed(lmb, nu) == pytest.approx(0.0, abs=1e-12)
    for j in ex:
        assert nu.existence[j] == pytest.approx(ex[j], abs=1e-12)
        assert np.allclose(nu.marginals[j], marg[j], atol=1e-12)
    nus, klds = improve_lmb(lmb, 3)
    assert max(abs(k) for k in klds) < 1e-12


def test_best_lmb_flags_absent_label():
    pmf = {(): 0.5, (1,): 0.5}
    p = DiscreteLabelledDensity(pmf, {(): np.array(1.0), (1,): np.array([0.5, 0.5])})
    nu = best_lmb(p, labels=(1, 2))
    assert nu.existence[2] == 0.0 and 2 in nu.empty_labels
    assert np.all(nu.marginals[2] == 0)


def test_optimal_in_family_examples(rng):
    tab = rng.random((3, 3))
    tab /= tab.sum()
    check = symmetrize(tab)
    m = rng.dirichlet(np.ones(3))
    sym_nu = LmbDiscrete({1: 0.5, 2: 0.5}, {1: m, 2: m})
    assert np.allclose(optimal_in_family(sym_nu, check, (1, 2)), check / 2, atol=1e-15)
    single = rng.dirichlet(np.ones(3))
    assert np.array_equal(optimal_in_family(sym_nu, single, (1,)), single)


def test_optimal_in_family_constraint_and_perturbation_oracle(rng):
    p = _density(rng, 2)
    nu = best_lmb(p)
    check = symmetrize(p.conditionals[(1, 2)])
    phi = optimal_in_family(nu, check, (1, 2))
    assert np.allclose(phi + permute_table(phi, (1, 0)), check, atol=1e-10)
    assert np.all(phi >= 0) and phi.sum() == pytest.approx(1.0, abs=1e-12)
    target = nu.joint((1, 2))

    def kl(f):
        return float(np.sum(f * np.log(f / target)))

    best = kl(phi)
    # members of the family: f = beta * check with beta + beta^T = 1 (beta in (0,1))
    for _ in range(500):
        beta = np.clip(phi / check + rng.normal(scale=0.2, size=(3, 3)), 1e-6, 1 - 1e-6)
        beta = 0.5 * (beta + 1 - beta.T)
        f = beta * check
        assert np.allclose(f + f.T, check)
        assert best <= kl(f) + 1e-12


def test_optimal_in_family_continuity_error():
    nu = LmbDiscrete({1: 0.5, 2: 0.5}, {1: np.array([1.0, 0.0]), 2: np.array([1.0, 0.0])})
    with pytest.raises(AbsoluteContinuityError):
        optimal_in_family(nu, np.array([[0.0, 0.5], [0.5, 0.0]]), (1, 2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), kappa=st.integers(1, 3))
def test_improve_lmb_monotone_and_family_preserving(seed, kappa):
    rng = np.random.default_rng(seed)
    pi = _density(rng, kappa)
    nus, klds, phis = improve_lmb(pi, 5, return_densities=True)
    for a, b in zip(klds, klds[1:]):
        assert b <= a + 1e-9
    for n in range(1, len(phis)):
        # the three-term chain D(phi^n||nu^n) >= D(phi^{n+1}||nu^n) >= D(phi^{n+1}||nu^{n+1})
        if n < len(phis) - 1:
            mid = kld_decomposed(phis[n + 1], nus[n])
            assert klds[n] + 1e-9 >= mid >= klds[n + 1] - 1e-9
        assert phis[n].pmf == pi.pmf
        for L, tab in pi.conditionals.items():
            if len(L) >= 2:
                assert np.allclose(symmetrize(phis[n].conditionals[L]), symmetrize(tab),
                                   atol=1e-9)


def test_improve_lmb_rejects_zero_iterations(rng):
    with pytest.raises(ValueError):
        improve_lmb(_density(rng, 1), 0)


def test_gaussian_case_closed_form_and_grid():
    spec = GaussianCaseSpec.standard_case(1)
    direct = 0.8 * -0.5 * np.log(1 - 0.64)
    pmf_term = (0.1 * np.log(0.1 / 0.15 ** 2) + 2 * 0.05 * np.log(0.05 / (0.85 * 0.15))
                + 0.8 * np.log(0.8 / 0.85 ** 2))
    assert spec.closed_form_initial_kld() == pytest.approx(pmf_term + direct, abs=1e-12)
    x, dx = spec.grid()
    assert x.size == 400 and x[0] - dx / 2 == pytest.approx(4.0) and x[-1] + dx / 2 == pytest.approx(17.0)
    with pytest.raises(ValueError):
        GaussianCaseSpec.standard_case(3)
    with pytest.raises(ValueError):
        GaussianCaseSpec.standard_case(1, rho=1.0)


def test_illustrative_self_check_and_csv(tmp_path):
    res = run_illustrative_case(GaussianCaseSpec.standard_case(2, cells=200), 3)
    assert len(res.klds) == 3 and res.phis[0].shape == (200, 200)
    path = write_kld_csv([res], tmp_path / "k.csv")
    rows = path.read_text().splitlines()
    assert rows[0] == "case,n,kld" and len(rows) == 4
    with pytest.raises(GridResolutionError):
        run_illustrative_case(GaussianCaseSpec.standard_case(1, cells=8), 2)
