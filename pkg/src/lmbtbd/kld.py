"""KLD machinery for labelled RFS densities on finite state grids.

A :class:`DiscreteLabelledDensity` stores a label-set PMF together with one
conditional table per label set.  All tables share a 1-D grid of ``G`` cells
of measure ``cell``; the conditional of a set with ``t`` labels has shape
``(G,) * t`` with axes in ascending label order.  Using the same grid for
every axis makes the tables closed under permutation of their arguments,
which the label-switching update needs.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import multivariate_normal, norm

from .exceptions import AbsoluteContinuityError, GridResolutionError
from .rfs import LabelSet, all_subsets, as_label_set, enumerate_permutations, lmb_log_pmf

PMF_TOL = 1e-12
TABLE_TOL = 1e-9


def permute_table(table: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Return ``g`` with ``g(x_1..x_t) = table(x_perm[0], ..., x_perm[t-1])``."""
    return np.transpose(table, np.argsort(perm))


def symmetrize(table: np.ndarray) -> np.ndarray:
    """Sum of ``table`` over all permutations of its arguments."""
    t = table.ndim
    if t <= 1:
        return table.copy()
    return sum(permute_table(table, p) for p in enumerate_permutations(t, cap=t))


def _table_kld(p: np.ndarray, q: np.ndarray, measure: float, where="") -> float:
    support = p > 0
    if np.any(q[support] <= 0):
        idx = tuple(int(i) for i in np.argwhere(support & (q <= 0))[0])
        raise AbsoluteContinuityError(f"second density vanishes at cell {idx}{where}")
    return float(np.sum(p[support] * np.log(p[support] / q[support])) * measure)


def _pmf_kld(p: Dict[LabelSet, float], q: Dict[LabelSet, float]) -> float:
    total = 0.0
    for L, pl in p.items():
        if pl <= 0:
            continue
        ql = q.get(L, 0.0)
        if ql <= 0:
            raise AbsoluteContinuityError(f"label set {L} has P_p > 0 but P_q = 0")
        total += pl * np.log(pl / ql)
    return float(total)


@dataclass
class DiscreteLabelledDensity:
    """Exact labelled RFS density with a finite label space and state grid.

    Parameters
    ----------
    pmf : dict
        Label set (ascending tuple) to probability.
    conditionals : dict
        Label set to conditional table of shape ``(G,) * len(L)``.  The
        empty set maps to a 0-d array holding 1.
    cell : float
        Measure of one grid cell, 1 for purely discrete supports.
    """

    pmf: Dict[LabelSet, float]
    conditionals: Dict[LabelSet, np.ndarray]
    cell: float = 1.0

    def __post_init__(self):
        self.pmf = {as_label_set(L): float(v) for L, v in self.pmf.items()}
        self.conditionals = {as_label_set(L): np.asarray(v, dtype=float)
                             for L, v in self.conditionals.items()}
        if any(v < 0 for v in self.pmf.values()):
            raise ValueError("negative label-set probability")
        if abs(sum(self.pmf.values()) - 1.0) > PMF_TOL:
            raise ValueError(f"label-set PMF sums to {sum(self.pmf.values())}")
        sizes = set()
        for L, tab in self.conditionals.items():
            if tab.ndim != len(L):
                raise ValueError(f"table for {L} has {tab.ndim} axes")
            sizes.update(tab.shape)
            if np.any(tab < 0):
                raise ValueError(f"negative conditional density for {L}")
            mass = tab.sum() * self.cell ** len(L)
            if self.pmf.get(L, 0.0) > 0 and abs(mass - 1.0) > TABLE_TOL:
                raise ValueError(f"conditional for {L} integrates to {mass}")
        for L, v in self.pmf.items():
            if v > 0 and L not in self.conditionals:
                raise ValueError(f"missing conditional for label set {L}")
        if len(sizes) > 1:
            raise ValueError("conditional tables use different grids")

    @property
    def label_space(self) -> LabelSet:
        return tuple(sorted({l for L in self.pmf for l in L}))

    @property
    def grid_size(self) -> int:
        for tab in self.conditionals.values():
            if tab.ndim:
                return tab.shape[0]
        return 0

    def marginal(self, L: LabelSet, label: int) -> np.ndarray:
        """Marginal table of the state carrying ``label`` given label set ``L``."""
        tab = self.conditionals[L]
        k = L.index(label)
        other = tuple(a for a in range(tab.ndim) if a != k)
        return tab.sum(axis=other) * self.cell ** len(other)


@dataclass
class LmbDiscrete:
    """LMB density on a grid: existences and one marginal table per label.

    Labels with zero existence are kept (so PMF domains stay aligned across
    iterations) and listed in ``empty_labels``; their marginal is all zeros.
    """

    existence: Dict[int, float]
    marginals: Dict[int, np.ndarray]
    cell: float = 1.0
    empty_labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for j, m in self.marginals.items():
            if j in self.empty_labels:
                continue
            mass = m.sum() * self.cell
            if abs(mass - 1.0) > TABLE_TOL:
                raise ValueError(f"marginal of label {j} integrates to {mass}")

    @property
    def labels(self) -> LabelSet:
        return tuple(sorted(self.existence))

    def pmf(self, L: LabelSet) -> float:
        return float(np.exp(lmb_log_pmf(self.existence, L)))

    def joint(self, L: LabelSet) -> np.ndarray:
        """Product-form conditional table for label set ``L``."""
        tab = np.array(1.0)
        for j in L:
            tab = np.multiply.outer(tab, self.marginals[j])
        return tab

    def to_density(self) -> DiscreteLabelledDensity:
        pmf, cond = {}, {}
        for L in all_subsets(self.labels):
            pmf[L] = self.pmf(L)
            if pmf[L] > 0:
                cond[L] = self.joint(L)
        # lmb pmf sums to one up to rounding
        total = sum(pmf.values())
        pmf = {L: v / total for L, v in pmf.items()}
        return DiscreteLabelledDensity(pmf, cond, self.cell)


def kld_decomposed(p: DiscreteLabelledDensity, q) -> float:
    """KLD of two labelled densities via the PMF + conditionals split.

    ``D(p||q) = D(P_p||P_q) + sum_L P_p(L) D(p(.;L)||q(.;L))``.  ``q`` may be
    a :class:`DiscreteLabelledDensity` or an :class:`LmbDiscrete`.
    """
    if isinstance(q, LmbDiscrete):
        q_pmf = {L: q.pmf(L) for L in p.pmf}
        q_cond = lambda L: q.joint(L)
    else:
        q_pmf = q.pmf
        q_cond = lambda L: q.conditionals[L]
    total = _pmf_kld(p.pmf, q_pmf)
    for L, pl in p.pmf.items():
        if pl <= 0 or not L:
            continue
        total += pl * _table_kld(p.conditionals[L], q_cond(L), p.cell ** len(L),
                                 where=f" for label set {L}")
    return total


def best_lmb(phi: DiscreteLabelledDensity, labels: Optional[Sequence[int]] = None) -> LmbDiscrete:
    """LMB density closest in KLD to ``phi``.

    ``p_j`` is the probability that label ``j`` is present and the marginal
    of ``j`` is the ``P(L)``-weighted mixture of its marginals over every
    label set containing it.
    """
    labels = as_label_set(labels) if labels is not None else phi.label_space
    G = phi.grid_size
    existence, marginals, empty = {}, {}, set()
    for j in labels:
        pj = 0.0
        acc = np.zeros(G)
        for L, pl in phi.pmf.items():
            if j in L and pl > 0:
                pj += pl
                acc += pl * phi.marginal(L, j)
        existence[j] = min(pj, 1.0)
        if pj > 0:
            marginals[j] = acc / (acc.sum() * phi.cell)
        else:
            marginals[j] = acc
            empty.add(j)
    return LmbDiscrete(existence, marginals, phi.cell, frozenset(empty))


def optimal_in_family(nu: LmbDiscrete, pi_check: np.ndarray, L: LabelSet) -> np.ndarray:
    """Conditional for ``L`` minimising the KLD to ``nu`` inside [pi].

    ``pi_check`` is the permutation-symmetric table ``sum_p pi(Gamma_p x; L)``.
    The result is ``alpha * pi_check`` with ``alpha = nu(x; L) / nu_check(x; L)``.
    """
    L = as_label_set(L)
    if len(L) <= 1:
        return np.array(pi_check, dtype=float, copy=True)
    nu_tab = nu.joint(L)
    nu_check = symmetrize(nu_tab)
    bad = (pi_check > 0) & (nu_check <= 0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise AbsoluteContinuityError(f"symmetrised LMB vanishes at cell {idx} for {L}")
    out = np.zeros_like(pi_check, dtype=float)
    ok = pi_check > 0
    out[ok] = nu_tab[ok] / nu_check[ok] * pi_check[ok]
    return out


def improve_lmb(pi: DiscreteLabelledDensity, n_iter: int, return_densities=False):
    """Iterated LMB improvement by alternating KLD minimisations.

    Returns the LMB approximations ``nu^0 .. nu^{n_iter-1}`` and the KLD
    ``D(phi^n || nu^n)`` for each.  With ``return_densities`` the labelled
    densities ``phi^0 .. phi^{n_iter-1}`` are returned as a third element.
    The label PMF and every single-target conditional stay those of ``pi``.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    symmetric = {L: symmetrize(tab) for L, tab in pi.conditionals.items() if len(L) >= 2}
    phi = pi
    nus, klds, phis = [], [], []
    for _ in range(n_iter):
        nu = best_lmb(phi, pi.label_space)
        nus.append(nu)
        klds.append(kld_decomposed(phi, nu))
        phis.append(phi)
        cond = dict(phi.conditionals)
        for L, tab in symmetric.items():
            cond[L] = optimal_in_family(nu, tab, L)
        phi = DiscreteLabelledDensity(pi.pmf, cond, pi.cell)
    if return_densities:
        return nus, klds, phis
    return nus, klds


# Label-set PMFs of the two standard two-target cases.
CASE_PMFS = {
    1: {(): 0.1, (1,): 0.05, (2,): 0.05, (1, 2): 0.8},
    2: {(): 0.1, (1,): 0.3, (2,): 0.3, (1, 2): 0.3},
}


@dataclass
class GaussianCaseSpec:
    """Two-label Gaussian example evaluated on a grid.

    The joint of labels (1, 2) is a correlated bivariate Gaussian whose
    marginals equal the single-target densities.
    """

    pmf: Dict[LabelSet, float]
    means: Tuple[float, float] = (10.0, 11.0)
    sigmas: Tuple[float, float] = (1.0, 1.0)
    rho: float = -0.8
    cells: int = 400
    extent: float = 6.0
    name: str = ""

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if abs(sum(self.pmf.values()) - 1.0) > PMF_TOL:
            raise ValueError("case PMF must sum to one")
        if self.extent < 5:
            raise ValueError("grid must cover at least 5 standard deviations")

    @classmethod
    def standard_case(cls, case: int, **overrides) -> "GaussianCaseSpec":
        if case not in CASE_PMFS:
            raise ValueError(f"unknown case {case}; choose from {sorted(CASE_PMFS)}")
        return cls(pmf=dict(CASE_PMFS[case]), name=str(case), **overrides)

    def grid(self) -> Tuple[np.ndarray, float]:
        s = max(self.sigmas)
        lo = min(self.means) - self.extent * s
        hi = max(self.means) + self.extent * s
        edges = np.linspace(lo, hi, self.cells + 1)
        return 0.5 * (edges[1:] + edges[:-1]), edges[1] - edges[0]

    def density(self) -> DiscreteLabelledDensity:
        x, dx = self.grid()
        m1, m2 = self.means
        s1, s2 = self.sigmas
        cov = [[s1 ** 2, self.rho * s1 * s2], [self.rho * s1 * s2, s2 ** 2]]
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        joint = multivariate_normal(self.means, cov).pdf(np.dstack([X1, X2]))
        single1 = norm(m1, s1).pdf(x)
        single2 = norm(m2, s2).pdf(x)
        cond = {
            (): np.array(1.0),
            (1,): single1 / (single1.sum() * dx),
            (2,): single2 / (single2.sum() * dx),
            (1, 2): joint / (joint.sum() * dx * dx),
        }
        return DiscreteLabelledDensity(self.pmf, cond, dx)

    def closed_form_initial_kld(self) -> float:
        """D(phi^0 || nu^0): PMF term plus the Gaussian correlation term."""
        p1 = self.pmf.get((1,), 0) + self.pmf.get((1, 2), 0)
        p2 = self.pmf.get((2,), 0) + self.pmf.get((1, 2), 0)
        nu = LmbDiscrete({1: p1, 2: p2}, {1: np.array([1.0]), 2: np.array([1.0])})
        pmf_term = _pmf_kld(self.pmf, {L: nu.pmf(L) for L in self.pmf})
        return pmf_term - 0.5 * self.pmf.get((1, 2), 0) * np.log(1 - self.rho ** 2)


@dataclass
class IllustrativeResult:
    case: str
    klds: List[float]
    grid: np.ndarray
    phis: List[np.ndarray]
    nus: List[np.ndarray]


def run_illustrative_case(spec: GaussianCaseSpec, n_iter: int = 6,
                          self_check_tol: float = 0.005) -> IllustrativeResult:
    """Run the iterated improvement on the grid version of ``spec``.

    Raises
    ------
    GridResolutionError
        If the quadrature KLD at n = 0 is further than ``self_check_tol``
        from its closed form.
    """
    pi = spec.density()
    nus, klds, phis = improve_lmb(pi, n_iter, return_densities=True)
    expected = spec.closed_form_initial_kld()
    if abs(klds[0] - expected) > self_check_tol:
        raise GridResolutionError(
            f"grid KLD {klds[0]:.4f} differs from closed form {expected:.4f}; "
            f"increase cells (now {spec.cells})"
        )
    x, _ = spec.grid()
    return IllustrativeResult(
        case=spec.name,
        klds=[float(k) for k in klds],
        grid=x,
        phis=[phi.conditionals[(1, 2)] for phi in phis],
        nus=[nu.joint((1, 2)) for nu in nus],
    )


def write_kld_csv(results: Sequence[IllustrativeResult], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "n", "kld"])
        for res in results:
            for n, k in enumerate(res.klds):
                w.writerow([res.case, n, f"{k:.6f}"])
    return path


def write_grid_csv(res: IllustrativeResult, n: int, path, stride: int = 1) -> Path:
    """Dump ``phi^n(.;1,2)`` and ``nu^n(.;1,2)`` as (x1, x2, phi, nu) rows."""
    path = Path(path)
    idx = np.arange(0, res.grid.size, stride)
    phi, nu = res.phis[n], res.nus[n]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "phi", "nu"])
        for i in idx:
            for k in idx:
                w.writerow([f"{res.grid[i]:.6g}", f"{res.grid[k]:.6g}",
                            f"{phi[i, k]:.6e}", f"{nu[i, k]:.6e}"])
    return path
