"""OSPA metric, MAP cardinality and k-means state extraction."""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .models import POSITION_INDEX
from .rfs import ParticlePosterior
from .validation import check_positive

log = logging.getLogger(__name__)

OSPA_CUTOFF = 120.0
OSPA_ORDER = 2.0


@dataclass(frozen=True)
class OspaParams:
    c: float = OSPA_CUTOFF
    p: float = OSPA_ORDER

    def __post_init__(self):
        check_positive(self.c, "OSPA cutoff")
        if self.p < 1:
            raise ValueError(f"OSPA order must be >= 1, got {self.p}")


def _points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros((0, X.shape[-1] if X.ndim == 2 else 2))
    return X.reshape(-1, X.shape[-1]) if X.ndim > 1 else X.reshape(1, -1)


def ospa(X, Y, params: OspaParams = OspaParams()) -> float:
    """OSPA distance between two finite point sets.

    Parameters
    ----------
    X, Y : array_like, shape (m, d) and (n, d)
    params : OspaParams
        Cutoff ``c`` and order ``p``.

    Returns
    -------
    float
        ``0`` when both sets are empty.
    """
    X, Y = _points(X), _points(Y)
    m, n = X.shape[0], Y.shape[0]
    if m == 0 and n == 0:
        return 0.0
    if m == 0 or n == 0:
        return float(params.c)
    c, p = params.c, params.p
    d = np.minimum(cdist(X, Y), c) ** p
    rows, cols = linear_sum_assignment(d)
    # fsum is order-free, which keeps ospa(X, Y) == ospa(Y, X) exactly
    total = math.fsum(d[rows, cols]) + c ** p * abs(m - n)
    return float((total / max(m, n)) ** (1.0 / p))


def map_cardinality(post: ParticlePosterior) -> int:
    """Most frequent particle cardinality; ties go to the smaller one."""
    card = post.cardinalities()
    if card.size == 0:
        return 0
    hist = np.bincount(card, weights=post.weights())
    return int(np.argmax(hist))


@dataclass
class Estimate:
    cardinality: int
    positions: np.ndarray
    duplicated: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if self.positions.shape[0] != self.cardinality:
            raise ValueError("one position per estimated target required")


def extract_states(post: ParticlePosterior, n: int, random_state=None, n_init: int = 10,
                   position_index=POSITION_INDEX) -> Estimate:
    """Point estimate of ``n`` target positions by k-means on pooled particles.

    Labels are discarded first: every per-target position of every
    particle enters one point cloud.  Repeated points are merged and
    passed as sample weights, which gives the same objective as clustering
    the raw cloud.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return Estimate(0, np.zeros((0, 2)))
    pts = post.pooled_positions(position_index)
    if pts.shape[0] == 0:
        raise ValueError("posterior holds no target states")
    if n == 1:
        return Estimate(1, pts.mean(axis=0)[None])
    uniq, counts = np.unique(pts, axis=0, return_counts=True)
    if uniq.shape[0] < n:
        log.warning("only %d distinct points for %d clusters; centroids duplicated",
                    uniq.shape[0], n)
        centres = np.concatenate([uniq, np.repeat(uniq[:1], n - uniq.shape[0], axis=0)])
        return Estimate(n, centres, duplicated=True)
    km = KMeans(n_clusters=n, n_init=n_init, random_state=random_state)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(uniq, sample_weight=counts.astype(float))
    centres = km.cluster_centers_
    order = np.lexsort(centres.T[::-1])
    return Estimate(n, centres[order])


def rmsospa(values: Sequence[float], axis: int = 0) -> np.ndarray:
    """Root mean square of OSPA values across runs."""
    v = np.asarray(values, dtype=float)
    return np.sqrt(np.mean(v ** 2, axis=axis))
