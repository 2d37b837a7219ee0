"""Estimator-style wrappers around the filter recursions.

The trackers follow the scikit-learn parameter conventions: all
hyperparameters are constructor arguments (so ``get_params`` and
``set_params`` work), ``fit`` consumes a whole measurement sequence,
``partial_fit`` a single measurement, and fitted state lives in
attributes with a trailing underscore.
"""
import time
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .baselines import SirState, sir_initial_state, sir_pf_step, u_mcmc_refine
from .gpp import GppConfig, gpp_step, project_lmb
from .mcmc import IlmbConfig, ilmb_mcmc
from .metrics import Estimate, extract_states, map_cardinality
from .models import STATE_DIM, AcousticLikelihood, InitialTrack, ScenarioModel
from .rfs import DEFAULT_PERMUTATION_CAP, LmbBelief, ParticlePosterior
from .rng import Streams
from .validation import check_measurement

GPP_VARIANTS = ("gpp", "gpp+umcmc", "gpp+ilmb")
VARIANTS = GPP_VARIANTS + ("sir",)


def initial_belief(tracks: Sequence[InitialTrack], n_particles: int, rng,
                   n_dim: int = STATE_DIM) -> LmbBelief:
    """LMB belief with one Gaussian-sampled cloud per track, labels 1..K."""
    existence, clouds = {}, {}
    for k, tr in enumerate(tracks, start=1):
        existence[k] = float(tr.existence)
        clouds[k] = tr.mean + np.sqrt(tr.cov_scale) * rng.standard_normal((n_particles, n_dim))
    return LmbBelief(existence, clouds)


class _Tracker(BaseEstimator):
    """Shared bookkeeping: step loop, timing and state extraction."""

    def _streams(self) -> Streams:
        return Streams.wrap(self.random_state)

    def _tracks(self) -> List[InitialTrack]:
        return list(self.model.initial_tracks if self.initial_tracks is None
                    else self.initial_tracks)

    def reset(self):
        self.root_ = self._streams()
        self.step_ = 0
        self.estimates_: List[Estimate] = []
        self.wall_ms_: List[float] = []
        self._initialise()
        return self

    def fit(self, Z, y=None):
        """Run the filter over measurements ``Z`` of shape (n_steps, n_sensors)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        self.reset()
        for z in Z:
            self.partial_fit(z)
        return self

    def partial_fit(self, z, y=None):
        """Process one measurement vector."""
        if not hasattr(self, "step_"):
            self.reset()
        z = check_measurement(z, self.model.sensors.n_sensors)
        ell = AcousticLikelihood(z, self.model.sensors)
        self.step_ += 1
        t0 = time.perf_counter()
        post = self._step(ell, self.root_.child(1, self.step_))
        n = map_cardinality(post)
        est = extract_states(post, n, self.root_.seed_int(2, self.step_), self.kmeans_init)
        self.wall_ms_.append(1e3 * (time.perf_counter() - t0))
        self.posterior_ = post
        self.estimates_.append(est)
        return self

    def predict(self, X=None) -> List[Estimate]:
        """Per-step state estimates of everything processed so far."""
        return list(self.estimates_)


class GPPFilter(_Tracker):
    """LMB particle filter with optional MCMC refinement.

    Parameters
    ----------
    model : ScenarioModel
    variant : {"gpp", "gpp+umcmc", "gpp+ilmb"}
    n_particles : int
    n_outer, n_sweeps : int
        ILMB-MCMC iterations (``I1``) and kernel sweeps per iteration (``I2``).
    umcmc_steps : int
        Metropolis-Hastings steps of the U-MCMC variant.
    permutation_cap : int
        Largest label set moved by ILMB-MCMC.
    prune_threshold : float
        Predicted existence below which a label is dropped.
    gate_radius : float or None
        If set, ILMB-MCMC only moves label sets with two label means
        within this distance (m).
    move_singletons : bool
        Whether ILMB-MCMC also moves single-target label sets.
    kmeans_init : int
        k-means restarts of the state extractor.
    initial_tracks : list of InitialTrack or None
        Overrides ``model.initial_tracks``.
    random_state : int, Generator, Streams or None
    """

    def __init__(self, model: Optional[ScenarioModel] = None, variant="gpp", n_particles=500,
                 n_outer=1, n_sweeps=20, umcmc_steps=20,
                 permutation_cap=DEFAULT_PERMUTATION_CAP, prune_threshold=1e-4,
                 gate_radius=None, move_singletons=True, kmeans_init=10,
                 initial_tracks=None, random_state=None):
        self.model = model
        self.variant = variant
        self.n_particles = n_particles
        self.n_outer = n_outer
        self.n_sweeps = n_sweeps
        self.umcmc_steps = umcmc_steps
        self.permutation_cap = permutation_cap
        self.prune_threshold = prune_threshold
        self.gate_radius = gate_radius
        self.move_singletons = move_singletons
        self.kmeans_init = kmeans_init
        self.initial_tracks = initial_tracks
        self.random_state = random_state

    def _initialise(self):
        if self.variant not in GPP_VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'; options: {', '.join(GPP_VARIANTS)}")
        if self.model is None:
            raise ValueError("a ScenarioModel is required")
        tracks = self._tracks()
        self.belief_ = initial_belief(tracks, self.n_particles, self.root_.get(0))
        self.next_label_ = len(tracks) + 1
        self._config = GppConfig(self.n_particles, self.prune_threshold)
        self._refine = self._make_refinement()

    def _make_refinement(self):
        Q = self.model.motion.Q
        if self.variant == "gpp+ilmb":
            cfg = IlmbConfig(self.n_outer, self.n_sweeps, Q, self.permutation_cap,
                             self.gate_radius, self.move_singletons)

            def refine(post, prior, ell, rng):
                return ilmb_mcmc(post, prior, ell, cfg, rng, return_posterior=True)
            return refine
        if self.variant == "gpp+umcmc":
            steps = self.umcmc_steps

            def refine(post, prior, ell, rng):
                out = u_mcmc_refine(post, prior, ell, steps, Q, rng)
                return project_lmb(out), out
            return refine
        return None

    def _step(self, ell, streams) -> ParticlePosterior:
        res = gpp_step(self.belief_, ell, self.model.motion, self.model.births, self._config,
                       streams, self.next_label_, self._refine)
        self.belief_ = res.belief
        self.next_label_ = res.prior.next_label
        self.prior_ = res.prior
        return res.refined


class SIRFilter(_Tracker):
    """Labelled bootstrap particle filter with prior existence sampling.

    Parameters
    ----------
    model : ScenarioModel
    n_particles : int
    kmeans_init : int
    initial_tracks : list of InitialTrack or None
    random_state : int, Generator, Streams or None
    """

    variant = "sir"

    def __init__(self, model: Optional[ScenarioModel] = None, n_particles=10000,
                 kmeans_init=10, initial_tracks=None, random_state=None):
        self.model = model
        self.n_particles = n_particles
        self.kmeans_init = kmeans_init
        self.initial_tracks = initial_tracks
        self.random_state = random_state

    def _initialise(self):
        if self.model is None:
            raise ValueError("a ScenarioModel is required")
        self.state_: SirState = sir_initial_state(self._tracks(), self.n_particles,
                                                  self.root_.get(0))

    def _step(self, ell, streams) -> ParticlePosterior:
        res = sir_pf_step(self.state_, ell, self.model.motion, self.model.births, streams)
        self.state_ = res.state
        self.belief_ = res.belief
        return res.posterior


def make_filter(variant: str, model: ScenarioModel, **params) -> _Tracker:
    """Build a tracker by variant name."""
    if variant == "sir":
        return SIRFilter(model, **params)
    if variant in GPP_VARIANTS:
        return GPPFilter(model, variant=variant, **params)
    raise ValueError(f"unknown filter '{variant}'; options: {', '.join(VARIANTS)}")
