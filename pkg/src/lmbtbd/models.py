"""Dynamic, birth and acoustic sensor-network models, plus scenario fixtures.

States are ``[p_x, v_x, p_y, v_y]`` in SI units.  The measurement of sensor
``m`` is the square root of the summed received power of all targets plus
Gaussian noise, with each target's power saturating at ``P0`` inside the
distance ``d0``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .validation import check_positive, check_probability, check_rng

POSITION_INDEX = (0, 2)
STATE_DIM = 4


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """A factor ``S`` with ``S @ S.T == cov`` that tolerates singular ``cov``."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov_inv: np.ndarray, log_norm: float):
    """Log-density of N(mean, cov) using a precomputed inverse and normaliser.

    ``x`` and ``mean`` broadcast over leading axes; the last axis is the state.
    """
    d = x - mean
    return log_norm - 0.5 * np.einsum("...i,ij,...j->...", d, cov_inv, d)


def gaussian_log_norm(cov: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("covariance is not positive definite")
    return -0.5 * (cov.shape[0] * np.log(2 * np.pi) + logdet)


@dataclass(frozen=True)
class MotionModel:
    """Nearly-constant velocity model with survival probability ``gamma``."""

    tau: float = 0.5
    q: float = 3.24
    gamma: float = 0.99

    def __post_init__(self):
        check_positive(self.tau, "tau")
        check_positive(self.q, "q", strict=False)
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    @property
    def F(self) -> np.ndarray:
        return np.kron(np.eye(2), np.array([[1.0, self.tau], [0.0, 1.0]]))

    @property
    def Q(self) -> np.ndarray:
        t = self.tau
        return self.q * np.kron(np.eye(2), np.array([[t ** 3 / 3, t ** 2 / 2], [t ** 2 / 2, t]]))

    def propagate_mean(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.F.T


def transition_sample(x, model: MotionModel, rng=None) -> np.ndarray:
    """Draw ``F x + v`` with ``v ~ N(0, Q)``; ``x`` may hold many states."""
    rng = check_rng(rng)
    x = np.asarray(x, dtype=float)
    noise = rng.standard_normal(x.shape) @ _psd_sqrt(model.Q).T
    return model.propagate_mean(x) + noise


def transition_logpdf(x_next, x, model: MotionModel) -> np.ndarray:
    Q = model.Q
    return gaussian_logpdf(np.asarray(x_next, float), model.propagate_mean(x),
                           np.linalg.inv(Q), gaussian_log_norm(Q))


@dataclass
class SensorNetwork:
    """Acoustic amplitude sensors.

    Attributes
    ----------
    positions : ndarray, shape (M, 2)
    P0 : float
        Saturation power (W).
    d0 : float
        Distance (m) inside which the received power saturates at ``P0``.
    sigma2 : float
        Measurement noise variance.
    """

    positions: np.ndarray
    P0: float = 15.85
    d0: float = 20.0
    sigma2: float = 1.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if self.positions.shape[0] < 1:
            raise ValueError("need at least one sensor")
        for name in ("P0", "d0", "sigma2"):
            check_positive(getattr(self, name), name)

    @property
    def n_sensors(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def grid(cls, x_range, y_range, nx=21, ny=12, **kw) -> "SensorNetwork":
        xs = np.linspace(*x_range, nx)
        ys = np.linspace(*y_range, ny)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return cls(np.column_stack([X.ravel(), Y.ravel()]), **kw)

    def power(self, states: np.ndarray) -> np.ndarray:
        """Received power per sensor for each state: shape (..., M)."""
        states = np.asarray(states, dtype=float)
        dx = states[..., POSITION_INDEX[0], None] - self.positions[:, 0]
        dy = states[..., POSITION_INDEX[1], None] - self.positions[:, 1]
        d2 = dx * dx + dy * dy
        r2 = self.d0 ** 2
        return np.where(d2 <= r2, self.P0, self.P0 * r2 / np.maximum(d2, r2))

    def amplitude(self, states: np.ndarray) -> np.ndarray:
        """Noiseless measurement for sets of states of shape (..., t, n_x)."""
        states = np.asarray(states, dtype=float)
        if states.shape[-2] == 0:
            return np.zeros(states.shape[:-2] + (self.n_sensors,))
        return np.sqrt(self.power(states).sum(axis=-2))


def measure(targets, net: SensorNetwork, rng=None) -> np.ndarray:
    """Simulate one measurement vector for the set of target states."""
    rng = check_rng(rng)
    targets = np.asarray(targets, dtype=float).reshape(-1, STATE_DIM)
    return net.amplitude(targets) + np.sqrt(net.sigma2) * rng.standard_normal(net.n_sensors)


def log_likelihood(z, targets, net: SensorNetwork) -> np.ndarray:
    """Log-likelihood of ``z`` for target sets of shape (..., t, n_x).

    Sensor terms are accumulated in sensor order.
    """
    z = np.asarray(z, dtype=float)
    resid = z - net.amplitude(targets)
    const = -0.5 * net.n_sensors * np.log(2 * np.pi * net.sigma2)
    return const - 0.5 * np.sum(resid * resid, axis=-1) / net.sigma2


class AcousticLikelihood:
    """Set likelihood of one measurement: ``ell(states) -> log-likelihood``.

    Called with an array of shape (..., t, n_x) holding a batch of target
    sets of equal cardinality ``t``; returns an array of shape (...).
    """

    def __init__(self, z, net: SensorNetwork):
        self.z = np.asarray(z, dtype=float)
        self.net = net

    def __call__(self, states) -> np.ndarray:
        return log_likelihood(self.z, states, self.net)


@dataclass
class BirthSite:
    prob: float
    mean: np.ndarray
    cov_scale: float = 100.0

    def __post_init__(self):
        check_probability(self.prob, "birth probability")
        self.mean = np.asarray(self.mean, dtype=float)

    @property
    def cov(self) -> np.ndarray:
        return self.cov_scale * np.eye(self.mean.size)


@dataclass
class BirthModel:
    sites: List[BirthSite] = field(default_factory=list)

    def __len__(self):
        return len(self.sites)


@dataclass
class TrueTarget:
    """Alive for steps ``birth <= k < death``; ``states[k - birth]`` at step k."""

    birth: int
    death: int
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.death <= self.birth:
            raise ValueError("death step must come after birth step")
        if self.states.shape[0] != self.death - self.birth:
            raise ValueError("one state per alive step required")

    def alive(self, k: int) -> bool:
        return self.birth <= k < self.death

    def state(self, k: int) -> np.ndarray:
        return self.states[k - self.birth]


@dataclass
class GroundTruth:
    targets: List[TrueTarget]
    n_steps: int

    def states_at(self, k: int) -> np.ndarray:
        alive = [t.state(k) for t in self.targets if t.alive(k)]
        return np.array(alive).reshape(-1, STATE_DIM)

    def cardinality(self, k: int) -> int:
        return sum(t.alive(k) for t in self.targets)


@dataclass
class InitialTrack:
    """Gaussian prior of one track at step 0."""

    mean: np.ndarray
    cov_scale: float = 100.0
    existence: float = 1.0
    perturb: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)


@dataclass
class ScenarioModel:
    name: str
    motion: MotionModel
    sensors: SensorNetwork
    births: BirthModel
    initial_tracks: List[InitialTrack]
    n_steps: int

    def to_dict(self, truth: Optional[GroundTruth] = None) -> dict:
        d = {
            "name": self.name,
            "tau": self.motion.tau,
            "q": self.motion.q,
            "gamma": self.motion.gamma,
            "P0": self.sensors.P0,
            "d0": self.sensors.d0,
            "sigma2": self.sensors.sigma2,
            "n_steps": self.n_steps,
            "sensors": self.sensors.positions.tolist(),
            "births": [{"prob": s.prob, "mean": s.mean.tolist(), "cov_scale": s.cov_scale}
                       for s in self.births.sites],
            "initial": [{"mean": t.mean.tolist(), "cov_scale": t.cov_scale,
                         "existence": t.existence, "perturb": t.perturb}
                        for t in self.initial_tracks],
        }
        if truth is not None:
            d["truth"] = [{"birth": t.birth, "death": t.death, "states": t.states.tolist()}
                          for t in truth.targets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Tuple["ScenarioModel", Optional[GroundTruth]]:
        model = cls(
            name=d.get("name", "custom"),
            motion=MotionModel(d["tau"], d["q"], d["gamma"]),
            sensors=SensorNetwork(np.array(d["sensors"]), d["P0"], d["d0"], d["sigma2"]),
            births=BirthModel([BirthSite(b["prob"], b["mean"], b.get("cov_scale", 100.0))
                               for b in d.get("births", [])]),
            initial_tracks=[InitialTrack(t["mean"], t.get("cov_scale", 100.0),
                                         t.get("existence", 1.0), t.get("perturb", True))
                            for t in d.get("initial", [])],
            n_steps=d["n_steps"],
        )
        truth = None
        if "truth" in d:
            truth = GroundTruth([TrueTarget(t["birth"], t["death"], t["states"])
                                 for t in d["truth"]], d["n_steps"])
        return model, truth


def save_scenario(path, model: ScenarioModel, truth: Optional[GroundTruth]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(truth), indent=1))
    return path


def load_scenario(path) -> Tuple[ScenarioModel, Optional[GroundTruth]]:
    return ScenarioModel.from_dict(json.loads(Path(path).read_text()))


def _waypoint_track(waypoints: Sequence[Tuple[int, float, float]], n_steps: int, tau: float,
                    birth: int = 0) -> np.ndarray:
    """States for steps ``birth..n_steps-1`` by piecewise linear interpolation.

    ``waypoints`` are (step, x, y).  Velocities are the finite-difference
    slopes, so the tracks are consistent with the constant-velocity model
    between waypoints.
    """
    ks = np.array([w[0] for w in waypoints], dtype=float)
    xs = np.array([w[1] for w in waypoints], dtype=float)
    ys = np.array([w[2] for w in waypoints], dtype=float)
    steps = np.arange(birth, n_steps, dtype=float)
    px = np.interp(steps, ks, xs)
    py = np.interp(steps, ks, ys)
    # slope of the active segment
    seg = np.clip(np.searchsorted(ks, steps, side="right") - 1, 0, ks.size - 2)
    vx = (xs[seg + 1] - xs[seg]) / ((ks[seg + 1] - ks[seg]) * tau)
    vy = (ys[seg + 1] - ys[seg]) / ((ks[seg + 1] - ks[seg]) * tau)
    return np.column_stack([px, vx, py, vy])


def _region_grid(truth: GroundTruth, extra_points, margin: float, nx: int, ny: int, **kw):
    pts = [t.states[:, list(POSITION_INDEX)] for t in truth.targets]
    pts.append(np.atleast_2d(np.asarray(extra_points, float)))
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = margin * (hi - lo)
    return SensorNetwork.grid((lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]),
                              nx, ny, **kw)


SCENARIOS = ("crossing", "births")

# Waypoints (step, x, y): three tracks merge into a narrow corridor around
# steps 20-55 and fan out afterwards; the first one dies at step 85.
CROSSING_WAYPOINTS = [
    [(0, 100.0, 380.0), (22, 215.0, 312.0), (55, 380.0, 312.0), (100, 560.0, 420.0)],
    [(0, 100.0, 300.0), (22, 215.0, 300.0), (55, 380.0, 300.0), (100, 600.0, 300.0)],
    [(0, 100.0, 220.0), (22, 215.0, 288.0), (55, 380.0, 288.0), (100, 560.0, 180.0)],
]
CROSSING_DEATHS = (85, 101, 101)
SPURIOUS_MEAN = (600.0, 0.0, 200.0, 0.0)

BIRTH_MEANS = [(85.0, 2.0, 140.0, 2.0), (250.0, 0.0, 280.0, 0.0),
               (145.0, 0.0, 575.0, 0.0), (420.0, 0.0, 200.0, 0.0)]
BIRTH_STEPS = (5, 10, 15, 20)
DEATH_STEPS = (90, 60, 80, 50)
# Constant velocities (m/s) of the born targets; tracks 1/2 and 3/4 cross.
BIRTH_VELOCITIES = [(2.0, 2.0), (-2.5, 3.0), (3.0, -3.0), (-3.0, 1.5)]


def build_scenario(name: str, *, n_sensors_x: int = 21, n_sensors_y: int = 12,
                   motion: Optional[MotionModel] = None, birth_prob: float = 1e-3,
                   region_margin: float = 0.1) -> Tuple[ScenarioModel, GroundTruth]:
    """Build one of the two experiment scenarios.

    ``crossing``: three targets that travel together and separate, one of
    them dying at step 85, and an extra non-existent track prior at
    ``SPURIOUS_MEAN``.  ``births``: four targets born at steps 5, 10, 15, 20
    near the birth-site means and dying at steps 90, 60, 80, 50.
    The sensors form a uniform grid over the region spanned by the tracks.
    """
    motion = motion or MotionModel()
    if name == "crossing":
        n_steps = 101
        targets = []
        for wp, death in zip(CROSSING_WAYPOINTS, CROSSING_DEATHS):
            states = _waypoint_track(wp, n_steps, motion.tau)
            targets.append(TrueTarget(0, death, states[:death]))
        truth = GroundTruth(targets, n_steps)
        sensors = _region_grid(truth, [[SPURIOUS_MEAN[0], SPURIOUS_MEAN[2]]], region_margin,
                               n_sensors_x, n_sensors_y)
        initial = [InitialTrack(t.states[0], 100.0, 1.0, True) for t in targets]
        initial.append(InitialTrack(np.array(SPURIOUS_MEAN), 100.0, 1.0, False))
        model = ScenarioModel(name, motion, sensors, BirthModel([]), initial, n_steps)
        return model, truth
    if name == "births":
        n_steps = 101
        targets = []
        for mean, (vx, vy), b, d in zip(BIRTH_MEANS, BIRTH_VELOCITIES, BIRTH_STEPS, DEATH_STEPS):
            k = np.arange(d - b)
            states = np.column_stack([mean[0] + vx * motion.tau * k, np.full(k.size, vx),
                                      mean[2] + vy * motion.tau * k, np.full(k.size, vy)])
            targets.append(TrueTarget(b, d, states))
        truth = GroundTruth(targets, n_steps)
        sensors = _region_grid(truth, np.array(BIRTH_MEANS)[:, list(POSITION_INDEX)],
                               region_margin, n_sensors_x, n_sensors_y)
        births = BirthModel([BirthSite(birth_prob, m, 100.0) for m in BIRTH_MEANS])
        model = ScenarioModel(name, motion, sensors, births, [], n_steps)
        return model, truth
    raise ValueError(f"unknown scenario '{name}'; options: {', '.join(SCENARIOS)}")


def simulate_measurements(model: ScenarioModel, truth: GroundTruth, rng=None) -> np.ndarray:
    """Measurements for steps 1..n_steps-1 (row k-1 is step k)."""
    rng = check_rng(rng)
    return np.array([measure(truth.states_at(k), model.sensors, rng)
                     for k in range(1, model.n_steps)])
