"""Labelled multi-Bernoulli particle filters for track-before-detect.

Submodules
----------
rfs        labelled-set containers and LMB probability mass functions
kld        discrete KLD decomposition and the iterated LMB improvement
gpp        the GPP particle filter recursion
mcmc       label-switching MCMC refinement (ILMB-MCMC)
baselines  SIR particle filter and U-MCMC
models     motion, acoustic sensor and scenario models
metrics    OSPA, cardinality and state extraction
filters    estimator-style trackers
harness    Monte Carlo experiment runner
"""
__version__ = "0.1.0"

from .filters import GPPFilter, SIRFilter, make_filter
from .rfs import LmbBelief, ParticleGroup, ParticlePosterior

__all__ = ["GPPFilter", "SIRFilter", "make_filter", "LmbBelief", "ParticleGroup",
           "ParticlePosterior", "__version__"]
