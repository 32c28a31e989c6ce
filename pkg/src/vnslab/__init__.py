"""Numerical laboratory for the Vlasov-Navier-Stokes system on the 3-torus."""
from .io import ConfigError, FormatError, load_config, parse_config
from .kinetic import InitialKineticData, ParticleEnsemble, deposit_moments, sample_particles
from .solver import CFLViolation, FluidProfile, NumericalAbort, SimConfig, run
from .spectral import SpectralField, TorusGrid, Trajectory

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "load_config", "parse_config", "InitialKineticData",
           "ParticleEnsemble", "deposit_moments", "sample_particles", "CFLViolation",
           "FluidProfile", "NumericalAbort", "SimConfig", "run", "SpectralField", "TorusGrid",
           "Trajectory"]
