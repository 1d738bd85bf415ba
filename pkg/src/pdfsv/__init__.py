"""Panel data factor stochastic volatility model: simulation and MCMC estimation."""

__version__ = "0.1.0"
