"""Bayesian cutting feedback for misspecified parametric copula models."""

import jax

# All densities, gradients and samplers assume double precision.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
