"""Numerical tools for diffusions in a random environment."""
from .env import EnvSpec, Environment, sample_environment, drift_at, diffusion_at, verify_env_axioms

__version__ = "0.1.0"

__all__ = [
    "EnvSpec",
    "Environment",
    "sample_environment",
    "drift_at",
    "diffusion_at",
    "verify_env_axioms",
]
