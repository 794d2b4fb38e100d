"""Grey-box identification of Lagrangian mechanical systems with
non-conservative forces, trained from sampled trajectories without
acceleration measurements, and validated through prediction, energy,
force-decomposition and closed-loop control checks.

All numerics run in float64; JAX is switched to x64 mode on import.
"""

from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

__version__ = "0.1.0"
