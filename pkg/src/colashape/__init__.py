"""Consistent opponent shaping in two-player differentiable games.

Importing the package switches JAX to 64-bit arithmetic; every oracle
comparison in this library relies on double precision.
"""

import jax

jax.config.update("jax_enable_x64", True)

from colashape.errors import (  # noqa: E402
    CheckpointError,
    DimensionError,
    NumericError,
    SingularMatrixError,
)
from colashape.games import GAMES, Game, JointParams, get_game  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DimensionError",
    "GAMES",
    "Game",
    "JointParams",
    "NumericError",
    "SingularMatrixError",
    "get_game",
]
