"""Nested automatic differentiation on top of JAX.

Every function here accepts plain arrays or JAX tracers, so ``grad`` may be
called inside a function that is itself being differentiated. Nesting is
forward-over-forward for the low-dimensional parameter vectors of the games
(the expression graph of the k-th nested derivative stays far smaller than
with reverse mode), and reverse mode above ``_FORWARD_MAX_DIM`` inputs.

Finiteness is checked only on concrete results: inside a trace the values do
not exist yet, and the caller that finally materialises them checks instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from colashape.errors import DimensionError, NumericError
from colashape.games import JointParams

_FORWARD_MAX_DIM = 16


@dataclass(frozen=True)
class VectorFn:
    """A pure map R^in_dim -> R^out_dim (out_dim=0 means scalar output)."""

    body: Callable
    in_dim: int
    out_dim: int = 0

    def __call__(self, x):
        x = jnp.asarray(x)
        if x.shape != (self.in_dim,):
            raise DimensionError(f"expected input of shape ({self.in_dim},), got {x.shape}")
        y = jnp.asarray(self.body(x))
        expected = () if self.out_dim == 0 else (self.out_dim,)
        if y.shape != expected:
            raise DimensionError(f"expected output of shape {expected}, got {y.shape}")
        return y


def is_concrete(x) -> bool:
    return not any(isinstance(leaf, jax.core.Tracer) for leaf in jax.tree_util.tree_leaves(x))


def check_finite(value, what="value"):
    """Raise NumericError if a concrete array holds NaN/Inf; tracers pass through."""
    if not is_concrete(value):
        return value
    arr = np.asarray(value)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise NumericError(f"non-finite {what} at coordinate {idx}", coordinate=idx)
    return value


def _as_vector(x):
    x = jnp.asarray(x, dtype=jnp.float64) if is_concrete(x) else x
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D parameter vector, got shape {x.shape}")
    return x


def _raw_grad(f, x):
    if x.shape[0] <= _FORWARD_MAX_DIM:
        return jax.jacfwd(f)(x)
    return jax.grad(f)(x)


def grad(f: Callable, x) -> jax.Array:
    """Gradient of a scalar function at ``x``. Nests freely."""
    x = _as_vector(x)
    if isinstance(f, VectorFn) and f.in_dim != x.shape[0]:
        raise DimensionError(f"function takes {f.in_dim} inputs, got {x.shape[0]}")
    out = _raw_grad(lambda z: _scalar(f(z)), x)
    return check_finite(out, "gradient")


def _scalar(y):
    y = jnp.asarray(y) if is_concrete(y) else y
    if y.shape not in ((), (1,)):
        raise DimensionError(f"grad needs a scalar-valued function, got output shape {y.shape}")
    return y.reshape(())


def partial_grad(f: Callable, p: JointParams, player: int) -> jax.Array:
    """Block of the gradient of ``f(theta1, theta2)`` belonging to ``player``."""
    t1, t2 = _as_vector(p.theta1), _as_vector(p.theta2)
    if player == 1:
        out = _raw_grad(lambda u: _scalar(f(u, t2)), t1)
    elif player == 2:
        out = _raw_grad(lambda v: _scalar(f(t1, v)), t2)
    else:
        raise ValueError(f"player must be 1 or 2, got {player!r}")
    return check_finite(out, "gradient")


def jacobian(f: Callable, x) -> jax.Array:
    """Row i is the gradient of output component i."""
    x = _as_vector(x)
    if isinstance(f, VectorFn) and f.in_dim != x.shape[0]:
        raise DimensionError(f"function takes {f.in_dim} inputs, got {x.shape[0]}")
    out = jax.jacfwd(f)(x)
    return check_finite(out, "jacobian")


def nest_check(depth: int, at: float = 1.0) -> bool:
    """Differentiate x**(depth+1) ``depth`` times through nested ``grad`` calls.

    The result must equal (depth+1)! * x to relative error 1e-9.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    power = depth + 1
    x0 = float(at)

    def nth(k):
        if k == 0:
            return lambda z: z[0] ** power
        inner = nth(k - 1)
        return lambda z: grad(inner, z)[0]

    try:
        got = float(nth(depth)(jnp.array([x0])))
    except (NumericError, DimensionError):
        return False
    want = math.factorial(power) * x0
    return abs(got - want) <= 1e-9 * abs(want)
