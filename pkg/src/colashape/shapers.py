"""Closed-form update rules as differentiable update fields.

A rule is compiled into a *core*: a pure function ``core(theta1, theta2, aux)``
returning ``(update1, update2)``. For the analytic rules ``aux`` is the
look-ahead rate, kept as a traced argument so that one compilation serves
every rate. Cores are cached per (game, rule), which matters for high-order
exact HOLA whose trace takes seconds.

Notation used in comments: xi = (grad_1 L1, grad_2 L2) is the simultaneous
gradient, H_o the off-diagonal Hessian with blocks grad_12 L1 (top right) and
grad_21 L2 (bottom left), chi the shaping term with blocks
grad_12 L2 . grad_2 L1 and grad_21 L1 . grad_1 L2.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from typing import Any, Callable

import jax
import jax.numpy as jnp
import numpy as np

from colashape.autodiff import check_finite
from colashape.errors import SingularMatrixError
from colashape.games import Game, JointParams

CGD_MAX_CONDITION = 1e12


def _d(f, x):
    """Forward-mode gradient of a scalar function of a small vector."""
    return jax.jacfwd(f)(x)


def grad1(loss, t1, t2):
    return _d(lambda u: loss(u, t2), t1)


def grad2(loss, t1, t2):
    return _d(lambda v: loss(t1, v), t2)


def simultaneous_gradient(game: Game, t1, t2):
    return grad1(game.loss1, t1, t2), grad2(game.loss2, t1, t2)


def cross_hessian(loss, t1, t2):
    """d/dtheta2 of grad_1 loss, shape (d1, d2)."""
    return jax.jacfwd(lambda v: grad1(loss, t1, v))(t2)


@dataclass(frozen=True)
class GameDerivatives:
    xi1: Any
    xi2: Any
    h12: Any  # grad_12 L1, (d1, d2)
    h21: Any  # grad_21 L2, (d2, d1)
    chi1: Any
    chi2: Any


def game_derivatives(game: Game, t1, t2) -> GameDerivatives:
    """Simultaneous gradient, off-diagonal Hessian and shaping term as explicit arrays."""
    xi1, xi2 = simultaneous_gradient(game, t1, t2)
    h12 = cross_hessian(game.loss1, t1, t2)
    h21 = cross_hessian(lambda a, b: game.loss2(b, a), t2, t1)
    # grad_12 L2 as (d1, d2) and grad_21 L1 as (d2, d1)
    l2_12 = cross_hessian(game.loss2, t1, t2)
    l1_21 = cross_hessian(lambda a, b: game.loss1(b, a), t2, t1)
    chi1 = l2_12 @ grad2(game.loss1, t1, t2)
    chi2 = l1_21 @ grad1(game.loss2, t1, t2)
    return GameDerivatives(xi1, xi2, h12, h21, chi1, chi2)


# rule cores, all with signature (t1, t2, alpha) -> (u1, u2)


def naive_core(game: Game):
    def core(t1, t2, alpha):
        g1, g2 = simultaneous_gradient(game, t1, t2)
        return -alpha * g1, -alpha * g2

    return core


def _zero(i, t1, t2):
    return jnp.zeros_like(t1 if i == 1 else t2)


def exact_hola_player(game: Game, player: int, order: int):
    """h_i^n = -alpha grad_i L^i(theta_i, theta_-i + h_-i^{n-1}), total derivative."""
    if order < 0:
        return lambda t1, t2, alpha: _zero(player, t1, t2)
    other = exact_hola_player(game, 3 - player, order - 1)
    if player == 1:

        def h1(t1, t2, alpha):
            return -alpha * _d(lambda u: game.loss1(u, t2 + other(u, t2, alpha)), t1)

        return h1

    def h2(t1, t2, alpha):
        return -alpha * _d(lambda v: game.loss2(t1 + other(t1, v, alpha), v), t2)

    return h2


def taylor_hola_player(game: Game, player: int, order: int):
    """h_i^n = -alpha grad_i (L^i + (grad_-i L^i)^T h_-i^{n-1}), total derivative."""
    if order < 0:
        return lambda t1, t2, alpha: _zero(player, t1, t2)
    other = taylor_hola_player(game, 3 - player, order - 1)
    if player == 1:

        def h1(t1, t2, alpha):
            def shaped(u):
                return game.loss1(u, t2) + grad2(game.loss1, u, t2) @ other(u, t2, alpha)

            return -alpha * _d(shaped, t1)

        return h1

    def h2(t1, t2, alpha):
        def shaped(v):
            return game.loss2(t1, v) + grad1(game.loss2, t1, v) @ other(t1, v, alpha)

        return -alpha * _d(shaped, t2)

    return h2


def lookahead_core(game: Game, order: int):
    """Taylor LookAhead: f^{n+1} = -alpha xi - alpha H_o f^n with f^{-1} = 0.

    The opponent step enters only through a Hessian-vector product, so the
    recursion costs one extra product per order instead of a new
    differentiation level.
    """

    def core(t1, t2, alpha):
        g1 = lambda v: grad1(game.loss1, t1, v)  # noqa: E731
        g2 = lambda u: grad2(game.loss2, u, t2)  # noqa: E731
        xi1, xi2 = g1(t2), g2(t1)
        f1, f2 = jnp.zeros_like(t1), jnp.zeros_like(t2)
        for _ in range(order + 1):
            hv1 = jax.jvp(g1, (t2,), (f2,))[1]
            hv2 = jax.jvp(g2, (t1,), (f1,))[1]
            f1, f2 = -alpha * (xi1 + hv1), -alpha * (xi2 + hv2)
        return f1, f2

    return core


def cgd_core(game: Game):
    def core(t1, t2, alpha):
        d1 = t1.shape[-1]
        xi1, xi2 = simultaneous_gradient(game, t1, t2)
        h12 = cross_hessian(game.loss1, t1, t2)
        h21 = cross_hessian(lambda a, b: game.loss2(b, a), t2, t1)
        m = cgd_matrix(h12, h21, alpha)
        step = -alpha * jnp.linalg.solve(m, jnp.concatenate([xi1, xi2]))
        return step[:d1], step[d1:]

    return core


def cgd_matrix(h12, h21, alpha):
    d1, d2 = h12.shape
    return jnp.block([[jnp.eye(d1), alpha * h12], [alpha * h21, jnp.eye(d2)]])


def plola_core(game: Game, p: float):
    def core(t1, t2, alpha):
        d = game_derivatives(game, t1, t2)
        lcgd1 = -alpha * (d.xi1 - alpha * d.h12 @ d.xi2)
        lcgd2 = -alpha * (d.xi2 - alpha * d.h21 @ d.xi1)
        return lcgd1 + p * alpha**2 * d.chi1, lcgd2 + p * alpha**2 * d.chi2

    return core


# rule descriptors

_RULE_RE = re.compile(
    r"^(?:(naive)|(lola-exact)|(lola-taylor)|(lcgd)|(cgd)|(zero)"
    r"|hola:(\d+)(?::(exact|taylor))?|lookahead:(\d+)|plola:([0-9.eE+-]+))$"
)


@dataclass(frozen=True)
class Rule:
    kind: str  # naive | hola | lookahead | cgd | plola | zero
    order: int = 0
    flavor: str = "exact"
    p: float = 1.0

    def __str__(self):
        if self.kind == "hola":
            return f"hola:{self.order}:{self.flavor}"
        if self.kind == "lookahead":
            return f"lookahead:{self.order}"
        if self.kind == "plola":
            return f"plola:{self.p:g}"
        return self.kind


def parse_rule(text: str) -> Rule:
    """Parse naive | lola-exact | lola-taylor | hola:{n}:{exact|taylor} |
    lookahead:{n} | lcgd | cgd | plola:{p} | zero."""
    m = _RULE_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"unrecognised rule {text!r}")
    naive, lexact, ltaylor, lcgd, cgd, zero, n, flavor, la, p = m.groups()
    if naive:
        return Rule("hola", 0, "exact")
    if lexact:
        return Rule("hola", 1, "exact")
    if ltaylor:
        return Rule("hola", 1, "taylor")
    if lcgd:
        return Rule("lookahead", 1)
    if cgd:
        return Rule("cgd")
    if zero:
        return Rule("zero")
    if n is not None:
        return Rule("hola", int(n), flavor or "exact")
    if la is not None:
        return Rule("lookahead", int(la))
    pv = float(p)
    if not 0.0 <= pv <= 1.0:
        raise ValueError(f"plola mixing weight must lie in [0, 1], got {pv}")
    return Rule("plola", p=pv)


@functools.lru_cache(maxsize=None)
def rule_players(game: Game, rule: Rule):
    """Per-player cores (t1, t2, alpha) -> update_i for a rule."""
    if rule.kind == "hola":
        if rule.order == 0:
            core = naive_core(game)
            return (lambda *a: core(*a)[0], lambda *a: core(*a)[1])
        make = exact_hola_player if rule.flavor == "exact" else taylor_hola_player
        return (make(game, 1, rule.order), make(game, 2, rule.order))
    if rule.kind == "zero":
        return (lambda t1, t2, a: _zero(1, t1, t2), lambda t1, t2, a: _zero(2, t1, t2))
    core = {
        "lookahead": lambda: lookahead_core(game, rule.order),
        "cgd": lambda: cgd_core(game),
        "plola": lambda: plola_core(game, rule.p),
    }[rule.kind]()
    return (lambda *a: core(*a)[0], lambda *a: core(*a)[1])


@functools.lru_cache(maxsize=None)
def _batched(players):
    f1, f2 = players

    def both(t1, t2, aux):
        return f1(t1, t2, aux), f2(t1, t2, aux)

    return jax.jit(both), jax.jit(jax.vmap(both, in_axes=(0, 0, None)))


@dataclass(frozen=True, eq=False)
class UpdateField:
    """A differentiable map theta -> (delta theta1, delta theta2).

    ``players`` holds one pure function per player with signature
    ``(theta1, theta2, aux)``; ``aux`` is the look-ahead rate for analytic
    rules and the network weights for learned fields.
    """

    game: Game
    alpha: float
    name: str
    players: tuple[Callable, Callable]
    aux: Any = None
    meta: dict = field(default_factory=dict)

    def player(self, i: int) -> Callable:
        """Player i's update as a function of (theta1, theta2), traceable."""
        f = self.players[i - 1]
        aux = self.aux
        return lambda t1, t2: f(t1, t2, aux)

    def __call__(self, t1, t2):
        return self.player(1)(t1, t2), self.player(2)(t1, t2)

    def evaluate(self, p: JointParams):
        """Jitted evaluation at one point or a batch (leading axis) of points."""
        self.game.check(p)
        single, batch = _batched(self.players)
        t1, t2 = jnp.asarray(p.theta1), jnp.asarray(p.theta2)
        fn = batch if t1.ndim == 2 else single
        return fn(t1, t2, self.aux)


def make_field(game: Game, alpha: float, rule) -> UpdateField:
    if isinstance(rule, str):
        rule = parse_rule(rule)
    if alpha <= 0:
        raise ValueError(f"look-ahead rate must be positive, got {alpha}")
    return UpdateField(game, float(alpha), str(rule), rule_players(game, rule), aux=float(alpha))


# point-wise operations with error checking


def _apply(game: Game, alpha: float, rule, theta: JointParams):
    field_ = make_field(game, alpha, rule)
    u1, u2 = field_.evaluate(JointParams(jnp.asarray(theta[0], float), jnp.asarray(theta[1], float)))
    check_finite(jnp.concatenate([u1, u2]), "update")
    return np.asarray(u1), np.asarray(u2)


def _joint(theta) -> JointParams:
    return JointParams(jnp.atleast_1d(jnp.asarray(theta[0], float)), jnp.atleast_1d(jnp.asarray(theta[1], float)))


def naive_update(game: Game, alpha: float, theta):
    return _apply(game, alpha, Rule("hola", 0), _joint(theta))


def exact_lola_update(game: Game, alpha: float, theta):
    return _apply(game, alpha, Rule("hola", 1, "exact"), _joint(theta))


def taylor_lola_update(game: Game, alpha: float, theta):
    return _apply(game, alpha, Rule("hola", 1, "taylor"), _joint(theta))


def hola_update(game: Game, alpha: float, order: int, flavor: str, theta):
    if order < 0:
        raise ValueError("HOLA order must be >= 0")
    if flavor not in ("exact", "taylor"):
        raise ValueError(f"flavor must be 'exact' or 'taylor', got {flavor!r}")
    return _apply(game, alpha, Rule("hola", order, flavor), _joint(theta))


def lookahead_series_update(game: Game, alpha: float, order: int, theta):
    if order < 0:
        raise ValueError("LookAhead order must be >= 0")
    return _apply(game, alpha, Rule("lookahead", order), _joint(theta))


def plola_update(game: Game, alpha: float, p: float, theta):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return _apply(game, alpha, Rule("plola", p=float(p)), _joint(theta))


def cgd_update(game: Game, alpha: float, theta):
    """Full CGD step; raises SingularMatrixError when the block system is ill-posed."""
    theta = _joint(theta)
    game.check(theta)
    d = game_derivatives(game, theta.theta1, theta.theta2)
    m = np.asarray(cgd_matrix(d.h12, d.h21, alpha))
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > CGD_MAX_CONDITION:
        raise SingularMatrixError(f"CGD system is singular (condition estimate {cond:.3g})", cond)
    return _apply(game, alpha, Rule("cgd"), theta)
