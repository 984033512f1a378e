"""The seven two-player differentiable games.

Losses are written with ``jax.numpy`` so they can be differentiated to any
depth. Each loss takes ``(theta1, theta2)`` as 1-D arrays and returns a
scalar.

IPD states are ordered CC, CD, DC, DD as (player 1 action, player 2 action).
A player's four conditional log-odds are indexed from its own point of view,
(own previous action, opponent previous action), so tit-for-tat is the same
parameter vector for both players.

The IPD objective that learning rules differentiate is the raw discounted
value, while ``Game.losses`` and recorded trajectories report per-step values
(the raw value times ``per_step_scale`` = 1 - gamma). Look-ahead rates for the
IPD are therefore in the usual units of the undiscounted-sum formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from colashape.errors import DimensionError


class JointParams(NamedTuple):
    theta1: jax.Array
    theta2: jax.Array


@dataclass(frozen=True, eq=False)
class Game:
    name: str
    d1: int
    d2: int
    loss1: Callable
    loss2: Callable
    bound: float
    init_sigma: float = 1.0
    polynomial: bool = True
    per_step_scale: float = 1.0
    description: str = field(default="", compare=False)

    @property
    def dim(self) -> int:
        return self.d1 + self.d2

    @property
    def region(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the sampling box, one entry per coordinate."""
        return np.full(self.dim, -self.bound), np.full(self.dim, self.bound)

    def check(self, p: JointParams) -> None:
        s1, s2 = jnp.shape(p.theta1), jnp.shape(p.theta2)
        if s1[-1:] != (self.d1,) or s2[-1:] != (self.d2,):
            raise DimensionError(
                f"{self.name} expects theta1 of length {self.d1} and theta2 of length "
                f"{self.d2}, got shapes {s1} and {s2}"
            )

    def losses(self, p: JointParams):
        """Reported (per-step) losses."""
        self.check(p)
        k = self.per_step_scale
        return k * self.loss1(p.theta1, p.theta2), k * self.loss2(p.theta1, p.theta2)

    def split(self, theta) -> JointParams:
        """Cut a flat vector of length d1+d2 into a JointParams."""
        theta = jnp.asarray(theta)
        if theta.shape[-1] != self.dim:
            raise DimensionError(f"{self.name} has {self.dim} parameters, got {theta.shape[-1]}")
        return JointParams(theta[..., : self.d1], theta[..., self.d1 :])


def eval_losses(game: Game, p: JointParams):
    l1, l2 = game.losses(p)
    return float(l1), float(l2)


# polynomial games


def _tandem1(t1, t2):
    return (t1[0] + t2[0]) ** 2 - 2 * t1[0]


def _tandem2(t1, t2):
    return (t1[0] + t2[0]) ** 2 - 2 * t2[0]


def _hamiltonian1(t1, t2):
    return t1[0] * t2[0]


def _hamiltonian2(t1, t2):
    return -t1[0] * t2[0]


def _balduzzi1(t1, t2):
    return 0.5 * t1[0] ** 2 + 10 * t1[0] * t2[0]


def _balduzzi2(t1, t2):
    return 0.5 * t2[0] ** 2 - 10 * t1[0] * t2[0]


# single-parameter probability games


def _mp1(t1, t2):
    return -(2 * jax.nn.sigmoid(t1[0]) - 1) * (2 * jax.nn.sigmoid(t2[0]) - 1)


def _mp2(t1, t2):
    return -_mp1(t1, t2)


def matching_pennies_losses(p: JointParams):
    return _mp1(p.theta1, p.theta2), _mp2(p.theta1, p.theta2)


def _ultimatum(t1, t2):
    fair = jax.nn.sigmoid(t1[0])
    accept = jax.nn.sigmoid(t2[0])
    return fair, accept


def _ultimatum1(t1, t2):
    fair, accept = _ultimatum(t1, t2)
    return -(5 * fair + 8 * (1 - fair) * accept)


def _ultimatum2(t1, t2):
    fair, accept = _ultimatum(t1, t2)
    return -(5 * fair + 2 * (1 - fair) * accept)


# rows: player 1 swerves / goes straight; columns: same for player 2
CHICKEN_PAYOFF1 = np.array([[0.0, -1.0], [1.0, -100.0]])
CHICKEN_PAYOFF2 = CHICKEN_PAYOFF1.T


def _chicken_expected(payoff, t1, t2):
    s1 = jax.nn.sigmoid(t1[0])
    s2 = jax.nn.sigmoid(t2[0])
    a = jnp.stack([s1, 1 - s1])
    b = jnp.stack([s2, 1 - s2])
    return a @ jnp.asarray(payoff) @ b


def _chicken1(t1, t2):
    return -_chicken_expected(CHICKEN_PAYOFF1, t1, t2)


def _chicken2(t1, t2):
    return -_chicken_expected(CHICKEN_PAYOFF2, t1, t2)


def chicken_losses(p: JointParams):
    return _chicken1(p.theta1, p.theta2), _chicken2(p.theta1, p.theta2)


# iterated prisoner's dilemma

IPD_GAMMA = 0.96
# per-state payoffs for states CC, CD, DC, DD
IPD_REWARD1 = np.array([-1.0, -3.0, 0.0, -2.0])
IPD_REWARD2 = np.array([-1.0, 0.0, -3.0, -2.0])
# player 2 sees state CD as its own (D, C)
_IPD_SWAP = np.array([0, 2, 1, 3])


def _joint(c1, c2):
    return jnp.stack([c1 * c2, c1 * (1 - c2), (1 - c1) * c2, (1 - c1) * (1 - c2)], axis=-1)


def ipd_markov_chain(p1, p2):
    """Initial state distribution and 4x4 transition matrix for two IPD policies."""
    q1 = jax.nn.sigmoid(p1)
    q2 = jax.nn.sigmoid(p2)
    start = _joint(q1[0], q2[0])
    transition = _joint(q1[1:], q2[1:][_IPD_SWAP])
    return start, transition


def ipd_losses(p1, p2, gamma: float = IPD_GAMMA):
    """Exact normalised discounted losses of the infinitely iterated game."""
    p1 = jnp.asarray(p1)
    p2 = jnp.asarray(p2)
    if p1.shape != (5,) or p2.shape != (5,):
        raise DimensionError(f"IPD policies need 5 log-odds each, got {p1.shape} and {p2.shape}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    start, transition = ipd_markov_chain(p1, p2)
    occupancy = jnp.linalg.solve((jnp.eye(4) - gamma * transition).T, start)
    scale = 1.0 - gamma
    return -scale * occupancy @ IPD_REWARD1, -scale * occupancy @ IPD_REWARD2


def _ipd1(t1, t2):
    return ipd_losses(t1, t2)[0] / (1.0 - IPD_GAMMA)


def _ipd2(t1, t2):
    return ipd_losses(t1, t2)[1] / (1.0 - IPD_GAMMA)


GAMES: dict[str, Game] = {
    g.name: g
    for g in [
        Game("tandem", 1, 1, _tandem1, _tandem2, bound=1.0, init_sigma=0.1),
        Game("hamiltonian", 1, 1, _hamiltonian1, _hamiltonian2, bound=1.0),
        Game("balduzzi", 1, 1, _balduzzi1, _balduzzi2, bound=1.0),
        Game("mp", 1, 1, _mp1, _mp2, bound=7.0, polynomial=False),
        Game("ultimatum", 1, 1, _ultimatum1, _ultimatum2, bound=7.0, polynomial=False),
        Game("ipd", 5, 5, _ipd1, _ipd2, bound=7.0, polynomial=False, per_step_scale=1.0 - IPD_GAMMA),
        Game("chicken", 1, 1, _chicken1, _chicken2, bound=7.0, polynomial=False),
    ]
}


def get_game(name: str) -> Game:
    try:
        return GAMES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown game {name!r}; choose from {', '.join(GAMES)}") from None


def sample_batch(game: Game, n: int, seed: int) -> JointParams:
    """n uniform draws from the game's region, stacked along axis 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    low, high = game.region
    rng = np.random.default_rng(seed)
    theta = rng.uniform(low, high, size=(n, game.dim))
    return JointParams(jnp.asarray(theta[:, : game.d1]), jnp.asarray(theta[:, game.d1 :]))


def sample_region(game: Game, n: int, seed: int) -> list[JointParams]:
    batch = sample_batch(game, n, seed)
    return [JointParams(batch.theta1[i], batch.theta2[i]) for i in range(n)]
