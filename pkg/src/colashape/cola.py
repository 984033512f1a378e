"""Learned consistent update functions.

Two separate feed-forward networks f1, f2 map the joint parameters to each
player's update. They are trained to drive the consistency residuals

    C1 = f1(theta) + alpha * grad_1 L1(theta1, theta2 + f2(theta))
    C2 = f2(theta) + alpha * grad_2 L2(theta1 + f1(theta), theta2)

to zero over a box of parameters. The total derivative in C1 flows through
f2's dependence on theta1, so the training gradient is a weight-gradient of
an expression that already contains a parameter-gradient.
"""

from __future__ import annotations

import functools
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
import optax

from colashape.autodiff import check_finite
from colashape.errors import CheckpointError, DimensionError, NumericError
from colashape.games import Game, JointParams, get_game
from colashape.shapers import UpdateField

FORMAT_VERSION = 1
ACTIVATIONS = {"relu": jax.nn.relu, "tanh": jnp.tanh}


# networks


def mlp_apply(layers, x, activation: str = "relu"):
    act = ACTIVATIONS[activation]
    for w, b in layers[:-1]:
        x = act(x @ w + b)
    w, b = layers[-1]
    return x @ w + b


def init_layers(key, sizes):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        key, sub = jax.random.split(key)
        lim = 1.0 / math.sqrt(fan_in)
        w = jax.random.uniform(sub, (fan_in, fan_out), minval=-lim, maxval=lim, dtype=jnp.float64)
        layers.append((w, jnp.zeros(fan_out, dtype=jnp.float64)))
    return layers


@dataclass(frozen=True, eq=False)
class MLPPair:
    d1: int
    d2: int
    hidden: tuple
    activation: str
    weights: tuple  # (layers of f1, layers of f2)
    game: str = ""
    alpha: float = float("nan")
    seed: int = 0

    @classmethod
    def init(cls, d1, d2, hidden=(8,), activation="relu", seed=0, **meta):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        k1, k2 = jax.random.split(jax.random.PRNGKey(seed))
        din = d1 + d2
        w1 = init_layers(k1, [din, *hidden, d1])
        w2 = init_layers(k2, [din, *hidden, d2])
        return cls(d1, d2, tuple(hidden), activation, (w1, w2), seed=seed, **meta)

    def with_weights(self, weights) -> "MLPPair":
        return replace(self, weights=weights)

    def as_field(self, game: Game, alpha: Optional[float] = None) -> UpdateField:
        if (game.d1, game.d2) != (self.d1, self.d2):
            raise DimensionError(
                f"network dimensions ({self.d1}, {self.d2}) do not match {game.name} ({game.d1}, {game.d2})"
            )
        a = self.alpha if alpha is None else alpha
        return UpdateField(game, float(a), "cola", _net_players(self.activation), aux=self.weights)


@functools.lru_cache(maxsize=None)
def _net_players(activation: str):
    def f1(t1, t2, weights):
        return mlp_apply(weights[0], jnp.concatenate([t1, t2], axis=-1), activation)

    def f2(t1, t2, weights):
        return mlp_apply(weights[1], jnp.concatenate([t1, t2], axis=-1), activation)

    return (f1, f2)


def forward(net: MLPPair, which: int, p: JointParams):
    t1, t2 = jnp.asarray(p.theta1, jnp.float64), jnp.asarray(p.theta2, jnp.float64)
    if t1.shape[-1:] != (net.d1,) or t2.shape[-1:] != (net.d2,):
        raise DimensionError(f"network expects ({net.d1}, {net.d2}) parameters, got {t1.shape}, {t2.shape}")
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    return _net_players(net.activation)[which - 1](t1, t2, net.weights)


# consistency


def residual_fn(game: Game, f1: Callable, f2: Callable) -> Callable:
    """Residual pair at one point, for per-player update functions f_i(t1, t2, aux)."""

    def residuals(t1, t2, alpha, aux):
        g1 = jax.jacfwd(lambda u: game.loss1(u, t2 + f2(u, t2, aux)))(t1)
        g2 = jax.jacfwd(lambda v: game.loss2(t1 + f1(t1, v, aux), v))(t2)
        return f1(t1, t2, aux) + alpha * g1, f2(t1, t2, aux) + alpha * g2

    return residuals


def squared_residual_fn(game: Game, f1: Callable, f2: Callable) -> Callable:
    res = residual_fn(game, f1, f2)

    def sq(t1, t2, alpha, aux):
        c1, c2 = res(t1, t2, alpha, aux)
        return jnp.sum(c1**2) + jnp.sum(c2**2)

    return sq


@functools.lru_cache(maxsize=None)
def _residual_jit(game: Game, players):
    res = residual_fn(game, *players)
    return jax.jit(res), jax.jit(jax.vmap(res, in_axes=(0, 0, None, None)))


def _field_players(f):
    if isinstance(f, UpdateField):
        return f.players, f.aux
    f1, f2 = f
    return (lambda t1, t2, aux: f1(t1, t2), lambda t1, t2, aux: f2(t1, t2)), None


def consistency_residuals(f, game: Game, alpha: float, p: JointParams):
    """(C1, C2) before taking norms. Accepts an UpdateField or a pair of callables.

    ``p`` may be a single point or a batch stacked along axis 0.
    """
    game.check(p)
    players, aux = _field_players(f)
    single, batch = _residual_jit(game, players)
    t1, t2 = jnp.asarray(p.theta1, jnp.float64), jnp.asarray(p.theta2, jnp.float64)
    fn = batch if t1.ndim == 2 else single
    c1, c2 = fn(t1, t2, float(alpha), aux)
    if t1.ndim == 1:
        check_finite(jnp.concatenate([c1, c2]), "consistency residual")
    return c1, c2


def squared_consistency(f, game: Game, alpha: float, p: JointParams):
    """Per-sample ||C1||^2 + ||C2||^2; non-finite entries are left in place."""
    c1, c2 = consistency_residuals(f, game, alpha, p)
    return np.sum(np.asarray(c1) ** 2, axis=-1) + np.sum(np.asarray(c2) ** 2, axis=-1)


def consistency_loss(f, game: Game, alpha: float, batch: JointParams) -> float:
    """Mean over the batch of ||C1||^2 + ||C2||^2."""
    if jnp.ndim(batch.theta1) == 1:
        batch = JointParams(jnp.asarray(batch.theta1)[None], jnp.asarray(batch.theta2)[None])
    if batch.theta1.shape[0] == 0:
        raise ValueError("empty batch")
    sq = squared_consistency(f, game, alpha, batch)
    check_finite(sq, "consistency loss")
    return float(np.mean(sq))


# training


@dataclass
class ColaConfig:
    game: str
    alpha: float
    bound: Optional[float] = None
    batch_size: int = 8
    steps: int = 120_000
    hidden: tuple = (8,)
    activation: str = "relu"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.9
    decay_every: int = 4_000
    seed: int = 0
    log_every: int = 1_000
    checkpoint: Optional[str] = None

    @classmethod
    def for_game(cls, game, alpha, **overrides) -> "ColaConfig":
        """Defaults for the game's class: polynomial or probability-parameterised."""
        g = get_game(game) if isinstance(game, str) else game
        if g.polynomial:
            base = dict(batch_size=8, steps=120_000, hidden=(8,), activation="relu")
        else:
            base = dict(batch_size=64, steps=80_000, hidden=(16, 16, 16), activation="tanh")
        base.update(overrides)
        return cls(game=g.name, alpha=float(alpha), **base)

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.log_every < 1 or self.decay_every < 1:
            raise ValueError("log_every and decay_every must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")


@dataclass
class TrainingTrace:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0


def _optimizer(cfg: ColaConfig):
    schedule = optax.exponential_decay(cfg.lr, cfg.decay_every, cfg.lr_decay, staircase=True)
    return optax.adam(schedule, b1=cfg.beta1, b2=cfg.beta2, eps=cfg.eps)


@functools.lru_cache(maxsize=None)
def _train_chunk(game: Game, activation: str, batch_size: int, bound: float, cfg_key):
    cfg = dict(cfg_key)
    players = _net_players(activation)
    sq = squared_residual_fn(game, *players)
    opt = _optimizer(ColaConfig(game=game.name, alpha=1.0, **cfg))

    def loss(weights, t1, t2, alpha):
        return jnp.mean(jax.vmap(sq, in_axes=(0, 0, None, None))(t1, t2, alpha, weights))

    def step(carry, key, alpha):
        weights, opt_state = carry
        theta = jax.random.uniform(key, (batch_size, game.dim), minval=-bound, maxval=bound, dtype=jnp.float64)
        value, grads = jax.value_and_grad(loss)(weights, theta[:, : game.d1], theta[:, game.d1 :], alpha)
        updates, opt_state = opt.update(grads, opt_state, weights)
        return (optax.apply_updates(weights, updates), opt_state), value

    @jax.jit
    def run(weights, opt_state, keys, alpha):
        return jax.lax.scan(lambda c, k: step(c, k, alpha), (weights, opt_state), keys)

    return run, jax.jit(loss), opt


def train_cola(cfg: ColaConfig, progress: Optional[Callable] = None):
    """Train an MLPPair on the consistency loss. Returns (net, trace)."""
    cfg.validate()
    game = get_game(cfg.game)
    bound = game.bound if cfg.bound is None else float(cfg.bound)
    net = MLPPair.init(game.d1, game.d2, cfg.hidden, cfg.activation, cfg.seed, game=game.name, alpha=cfg.alpha)
    opt_key = (
        ("lr", cfg.lr), ("beta1", cfg.beta1), ("beta2", cfg.beta2), ("eps", cfg.eps),
        ("lr_decay", cfg.lr_decay), ("decay_every", cfg.decay_every),
    )
    run, loss, opt = _train_chunk(game, cfg.activation, cfg.batch_size, bound, opt_key)
    weights = net.weights
    opt_state = opt.init(weights)
    key = jax.random.fold_in(jax.random.PRNGKey(cfg.seed), 1)

    start = time.perf_counter()
    key, sub = jax.random.split(key)
    theta = jax.random.uniform(sub, (cfg.batch_size, game.dim), minval=-bound, maxval=bound, dtype=jnp.float64)
    first = float(loss(weights, theta[:, : game.d1], theta[:, game.d1 :], cfg.alpha))
    trace = TrainingTrace([0], [first], config=_config_dict(cfg))

    done = 0
    while done < cfg.steps:
        n = min(cfg.log_every, cfg.steps - done)
        key, sub = jax.random.split(key)
        (new_weights, new_state), values = run(weights, opt_state, jax.random.split(sub, n), cfg.alpha)
        values = np.asarray(values)
        bad = ~np.isfinite(values)
        if bad.any():
            at = done + int(np.flatnonzero(bad)[0]) + 1
            raise NumericError(f"consistency loss became non-finite at step {at}", step=at)
        weights, opt_state = new_weights, new_state
        done += n
        trace.steps.append(done)
        trace.losses.append(float(values.mean()))
        if progress is not None:
            progress(done, trace.losses[-1])
    trace.wall_clock = time.perf_counter() - start
    net = net.with_weights(weights)
    if cfg.checkpoint:
        save_checkpoint(net, cfg.checkpoint)
    return net, trace


def _config_dict(cfg: ColaConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d


# checkpoints


def _to_lists(layers):
    return [{"W": np.asarray(w).tolist(), "b": np.asarray(b).tolist()} for w, b in layers]


def _from_lists(layers):
    return [(jnp.asarray(np.array(layer["W"], dtype=np.float64)), jnp.asarray(np.array(layer["b"], dtype=np.float64))) for layer in layers]


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(net: MLPPair, path) -> None:
    """JSON dump; floats are written with repr() so reloading is bit-exact."""
    doc = {
        "format": "colashape-checkpoint",
        "format_version": FORMAT_VERSION,
        "game": net.game,
        "alpha": net.alpha,
        "seed": net.seed,
        "architecture": {"d1": net.d1, "d2": net.d2, "hidden": list(net.hidden), "activation": net.activation},
        "weights": {"player1": _to_lists(net.weights[0]), "player2": _to_lists(net.weights[1])},
    }
    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path, game=None) -> MLPPair:
    """Read a checkpoint; with ``game`` given, its dimensions must match."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    try:
        doc = json.loads(text)
        if doc.get("format") != "colashape-checkpoint":
            raise CheckpointError(f"{path} is not a colashape checkpoint")
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path} has format version {doc.get('format_version')}, expected {FORMAT_VERSION}"
            )
        arch = doc["architecture"]
        weights = (_from_lists(doc["weights"]["player1"]), _from_lists(doc["weights"]["player2"]))
        net = MLPPair(
            arch["d1"], arch["d2"], tuple(arch["hidden"]), arch["activation"], weights,
            game=doc["game"], alpha=float(doc["alpha"]), seed=int(doc["seed"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    _check_shapes(net)
    if game is not None:
        g = get_game(game) if isinstance(game, str) else game
        if (g.d1, g.d2) != (net.d1, net.d2):
            raise DimensionError(
                f"checkpoint has dimensions ({net.d1}, {net.d2}) but {g.name} needs ({g.d1}, {g.d2})"
            )
    return net


def _check_shapes(net: MLPPair):
    sizes = [net.d1 + net.d2, *net.hidden]
    for layers, dout in zip(net.weights, (net.d1, net.d2)):
        expect = list(zip(sizes, [*net.hidden, dout]))
        got = [tuple(w.shape) for w, _ in layers]
        if got != expect or any(b.shape != (w.shape[1],) for w, b in layers):
            raise CheckpointError(f"weight shapes {got} do not match architecture {expect}")
