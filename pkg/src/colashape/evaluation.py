"""Measurements on update fields and the closed-form reference solutions.

Everything here is deterministic given a seed. Divergence is recorded as data
(Inf entries, flags) instead of raised.
"""

from __future__ import annotations

import csv
import functools
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from colashape.cola import squared_consistency
from colashape.errors import DimensionError
from colashape.games import Game, JointParams, get_game, sample_batch
from colashape.shapers import UpdateField, make_field

DIVERGENCE_NORM = 1e8
COSINE_MIN_NORM = 1e-12


@dataclass
class EvalReport:
    game: str
    alpha: float
    fields: tuple
    n_samples: int
    mean_sq: float
    std_sq: float
    n_diverged: int = 0
    cos_mean: Optional[float] = None
    cos_std: Optional[float] = None
    seed: int = 0
    std_over: str = "samples"
    meta: dict = field(default_factory=dict)


def measure_consistency(f: UpdateField, game: Game, alpha: float, n: int = 1000, seed: int = 0) -> EvalReport:
    """Mean and std of summed squared consistency residuals over n uniform samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = sample_batch(game, n, seed)
    with np.errstate(over="ignore", invalid="ignore"):
        sq = squared_consistency(f, game, alpha, batch)
    bad = ~np.isfinite(sq)
    sq = np.where(bad, np.inf, sq)
    with np.errstate(invalid="ignore"):
        std = float(np.std(sq)) if not bad.any() else float("inf")
    return EvalReport(
        game=game.name, alpha=float(alpha), fields=(f.name,), n_samples=n,
        mean_sq=float(np.mean(sq)), std_sq=std, n_diverged=int(bad.sum()), seed=seed,
    )


def cosine_samples(field_a: UpdateField, field_b: UpdateField, game: Game, n: int = 1000, seed: int = 0):
    """Per-sample cosine between concatenated updates; near-zero vectors give NaN."""
    batch = sample_batch(game, n, seed)
    a = np.concatenate([np.asarray(x) for x in field_a.evaluate(batch)], axis=1)
    b = np.concatenate([np.asarray(x) for x in field_b.evaluate(batch)], axis=1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= COSINE_MIN_NORM) & (nb >= COSINE_MIN_NORM) & np.isfinite(na) & np.isfinite(nb)
    cos = np.full(n, np.nan)
    cos[ok] = np.clip(np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok]), -1.0, 1.0)
    return cos


def cosine_similarity(field_a: UpdateField, field_b: UpdateField, game: Game, n: int = 1000, seed: int = 0):
    """(mean, std) of per-sample cosine similarity, skipping near-zero updates."""
    cos = cosine_samples(field_a, field_b, game, n, seed)
    used = cos[~np.isnan(cos)]
    if used.size == 0:
        raise ValueError("every sample was skipped: update norms below threshold")
    return float(np.mean(used)), float(np.std(used))


# learning trajectories


@dataclass
class Trajectory:
    steps: np.ndarray
    theta: np.ndarray  # (len, d1 + d2)
    loss1: np.ndarray
    loss2: np.ndarray
    init_sigma: float
    rule: str
    diverged: bool = False
    diverged_at: Optional[int] = None

    def __len__(self):
        return len(self.steps)

    @property
    def norms(self):
        return np.linalg.norm(self.theta, axis=1)


@functools.lru_cache(maxsize=None)
def _rollout(game: Game, players, length: int):
    f1, f2 = players
    d1 = game.d1
    k = game.per_step_scale

    def step(theta, _, aux):
        t1, t2 = theta[:d1], theta[d1:]
        nxt = theta + jnp.concatenate([f1(t1, t2, aux), f2(t1, t2, aux)])
        n1, n2 = nxt[:d1], nxt[d1:]
        return nxt, (nxt, k * game.loss1(n1, n2), k * game.loss2(n1, n2))

    @jax.jit
    def run(theta, aux):
        return jax.lax.scan(lambda c, x: step(c, x, aux), theta, None, length=length)[1]

    return run


def run_learning(
    game: Game,
    f,
    alpha: Optional[float] = None,
    steps: int = 1000,
    init_sigma: Optional[float] = None,
    seed: int = 0,
    theta0=None,
    chunk: int = 1000,
) -> Trajectory:
    """Iterate theta <- theta + field(theta) from a Gaussian (or given) start.

    ``f`` is an UpdateField or a rule string (which then needs ``alpha``).
    Halts when the parameter norm exceeds 1e8 or turns non-finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(f, str):
        if alpha is None:
            raise ValueError("a rule string needs a look-ahead rate")
        f = make_field(game, alpha, f)
    sigma = game.init_sigma if init_sigma is None else float(init_sigma)
    if theta0 is None:
        theta = np.random.default_rng(seed).normal(0.0, sigma, size=game.dim)
    else:
        theta = np.asarray(theta0, dtype=np.float64).reshape(-1)
        if theta.shape != (game.dim,):
            raise DimensionError(f"{game.name} has {game.dim} parameters, got {theta.shape}")
    t1, t2 = theta[: game.d1], theta[game.d1 :]
    thetas = [theta]
    l1, l2 = ([float(v)] for v in game.losses(JointParams(jnp.asarray(t1), jnp.asarray(t2))))
    diverged_at = None
    done = 0
    current = jnp.asarray(theta)
    while done < steps:
        n = min(chunk, steps - done)
        th, a, b = (np.asarray(x) for x in _rollout(game, f.players, n)(current, f.aux))
        with np.errstate(over="ignore", invalid="ignore"):
            norms = np.linalg.norm(th, axis=1)
            bad = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM) | ~np.isfinite(a) | ~np.isfinite(b)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            keep = k + 1 if np.isfinite(norms[k]) and np.isfinite(a[k]) and np.isfinite(b[k]) else k
            thetas.extend(th[:keep])
            l1.extend(a[:keep])
            l2.extend(b[:keep])
            diverged_at = done + k + 1
            break
        thetas.extend(th)
        l1.extend(a)
        l2.extend(b)
        current = th[-1]
        done += n
    return Trajectory(
        steps=np.arange(len(thetas)), theta=np.array(thetas), loss1=np.array(l1, dtype=float),
        loss2=np.array(l2, dtype=float), init_sigma=sigma, rule=f.name,
        diverged=diverged_at is not None, diverged_at=diverged_at,
    )


def loss_variance(traj: Trajectory, window: Optional[int] = None) -> float:
    """Unbiased sample variance of player 1's loss over the trailing window."""
    window = len(traj) if window is None else window
    if window < 2 or len(traj) < 1:
        raise ValueError("variance needs a window of at least two losses")
    if window > len(traj):
        raise ValueError(f"window {window} exceeds trajectory length {len(traj)}")
    return float(np.var(traj.loss1[-window:], ddof=1))


# gradient-field grids


@dataclass
class FieldGrid:
    xs: np.ndarray
    ys: np.ndarray
    dx: np.ndarray  # (len(ys), len(xs)), player 1 update
    dy: np.ndarray  # player 2 update

    def rows(self):
        for j, y in enumerate(self.ys):
            for i, x in enumerate(self.xs):
                yield float(x), float(y), float(self.dx[j, i]), float(self.dy[j, i])

    @property
    def size(self):
        return self.dx.size


def export_field(f: UpdateField, game: Game, resolution=21) -> FieldGrid:
    """Evaluate a field on a regular grid over the game's region (2-parameter games only)."""
    if game.d1 + game.d2 != 2:
        raise DimensionError(f"{game.name} has {game.dim} parameters; field grids need exactly 2")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    if nx < 2 or ny < 2:
        raise ValueError("grid resolution must be at least 2 per axis")
    low, high = game.region
    xs = np.linspace(low[0], high[0], nx)
    ys = np.linspace(low[1], high[1], ny)
    gx, gy = np.meshgrid(xs, ys)
    batch = JointParams(jnp.asarray(gx.reshape(-1, 1)), jnp.asarray(gy.reshape(-1, 1)))
    u1, u2 = f.evaluate(batch)
    return FieldGrid(xs, ys, np.asarray(u1).reshape(ny, nx), np.asarray(u2).reshape(ny, nx))


# closed-form reference solutions


def _linear_player(t1, t2, aux):
    w, c = aux
    return jnp.atleast_1d(jnp.concatenate([t1, t2], axis=-1) @ w + c)


def _linear_player1(t1, t2, aux):
    return _linear_player(t1, t2, aux[0])


def _linear_player2(t1, t2, aux):
    return _linear_player(t1, t2, aux[1])


_LINEAR_PLAYERS = (_linear_player1, _linear_player2)


def linear_field(game: Game, alpha: float, coef1, coef2, name="linear") -> UpdateField:
    """Affine update field on a 2-parameter game: f_i = coef_i[0] x + coef_i[1] y + coef_i[2]."""
    if game.dim != 2:
        raise DimensionError("linear reference fields are defined for 2-parameter games")
    aux = tuple((jnp.asarray(c[:2], dtype=jnp.float64), jnp.asarray(c[2], dtype=jnp.float64)) for c in (coef1, coef2))
    return UpdateField(game, float(alpha), name, _LINEAR_PLAYERS, aux=aux)


def tandem_consistent_coefficients(alpha: float, branch: int = -1):
    """(a, b, c) of the linear consistent Tandem solution f1 = f2 = a x + b y + c."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if branch not in (1, -1):
        raise ValueError("branch must be +1 or -1")
    a = (branch * np.sqrt(1 + 8 * alpha) - 1 - 4 * alpha) / (4 * alpha)
    den = 1 + 2 * alpha * (1 + a)
    return a, -2 * alpha * (1 + a) / den, 2 * alpha / den


def oracle_tandem_consistent(alpha: float, branch: int = -1) -> UpdateField:
    a, b, c = tandem_consistent_coefficients(alpha, branch)
    sign = "+" if branch > 0 else "-"
    return linear_field(get_game("tandem"), alpha, (a, b, c), (a, b, c), name=f"tandem-consistent{sign}")


def oracle_hamiltonian_consistent(alpha: float) -> UpdateField:
    """The unique linear consistent field of the Hamiltonian game."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    k = -alpha / (1 + 2 * alpha**2)
    return linear_field(
        get_game("hamiltonian"), alpha, (2 * alpha * k, k, 0.0), (-k, 2 * alpha * k, 0.0),
        name="hamiltonian-consistent",
    )


def hamiltonian_contraction(alpha: float) -> float:
    """Per-step factor on ||theta||^2 under the consistent Hamiltonian field."""
    return 1 - alpha**2 * (3 + 4 * alpha**2) / (1 + 2 * alpha**2) ** 2


def plola_hamiltonian_growth(alpha: float) -> float:
    """Lower bound on the per-step factor on ||theta||^2 under p-LOLA, any p in [0, 1]."""
    return 1 - alpha**2 + alpha**4


def oracle_tandem_hola(n: int, theta):
    """Exact HOLA-n on Tandem at alpha = 1: both players move by 2^(n+2) - 2(1 + x + y)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    x, y = np.asarray(theta[0], float), np.asarray(theta[1], float)
    u = 2.0 ** (n + 2) - 2 * (1 + x + y)
    return u, u


# CSV schemas

CONSISTENCY_COLUMNS = ("game", "alpha", "field", "n_samples", "mean_sq_loss", "std", "n_diverged")
COSINE_COLUMNS = ("game", "alpha", "fieldA", "fieldB", "mean", "std")
FIELD_COLUMNS = ("x", "y", "dx", "dy")


def trajectory_columns(game: Game) -> tuple:
    names = [f"theta1_{i}" for i in range(game.d1)] + [f"theta2_{i}" for i in range(game.d2)]
    return ("step", *names, "loss1", "loss2")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_csv(columns: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_csv(text: str, columns: Optional[Sequence[str]] = None):
    """Parse a CSV written by ``to_csv``; numeric cells come back as int or float."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if columns is not None and tuple(header) != tuple(columns):
        raise ValueError(f"unexpected header {header}, expected {list(columns)}")
    out = []
    for row in reader:
        out.append({k: _parse(v) for k, v in zip(header, row)})
    return header, out


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def consistency_rows(reports: Sequence[EvalReport]):
    for r in reports:
        yield (r.game, r.alpha, "+".join(r.fields), r.n_samples, r.mean_sq, r.std_sq, r.n_diverged)


def trajectory_rows(traj: Trajectory):
    for s, th, a, b in zip(traj.steps, traj.theta, traj.loss1, traj.loss2):
        yield (int(s), *(float(v) for v in th), float(a), float(b))
