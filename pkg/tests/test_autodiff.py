import jax.numpy as jnp
import numpy as np
import pytest

from colashape import DimensionError, GAMES, JointParams, NumericError
from colashape.autodiff import VectorFn, check_finite, grad, jacobian, nest_check, partial_grad
from colashape.games import sample_batch


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (float(f(x + e)) - float(f(x - e))) / (2 * h)
    return out


def test_grad_square():
    assert float(grad(lambda x: x[0] ** 2, [3.0])[0]) == 6.0


def test_grad_bilinear():
    np.testing.assert_allclose(grad(lambda v: v[0] * v[1], [2.0, 5.0]), [5.0, 2.0])


def test_grad_tandem_loss1_at_origin():
    tandem = GAMES["tandem"]
    g = grad(lambda v: tandem.loss1(v[:1], v[1:]), [0.0, 0.0])
    np.testing.assert_allclose(g, [-2.0, 0.0])


def test_partial_grad_examples():
    tandem, ham = GAMES["tandem"], GAMES["hamiltonian"]
    p0 = JointParams(jnp.array([0.0]), jnp.array([0.0]))
    p10 = JointParams(jnp.array([1.0]), jnp.array([0.0]))
    assert float(partial_grad(tandem.loss2, p0, 2)[0]) == -2.0
    assert float(partial_grad(ham.loss1, p10, 1)[0]) == 0.0
    assert float(partial_grad(ham.loss2, p10, 2)[0]) == -1.0


def test_partial_grad_rejects_bad_player():
    with pytest.raises(ValueError):
        partial_grad(GAMES["tandem"].loss1, JointParams(jnp.zeros(1), jnp.zeros(1)), 3)


def test_jacobian_examples():
    np.testing.assert_allclose(jacobian(lambda v: jnp.stack([v[0] * v[1], v[0] + v[1]]), [2.0, 3.0]), [[3, 2], [1, 1]])
    tandem = GAMES["tandem"]
    hess = jacobian(lambda v: grad(lambda w: tandem.loss1(w[:1], w[1:]), v), [0.3, -0.7])
    np.testing.assert_allclose(hess, [[2, 2], [2, 2]])
    np.testing.assert_allclose(jacobian(lambda v: v, np.arange(4.0)), np.eye(4))


@pytest.mark.parametrize("depth,at", [(1, 5.0), (2, 2.0), (9, 1.0), (9, 0.7)])
def test_nest_check(depth, at):
    assert nest_check(depth, at)


def test_nest_check_rejects_depth_zero():
    with pytest.raises(ValueError):
        nest_check(0)


@pytest.mark.parametrize("name", sorted(GAMES))
def test_grad_matches_finite_differences(name):
    game = GAMES[name]
    batch = sample_batch(game, 100, seed=7)
    for i in range(100):
        theta = np.concatenate([np.asarray(batch.theta1[i]), np.asarray(batch.theta2[i])])
        for loss in (game.loss1, game.loss2):
            f = lambda v: loss(jnp.asarray(v[: game.d1]), jnp.asarray(v[game.d1 :]))  # noqa: E731
            g = np.asarray(grad(f, theta))
            fd = central_diff(f, theta)
            scale = max(np.linalg.norm(fd), 1e-3)
            assert np.linalg.norm(g - fd) / scale < 1e-5


def test_linearity(rng):
    tandem = GAMES["balduzzi"]
    f = lambda v: tandem.loss1(v[:1], v[1:])  # noqa: E731
    g = lambda v: jnp.sin(v[0]) * v[1] ** 3  # noqa: E731
    for _ in range(20):
        x = rng.uniform(-1, 1, 2)
        lhs = grad(lambda v: 2.5 * f(v) - 0.75 * g(v), x)
        rhs = 2.5 * grad(f, x) - 0.75 * grad(g, x)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_determinism():
    f = lambda v: GAMES["ipd"].loss1(v[:5], v[5:])  # noqa: E731
    x = np.linspace(-2, 2, 10)
    assert np.array_equal(np.asarray(grad(f, x)), np.asarray(grad(f, x)))


def test_dimension_errors():
    fn = VectorFn(lambda v: v @ v, in_dim=3)
    with pytest.raises(DimensionError):
        grad(fn, [1.0, 2.0])
    with pytest.raises(DimensionError):
        grad(lambda v: v, [1.0, 2.0])
    with pytest.raises(DimensionError):
        grad(lambda v: v[0], np.ones((2, 2)))


def test_non_finite_reports_coordinate():
    with pytest.raises(NumericError) as err:
        grad(lambda v: jnp.sqrt(v[0]) + v[1], [0.0, 1.0])
    assert err.value.coordinate == 0
    with pytest.raises(NumericError):
        check_finite(np.array([0.0, np.nan]))
