import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comet import autodiff as ad
from comet.dynamics import (comet_dynamics, comet_loss, constants_jacobian, ortho_project,
                            plain_loss, predict)
from comet.models import ConfigError, ModelConfig, init_params, mlp_forward

from conftest import fd_grad, rel_err


def gram_schmidt(v, rows):
    """Deflate ``v`` against an orthonormalised copy of ``rows`` (reference route)."""
    basis = []
    for g in rows:
        u = np.array(g, dtype=np.float64)
        for b in basis:
            u = u - np.dot(u, b) * b
        basis.append(u / np.linalg.norm(u))
    out = np.array(v, dtype=np.float64)
    for b in basis:
        out = out - np.dot(out, b) * b
    return out


def test_projection_simple_example():
    out = ortho_project(np.array([1.0, 1.0]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-15)


def test_projection_against_two_axes():
    out = ortho_project(np.array([1.0, 2.0, 3.0]), np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    np.testing.assert_allclose(out.data, [0.0, 0.0, 3.0], atol=1e-15)


def test_projection_no_constants_is_identity():
    v = np.array([0.1, -0.4, 2.0])
    assert ortho_project(v, np.zeros((0, 3))).data.tobytes() == v.tobytes()


def test_projection_too_many_constants():
    with pytest.raises(ConfigError):
        ortho_project(np.ones(2), np.eye(2))


def test_projection_rank_deficient_raises_or_jitters():
    grads = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.raises(ad.RankDeficient):
        ortho_project(np.ones(3), grads)
    out, n = ortho_project(np.ones(3), grads, on_rank_deficient="jitter")
    assert n == 1 and np.all(np.isfinite(out.data))


def test_projection_matches_gram_schmidt(rng):
    for _ in range(200):
        n_s = rng.integers(2, 9)
        n_c = rng.integers(1, n_s)
        g = rng.normal(size=(n_c, n_s))
        v = rng.normal(size=n_s)
        out = ortho_project(v, g).data
        assert rel_err(out, gram_schmidt(v, g)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3))
def test_projection_idempotent_and_scale_equivariant(seed, alpha):
    r = np.random.default_rng(seed)
    n_s = r.integers(2, 8)
    n_c = r.integers(1, n_s)
    g, v = r.normal(size=(n_c, n_s)), r.normal(size=n_s)
    p = ortho_project(v, g).data
    np.testing.assert_allclose(ortho_project(p, g).data, p, atol=1e-12 * (1 + np.linalg.norm(v)))
    np.testing.assert_allclose(ortho_project(alpha * v, g).data, alpha * p,
                               atol=1e-12 * abs(alpha) * (1 + np.linalg.norm(v)))
    assert np.max(np.abs(g @ p)) <= 1e-9 * (np.linalg.norm(g, axis=1).max() * np.linalg.norm(p) + 1)


def test_projection_batched(rng):
    g, v = rng.normal(size=(6, 2, 4)), rng.normal(size=(6, 4))
    out = ortho_project(v, g).data
    for k in range(6):
        np.testing.assert_allclose(out[k], gram_schmidt(v[k], g[k]), atol=1e-12)


def _store(n_s, n_c, n_x=0, seed=0, width=16, layers=2, kind="comet"):
    return init_params(ModelConfig(kind, n_s, n_c, n_x, layers, width, seed))


def test_constants_jacobian_matches_finite_differences(rng):
    store = _store(4, 3, seed=2)
    s = rng.normal(size=(5, 4))
    jac = constants_jacobian(store, s).data
    assert jac.shape == (5, 3, 4)
    for b in range(5):
        for i in range(3):
            fd = fd_grad(lambda v: mlp_forward(store, v).data[4 + i], s[b])
            assert rel_err(jac[b, i], fd) < 1e-7


def test_comet_output_is_perpendicular(rng):
    store = _store(4, 2, seed=1)
    out = comet_dynamics(store, rng.normal(size=(50, 4)))
    dots = np.einsum("bij,bj->bi", out.grad_c.data, out.s_dot.data)
    scale = np.linalg.norm(out.grad_c.data, axis=-1) * np.linalg.norm(out.s_dot.data, axis=-1)[:, None]
    assert np.all(np.abs(dots) <= 1e-9 * (scale + 1))


def test_comet_with_no_constants_equals_raw_guess(rng):
    store = _store(3, 0)
    s = rng.normal(size=(4, 3))
    out = comet_dynamics(store, s)
    np.testing.assert_array_equal(out.s_dot.data, mlp_forward(store, s).data)
    assert out.grad_c.shape == (4, 0, 3)


def test_comet_external_input_changes_output(rng):
    store = _store(4, 2, n_x=1)
    s = rng.normal(size=(3, 4))
    a = predict(store, s, np.zeros((3, 1)))
    b = predict(store, s, np.ones((3, 1)))
    assert a.shape == (3, 4) and not np.allclose(a, b)


def test_loss_gradient_matches_finite_differences(rng):
    store = _store(4, 2, seed=4, width=8)
    s, sd = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))

    def loss_at(flat):
        weights = store.with_flat(flat).tensors()
        return float(comet_loss(weights, s, sd, rng=np.random.default_rng(9),
                                config=store.config).total.data)

    weights = store.tensors(requires_grad=True)
    lb = comet_loss(weights, s, sd, rng=np.random.default_rng(9), config=store.config)
    g = np.concatenate([x.data.ravel() for x in ad.grad(lb.total, weights)])
    assert rel_err(g, fd_grad(loss_at, store.flat, 1e-6)) < 1e-6


def test_loss_terms_and_weights(rng):
    store = _store(2, 1, seed=0)
    s, sd = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    lb = comet_loss(store, s, sd, w1=0.5, w2=2.0, rng=np.random.default_rng(0))
    assert float(lb.total.data) == pytest.approx(lb.l1 + 0.5 * lb.l2 + 2.0 * lb.l3, rel=1e-14)
    pred = predict(store, s)
    assert lb.l1 == pytest.approx(np.mean(np.sum((pred - sd) ** 2, axis=1)), rel=1e-12)


def test_loss_zero_for_exact_model():
    # zero network: guess 0, constants constant, so observations 0 give L = 0
    store = _store(2, 1)
    store = store.with_flat(np.zeros_like(store.flat))
    lb = comet_loss(store, np.ones((4, 2)), np.zeros((4, 2)), rng=np.random.default_rng(0))
    # constants gradient is zero here: handled by jitter, loss still zero
    assert float(lb.total.data) == 0.0


def test_loss_no_constants_and_plain_loss_agree(rng):
    comet = _store(3, 0, seed=7)
    node = _store(3, 0, seed=7, kind="node")
    s, sd = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    a = comet_loss(comet, s, sd, w1=0.0, w2=0.0)
    b = plain_loss(node, s, sd)
    assert float(a.total.data) == float(b.total.data)


def test_loss_noise_is_seeded(rng):
    store = _store(4, 2)
    s, sd = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    a = comet_loss(store, s, sd, rng=np.random.default_rng(3))
    b = comet_loss(store, s, sd, rng=np.random.default_rng(3))
    c = comet_loss(store, s, sd, rng=np.random.default_rng(4))
    assert a.l3 == b.l3 and a.l3 != c.l3


@pytest.mark.parametrize("kind,n_s,n_c,n_x", [
    ("comet", 4, 2, 0), ("comet", 8, 7, 0), ("comet", 4, 3, 1), ("comet", 3, 0, 0),
    ("node", 4, 0, 1), ("hnn", 4, 0, 0), ("hnn", 2, 0, 1),
])
def test_inference_path_matches_differentiable_path(kind, n_s, n_c, n_x, rng):
    from comet.models import hnn_dynamics, node_dynamics

    store = init_params(ModelConfig(kind, n_s, n_c, n_x, 2, 16, seed=n_s + n_c))
    s = rng.normal(size=(6, n_s))
    x = rng.normal(size=(6, n_x)) if n_x else None
    weights = store.tensors()
    if kind == "comet":
        ref = comet_dynamics(weights, s, x, store.config).s_dot.data
    elif kind == "hnn":
        ref = hnn_dynamics(weights, s, x, store.config).data
    else:
        ref = node_dynamics(weights, s, x, store.config).data
    fast = predict(store, s, x)
    assert rel_err(fast, ref) < 1e-12
    single = predict(store, s[0], None if x is None else x[0])
    np.testing.assert_allclose(single, fast[0], rtol=1e-12, atol=1e-14)
