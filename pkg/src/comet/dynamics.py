"""Constant-preserving dynamics: project the network's guess off the constants' gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit

from . import autodiff as ad
from .autodiff import RankDeficient, Value
from .models import (ConfigError, ModelConfig, ParamStore, _with_external, hnn_dynamics,
                     mlp_forward, node_dynamics)

JITTER = 1e-12


@dataclass
class CometOutput:
    s_dot0: Value
    c: Value
    grad_c: Value  # (..., n_c, n_s)
    s_dot: Value


@dataclass
class LossBreakdown:
    total: Value
    l1: float
    l2: float
    l3: float
    w1: float
    w2: float
    n_jitter: int = 0


def _forward_with_jacobian(params, config: ModelConfig, s: np.ndarray, x=None):
    """Dynamics guess, constants and d(constants)/ds from a single trunk pass.

    The input is replicated once per constant so that a single reverse sweep
    of sum_i c_i(copy i) yields every row of the Jacobian.
    """
    s = np.asarray(s, dtype=np.float64)
    n_s, n_c = config.n_s, config.n_c
    if s.shape[-1] != n_s:
        raise ad.ShapeError("comet", (s.shape,), f"expected {n_s} states")
    if n_c == 0:
        out = mlp_forward(params, _with_external(ad.const(s), x, config.n_x))
        return out, out[..., n_s:], Value(np.zeros(s.shape[:-1] + (0, n_s)))
    s_rep = ad.leaf(np.broadcast_to(s, (n_c,) + s.shape))
    out = mlp_forward(params, _with_external(s_rep, x, config.n_x))
    c = out[..., n_s:]
    pick = np.zeros((n_c,) + (1,) * (s.ndim - 1) + (n_c,))
    pick[np.arange(n_c), ..., np.arange(n_c)] = 1.0
    (jac,) = ad.grad(ad.sum(ad.mul(c, pick)), [s_rep], create_graph=True)
    # (n_c, ..., n_s) -> (..., n_c, n_s)
    perm = tuple(range(1, s.ndim)) + (0, s.ndim)
    return out[0], c[0], ad.transpose(jac, perm)


def constants_jacobian(params, s, x=None, config: ModelConfig | None = None) -> Value:
    """Rows are the gradients of each learned constant with respect to the state."""
    config = config or params.config
    return _forward_with_jacobian(params, config, s, x)[2]


def ortho_project(s_dot0, grad_c, on_rank_deficient: str = "raise",
                  rank_tol: float = 1e-10) -> Value | tuple[Value, int]:
    """Remove from ``s_dot0`` its components along every row of ``grad_c``.

    Builds A = [grad_c^T | s_dot0] of shape (..., n_s, n_c + 1), factors it
    as QR and returns the last column of Q scaled by the last diagonal entry
    of R. With ``on_rank_deficient="jitter"`` dependent gradient columns get
    a tiny diagonal shift instead of raising; the return value is then
    ``(s_dot, n_jittered)``.
    """
    s_dot0 = s_dot0 if isinstance(s_dot0, Value) else ad.const(s_dot0)
    grad_c = grad_c if isinstance(grad_c, Value) else ad.const(grad_c)
    n_c, n_s = grad_c.shape[-2:]
    if n_c >= n_s:
        raise ConfigError(f"need fewer constants than states, got n_c={n_c}, n_s={n_s}")
    jittered = 0
    if n_c == 0:
        return (s_dot0, 0) if on_rank_deficient == "jitter" else s_dot0
    a = ad.concat([ad.transpose(grad_c), ad.reshape(s_dot0, s_dot0.shape + (1,))], axis=-1)
    q_np, r_np = ad.householder_qr(a.data)
    try:
        ad.rank_check(r_np, a.data[..., :n_c], rank_tol, columns=range(n_c))
    except RankDeficient:
        if on_rank_deficient != "jitter":
            raise
        scale = np.sqrt(np.max(np.sum(a.data[..., :n_c] ** 2, axis=-2), axis=-1))
        diag = np.abs(np.diagonal(r_np, axis1=-2, axis2=-1)[..., :n_c])
        bad = np.any(diag < rank_tol * scale[..., None], axis=-1)
        shift = np.zeros(a.shape)
        idx = np.arange(n_c + 1)
        shift[..., idx, idx] = JITTER
        a = ad.add(a, shift * bad[..., None, None])
        jittered = int(np.sum(bad))
    q, r = ad.qr(a, check=False)
    s_dot = ad.mul(q[..., :, n_c], r[..., n_c:n_c + 1, n_c])
    return (s_dot, jittered) if on_rank_deficient == "jitter" else s_dot


def comet_dynamics(params, s, x=None, config: ModelConfig | None = None,
                   on_rank_deficient: str = "raise") -> CometOutput:
    config = config or params.config
    s_dot0, c, jac = _forward_with_jacobian(params, config, s, x)
    s_dot0 = s_dot0[..., :config.n_s]
    s_dot = ortho_project(s_dot0, jac, on_rank_deficient)
    if isinstance(s_dot, tuple):
        s_dot = s_dot[0]
    return CometOutput(s_dot0, c, jac, s_dot)


def _mean_sq(diff: Value) -> Value:
    """Batch mean of the per-sample squared norm (last axis)."""
    n = diff.data.size // max(diff.shape[-1], 1) if diff.ndim else 1
    return ad.div(ad.sum(ad.mul(diff, diff)), float(max(n, 1)))


def comet_loss(params, s, s_dot_obs, x=None, w1: float = 1.0, w2: float = 1.0,
               sigma: float = 0.1, rng: np.random.Generator | None = None,
               config: ModelConfig | None = None) -> LossBreakdown:
    """Data fit of the projected and raw dynamics plus the constraint penalty.

    The penalty term is evaluated at Gaussian-perturbed copies of the states
    (fresh noise each call). All terms are averaged over the batch.
    """
    config = config or params.config
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, n_s) array")
    target = ad.const(s_dot_obs)
    n_s, n_c, b = config.n_s, config.n_c, s.shape[0]

    if n_c == 0:
        s_dot0 = node_dynamics(params, s, x, config)[..., :n_s]
        l1 = _mean_sq(ad.sub(s_dot0, target))
        total = ad.add(l1, ad.mul(l1, w1))
        return LossBreakdown(total, float(l1.data), float(l1.data), 0.0, w1, w2)

    if rng is None:
        rng = np.random.default_rng()
    noisy = s + rng.normal(0.0, sigma, size=s.shape)
    both = np.concatenate([s, noisy], axis=0)
    x_both = None
    if x is not None:
        x = np.asarray(x, dtype=np.float64)
        x_both = np.concatenate([x, x], axis=0) if x.ndim == 2 else x
    out0, _, jac = _forward_with_jacobian(params, config, both, x_both)
    s_dot0_all = out0[..., :n_s]
    s_dot0, jac_clean = s_dot0_all[:b], jac[:b]
    s_dot, n_jit = ortho_project(s_dot0, jac_clean, on_rank_deficient="jitter")

    l1 = _mean_sq(ad.sub(s_dot, target))
    l2 = _mean_sq(ad.sub(s_dot0, target))
    # (B, n_c, n_s) @ (B, n_s, 1) -> per-constant rates of change along the guess
    rates = ad.matmul(jac[b:], ad.reshape(s_dot0_all[b:], (b, n_s, 1)))
    l3 = _mean_sq(ad.reshape(rates, (b, n_c)))
    total = ad.add(ad.add(l1, ad.mul(l2, w1)), ad.mul(l3, w2))
    return LossBreakdown(total, float(l1.data), float(l2.data), float(l3.data), w1, w2, n_jit)


def plain_loss(params, s, s_dot_obs, x=None, config: ModelConfig | None = None) -> LossBreakdown:
    """Squared error of NODE / HNN predictions."""
    config = config or params.config
    if config.model_kind == "hnn":
        pred = hnn_dynamics(params, s, x, config)
    else:
        pred = node_dynamics(params, s, x, config)
    l1 = _mean_sq(ad.sub(pred, ad.const(s_dot_obs)))
    return LossBreakdown(l1, float(l1.data), 0.0, 0.0, 0.0, 0.0)


def weight_arrays(params) -> list[np.ndarray]:
    if isinstance(params, ParamStore):
        return [params[name] for name, _, _ in params.layout]
    return [w.data if isinstance(w, Value) else np.asarray(w, dtype=np.float64) for w in params]


def _mlp_with_state_jacobian(weights: list[np.ndarray], inp: np.ndarray, n_s: int,
                             jacobian: bool = True):
    """Plain-numpy forward pass, optionally carrying d(output)/d(state) in forward mode."""
    h = inp
    dh = None
    if jacobian:
        eye = np.eye(inp.shape[-1])[:, :n_s]
        dh = np.broadcast_to(eye, inp.shape[:-1] + eye.shape)
    n_layers = len(weights) // 2
    for k in range(n_layers):
        w, b = weights[2 * k], weights[2 * k + 1]
        z = h @ w + b
        dz = w.T @ dh if jacobian else None
        if k < n_layers - 1:
            h = log_expit(z)
            if jacobian:
                dh = expit(-z)[..., None] * dz
        else:
            h, dh = z, dz
    return h, dh


def predict(params, s, x=None, config: ModelConfig | None = None) -> np.ndarray:
    """Model state derivative as a plain array, for any model kind.

    Inference-only twin of the differentiable path (no graph is built), used
    for rollouts and validation.
    """
    config = config or params.config
    s = np.asarray(s, dtype=np.float64)
    inp = s
    if config.n_x:
        if x is None:
            raise ad.ShapeError("external input", ((),), f"model expects {config.n_x} inputs")
        xb = np.broadcast_to(np.asarray(x, dtype=np.float64), s.shape[:-1] + (config.n_x,))
        inp = np.concatenate([s, xb], axis=-1)
    elif x is not None and np.size(x):
        raise ad.ShapeError("external input", (np.shape(x),), "model takes no external input")
    weights = weight_arrays(params)
    n_s, kind = config.n_s, config.model_kind
    if kind == "node" or (kind == "comet" and config.n_c == 0):
        return _mlp_with_state_jacobian(weights, inp, n_s, jacobian=False)[0][..., :n_s]
    out, jac = _mlp_with_state_jacobian(weights, inp, n_s)
    if kind == "hnn":
        dh = jac[..., 0, :]
        half = n_s // 2
        return np.concatenate([dh[..., half:], -dh[..., :half]], axis=-1)
    n_c = config.n_c
    a = np.concatenate([np.swapaxes(jac[..., n_s:, :], -1, -2), out[..., :n_s, None]], axis=-1)
    # The product below is invariant to QR sign conventions, so LAPACK is fine here.
    q, r = np.linalg.qr(a)
    return q[..., :, n_c] * r[..., n_c:n_c + 1, n_c]


def vector_field(store: ParamStore, force: Callable[[float], np.ndarray] | None = None
                 ) -> Callable[[float, np.ndarray], np.ndarray]:
    """``f(t, s)`` for integrators; ``force(t)`` supplies the external input."""
    weights = weight_arrays(store)
    config = store.config

    def f(t, s):
        x = None if force is None else np.atleast_1d(force(t))
        return predict(weights, s, x, config)

    return f
