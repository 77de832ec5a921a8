"""Mixture-density output head and the unimodal sum-of-squares head.

Every function accepts a single hidden state ``(n_h,)`` or a batch of rows
``(N, n_h)``; mixture arrays gain the same leading axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

V_FLOOR = 1e-6
# smallest log-weight whose exp is still a positive normal double
LOG_PI_FLOOR = math.log(np.finfo(np.float64).tiny)
LOG_2PI = math.log(2 * math.pi)


@dataclass
class MdnParams:
    W_pi: np.ndarray  # (n_c, n_h)
    b_pi: np.ndarray  # (n_c,)
    W_mu: np.ndarray  # (n_c, n_x, n_h)
    b_mu: np.ndarray  # (n_c, n_x)
    W_v: np.ndarray   # (n_c, n_x, n_h)
    b_v: np.ndarray   # (n_c, n_x)

    def __post_init__(self):
        n_c, n_h = self.W_pi.shape
        n_x = self.W_mu.shape[1]
        ok = (self.b_pi.shape == (n_c,) and self.W_mu.shape == (n_c, n_x, n_h)
              and self.W_v.shape == (n_c, n_x, n_h) and self.b_mu.shape == (n_c, n_x)
              and self.b_v.shape == (n_c, n_x))
        if not ok:
            raise ShapeError("inconsistent MDN parameter shapes")

    @property
    def n_c(self):
        return self.W_pi.shape[0]

    @property
    def n_x(self):
        return self.W_mu.shape[1]

    @property
    def n_h(self):
        return self.W_pi.shape[1]

    @classmethod
    def zeros(cls, n_c, n_h, n_x):
        return cls(np.zeros((n_c, n_h)), np.zeros(n_c), np.zeros((n_c, n_x, n_h)),
                   np.zeros((n_c, n_x)), np.zeros((n_c, n_x, n_h)), np.zeros((n_c, n_x)))


@dataclass
class MseParams:
    W: np.ndarray  # (n_x, n_h)
    b: np.ndarray  # (n_x,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError("inconsistent MSE head shapes")

    @classmethod
    def zeros(cls, n_h, n_x):
        return cls(np.zeros((n_x, n_h)), np.zeros(n_x))


@dataclass
class MixtureParams:
    pi: np.ndarray   # (..., n_c)
    mu: np.ndarray   # (..., n_c, n_x)
    v: np.ndarray    # (..., n_c, n_x)
    log_pi: np.ndarray | None = None

    def __post_init__(self):
        if self.log_pi is None:
            with np.errstate(divide="ignore"):
                self.log_pi = np.log(self.pi)

    def to_json(self) -> dict:
        return {"pi": np.asarray(self.pi).tolist(), "mu": np.asarray(self.mu).tolist(),
                "v": np.asarray(self.v).tolist()}


@dataclass
class MdnCache:
    h: np.ndarray
    v_pre: np.ndarray | None
    mixture: MixtureParams


def _rows(h, n_h):
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    H = h[None, :] if single else h
    if H.ndim != 2 or H.shape[1] != n_h:
        raise ShapeError(f"hidden state shape {h.shape} does not match n_h={n_h}")
    return H, single


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def mdn_forward(p: MdnParams, h, fixed_variance: float | None = None, return_cache=False):
    """Mixture weights (softmax), means (affine), variances (softplus + floor).

    With ``fixed_variance`` the variance path is bypassed and every variance is
    that constant, which turns a 1-component head into a plain Gaussian.
    """
    H, single = _rows(h, p.n_h)
    n_c, n_x = p.n_c, p.n_x
    log_pi = _log_softmax(H @ p.W_pi.T + p.b_pi)
    pi = np.exp(np.maximum(log_pi, LOG_PI_FLOOR))
    mu = (H @ p.W_mu.reshape(n_c * n_x, -1).T).reshape(-1, n_c, n_x) + p.b_mu
    if fixed_variance is None:
        v_pre = (H @ p.W_v.reshape(n_c * n_x, -1).T).reshape(-1, n_c, n_x) + p.b_v
        v = np.logaddexp(0.0, v_pre) + V_FLOOR
    else:
        v_pre = None
        v = np.full_like(mu, float(fixed_variance))
    if single:
        m = MixtureParams(pi[0], mu[0], v[0], log_pi[0])
    else:
        m = MixtureParams(pi, mu, v, log_pi)
    if return_cache:
        return m, MdnCache(H, v_pre, MixtureParams(pi, mu, v, log_pi))
    return m


def component_log_density(m: MixtureParams, x):
    x = np.asarray(x, dtype=np.float64)
    diff = x[..., None, :] - m.mu
    return -0.5 * (np.log(m.v) + LOG_2PI + diff * diff / m.v).sum(axis=-1)


def _joint_log(m: MixtureParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.mu.shape[-1]:
        raise ShapeError(f"target has {x.shape[-1]} channels, mixture has {m.mu.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite target in mixture_nll")
    return m.log_pi + component_log_density(m, x)


def _logsumexp(a):
    amax = a.max(axis=-1, keepdims=True)
    return (amax + np.log(np.exp(a - amax).sum(axis=-1, keepdims=True)))[..., 0]


def mixture_nll(m: MixtureParams, x):
    """Negative log likelihood (nats) of ``x`` under the diagonal Gaussian mixture."""
    return -_logsumexp(_joint_log(m, x))


def mdn_backward(p: MdnParams, h, x, cache: MdnCache, weight=None):
    """Gradients of ``sum_n weight[n] * nll_n`` w.r.t. the head parameters and ``h``."""
    H = cache.h
    m = cache.mixture
    X = np.asarray(x, dtype=np.float64).reshape(H.shape[0], -1)
    if X.shape[1] != p.n_x:
        raise ShapeError(f"target has {X.shape[1]} channels, head emits {p.n_x}")
    a = _joint_log(m, X)
    resp = np.exp(a - _logsumexp(a)[:, None])
    w = np.ones(H.shape[0]) if weight is None else np.broadcast_to(weight, (H.shape[0],))
    n_c, n_x = p.n_c, p.n_x

    d_logits = w[:, None] * (np.exp(m.log_pi) - resp)
    diff = X[:, None, :] - m.mu
    rw = (w[:, None] * resp)[:, :, None]
    d_mu = -rw * diff / m.v
    grads = MdnParams.zeros(n_c, p.n_h, n_x)
    grads.W_pi = d_logits.T @ H
    grads.b_pi = d_logits.sum(axis=0)
    flat_mu = d_mu.reshape(-1, n_c * n_x)
    grads.W_mu = (flat_mu.T @ H).reshape(n_c, n_x, -1)
    grads.b_mu = d_mu.sum(axis=0)
    dH = d_logits @ p.W_pi + flat_mu @ p.W_mu.reshape(n_c * n_x, -1)
    if cache.v_pre is not None:
        d_v = rw * 0.5 * (1.0 / m.v - diff * diff / (m.v * m.v))
        d_vpre = (d_v * expit(cache.v_pre)).reshape(-1, n_c * n_x)
        grads.W_v = (d_vpre.T @ H).reshape(n_c, n_x, -1)
        grads.b_v = d_vpre.reshape(-1, n_c, n_x).sum(axis=0)
        dH += d_vpre @ p.W_v.reshape(n_c * n_x, -1)
    if np.ndim(h) == 1:
        dH = dH[0]
    return grads, dH


def mdn_sample(m: MixtureParams, rng: np.random.Generator):
    """Draw a component from the categorical weights, then a diagonal Gaussian sample."""
    pi = np.asarray(m.pi)
    single = pi.ndim == 1
    P = pi[None] if single else pi
    mu = m.mu[None] if single else m.mu
    v = m.v[None] if single else m.v
    cdf = np.cumsum(P, axis=-1)
    cdf /= cdf[:, -1:]
    u = rng.random(P.shape[0])
    comp = np.minimum((cdf <= u[:, None]).sum(axis=-1), P.shape[1] - 1)
    rows = np.arange(P.shape[0])
    out = mu[rows, comp] + np.sqrt(v[rows, comp]) * rng.standard_normal((mu.shape[0], mu.shape[2]))
    return out[0] if single else out


def mse_forward(p: MseParams, h):
    H, single = _rows(h, p.W.shape[1])
    pred = H @ p.W.T + p.b
    return pred[0] if single else pred


def mse_loss(p: MseParams, h, x, weight=None):
    """Half sum-of-squares error and its gradients.

    Returns ``(loss, MseParams grads, dh)``; for a batch, loss is the weighted sum
    over rows.
    """
    H, single = _rows(h, p.W.shape[1])
    X = np.asarray(x, dtype=np.float64).reshape(H.shape[0], -1)
    if X.shape[1] != p.W.shape[0]:
        raise ShapeError(f"target has {X.shape[1]} channels, head emits {p.W.shape[0]}")
    w = np.ones(H.shape[0]) if weight is None else np.broadcast_to(weight, (H.shape[0],))
    resid = H @ p.W.T + p.b - X
    per_row = 0.5 * (resid * resid).sum(axis=1)
    d_pred = w[:, None] * resid
    grads = MseParams(d_pred.T @ H, d_pred.sum(axis=0))
    dH = d_pred @ p.W
    loss = float(per_row[0] if single else (w * per_row).sum())
    return loss, grads, dH[0] if single else dH


def mse_rows(p: MseParams, h, x):
    """Per-row half sum-of-squares without gradients."""
    resid = mse_forward(p, h) - np.asarray(x, dtype=np.float64)
    return 0.5 * (resid * resid).sum(axis=-1)
