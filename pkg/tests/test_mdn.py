import math

import numpy as np
import pytest

from motion_mdn.errors import NumericError, ShapeError
from motion_mdn.mdn import (V_FLOOR, MdnParams, MixtureParams, MseParams, mdn_backward,
                            mdn_forward, mdn_sample, mixture_nll, mse_loss)


def random_mdn(rng, n_c, n_h, n_x, scale=0.5):
    return MdnParams(*(scale * rng.standard_normal(s) for s in
                       [(n_c, n_h), (n_c,), (n_c, n_x, n_h), (n_c, n_x), (n_c, n_x, n_h), (n_c, n_x)]))


def ld_forward(p, h):
    """Softmax, affine means and softplus variances evaluated in long double."""
    L = np.longdouble
    h = h.astype(L)
    logits = p.W_pi.astype(L) @ h + p.b_pi.astype(L)
    e = np.exp(logits - logits.max())
    pi = e / e.sum()
    mu = np.einsum("cxh,h->cx", p.W_mu.astype(L), h) + p.b_mu.astype(L)
    z = np.einsum("cxh,h->cx", p.W_v.astype(L), h) + p.b_v.astype(L)
    v = np.log1p(np.exp(z)) + L(V_FLOOR)
    return pi, mu, v


def naive_nll(m, x):
    L = np.longdouble
    total = L(0)
    for c in range(len(m.pi)):
        v = m.v[c].astype(L)
        d = x.astype(L) - m.mu[c].astype(L)
        dens = np.prod(np.exp(-d * d / (2 * v)) / np.sqrt(2 * L(math.pi) * v))
        total += L(m.pi[c]) * dens
    return float(-np.log(total))


def test_zero_params_forward():
    m = mdn_forward(MdnParams.zeros(4, 3, 2), np.array([0.3, -1.0, 2.0]))
    assert np.allclose(m.pi, 0.25, atol=1e-15) and np.all(m.mu == 0)
    assert np.allclose(m.v, math.log(2) + 1e-6, atol=1e-15)
    assert m.v[0, 0] == pytest.approx(0.693148, abs=1e-6)


def test_softmax_shift_invariance(rng):
    p = random_mdn(rng, 5, 3, 2)
    h = rng.standard_normal(3)
    a = mdn_forward(p, h).pi
    p.b_pi += 123.4
    assert np.allclose(mdn_forward(p, h).pi, a, atol=1e-12, rtol=0)


def test_forward_matches_long_double(rng):
    p = random_mdn(rng, 3, 4, 2)
    h = rng.standard_normal(4)
    m = mdn_forward(p, h)
    pi, mu, v = ld_forward(p, h)
    for got, ref in ((m.pi, pi), (m.mu, mu), (m.v, v)):
        assert np.max(np.abs(got - ref.astype(float))) < 1e-12


def test_batch_rows_match_single(rng):
    p = random_mdn(rng, 3, 4, 2)
    H = rng.standard_normal((5, 4))
    mb = mdn_forward(p, H)
    for n in range(5):
        ms = mdn_forward(p, H[n])
        assert np.allclose(mb.pi[n], ms.pi) and np.allclose(mb.v[n], ms.v)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        mdn_forward(MdnParams.zeros(2, 3, 2), np.zeros(4))


def test_nll_gaussian_at_mean():
    m = MixtureParams(np.ones(1), np.zeros((1, 14)), np.ones((1, 14)))
    assert mixture_nll(m, np.zeros(14)) == pytest.approx(7 * math.log(2 * math.pi), abs=1e-12)
    assert mixture_nll(m, np.zeros(14)) == pytest.approx(12.865139, abs=1e-6)


def test_nll_duplicate_components_collapse(rng):
    mu, v, x = rng.standard_normal(3), rng.uniform(0.5, 2, 3), rng.standard_normal(3)
    one = MixtureParams(np.ones(1), mu[None], v[None])
    two = MixtureParams(np.full(2, 0.5), np.stack([mu, mu]), np.stack([v, v]))
    assert abs(mixture_nll(one, x) - mixture_nll(two, x)) < 1e-12


def test_nll_matches_naive_sum(rng):
    for _ in range(50):
        pi = rng.dirichlet(np.ones(3))
        m = MixtureParams(pi, rng.standard_normal((3, 2)), rng.uniform(0.3, 3, (3, 2)))
        x = rng.standard_normal(2)
        assert abs(mixture_nll(m, x) - naive_nll(m, x)) < 1e-10


def test_nll_far_from_means_is_finite():
    m = MixtureParams(np.array([0.5, 0.5]), np.zeros((2, 3)), np.full((2, 3), 1e-2))
    x = np.full(3, 50.0)  # thousands of sigma away: the naive density is exactly 0.0
    naive = sum(0.5 * np.prod(np.exp(-x * x / 2e-2) / np.sqrt(2 * math.pi * 1e-2)) for _ in range(2))
    assert naive == 0.0
    assert np.isfinite(mixture_nll(m, x))


def test_nll_rejects_nonfinite():
    m = MixtureParams(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(NumericError):
        mixture_nll(m, np.array([np.inf, 0.0]))


def _fd_head(p, h, x, eps=1e-5):
    def loss():
        return float(mixture_nll(mdn_forward(p, h), x))
    out = {}
    for name in ("W_pi", "b_pi", "W_mu", "b_mu", "W_v", "b_v"):
        arr = getattr(p, name)
        g = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss()
            arr[idx] = old - eps
            down = loss()
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    gh = np.empty_like(h)
    for k in range(len(h)):
        old = h[k]
        h[k] = old + eps
        up = loss()
        h[k] = old - eps
        down = loss()
        h[k] = old
        gh[k] = (up - down) / (2 * eps)
    out["h"] = gh
    return out


def _rel(a, n):
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-5))


def test_backward_matches_finite_differences(rng):
    for _ in range(5):
        p = random_mdn(rng, 2, 4, 3)
        h, x = rng.standard_normal(4), rng.standard_normal(3)
        _, cache = mdn_forward(p, h, return_cache=True)
        grads, dh = mdn_backward(p, h, x, cache)
        num = _fd_head(p, h, x)
        for name in ("W_pi", "b_pi", "W_mu", "b_mu", "W_v", "b_v"):
            assert _rel(getattr(grads, name), num[name]) < 1e-4, name
        assert _rel(dh, num["h"]) < 1e-4


def test_mean_gradient_zero_at_target(rng):
    p = MdnParams.zeros(1, 3, 2)
    p.b_mu[:] = [0.7, -0.2]
    p.b_v[:] = math.log(math.e - 1)  # softplus(z) = 1, so v = 1 + floor
    h = rng.standard_normal(3)
    _, cache = mdn_forward(p, h, return_cache=True)
    g, _ = mdn_backward(p, h, np.array([0.7, -0.2]), cache)
    assert np.all(g.W_mu == 0) and np.all(g.b_mu == 0)


def test_logit_gradients_sum_to_zero(rng):
    p = random_mdn(rng, 4, 3, 2)
    H, X = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    _, cache = mdn_forward(p, H, return_cache=True)
    g, _ = mdn_backward(p, H, X, cache)
    assert abs(g.b_pi.sum()) < 1e-12
    assert np.allclose(g.W_pi.sum(axis=0), 0, atol=1e-12)


def test_extreme_logits_stay_valid(rng):
    p = random_mdn(rng, 5, 3, 2)
    p.W_pi *= 1e3
    p.W_v *= 1e3
    for h in rng.standard_normal((200, 3)):
        m = mdn_forward(p, h)
        assert np.all(m.pi > 0) and abs(m.pi.sum() - 1) < 1e-6
        assert np.all(m.v >= V_FLOOR) and np.all(np.isfinite(m.v))


def test_sample_degenerate_weights(rng):
    m = MixtureParams(np.array([1.0, 0.0, 0.0]), np.array([[0.0], [10.0], [20.0]]), np.full((3, 1), 1e-6))
    xs = np.array([mdn_sample(m, rng) for _ in range(500)])
    assert np.all(np.abs(xs) < 6e-3)  # 6 sigma of the floor variance


def test_sample_deterministic_given_rng():
    m = MixtureParams(np.array([0.3, 0.7]), np.array([[0.0], [5.0]]), np.ones((2, 1)))
    a = [mdn_sample(m, np.random.default_rng(3)) for _ in range(3)]
    assert all(np.array_equal(a[0], b) for b in a)


def test_sample_moments(rng):
    pi = np.array([0.3, 0.7])
    mu, v = np.array([-10.0, 10.0]), np.array([0.5, 2.0])
    m = MixtureParams(np.tile(pi, (100_000, 1)), np.tile(mu[:, None], (100_000, 1, 1)),
                      np.tile(v[:, None], (100_000, 1, 1)))
    xs = mdn_sample(m, rng)[:, 0]
    comp = (xs > 0).astype(int)  # components sit 7+ std from 0: the split is unambiguous
    freq = np.bincount(comp, minlength=2) / len(xs)
    assert np.all(np.abs(freq - pi) < 0.01)
    for c in range(2):
        s = xs[comp == c]
        n = len(s)
        assert abs(s.mean() - mu[c]) < 3 * math.sqrt(v[c] / n)
        assert abs(s.var() - v[c]) < 3 * v[c] * math.sqrt(2 / (n - 1))


def test_mse_examples():
    p = MseParams(np.zeros((2, 3)), np.array([3.0, 4.0]))
    loss, g, dh = mse_loss(p, np.ones(3), np.array([3.0, 4.0]))
    assert loss == 0 and not np.any(g.W) and not np.any(g.b) and not np.any(dh)
    loss, _, _ = mse_loss(MseParams.zeros(3, 2), np.ones(3), np.array([3.0, 4.0]))
    assert loss == 12.5


def test_mse_gradients(rng):
    p = MseParams(rng.standard_normal((2, 4)), rng.standard_normal(2))
    h, x = rng.standard_normal(4), rng.standard_normal(2)
    _, g, dh = mse_loss(p, h, x)
    eps = 1e-5
    for arr, an in ((p.W, g.W), (p.b, g.b), (h, dh)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = mse_loss(p, h, x)[0]
            arr[idx] = old - eps
            down = mse_loss(p, h, x)[0]
            arr[idx] = old
            assert _rel(an[idx], (up - down) / (2 * eps)) < 1e-4


def test_unimodal_bridge(rng):
    n_h, n_x = 4, 3
    W, b = rng.standard_normal((n_x, n_h)), rng.standard_normal(n_x)
    p = MdnParams.zeros(1, n_h, n_x)
    p.W_mu[0], p.b_mu[0] = W, b
    h, x = rng.standard_normal(n_h), rng.standard_normal(n_x)
    m, cache = mdn_forward(p, h, fixed_variance=1.0, return_cache=True)
    sse, g_mse, dh_mse = mse_loss(MseParams(W, b), h, x)
    assert abs(mixture_nll(m, x) - (sse + n_x / 2 * math.log(2 * math.pi))) < 1e-12
    g, dh = mdn_backward(p, h, x, cache)
    assert np.allclose(g.W_mu[0], g_mse.W, atol=1e-12) and np.allclose(g.b_mu[0], g_mse.b, atol=1e-12)
    assert np.allclose(dh, dh_mse, atol=1e-12)
    assert not np.any(g.W_v) and not np.any(g.b_v)


def test_mixture_json_shapes(rng):
    m = mdn_forward(random_mdn(rng, 2, 3, 4), rng.standard_normal(3))
    obj = m.to_json()
    assert np.shape(obj["pi"]) == (2,) and np.shape(obj["mu"]) == (2, 4) and np.shape(obj["v"]) == (2, 4)
