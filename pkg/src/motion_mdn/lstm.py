"""LSTM cell (forget/input/output gates, no peepholes) with exact BPTT gradients.

Two layers live here. The single-sequence functions (:func:`lstm_step`,
:func:`lstm_forward`, :func:`lstm_backward`) are a direct per-step
transcription used as the reference API. The batched :func:`forward_batch` /
:func:`backward_batch` are what the model trains with; they dispatch to the
compiled kernel when it is importable and to numpy otherwise. Set
``MOTION_MDN_PURE=1`` to force the numpy path.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _lstm_fallback
from .errors import NumericError, ShapeError

try:
    if os.environ.get("MOTION_MDN_PURE"):
        raise ImportError("pure mode requested")
    from . import _lstm_kernels as _kernels
    BACKEND = "compiled"
except ImportError:
    _kernels = _lstm_fallback
    BACKEND = "numpy"

GATES = ("f", "i", "o", "c")


@dataclass
class LstmParams:
    """Gate weights stacked row-wise in the order forget, input, output, candidate."""
    Wh: np.ndarray  # (4 n_h, n_h)
    Wx: np.ndarray  # (4 n_h, n_x)
    b: np.ndarray   # (4 n_h,)

    def __post_init__(self):
        G, H = self.Wh.shape
        if G != 4 * H or self.Wx.shape[0] != G or self.b.shape != (G,):
            raise ShapeError(f"inconsistent LSTM shapes {self.Wh.shape}, {self.Wx.shape}, {self.b.shape}")

    @property
    def n_h(self) -> int:
        return self.Wh.shape[1]

    @property
    def n_x(self) -> int:
        return self.Wx.shape[1]

    def _rows(self, gate):
        k = GATES.index(gate)
        return slice(k * self.n_h, (k + 1) * self.n_h)

    W_fh = property(lambda self: self.Wh[self._rows("f")])
    W_ih = property(lambda self: self.Wh[self._rows("i")])
    W_oh = property(lambda self: self.Wh[self._rows("o")])
    W_ch = property(lambda self: self.Wh[self._rows("c")])
    W_fx = property(lambda self: self.Wx[self._rows("f")])
    W_ix = property(lambda self: self.Wx[self._rows("i")])
    W_ox = property(lambda self: self.Wx[self._rows("o")])
    W_cx = property(lambda self: self.Wx[self._rows("c")])
    b_f = property(lambda self: self.b[self._rows("f")])
    b_i = property(lambda self: self.b[self._rows("i")])
    b_o = property(lambda self: self.b[self._rows("o")])
    b_c = property(lambda self: self.b[self._rows("c")])

    @classmethod
    def zeros(cls, n_h, n_x):
        return cls(np.zeros((4 * n_h, n_h)), np.zeros((4 * n_h, n_x)), np.zeros(4 * n_h))


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, n_h):
        return cls(np.zeros(n_h), np.zeros(n_h))


@dataclass
class StepCache:
    x: np.ndarray
    prev: LstmState
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    cand: np.ndarray
    state: LstmState
    tanh_c: np.ndarray


def lstm_init(n_h: int, n_x: int, rng: np.random.Generator) -> LstmParams:
    if n_h < 1 or n_x < 1:
        raise ShapeError("n_h and n_x must be >= 1")
    s = 1.0 / np.sqrt(n_h)
    Wh = rng.uniform(-s, s, (4 * n_h, n_h))
    Wx = rng.uniform(-s, s, (4 * n_h, n_x))
    b = np.zeros(4 * n_h)
    b[:n_h] = 1.0
    return LstmParams(Wh, Wx, b)


def n_params(n_h: int, n_x: int) -> int:
    return 4 * (n_h * n_h + n_h * n_x + n_h)


def lstm_step(p: LstmParams, s: LstmState, x) -> tuple[LstmState, StepCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.n_x,) or s.h.shape != (p.n_h,) or s.c.shape != (p.n_h,):
        raise ShapeError(f"lstm_step: x {x.shape}, h {s.h.shape}, c {s.c.shape} "
                         f"for n_h={p.n_h}, n_x={p.n_x}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s.h)) and np.all(np.isfinite(s.c))):
        raise NumericError("non-finite input to lstm_step")
    f = expit(p.W_fh @ s.h + p.W_fx @ x + p.b_f)
    i = expit(p.W_ih @ s.h + p.W_ix @ x + p.b_i)
    o = expit(p.W_oh @ s.h + p.W_ox @ x + p.b_o)
    cand = np.tanh(p.W_ch @ s.h + p.W_cx @ x + p.b_c)
    c = f * s.c + i * cand
    tanh_c = np.tanh(c)
    new = LstmState(o * tanh_c, c)
    return new, StepCache(x, s, f, i, o, cand, new, tanh_c)


def lstm_forward(p: LstmParams, s0: LstmState, xs):
    if len(xs) < 1:
        raise ShapeError("lstm_forward needs at least one input")
    states, caches = [], []
    s = s0
    for x in xs:
        s, cache = lstm_step(p, s, x)
        states.append(s)
        caches.append(cache)
    return states, caches


def lstm_backward(p: LstmParams, caches, dh, dh_T_extra=None):
    """Gradients of a scalar loss given ``dh[t] = dL/dh_t`` (direct, per step).

    ``dh_T_extra`` is an optional ``(dh, dc)`` pair flowing into the final state
    from downstream. Returns ``(LstmParams of gradients, dxs, (dh0, dc0))``.
    """
    dh = np.asarray(dh, dtype=np.float64)
    if dh.shape != (len(caches), p.n_h):
        raise ShapeError(f"dh shape {dh.shape} does not match {len(caches)} cached steps")
    grads = LstmParams.zeros(p.n_h, p.n_x)
    dxs = np.zeros((len(caches), p.n_x))
    if dh_T_extra is None:
        dh_next, dc_next = np.zeros(p.n_h), np.zeros(p.n_h)
    else:
        dh_next, dc_next = (np.array(v, dtype=np.float64) for v in dh_T_extra)
    for t in range(len(caches) - 1, -1, -1):
        k = caches[t]
        dh_t = dh[t] + dh_next
        dc_t = dc_next + dh_t * k.o * (1.0 - k.tanh_c ** 2)
        dz = np.concatenate([
            dc_t * k.prev.c * k.f * (1.0 - k.f),
            dc_t * k.cand * k.i * (1.0 - k.i),
            dh_t * k.tanh_c * k.o * (1.0 - k.o),
            dc_t * k.i * (1.0 - k.cand ** 2),
        ])
        grads.Wh += np.outer(dz, k.prev.h)
        grads.Wx += np.outer(dz, k.x)
        grads.b += dz
        dxs[t] = p.Wx.T @ dz
        dh_next = p.Wh.T @ dz
        dc_next = dc_t * k.f
    return grads, dxs, (dh_next, dc_next)


def forward_batch(p: LstmParams, xs, h0=None, c0=None):
    """Run ``B`` sequences at once. ``xs`` is time-major ``(T, B, n_x)``.

    Returns ``(hs, cs, gates, tanh_cs)`` with ``hs[0] = h0`` and ``hs[t+1] = h_t``.
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    T, B, n_x = xs.shape
    if n_x != p.n_x:
        raise ShapeError(f"input has {n_x} channels, LSTM expects {p.n_x}")
    h0 = np.zeros((B, p.n_h)) if h0 is None else np.ascontiguousarray(h0, dtype=np.float64)
    c0 = np.zeros((B, p.n_h)) if c0 is None else np.ascontiguousarray(c0, dtype=np.float64)
    return _kernels.forward_batch(p.Wh, p.Wx, p.b, xs, h0, c0)


def backward_batch(p: LstmParams, xs, cache, dhs=None, dh_T=None, dc_T=None):
    """Batched BPTT. ``dhs`` is ``(T, B, n_h)`` or None; returns
    ``(LstmParams of gradients, dxs, dh0, dc0)`` summed over the batch."""
    hs, cs, gates, tcs = cache
    T, B, _ = np.shape(xs)
    zeros = np.zeros((B, p.n_h))
    dWh, dWx, db, dxs, dh0, dc0 = _kernels.backward_batch(
        p.Wh, p.Wx, xs, hs, cs, gates, tcs,
        None if dhs is None else np.ascontiguousarray(dhs, dtype=np.float64),
        zeros if dh_T is None else dh_T, zeros if dc_T is None else dc_T)
    return LstmParams(dWh, dWx, db), dxs, dh0, dc0
