"""Pure-numpy batched LSTM kernels (fallback for the compiled extension).

Layout shared with ``_lstm_kernels.pyx``: gate rows are stacked in the order
forget, input, output, candidate; sequences are time-major ``(T, B, n)``.
"""
import numpy as np


def forward_batch(Wh, Wx, b, xs, h0, c0):
    T, B, _ = xs.shape
    H = Wh.shape[1]
    zx = (xs.reshape(T * B, -1) @ Wx.T + b).reshape(T, B, 4 * H)
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    tcs = np.empty((T, B, H))
    hs[0] = h0
    cs[0] = c0
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh call covers all four gates
    scale = np.r_[np.full(3 * H, 0.5), np.ones(H)]
    shift = np.r_[np.full(3 * H, 0.5), np.zeros(H)]
    for t in range(T):
        z = zx[t] + hs[t] @ Wh.T
        g = gates[t]
        np.tanh(z * scale, out=g)
        g *= scale
        g += shift
        cs[t + 1] = g[:, :H] * cs[t] + g[:, H:2 * H] * g[:, 3 * H:]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = g[:, 2 * H:3 * H] * tcs[t]
    return hs, cs, gates, tcs


def backward_batch(Wh, Wx, xs, hs, cs, gates, tcs, dhs, dh_T, dc_T):
    T, B, _ = xs.shape
    H = Wh.shape[1]
    dZ = np.empty((T, B, 4 * H))
    dh = np.array(dh_T, dtype=np.float64)
    dc = np.array(dc_T, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        if dhs is not None:
            dh = dh + dhs[t]
        g = gates[t]
        f, i, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = tcs[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:, :H] = dc * cs[t] * f * (1.0 - f)
        dz[:, H:2 * H] = dc * cand * i * (1.0 - i)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - cand * cand)
        dc = dc * f
        dh = dz @ Wh
    flat = dZ.reshape(T * B, 4 * H)
    dWh = flat.T @ hs[:-1].reshape(T * B, H)
    dWx = flat.T @ xs.reshape(T * B, -1)
    db = flat.sum(axis=0)
    dxs = (flat @ Wx).reshape(T, B, -1)
    return dWh, dWx, db, dxs, dh, dc
