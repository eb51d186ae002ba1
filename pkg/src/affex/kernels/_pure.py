"""NumPy implementations of the hot kernels (reference and fallback)."""

import numpy as np


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_seq_forward(X, Wx, Wh, b):
    """Run one LSTM direction left to right over ``X [B, T, D]``.

    Gate order in the packed ``4H`` axis is input, forget, candidate, output.
    Returns ``(Hs [B, T, H], gates [B, T, 4H], Cs [B, T, H])`` where ``gates``
    holds post-activation values.
    """
    B, T, _ = X.shape
    H = Wh.shape[0]
    xproj = X @ Wx + b
    Hs = np.empty((B, T, H))
    Cs = np.empty((B, T, H))
    gates = np.empty((B, T, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = xproj[:, t] + h @ Wh
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :H] = i
        gates[:, t, H : 2 * H] = f
        gates[:, t, 2 * H : 3 * H] = g
        gates[:, t, 3 * H :] = o
        Hs[:, t] = h
        Cs[:, t] = c
    return Hs, gates, Cs


def lstm_seq_backward(dHs, X, Wx, Wh, Hs, gates, Cs):
    """Backpropagate ``dHs [B, T, H]`` (gradient on every step's hidden
    output) through :func:`lstm_seq_forward`.  Returns ``(dX, dWx, dWh, db)``."""
    B, T, D = X.shape
    H = Wh.shape[0]
    dZ = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        g = gates[:, t, 2 * H : 3 * H]
        o = gates[:, t, 3 * H :]
        tc = np.tanh(Cs[:, t])
        c_prev = Cs[:, t - 1] if t > 0 else zeros
        dh = dHs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dZ[:, t, :H] = dc * g * i * (1.0 - i)
        dZ[:, t, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dZ[:, t, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dZ[:, t, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dZ[:, t] @ Wh.T
    Hprev = np.concatenate([np.zeros((B, 1, H)), Hs[:, :-1]], axis=1)
    flat_dZ = dZ.reshape(B * T, 4 * H)
    dX = dZ @ Wx.T
    dWx = X.reshape(B * T, D).T @ flat_dZ
    dWh = Hprev.reshape(B * T, H).T @ flat_dZ
    db = flat_dZ.sum(axis=0)
    return dX, dWx, dWh, db


def stat_pool_forward(M):
    """``M [B, s, K]`` -> ``(out [B, 3K], argmax [B, K], argmin [B, K])`` with
    ``out`` ordered mean, max, min.  Ties resolve to the earliest row."""
    amax = M.argmax(axis=1)
    amin = M.argmin(axis=1)
    # sequential row sum, so the mean is reproducible across backends
    total = np.zeros(M.shape[::2])
    for r in range(M.shape[1]):
        total += M[:, r]
    out = np.concatenate([total / M.shape[1], M.max(axis=1), M.min(axis=1)], axis=1)
    return out, amax, amin


def stat_pool_backward(dout, amax, amin, s):
    B, K3 = dout.shape
    K = K3 // 3
    dM = np.repeat((dout[:, :K] / s)[:, None, :], s, axis=1)
    bi = np.arange(B)[:, None]
    ki = np.arange(K)[None, :]
    np.add.at(dM, (bi, amax, ki), dout[:, K : 2 * K])
    np.add.at(dM, (bi, amin, ki), dout[:, 2 * K :])
    return dM
