"""Pure-numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Arrays are float64 (int64 for index arrays) and C-contiguous.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_gates(ax, ah):
    """Update and reset gates from input and recurrent pre-activations."""
    S = ah.shape[1] // 2
    z = sigmoid(ax[:, :S] + ah[:, :S])
    r = sigmoid(ax[:, S:2 * S] + ah[:, S:2 * S])
    return z, r


def gru_candidate(ax, ahh, z, s_prev):
    S = z.shape[1]
    h = np.tanh(ax[:, 2 * S:] + ahh)
    s_new = (1.0 - z) * s_prev + z * h
    return h, s_new


def gru_backward_candidate(g, z, h, s_prev):
    dah = g * z * (1.0 - h * h)
    dz_pre = g * (h - s_prev) * z * (1.0 - z)
    ds = g * (1.0 - z)
    return dah, dz_pre, ds


def gru_backward_reset(drs, r, s_prev):
    dr_pre = drs * s_prev * r * (1.0 - r)
    ds_add = drs * r
    return dr_pre, ds_add


def lstm_forward(a, c_prev):
    """Gate order along the last axis is input, forget, output, candidate."""
    S = c_prev.shape[1]
    gates = np.empty_like(a)
    gates[:, :3 * S] = sigmoid(a[:, :3 * S])
    gates[:, 3 * S:] = np.tanh(a[:, 3 * S:])
    i = gates[:, :S]
    f = gates[:, S:2 * S]
    o = gates[:, 2 * S:3 * S]
    g = gates[:, 3 * S:]
    c_new = f * c_prev + i * g
    tanh_c = np.tanh(c_new)
    s_new = o * tanh_c
    return gates, c_new, tanh_c, s_new


def lstm_backward(ds, dc, gates, c_prev, tanh_c):
    S = c_prev.shape[1]
    i = gates[:, :S]
    f = gates[:, S:2 * S]
    o = gates[:, 2 * S:3 * S]
    g = gates[:, 3 * S:]
    dc_tot = dc + ds * o * (1.0 - tanh_c * tanh_c)
    da = np.empty_like(gates)
    da[:, :S] = dc_tot * g * i * (1.0 - i)
    da[:, S:2 * S] = dc_tot * c_prev * f * (1.0 - f)
    da[:, 2 * S:3 * S] = ds * tanh_c * o * (1.0 - o)
    da[:, 3 * S:] = dc_tot * i * (1.0 - g * g)
    dc_prev = dc_tot * f
    return da, dc_prev


def max_pool_forward(c, nvalid):
    """Max over axis 1 restricted to the first ``nvalid[b]`` steps of row b.

    Ties resolve to the earliest step.
    """
    B, T, F = c.shape
    steps = np.arange(T)[None, :, None]
    masked = np.where(steps < nvalid[:, None, None], c, -np.inf)
    idx = np.argmax(masked, axis=1)
    out = np.take_along_axis(c, idx[:, None, :], axis=1)[:, 0, :]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def max_pool_backward(g, idx, T):
    B, F = g.shape
    dc = np.zeros((B, T, F))
    np.put_along_axis(dc, idx[:, None, :], g[:, None, :], axis=1)
    return dc


def unfold_windows(x, h):
    B, T, d = x.shape
    win = sliding_window_view(x, h, axis=1)  # [B, W, d, h]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, T - h + 1, h * d)


def unfold_backward(g, h, T):
    B, W, hd = g.shape
    d = hd // h
    dx = np.zeros((B, T, d))
    g4 = g.reshape(B, W, h, d)
    for k in range(h):
        dx[:, k:k + W, :] += g4[:, :, k, :]
    return dx


def scatter_add_rows(target, ids, g, skip):
    keep = ids != skip
    np.add.at(target, ids[keep], g[keep])
