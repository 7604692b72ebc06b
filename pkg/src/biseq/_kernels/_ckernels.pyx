# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def sigmoid(double[:, ::1] x):
    cdef Py_ssize_t i, j
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                o[i, j] = _sig(x[i, j])
    return out


def gru_gates(const double[:, ::1] ax, const double[:, ::1] ah):
    cdef Py_ssize_t B = ah.shape[0], S = ah.shape[1] // 2, b, j
    z = np.empty((B, S))
    r = np.empty((B, S))
    cdef double[:, ::1] zv = z, rv = r
    with nogil:
        for b in range(B):
            for j in range(S):
                zv[b, j] = _sig(ax[b, j] + ah[b, j])
                rv[b, j] = _sig(ax[b, S + j] + ah[b, S + j])
    return z, r


def gru_candidate(const double[:, ::1] ax, const double[:, ::1] ahh,
                  const double[:, ::1] z, const double[:, ::1] s_prev):
    cdef Py_ssize_t B = z.shape[0], S = z.shape[1], b, j
    cdef double hv
    h = np.empty((B, S))
    s_new = np.empty((B, S))
    cdef double[:, ::1] hh = h, sn = s_new
    with nogil:
        for b in range(B):
            for j in range(S):
                hv = tanh(ax[b, 2 * S + j] + ahh[b, j])
                hh[b, j] = hv
                sn[b, j] = (1.0 - z[b, j]) * s_prev[b, j] + z[b, j] * hv
    return h, s_new


def gru_backward_candidate(const double[:, ::1] g, const double[:, ::1] z,
                           const double[:, ::1] h, const double[:, ::1] s_prev):
    cdef Py_ssize_t B = z.shape[0], S = z.shape[1], b, j
    cdef double gv, zv, hv
    dah = np.empty((B, S))
    dz_pre = np.empty((B, S))
    ds = np.empty((B, S))
    cdef double[:, ::1] a = dah, dz = dz_pre, d = ds
    with nogil:
        for b in range(B):
            for j in range(S):
                gv = g[b, j]
                zv = z[b, j]
                hv = h[b, j]
                a[b, j] = gv * zv * (1.0 - hv * hv)
                dz[b, j] = gv * (hv - s_prev[b, j]) * zv * (1.0 - zv)
                d[b, j] = gv * (1.0 - zv)
    return dah, dz_pre, ds


def gru_backward_reset(const double[:, ::1] drs, const double[:, ::1] r,
                       const double[:, ::1] s_prev):
    cdef Py_ssize_t B = r.shape[0], S = r.shape[1], b, j
    cdef double rv
    dr_pre = np.empty((B, S))
    ds_add = np.empty((B, S))
    cdef double[:, ::1] dr = dr_pre, da = ds_add
    with nogil:
        for b in range(B):
            for j in range(S):
                rv = r[b, j]
                dr[b, j] = drs[b, j] * s_prev[b, j] * rv * (1.0 - rv)
                da[b, j] = drs[b, j] * rv
    return dr_pre, ds_add


def lstm_forward(const double[:, ::1] a, const double[:, ::1] c_prev):
    cdef Py_ssize_t B = c_prev.shape[0], S = c_prev.shape[1], b, j
    cdef double iv, fv, ov, gv, cv, tc
    gates = np.empty((B, 4 * S))
    c_new = np.empty((B, S))
    tanh_c = np.empty((B, S))
    s_new = np.empty((B, S))
    cdef double[:, ::1] gt = gates, cn = c_new, th = tanh_c, sn = s_new
    with nogil:
        for b in range(B):
            for j in range(S):
                iv = _sig(a[b, j])
                fv = _sig(a[b, S + j])
                ov = _sig(a[b, 2 * S + j])
                gv = tanh(a[b, 3 * S + j])
                gt[b, j] = iv
                gt[b, S + j] = fv
                gt[b, 2 * S + j] = ov
                gt[b, 3 * S + j] = gv
                cv = fv * c_prev[b, j] + iv * gv
                tc = tanh(cv)
                cn[b, j] = cv
                th[b, j] = tc
                sn[b, j] = ov * tc
    return gates, c_new, tanh_c, s_new


def lstm_backward(const double[:, ::1] ds, const double[:, ::1] dc,
                  const double[:, ::1] gates, const double[:, ::1] c_prev,
                  const double[:, ::1] tanh_c):
    cdef Py_ssize_t B = c_prev.shape[0], S = c_prev.shape[1], b, j
    cdef double iv, fv, ov, gv, tc, dct, dsv
    da = np.empty((B, 4 * S))
    dc_prev = np.empty((B, S))
    cdef double[:, ::1] d = da, dp = dc_prev
    with nogil:
        for b in range(B):
            for j in range(S):
                iv = gates[b, j]
                fv = gates[b, S + j]
                ov = gates[b, 2 * S + j]
                gv = gates[b, 3 * S + j]
                tc = tanh_c[b, j]
                dsv = ds[b, j]
                dct = dc[b, j] + dsv * ov * (1.0 - tc * tc)
                d[b, j] = dct * gv * iv * (1.0 - iv)
                d[b, S + j] = dct * c_prev[b, j] * fv * (1.0 - fv)
                d[b, 2 * S + j] = dsv * tc * ov * (1.0 - ov)
                d[b, 3 * S + j] = dct * iv * (1.0 - gv * gv)
                dp[b, j] = dct * fv
    return da, dc_prev


def max_pool_forward(const double[:, :, ::1] c, const cnp.int64_t[::1] nvalid):
    cdef Py_ssize_t B = c.shape[0], T = c.shape[1], F = c.shape[2], b, t, f, n
    cdef double best
    cdef cnp.int64_t arg
    out = np.empty((B, F))
    idx = np.empty((B, F), dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef cnp.int64_t[:, ::1] ix = idx
    with nogil:
        for b in range(B):
            n = nvalid[b]
            if n > T:
                n = T
            for f in range(F):
                best = c[b, 0, f]
                arg = 0
                for t in range(1, n):
                    if c[b, t, f] > best:
                        best = c[b, t, f]
                        arg = t
                o[b, f] = best
                ix[b, f] = arg
    return out, idx


def max_pool_backward(const double[:, ::1] g, const cnp.int64_t[:, ::1] idx, Py_ssize_t T):
    cdef Py_ssize_t B = g.shape[0], F = g.shape[1], b, f
    dc = np.zeros((B, T, F))
    cdef double[:, :, ::1] d = dc
    with nogil:
        for b in range(B):
            for f in range(F):
                d[b, idx[b, f], f] = g[b, f]
    return dc


def unfold_windows(const double[:, :, ::1] x, Py_ssize_t h):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t W = T - h + 1, b, w, k, j
    out = np.empty((B, W, h * D))
    cdef double[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for w in range(W):
                for k in range(h):
                    for j in range(D):
                        o[b, w, k * D + j] = x[b, w + k, j]
    return out


def unfold_backward(const double[:, :, ::1] g, Py_ssize_t h, Py_ssize_t T):
    cdef Py_ssize_t B = g.shape[0], W = g.shape[1], D = g.shape[2] // h
    cdef Py_ssize_t b, w, k, j
    dx = np.zeros((B, T, D))
    cdef double[:, :, ::1] d = dx
    with nogil:
        for b in range(B):
            for w in range(W):
                for k in range(h):
                    for j in range(D):
                        d[b, w + k, j] += g[b, w, k * D + j]
    return dx


def scatter_add_rows(double[:, ::1] target, const cnp.int64_t[::1] ids,
                     const double[:, ::1] g, cnp.int64_t skip):
    cdef Py_ssize_t N = ids.shape[0], D = g.shape[1], n, j
    cdef cnp.int64_t row
    with nogil:
        for n in range(N):
            row = ids[n]
            if row == skip:
                continue
            for j in range(D):
                target[row, j] += g[n, j]
