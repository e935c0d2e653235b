"""Hot numeric kernels: fused LSTM sequence forward/backward.

The recurrent time-step loop dominates training cost, so both passes are
implemented as single fused kernels compiled with numba. A pure-numpy
fallback with identical signatures is kept alongside; set the environment
variable ``ATTRINET_NO_NUMBA=1`` (before import) to force it, e.g. when
debugging or when numba is unavailable. ``benchmarks/bench_lstm.py``
compares the two paths.

All kernels are time-major: inputs are ``(T, B, F)`` C-contiguous float64
arrays. Gate layout along the last axis of the packed weight matrices is
``[input, forget, candidate, output]``, each block ``H`` wide. The
input-side projections are hoisted out of the time loop into one large
matrix product per pass; only the hidden-to-hidden product stays
sequential.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("ATTRINET_NO_NUMBA", "0").lower() in ("1", "true", "yes")


def _lstm_forward_np(x, wx, wh, b):
    """Run an LSTM over a sequence, returning hidden states and gate caches.

    x: (T, B, F); wx: (F, 4H); wh: (H, 4H); b: (4H,).
    Returns (h, i, f, g, o, c, tc), each (T, B, H). Initial state is zero.
    """
    T, B, F = x.shape
    H = wh.shape[0]
    zx = (x.reshape(T * B, F) @ wx).reshape(T, B, 4 * H) + b
    h = np.zeros((T, B, H))
    i = np.zeros((T, B, H))
    f = np.zeros((T, B, H))
    g = np.zeros((T, B, H))
    o = np.zeros((T, B, H))
    c = np.zeros((T, B, H))
    tc = np.zeros((T, B, H))
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        z = zx[t] + h_prev @ wh
        i[t] = 1.0 / (1.0 + np.exp(-z[:, :H]))
        f[t] = 1.0 / (1.0 + np.exp(-z[:, H : 2 * H]))
        g[t] = np.tanh(z[:, 2 * H : 3 * H])
        o[t] = 1.0 / (1.0 + np.exp(-z[:, 3 * H :]))
        c[t] = f[t] * c_prev + i[t] * g[t]
        tc[t] = np.tanh(c[t])
        h[t] = o[t] * tc[t]
        h_prev = h[t]
        c_prev = c[t]
    return h, i, f, g, o, c, tc


def _lstm_backward_np(x, wx, wh, h, i, f, g, o, c, tc, dh_out):
    """Backprop through the fused LSTM given d(loss)/d(h) for every step.

    Returns (dx, dwx, dwh, db) matching the forward argument shapes.
    """
    T, B, F = x.shape
    H = wh.shape[0]
    dz = np.zeros((T, B, 4 * H))
    whT = wh.T
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh_out[t] + dh_next
        c_prev = c[t - 1] if t > 0 else np.zeros((B, H))
        do = dh * tc[t]
        dc = dh * o[t] * (1.0 - tc[t] ** 2) + dc_next
        dc_next = dc * f[t]
        dz[t, :, :H] = dc * g[t] * i[t] * (1.0 - i[t])
        dz[t, :, H : 2 * H] = dc * c_prev * f[t] * (1.0 - f[t])
        dz[t, :, 2 * H : 3 * H] = dc * i[t] * (1.0 - g[t] ** 2)
        dz[t, :, 3 * H :] = do * o[t] * (1.0 - o[t])
        dh_next = dz[t] @ whT
    flat_dz = dz.reshape(T * B, 4 * H)
    dx = (flat_dz @ wx.T).reshape(T, B, F)
    dwx = x.reshape(T * B, F).T @ flat_dz
    h_prev_all = np.concatenate([np.zeros((1, B, H)), h[:-1]], axis=0)
    dwh = h_prev_all.reshape(T * B, H).T @ flat_dz
    db = flat_dz.sum(axis=0)
    return dx, dwx, dwh, db


if not _FORCE_NUMPY:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        njit = None
else:
    njit = None

if njit is not None:

    @njit(cache=True)
    def _lstm_forward_nb(x, wx, wh, b):
        T, B, F = x.shape
        H = wh.shape[0]
        zx = np.dot(x.copy().reshape(T * B, F), wx).reshape(T, B, 4 * H)
        h = np.zeros((T, B, H))
        i = np.zeros((T, B, H))
        f = np.zeros((T, B, H))
        g = np.zeros((T, B, H))
        o = np.zeros((T, B, H))
        c = np.zeros((T, B, H))
        tc = np.zeros((T, B, H))
        h_prev = np.zeros((B, H))
        c_prev = np.zeros((B, H))
        for t in range(T):
            z = np.dot(h_prev, wh)
            for bb in range(B):
                for k in range(H):
                    zi = zx[t, bb, k] + z[bb, k] + b[k]
                    zf = zx[t, bb, H + k] + z[bb, H + k] + b[H + k]
                    zg = zx[t, bb, 2 * H + k] + z[bb, 2 * H + k] + b[2 * H + k]
                    zo = zx[t, bb, 3 * H + k] + z[bb, 3 * H + k] + b[3 * H + k]
                    iv = 1.0 / (1.0 + np.exp(-zi))
                    fv = 1.0 / (1.0 + np.exp(-zf))
                    gv = np.tanh(zg)
                    ov = 1.0 / (1.0 + np.exp(-zo))
                    cv = fv * c_prev[bb, k] + iv * gv
                    tv = np.tanh(cv)
                    i[t, bb, k] = iv
                    f[t, bb, k] = fv
                    g[t, bb, k] = gv
                    o[t, bb, k] = ov
                    c[t, bb, k] = cv
                    tc[t, bb, k] = tv
                    h[t, bb, k] = ov * tv
            h_prev = h[t]
            c_prev = c[t]
        return h, i, f, g, o, c, tc

    @njit(cache=True)
    def _lstm_backward_nb(x, wx, wh, h, i, f, g, o, c, tc, dh_out):
        T, B, F = x.shape
        H = wh.shape[0]
        dz = np.zeros((T, B, 4 * H))
        whT = np.ascontiguousarray(wh.T)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            for bb in range(B):
                for k in range(H):
                    dh = dh_out[t, bb, k] + dh_next[bb, k]
                    c_prev = c[t - 1, bb, k] if t > 0 else 0.0
                    do = dh * tc[t, bb, k]
                    dc = dh * o[t, bb, k] * (1.0 - tc[t, bb, k] ** 2) + dc_next[bb, k]
                    dc_next[bb, k] = dc * f[t, bb, k]
                    dz[t, bb, k] = dc * g[t, bb, k] * i[t, bb, k] * (1.0 - i[t, bb, k])
                    dz[t, bb, H + k] = dc * c_prev * f[t, bb, k] * (1.0 - f[t, bb, k])
                    dz[t, bb, 2 * H + k] = dc * i[t, bb, k] * (1.0 - g[t, bb, k] ** 2)
                    dz[t, bb, 3 * H + k] = do * o[t, bb, k] * (1.0 - o[t, bb, k])
            dh_next = np.dot(dz[t], whT)
        flat_dz = dz.reshape(T * B, 4 * H)
        dx = np.dot(flat_dz, np.ascontiguousarray(wx.T)).reshape(T, B, F)
        xt = np.ascontiguousarray(x.copy().reshape(T * B, F).T)
        dwx = np.dot(xt, flat_dz)
        h_prev_all = np.zeros((T * B, H))
        for t in range(1, T):
            h_prev_all[t * B : (t + 1) * B] = h[t - 1]
        dwh = np.dot(np.ascontiguousarray(h_prev_all.T), flat_dz)
        db = np.zeros(4 * H)
        for r in range(T * B):
            for k in range(4 * H):
                db[k] += flat_dz[r, k]
        return dx, dwx, dwh, db

    lstm_forward = _lstm_forward_nb
    lstm_backward = _lstm_backward_nb
    USING_NUMBA = True
else:
    lstm_forward = _lstm_forward_np
    lstm_backward = _lstm_backward_np
    USING_NUMBA = False
