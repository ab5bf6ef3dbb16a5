"""Loop-level reference implementations used as test oracles.

Deliberately naive: plain Python loops with math.exp, no vectorisation, so
they share no code path with the library.
"""

import math

import numpy as np


def attention(d, wq, wk, wv):
    """d: (C_in, alpha, T); returns (C_out, alpha, T) and the softmaxed score matrix."""
    c_in, a, t = d.shape
    u = a * t
    cols = [[d[c, i // t, i % t] for c in range(c_in)] for i in range(u)]

    def proj(w, vec):
        return [sum(w[o][c] * vec[c] for c in range(c_in)) for o in range(len(w))]

    q = [proj(wq, v) for v in cols]
    k = [proj(wk, v) for v in cols]
    v = [proj(wv, v) for v in cols]
    s = [[sum(qi * kj for qi, kj in zip(q[i], k[j])) for j in range(u)] for i in range(u)]
    sp = []
    for row in s:
        m = max(row)
        e = [math.exp(x - m) for x in row]
        z = sum(e)
        sp.append([x / z for x in e])
    c_out = len(wv)
    out = np.zeros((c_out, a, t))
    for o in range(c_out):
        for i in range(u):
            out[o, i // t, i % t] = sum(v[j][o] * sp[i][j] for j in range(u))
    return out, np.array(sp)


def conv_same(x, kernel):
    """Zero-padded cross-correlation, x: (C_in, H, W), kernel: (C_out, C_in, kh, kw)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kernel[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def leaky(x, slope):
    return np.where(x < 0, slope * x, x)


def conv_block(x, kernels, theta_o, slope):
    """Three-branch convolution block: concat, LeakyReLU, 1x1 condense, LeakyReLU."""
    h = leaky(np.concatenate([conv_same(x, k) for k in kernels]), slope)
    return leaky(conv_same(h, theta_o), slope)


def stnn_param_count(alpha, T_h, T_r, F, proj, channels, f):
    """Closed-form parameter count of the default wiring."""
    total = proj * (F + 1)
    c = proj
    for c_out in channels:
        total += 3 * c_out * c                      # W_q, W_k, W_v
        total += c_out * c_out * (f * f + f + f)    # three conv branches
        total += c_out * 3 * c_out                  # 1x1 condense
        if c != c_out:
            total += c_out * c                      # residual projection
        c = c_out
    total += T_r * c * alpha * T_h + T_r            # head weight and bias
    return total
