"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, brute-force searches,
Monte-Carlo estimates) and share no code with the package.
"""

import math

import numpy as np


def conv_same_loops(gray, kernel):
    """Direct double sum with clamped (edge-replicated) borders; correlation
    and convolution coincide for the symmetric kernels used in tests."""
    h, w = gray.shape
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    y = min(max(i + a - ry, 0), h - 1)
                    x = min(max(j + b - rx, 0), w - 1)
                    acc += kernel[kh - 1 - a, kw - 1 - b] * gray[y, x]
            out[i, j] = acc
    return out


def window_filter_loops(gray, side, reducer):
    h, w = gray.shape
    r = side // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            vals = [gray[min(max(i + a, 0), h - 1), min(max(j + b, 0), w - 1)]
                    for a in range(-r, r + 1) for b in range(-r, r + 1)]
            out[i, j] = reducer(vals)
    return out


def open_close_loops(gray, side=5):
    er = lambda g: window_filter_loops(g, side, min)
    di = lambda g: window_filter_loops(g, side, max)
    return er(di(di(er(gray))))


def nearest_rank(values, p):
    v = sorted(np.ravel(values).tolist())
    rank = math.ceil(p / 100.0 * len(v))
    return v[max(rank, 1) - 1]


def otsu_exhaustive(gray, bins=256):
    """Try every cut between quantized levels; return the best cut's upper edge."""
    g = np.ravel(gray).astype(float)
    lo, hi = g.min(), g.max()
    width = (hi - lo) / bins
    level = np.minimum(((g - lo) / width).astype(int), bins - 1)
    centers = lo + (np.arange(bins) + 0.5) * width
    best, best_cut = -1.0, None
    for cut in range(bins - 1):
        left = level <= cut
        n0, n1 = left.sum(), (~left).sum()
        if n0 == 0 or n1 == 0:
            score = 0.0
        else:
            m0 = centers[level[left]].mean()
            m1 = centers[level[~left]].mean()
            score = n0 * n1 * (m0 - m1) ** 2
        if score > best:
            best, best_cut = score, cut
    return lo + (best_cut + 1) * width


def mmd_double_sum(a, b):
    """Unbiased squared MMD with k(x, y) = (x.y / d + 1)^3 as explicit double sums."""
    a = [np.asarray(x, float) for x in a]
    b = [np.asarray(x, float) for x in b]
    d = len(a[0])
    k = lambda x, y: (float(np.dot(x, y)) / d + 1.0) ** 3
    m, n = len(a), len(b)
    saa = sum(k(a[i], a[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    sbb = sum(k(b[i], b[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sab = sum(k(x, y) for x in a for y in b) / (m * n)
    return saa + sbb - 2.0 * sab


def mc_posterior_eps(x_t, a, sample_x0, n, rng):
    """Importance-weighted estimate of E[eps | x_t] with prior draws of x0.

    ``sample_x0(n, rng)`` returns ``(n, D)`` draws; ``x_t`` has shape ``(D,)``.
    Returns the estimate and its delta-method standard error, per coordinate.
    """
    x0 = sample_x0(n, rng)
    eps = (x_t[None, :] - math.sqrt(a) * x0) / math.sqrt(1.0 - a)
    logw = -0.5 * np.sum(eps**2, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    est = w @ eps
    se = np.sqrt(np.sum(w[:, None] ** 2 * (eps - est) ** 2, axis=0))
    return est, se


def alpha_hats_loop(T, beta_first, beta_last):
    out, prod = [], 1.0
    for i in range(T):
        beta = beta_first + (beta_last - beta_first) * i / (T - 1)
        prod *= 1.0 - beta
        out.append(prod)
    return out
