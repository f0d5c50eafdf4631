"""Distribution distances, two-sample tests and gradient checks."""

from __future__ import annotations

import numpy as np
from scipy.stats import ks_2samp


class DimensionError(ValueError):
    pass


def _samples(a):
    a = np.asarray(getattr(a, "samples", a), dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 2:
        raise DimensionError("need an (n, d) sample matrix with n >= 2")
    if not np.all(np.isfinite(a)):
        raise ValueError("samples contain non-finite entries")
    return a


def _coupling(a_sorted, b_sorted):
    """Monotone coupling of two sorted 1-D samples: (differences, masses).

    Equal sizes pair order statistics directly; otherwise the two quantile
    functions are compared on the merged grid of probability levels.
    """
    n, m = a_sorted.shape[0], b_sorted.shape[0]
    if n == m:
        return a_sorted - b_sorted, np.full(n, 1.0 / n)
    levels = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    mass = np.diff(levels, prepend=0.0)
    ia = np.minimum(np.ceil(levels * n - 1e-9).astype(int) - 1, n - 1)
    ib = np.minimum(np.ceil(levels * m - 1e-9).astype(int) - 1, m - 1)
    return a_sorted[ia] - b_sorted[ib], mass


def w1_1d(a, b) -> float:
    """Empirical 1-Wasserstein distance between one-dimensional samples."""
    a, b = _samples(a), _samples(b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise DimensionError("w1_1d needs one-dimensional samples")
    diff, mass = _coupling(np.sort(a[:, 0]), np.sort(b[:, 0]))
    return float(np.abs(diff) @ mass)


def sliced_w2(a, b, n_projections: int = 256, rng_seed=0) -> float:
    """Root-mean-square over random directions of the projected 1-D W2."""
    a, b = _samples(a), _samples(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets differ in dimension")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    rng = np.random.default_rng(rng_seed)
    dirs = rng.standard_normal((a.shape[1], n_projections))
    dirs /= np.linalg.norm(dirs, axis=0)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    total = 0.0
    for j in range(n_projections):
        diff, mass = _coupling(pa[:, j], pb[:, j])
        total += (diff * diff) @ mass
    return float(np.sqrt(total / n_projections))


def rbf_mmd(a, b, bandwidth: float, return_stderr: bool = False):
    """Unbiased MMD^2 with a Gaussian kernel; optionally also a stderr.

    The standard error comes from the variance of the per-sample terms of
    the linear-time statistic on the same data, a conservative yardstick.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    a, b = _samples(a), _samples(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets differ in dimension")

    def gram(x, y):
        sq = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2.0 * x @ y.T
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))

    n, m = a.shape[0], b.shape[0]
    kaa, kbb, kab = gram(a, a), gram(b, b), gram(a, b)
    est = (
        (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
        + (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
        - 2.0 * kab.mean()
    )
    k = min(n, m) // 2
    if k >= 2:
        x1, x2, y1, y2 = a[:k], a[k : 2 * k], b[:k], b[k : 2 * k]

        def kd(x, y):
            return np.exp(-np.sum((x - y) ** 2, 1) / (2.0 * bandwidth**2))

        h = kd(x1, x2) + kd(y1, y2) - kd(x1, y2) - kd(x2, y1)
        se = float(h.std(ddof=1) / np.sqrt(k))
    else:
        se = float("nan")
    return (float(est), se) if return_stderr else float(est)


def ks_test_1d(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov p-value (asymptotic distribution)."""
    a, b = _samples(a), _samples(b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise DimensionError("ks_test_1d needs one-dimensional samples")
    return float(ks_2samp(a[:, 0], b[:, 0], method="asymp").pvalue)


def fd_grad_check(f, x, h: float = 1e-5, grad=None) -> float:
    """Max relative error between ``grad`` (or f's own gradient) and central FD.

    ``f(x)`` returns either a scalar (then ``grad`` is required) or a
    ``(value, gradient)`` pair.
    """
    x = np.asarray(x, dtype=float)

    def value(p):
        out = f(p)
        return float(out[0] if isinstance(out, tuple) else out)

    if grad is None:
        out = f(x)
        if not isinstance(out, tuple):
            raise ValueError("pass grad= when f returns only a value")
        grad = out[1]
    grad = np.asarray(grad, dtype=float).reshape(x.shape)
    fd = np.empty_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (value(x + e) - value(x - e)) / (2 * h)
    scale = max(np.max(np.abs(fd)), np.max(np.abs(grad)), 1e-12)
    return float(np.max(np.abs(fd - grad)) / scale)


def mean_var_check(a, b):
    """Per-coordinate z-scores for mean and variance differences of two samples."""
    a, b = _samples(a), _samples(b)
    na, nb = a.shape[0], b.shape[0]
    ma, mb = a.mean(0), b.mean(0)
    va, vb = a.var(0, ddof=1), b.var(0, ddof=1)
    z_mean = (ma - mb) / np.sqrt(va / na + vb / nb)
    # var of the sample variance: (m4 - v^2) / n
    m4a = np.mean((a - ma) ** 4, 0)
    m4b = np.mean((b - mb) ** 4, 0)
    z_var = (va - vb) / np.sqrt((m4a - va**2) / na + (m4b - vb**2) / nb)
    return z_mean, z_var
