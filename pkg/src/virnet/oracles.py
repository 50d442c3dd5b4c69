"""Slow reference implementations used to cross-check the fast paths.

Everything here is written as plain loops over pixels so it shares no
code with the vectorised implementations it validates.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index without repeating the edge sample."""
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def naive_degradation(z: np.ndarray, kernel: np.ndarray, s: int) -> np.ndarray:
    h, w = z.shape
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros((h // s, w // s))
    for oi in range(h // s):
        for oj in range(w // s):
            i, j = oi * s, oj * s
            acc = 0.0
            for a in range(k):
                for b in range(k):
                    acc += kernel[a, b] * z[reflect_index(i - (a - r), h), reflect_index(j - (b - r), w)]
            out[oi, oj] = acc
    return out


def naive_filter(img: np.ndarray, weights: np.ndarray) -> np.ndarray:
    h, w = img.shape
    p = weights.shape[0]
    r = p // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(p):
                for b in range(p):
                    acc += weights[a, b] * img[reflect_index(i + a - r, h), reflect_index(j + b - r, w)]
            out[i, j] = acc
    return out


def naive_ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    g = [math.exp(-((i - size // 2) ** 2) / (2 * sigma**2)) for i in range(size)]
    tot = sum(g) ** 2
    win = [[g[i] * g[j] / tot for j in range(size)] for i in range(size)]
    c1, c2 = 0.01**2, 0.03**2
    h, w = a.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for u in range(size):
                for v in range(size):
                    wt = win[u][v]
                    pa, pb = a[i + u, j + v], b[i + u, j + v]
                    ma += wt * pa
                    mb += wt * pb
                    saa += wt * pa * pa
                    sbb += wt * pb * pb
                    sab += wt * pa * pb
            va, vb, cab = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def naive_bicubic_down(z: np.ndarray, s: int) -> np.ndarray:
    def cubic(x, a=-0.5):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x**3 - (a + 3) * x**2 + 1
        if x < 2:
            return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
        return 0.0

    def sym(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    h, w = z.shape
    out = np.zeros((h // s, w // s))
    for oi in range(h // s):
        u = (oi + 0.5) * s - 0.5
        for oj in range(w // s):
            v = (oj + 0.5) * s - 0.5
            acc = 0.0
            for ti in range(math.floor(u) - 1, math.floor(u) + 3):
                for tj in range(math.floor(v) - 1, math.floor(v) + 3):
                    acc += cubic(u - ti) * cubic(v - tj) * z[sym(ti, h), sym(tj, w)]
            out[oi, oj] = acc
    return out


def normal_equations_kernel(k_d: np.ndarray, s: int, probes) -> np.ndarray:
    """Dense least-squares kernel fit assembled column by column, solved via normal equations."""
    support = k_d.shape[0]
    cols, rhs = [], []
    for z in probes:
        target = naive_degradation(z, k_d, s)
        rhs.append(target.ravel())
    for a in range(support):
        for b in range(support):
            unit = np.zeros((support, support))
            unit[a, b] = 1.0
            col = []
            for z in probes:
                blurred = naive_degradation(z, unit, 1)
                col.append(naive_bicubic_down(blurred, s).ravel())
            cols.append(np.concatenate(col))
    A = np.stack(cols, axis=1)
    b = np.concatenate(rhs)
    k = np.linalg.solve(A.T @ A, A.T @ b)
    return (k / k.sum()).reshape(support, support)


# ----------------------------------------------------------- finite differences


def relative_error(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradcheck(fn, inputs: list[T.Tensor], rng: np.random.Generator, points: int = 25,
              step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences of ``fn``.

    ``fn`` maps the list of input tensors to a scalar Tensor. Up to
    ``points`` coordinates per input are probed, chosen at random.
    """
    for t in inputs:
        t.grad = None
    T.backward(fn(inputs))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.ravel().copy()
        probe = rng.choice(t.data.size, size=min(points, t.data.size), replace=False)
        numeric = np.empty(len(probe))
        for n, flat_idx in enumerate(probe):
            idx = np.unravel_index(flat_idx, t.data.shape)
            orig = t.data[idx]
            h = step * max(1.0, abs(orig))
            with T.no_grad():
                t.data[idx] = orig + h
                up = fn(inputs).item()
                t.data[idx] = orig - h
                down = fn(inputs).item()
            t.data[idx] = orig
            numeric[n] = (up - down) / (2 * h)
        worst = max(worst, relative_error(analytic[probe], numeric))
    return worst
