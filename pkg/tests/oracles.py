"""Independent reference implementations used to check the package.

Nothing here imports the code under test's internals; each oracle is the
slow, obvious version of the quantity it checks.
"""

import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central finite differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def rank_walk_ap(scores, labels) -> float:
    """Walk the ranking top-down (ties by index) accumulating precision at each hit."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, acc = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            acc += hits / rank
    return acc / hits


def ct_value(rho: float, tau_low: float, tau_high: float) -> float:
    return math.log(tau_low / rho + rho / tau_high)


def golden_section_min(f, lo: float, hi: float, tol: float = 1e-12):
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    while b - a > tol:
        if f(c) < f(d):
            b, d = d, c
            c = b - inv_phi * (b - a)
        else:
            a, c = c, d
            d = a + inv_phi * (b - a)
    x = (a + b) / 2
    return x, f(x)


def grid_min(f, lo: float, hi: float, n: int = 1_000_001):
    xs = np.linspace(lo, hi, n)
    vals = np.array([f(x) for x in xs]) if n < 10_000 else f(xs)
    k = int(np.argmin(vals))
    return float(xs[k]), float(vals[k])


def beta_mass(alpha: float, lo: float, hi: float) -> float:
    """Probability of [lo, hi] under Beta(alpha, alpha) by tanh-sinh quadrature of the density."""
    import mpmath

    norm = mpmath.beta(alpha, alpha)
    return float(mpmath.quad(lambda t: t ** (alpha - 1) * (1 - t) ** (alpha - 1), [lo, hi]) / norm)
