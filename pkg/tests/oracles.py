"""Independent reference implementations the tests compare against."""

import math

import numpy as np


def supcon_brute(f, y, tau=1.0, variant="negatives"):
    """Triple loop straight from the definition."""
    z = [[c / math.sqrt(sum(c * c for c in v)) for c in v] for v in f.tolist()]
    dot = lambda a, b: sum(p * q for p, q in zip(a, b))
    total = 0.0
    for j in range(len(z)):
        pos = [p for p in range(len(z)) if p != j and y[p] == y[j]]
        neg = [n for n in range(len(z)) if y[n] != y[j]]
        if not pos or not neg:
            continue
        den_set = neg if variant == "negatives" else [k for k in range(len(z)) if k != j]
        den = sum(math.exp(dot(z[j], z[k]) / tau) for k in den_set)
        total += -sum(math.log(math.exp(dot(z[j], z[p]) / tau) / den) for p in pos) / len(pos)
    return total


def finite_difference(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def axis_design(variances):
    """Points +-a_i e_i whose sample covariance (ddof 1) is diag(variances)."""
    d = len(variances)
    pts = []
    for i, v in enumerate(variances):
        a = np.sqrt(v * (2 * d - 1) / 2)
        e = np.zeros(d)
        e[i] = a
        pts += [e, -e]
    return np.array(pts)
