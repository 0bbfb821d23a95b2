"""Slow, independent reference computations used to check the fast code paths."""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def faim_double_loop(emb, lin, w_attn, b_attn, q, x):
    """Pair-by-pair evaluation with plain Python loops."""
    D, p = len(emb), len(emb[0])
    h = [0.0] * p
    for i in range(D):
        for k in range(p):
            h[k] += lin[i][k] * x[i]
    pairs, logits = [], []
    for i in range(D):
        for j in range(i + 1, D):
            c = x[i] * x[j]
            if c == 0:
                continue
            prod = [emb[i][k] * emb[j][k] for k in range(p)]
            z = 0.0
            for r in range(p):
                pre = b_attn[r] + sum(w_attn[r][k] * prod[k] * c for k in range(p))
                z += q[r] * max(pre, 0.0)
            pairs.append((prod, c))
            logits.append(z)
    if logits:
        top = max(logits)
        ex = [math.exp(z - top) for z in logits]
        tot = sum(ex)
        for (prod, c), e in zip(pairs, ex):
            for k in range(p):
                h[k] += (e / tot) * prod[k] * c
    return np.array(h)


def best_split_bruteforce(X, t, msl):
    """Maximum SSE reduction over every feature and every distinct-value cut."""
    X, t = np.asarray(X, float), np.asarray(t, float)
    n = len(t)
    parent = float(((t - t.mean()) ** 2).sum())
    best = (0.0, -1, None)
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            left = t[X[:, f] <= a]
            right = t[X[:, f] > a]
            if len(left) < msl or len(right) < msl:
                continue
            sse = float(((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum())
            gain = parent - sse
            if gain > best[0] + 1e-9 * max(1.0, abs(parent)):
                best = (gain, f, thr)
    return best


def t_survival_quad(t: float, dof: float) -> float:
    """P(T > t) by adaptive quadrature of the Student-t density."""
    logc = math.lgamma((dof + 1) / 2) - math.lgamma(dof / 2) - 0.5 * math.log(dof * math.pi)

    def dens(x):
        return math.exp(logc - (dof + 1) / 2 * math.log1p(x * x / dof))

    if t >= 0:
        val, _ = integrate.quad(dens, t, np.inf, epsabs=1e-14, epsrel=1e-12, limit=500)
        return val
    val, _ = integrate.quad(dens, t, 0.0, epsabs=1e-14, epsrel=1e-12, limit=500)
    return val + 0.5


def welch_reference(a, b):
    """Textbook Welch statistic and Welch-Satterthwaite dof."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return t, dof


def median_sorted(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else (v[n // 2 - 1] + v[n // 2]) / 2


def central_difference(fn, arr, index, step=1e-6):
    flat = arr.reshape(-1)
    orig = flat[index]
    flat[index] = orig + step
    up = fn()
    flat[index] = orig - step
    down = fn()
    flat[index] = orig
    return (up - down) / (2 * step)
