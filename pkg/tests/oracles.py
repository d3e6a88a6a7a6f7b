"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops (and math/fractions) so it
shares no code path with the vectorized package.
"""
import math
from fractions import Fraction

import numpy as np


def softmax_row(l):
    m = max(l)
    e = [math.exp(v - m) for v in l]
    z = math.fsum(e)
    return [v / z for v in e]


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _bin_of(v, m):
    # right-inclusive bins (i/m, (i+1)/m]; 0 sits in the first bin
    for i in range(m):
        if v <= (i + 1) / m:
            return i
    return m - 1


def ece_bruteforce(probs, gt, mask, m=15):
    rows = [(list(p), int(g)) for p, g, k in zip(probs.reshape(-1, probs.shape[-1]), gt.reshape(-1), mask.reshape(-1)) if k]
    n = len(rows)
    total = 0.0
    for b in range(m):
        members = [(max(p), int(np.argmax(p)) == g) for p, g in rows if _bin_of(max(p), m) == b]
        if not members:
            continue
        acc = sum(1 for _, h in members if h) / len(members)
        conf = sum(c for c, _ in members) / len(members)
        total += len(members) / n * abs(acc - conf)
    return total


def cece_bruteforce(probs, gt, mask, m=15):
    k = probs.shape[-1]
    rows = [(list(p), int(g)) for p, g, q in zip(probs.reshape(-1, k), gt.reshape(-1), mask.reshape(-1)) if q]
    n = len(rows)
    total = 0.0
    for j in range(k):
        for b in range(m):
            members = [(p[j], g == j) for p, g in rows if _bin_of(p[j], m) == b]
            if not members:
                continue
            acc = sum(1 for _, h in members if h) / len(members)
            conf = sum(c for c, _ in members) / len(members)
            total += len(members) / n * abs(acc - conf)
    return total


def dsc_fraction(pred, gt, c):
    p = [int(v == c) for v in pred.reshape(-1)]
    g = [int(v == c) for v in gt.reshape(-1)]
    inter = sum(a * b for a, b in zip(p, g))
    den = sum(p) + sum(g)
    return Fraction(1) if den == 0 else Fraction(2 * inter, den)


def boundary_points(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            # outside the image counts as background
            if any(not (0 <= a < h and 0 <= b < w) or not mask[a, b] for a, b in nbrs):
                pts.append((i, j))
    return pts


def asd_bruteforce(pred_mask, gt_mask):
    a, b = boundary_points(pred_mask), boundary_points(gt_mask)
    if not a or not b:
        return float("nan")

    def nearest(p, pts):
        return min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pts)

    ab = math.fsum(nearest(p, b) for p in a) / len(a)
    ba = math.fsum(nearest(q, a) for q in b) / len(b)
    return (ab + ba) / 2


def ranks_bruteforce(values, higher_is_better):
    """Average ranks by counting strictly-better and tied entries."""
    out = []
    for v in values:
        better = sum(1 for u in values if (u > v if higher_is_better else u < v))
        ties = sum(1 for u in values if u == v)
        out.append(better + (ties + 1) / 2)
    return out


def fd_grad4(f, x, h=1e-4):
    """Fourth-order central difference: truncation O(h^4), rounding O(eps / h)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        def at(t):
            y = x.copy()
            y[i] += t
            return f(y)
        g[i] = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
    return g


def near_kink(logits, margin, h=1e-4, clearance=10):
    """True if a stencil of width 2h could cross a hinge or an argmax tie."""
    l = np.asarray(logits).reshape(-1, np.asarray(logits).shape[-1])
    gap = clearance * h
    for row in l:
        top = np.sort(row)[::-1]
        if top[0] - top[1] < gap:
            return True
        d = row.max() - row
        if margin is not None and np.any(np.abs(d - margin) < gap):
            return True
    return False
