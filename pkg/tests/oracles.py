"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np

from awsup import autodiff as ad


def conv_loops(x, w, b=None):
    """Direct 'same' cross-correlation of (C,H,W) input with (Co,Ci,k,k) kernel."""
    C, H, W = x.shape
    Co, Ci, k, _ = w.shape
    p = k // 2
    out = np.zeros((Co, H, W))
    for o in range(Co):
        for i in range(H):
            for j in range(W):
                acc = 0.0 if b is None else b[o]
                for c in range(Ci):
                    for di in range(k):
                        for dj in range(k):
                            r, s = i + di - p, j + dj - p
                            if 0 <= r < H and 0 <= s < W:
                                acc += w[o, c, di, dj] * x[c, r, s]
                out[o, i, j] = acc
    return out


def upsample_1d(v, n_out):
    n = len(v)
    out = []
    for i in range(n_out):
        pos = i * (n - 1) / (n_out - 1) if n > 1 else 0.0
        lo = min(int(math.floor(pos)), max(n - 2, 0))
        f = pos - lo
        out.append(v[lo] * (1 - f) + (v[lo + 1] * f if n > 1 else 0.0))
    return np.array(out)


def numeric_grad(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = fn()
        arr[idx] = old - h
        fm = fn()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1.0):
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


def grad_pairs(loss_fn, params, h=1e-5):
    """(reverse-mode, central-difference) gradient pairs, one per parameter."""
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    def f():
        with ad.no_record():
            return loss_fn().item()

    out = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        out.append((analytic, numeric_grad(f, p.data, h)))
    return out


def grad_check(loss_fn, params, h=1e-5, floor=1.0):
    """Reverse-mode vs central-difference gradients; returns the worst relative error."""
    return max(rel_err(a, n, floor) for a, n in grad_pairs(loss_fn, params, h))


def tensor_rel_err(a, n):
    """max|a - n| / max(max|a|, max|n|): error relative to the tensor's gradient scale."""
    scale = max(np.abs(a).max(), np.abs(n).max())
    return 0.0 if scale == 0 else float(np.abs(a - n).max() / scale)


def all_pairs_directed(a_pts, b_pts):
    out = []
    for p in a_pts:
        out.append(min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in b_pts))
    return out


def boundary_loops(mask):
    H, W = mask.shape
    pts = []
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= r < H and 0 <= s < W) or not mask[r, s] for r, s in nbrs):
                pts.append((i, j))
    return pts


def hd_oracle(a, b):
    pa, pb = boundary_loops(a), boundary_loops(b)
    return max(max(all_pairs_directed(pa, pb)), max(all_pairs_directed(pb, pa)))


def asd_oracle(a, b):
    pa, pb = boundary_loops(a), boundary_loops(b)
    da, db = all_pairs_directed(pa, pb), all_pairs_directed(pb, pa)
    return (math.fsum(da) / len(da) + math.fsum(db) / len(db)) / 2.0


def dice_counts(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    tot = int(a.sum()) + int(b.sum())
    return 1.0 if tot == 0 else 2 * inter / tot


def jaccard_counts(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    union = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x or y)
    return 1.0 if union == 0 else inter / union


def vote_oracle(labels, probs=None):
    """Per-pixel majority; ties by summed probability then lowest code."""
    L = len(labels)
    counts = {}
    for v in labels:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    tied = sorted(c for c, n in counts.items() if n == top)
    if probs is None or len(tied) == 1:
        return tied[0]
    best = max(tied, key=lambda c: (sum(probs[i][c] for i in range(L)), -c))
    return best


def merge_oracle(s, p):
    if s == 2:
        return 2
    if p == 2:
        return 3
    if s == 1 or p == 1:
        return 1
    return 0


def t_pvalue_quadrature(t, df, n=200001):
    """Two-sided p from Simpson integration of the Student-t density over [|t|, big]."""
    t = abs(t)
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    # substitute x = t + u / (1 - u) to map [t, inf) onto [0, 1)
    u = np.linspace(0.0, 1.0, n)[:-1]
    h = 1.0 / (n - 1)
    x = t + u / (1 - u)
    dx = 1.0 / (1 - u) ** 2
    f = c * (1 + x * x / df) ** (-(df + 1) / 2) * dx
    f = np.append(f, 0.0)
    simpson = h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())
    return 2 * simpson

