"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``AWSUP_NUMBA`` is not set to
``0``/``false``/``no``. Both paths are always importable as ``np_<name>`` and
``nb_<name>`` so tests and the benchmark can compare them directly; the public
names (``im2col``, ``col2im``, ...) are bound to whichever path is active.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("AWSUP_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# im2col / col2im for square odd kernels, stride 1, channel-major layout.
# xp is the padded input (C, N, H + k - 1, W + k - 1); columns come out as
# (k * k, C, N, H, W) so that reshaping to (k*k*C, N*H*W) needs no copy and
# pairs with kernel.transpose(0, 2, 3, 1).reshape(C_out, -1).


def np_im2col(xp, k, H, W):
    return np.stack([xp[:, :, i:i + H, j:j + W] for i in range(k) for j in range(k)])


def np_col2im(cols, k):
    _, C, N, H, W = cols.shape
    out = np.zeros((C, N, H + k - 1, W + k - 1))
    s = 0
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + H, j:j + W] += cols[s]
            s += 1
    return out


# Large outputs are allocated by numpy and filled in compiled code: numba's own
# allocator hands back fresh pages each call, which costs more than the copy.


@_njit
def _nb_im2col_fill(xp, k, cols):
    H, W = cols.shape[3], cols.shape[4]
    for s in range(k * k):
        i, j = s // k, s % k
        for c in range(xp.shape[0]):
            for n in range(xp.shape[1]):
                for y in range(H):
                    for x in range(W):
                        cols[s, c, n, y, x] = xp[c, n, y + i, x + j]


def nb_im2col(xp, k, H, W):
    cols = np.empty((k * k, xp.shape[0], xp.shape[1], H, W))
    _nb_im2col_fill(np.ascontiguousarray(xp), k, cols)
    return cols


@_njit
def _nb_col2im_acc(cols, k, out):
    _, C, N, H, W = cols.shape
    for s in range(k * k):
        i, j = s // k, s % k
        for c in range(C):
            for n in range(N):
                for y in range(H):
                    for x in range(W):
                        out[c, n, y + i, x + j] += cols[s, c, n, y, x]


def nb_col2im(cols, k):
    _, C, N, H, W = cols.shape
    out = np.zeros((C, N, H + k - 1, W + k - 1))
    _nb_col2im_acc(np.ascontiguousarray(cols), k, out)
    return out


# ---------------------------------------------------------------------------
# 2x2 max pooling over the last two axes of a (B, H, W) stack. The argmax
# index is 0..3 in (dy, dx) row-major order; ties resolve to the first maximum.


def np_maxpool2(x):
    B, H, W = x.shape
    blocks = x.reshape(B, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(B, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def np_maxpool2_backward(g, idx):
    B, h, w = g.shape
    blocks = np.zeros((B, h, w, 4))
    np.put_along_axis(blocks, idx.astype(np.intp)[..., None], g[..., None], axis=-1)
    return blocks.reshape(B, h, w, 2, 2).transpose(0, 1, 3, 2, 4).reshape(B, 2 * h, 2 * w)


@_njit
def nb_maxpool2(x):
    B, H, W = x.shape
    h, w = H // 2, W // 2
    out = np.empty((B, h, w))
    idx = np.empty((B, h, w), dtype=np.int8)
    for b in range(B):
        for y in range(h):
            for z in range(w):
                best = x[b, 2 * y, 2 * z]
                bi = 0
                for t in range(1, 4):
                    v = x[b, 2 * y + t // 2, 2 * z + t % 2]
                    if v > best:
                        best = v
                        bi = t
                out[b, y, z] = best
                idx[b, y, z] = bi
    return out, idx


@_njit
def nb_maxpool2_backward(g, idx):
    B, h, w = g.shape
    out = np.zeros((B, 2 * h, 2 * w))
    for b in range(B):
        for y in range(h):
            for z in range(w):
                t = idx[b, y, z]
                out[b, 2 * y + t // 2, 2 * z + t % 2] = g[b, y, z]
    return out


# ---------------------------------------------------------------------------
# Bilinear 2x upsampling of a (B, H, W) stack, align-corners semantics.


def interp_matrix(n):
    """(2n, n) matrix mapping a length-n signal to its align-corners 2x stretch."""
    m = 2 * n
    A = np.zeros((m, n))
    if n == 1:
        A[:, 0] = 1.0
        return A
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    frac = pos - lo
    rows = np.arange(m)
    A[rows, lo] += 1.0 - frac
    A[rows, lo + 1] += frac
    return A


def np_upsample2x(x):
    Ah = interp_matrix(x.shape[-2])
    Aw = interp_matrix(x.shape[-1])
    return np.matmul(np.matmul(Ah, x), Aw.T)


def np_upsample2x_backward(g):
    H, W = g.shape[-2] // 2, g.shape[-1] // 2
    Ah = interp_matrix(H)
    Aw = interp_matrix(W)
    return np.matmul(np.matmul(Ah.T, g), Aw)


@_njit
def _nb_axis_weights(n):
    m = 2 * n
    lo = np.zeros(m, dtype=np.int64)
    frac = np.zeros(m)
    if n == 1:
        return lo, frac
    for i in range(m):
        p = i * (n - 1) / (m - 1)
        j = int(np.floor(p))
        if j > n - 2:
            j = n - 2
        lo[i] = j
        frac[i] = p - j
    return lo, frac


@_njit
def nb_upsample2x(x):
    B, H, W = x.shape
    ly, fy = _nb_axis_weights(H)
    lx, fx = _nb_axis_weights(W)
    out = np.empty((B, 2 * H, 2 * W))
    for n in range(B):
        for i in range(2 * H):
            y0 = ly[i]
            y1 = y0 + 1 if H > 1 else y0
            a = fy[i]
            for j in range(2 * W):
                x0 = lx[j]
                x1 = x0 + 1 if W > 1 else x0
                b = fx[j]
                top = (1.0 - b) * x[n, y0, x0] + b * x[n, y0, x1]
                bot = (1.0 - b) * x[n, y1, x0] + b * x[n, y1, x1]
                out[n, i, j] = (1.0 - a) * top + a * bot
    return out


@_njit
def nb_upsample2x_backward(g):
    # separable: scatter rows into tmp, then columns into out
    B, H2, W2 = g.shape
    H, W = H2 // 2, W2 // 2
    ly, fy = _nb_axis_weights(H)
    lx, fx = _nb_axis_weights(W)
    tmp = np.empty((H, W2))
    out = np.zeros((B, H, W))
    for n in range(B):
        tmp[:] = 0.0
        for i in range(H2):
            y0 = ly[i]
            y1 = y0 + 1 if H > 1 else y0
            a = fy[i]
            for j in range(W2):
                v = g[n, i, j]
                tmp[y0, j] += (1.0 - a) * v
                tmp[y1, j] += a * v
        for y in range(H):
            for j in range(W2):
                x0 = lx[j]
                x1 = x0 + 1 if W > 1 else x0
                b = fx[j]
                out[n, y, x0] += (1.0 - b) * tmp[y, j]
                out[n, y, x1] += b * tmp[y, j]
    return out


# ---------------------------------------------------------------------------
# Nearest-point distances between integer pixel sets.


def np_nearest_distances(src, dst):
    """Euclidean distance from every row of ``src`` to the nearest row of ``dst``."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    out = np.empty(len(src))
    step = 1024
    for s in range(0, len(src), step):
        d = src[s:s + step, None, :] - dst[None, :, :]
        out[s:s + step] = np.sqrt((d * d).sum(axis=-1).min(axis=1).astype(np.float64))
    return out


@_njit
def nb_nearest_distances(src, dst):
    out = np.empty(src.shape[0])
    for i in range(src.shape[0]):
        best = -1
        for j in range(dst.shape[0]):
            dy = src[i, 0] - dst[j, 0]
            dx = src[i, 1] - dst[j, 1]
            d = dy * dy + dx * dx
            if best < 0 or d < best:
                best = d
        out[i] = np.sqrt(np.float64(best))
    return out


# ---------------------------------------------------------------------------
# Per-pixel label counts across a stack of label maps.


def np_vote_counts(stack, n_classes):
    stack = np.asarray(stack)
    return np.stack([(stack == c).sum(axis=0) for c in range(n_classes)]).astype(np.int64)


@_njit
def nb_vote_counts(stack, n_classes):
    L, P = stack.shape
    counts = np.zeros((n_classes, P), dtype=np.int64)
    for l in range(L):
        for i in range(P):
            counts[stack[l, i], i] += 1
    return counts


def _pick(name):
    return globals()[("nb_" if USE_NUMBA else "np_") + name]


im2col = _pick("im2col")
col2im = _pick("col2im")
maxpool2 = _pick("maxpool2")
maxpool2_backward = _pick("maxpool2_backward")
upsample2x = _pick("upsample2x")
upsample2x_backward = _pick("upsample2x_backward")


def nearest_distances(src, dst):
    src = np.ascontiguousarray(src, dtype=np.int64).reshape(-1, 2)
    dst = np.ascontiguousarray(dst, dtype=np.int64).reshape(-1, 2)
    return _pick("nearest_distances")(src, dst)


def vote_counts(stack, n_classes):
    """Counts (n_classes, ...) of each label across the leading learner axis."""
    stack = np.ascontiguousarray(stack, dtype=np.int64)
    if stack.size and (stack.min() < 0 or stack.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    flat = _pick("vote_counts")(stack.reshape(stack.shape[0], -1), int(n_classes))
    return flat.reshape((int(n_classes),) + stack.shape[1:])


def backend():
    return "numba" if USE_NUMBA else "numpy"
