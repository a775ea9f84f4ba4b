"""Inner-loop kernels with a numba path and a pure-numpy path.

Every kernel ``foo`` exists as ``_foo_numba`` and ``_foo_numpy``; the public
name dispatches on :data:`fd2cl._accel.USE_NUMBA`. Both paths produce
bit-identical results except the GELU pair, whose ``tanh`` may differ in the
last ulp between libm and numpy.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

GELU_C = 0.7978845608
GELU_A = 0.044715


# ---------------------------------------------------------------- GELU

@njit
def _gelu_forward_numba(x):
    flat = x.ravel()
    y = np.empty_like(flat)
    t = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        th = np.tanh(GELU_C * (v + GELU_A * v * v * v))
        t[i] = th
        y[i] = 0.5 * v * (1.0 + th)
    return y.reshape(x.shape), t.reshape(x.shape)


def _gelu_forward_numpy(x):
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


@njit
def _gelu_backward_numba(x, t, gy):
    xf = x.ravel()
    tf = t.ravel()
    gf = gy.ravel()
    gx = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        th = tf[i]
        d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        gx[i] = gf[i] * d
    return gx.reshape(x.shape)


def _gelu_backward_numpy(x, t, gy):
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * d


# ---------------------------------------------------------------- Haar DWT
# Block (a b / c d) -> LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2

@njit
def _haar_forward_numba(x):
    n, h, w = x.shape
    h2 = h // 2
    w2 = w // 2
    ll = np.empty((n, h2, w2))
    lh = np.empty((n, h2, w2))
    hl = np.empty((n, h2, w2))
    hh = np.empty((n, h2, w2))
    for k in range(n):
        for i in range(h2):
            for j in range(w2):
                a = x[k, 2 * i, 2 * j]
                b = x[k, 2 * i, 2 * j + 1]
                c = x[k, 2 * i + 1, 2 * j]
                d = x[k, 2 * i + 1, 2 * j + 1]
                ll[k, i, j] = 0.5 * ((a + b) + (c + d))
                lh[k, i, j] = 0.5 * ((a + b) - (c + d))
                hl[k, i, j] = 0.5 * ((a - b) + (c - d))
                hh[k, i, j] = 0.5 * ((a - b) - (c - d))
    return ll, lh, hl, hh


def _haar_forward_numpy(x):
    a = x[:, 0::2, 0::2]
    b = x[:, 0::2, 1::2]
    c = x[:, 1::2, 0::2]
    d = x[:, 1::2, 1::2]
    return (0.5 * ((a + b) + (c + d)), 0.5 * ((a + b) - (c + d)),
            0.5 * ((a - b) + (c - d)), 0.5 * ((a - b) - (c - d)))


@njit
def _haar_inverse_numba(ll, lh, hl, hh):
    n, h2, w2 = ll.shape
    x = np.empty((n, 2 * h2, 2 * w2))
    for k in range(n):
        for i in range(h2):
            for j in range(w2):
                p = ll[k, i, j]
                q = lh[k, i, j]
                r = hl[k, i, j]
                s = hh[k, i, j]
                x[k, 2 * i, 2 * j] = 0.5 * ((p + q) + (r + s))
                x[k, 2 * i, 2 * j + 1] = 0.5 * ((p + q) - (r + s))
                x[k, 2 * i + 1, 2 * j] = 0.5 * ((p - q) + (r - s))
                x[k, 2 * i + 1, 2 * j + 1] = 0.5 * ((p - q) - (r - s))
    return x


def _haar_inverse_numpy(ll, lh, hl, hh):
    n, h2, w2 = ll.shape
    x = np.empty((n, 2 * h2, 2 * w2))
    x[:, 0::2, 0::2] = 0.5 * ((ll + lh) + (hl + hh))
    x[:, 0::2, 1::2] = 0.5 * ((ll + lh) - (hl + hh))
    x[:, 1::2, 0::2] = 0.5 * ((ll - lh) + (hl - hh))
    x[:, 1::2, 1::2] = 0.5 * ((ll - lh) - (hl - hh))
    return x


# ---------------------------------------------------------------- median blur

@njit
def _median_filter_numba(img, k):
    c, h, w = img.shape
    r = k // 2
    out = np.empty((c, h, w))
    buf = np.empty(k * k)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                n = 0
                for di in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    for dj in range(-r, r + 1):
                        jj = min(max(j + dj, 0), w - 1)
                        buf[n] = img[ch, ii, jj]
                        n += 1
                s = np.sort(buf)
                out[ch, i, j] = s[(k * k) // 2]
    return out


def _median_filter_numpy(img, k):
    r = k // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return np.median(win, axis=(-2, -1))


# ---------------------------------------------------------------- average ranks

@njit
def _average_ranks_numba(values):
    n = values.size
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        # 1-based ranks i+1 .. j+1 share their average
        avg = 0.5 * (i + j) + 1.0
        for m in range(i, j + 1):
            ranks[order[m]] = avg
        i = j + 1
    return ranks


def _average_ranks_numpy(values):
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    n = sv.size
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], n] - 1
    avg = 0.5 * (starts + ends) + 1.0
    counts = ends - starts + 1
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, counts)
    return ranks


NUMBA_KERNELS = {
    "gelu_forward": _gelu_forward_numba,
    "gelu_backward": _gelu_backward_numba,
    "haar_forward": _haar_forward_numba,
    "haar_inverse": _haar_inverse_numba,
    "median_filter": _median_filter_numba,
    "average_ranks": _average_ranks_numba,
}
NUMPY_KERNELS = {
    "gelu_forward": _gelu_forward_numpy,
    "gelu_backward": _gelu_backward_numpy,
    "haar_forward": _haar_forward_numpy,
    "haar_inverse": _haar_inverse_numpy,
    "median_filter": _median_filter_numpy,
    "average_ranks": _average_ranks_numpy,
}
ACTIVE_KERNELS = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def gelu_forward(x):
    """Return ``(gelu(x), tanh_term)``; the tanh term is reused by the backward pass."""
    return ACTIVE_KERNELS["gelu_forward"](_f64(x))


def gelu_backward(x, t, gy):
    return ACTIVE_KERNELS["gelu_backward"](_f64(x), _f64(t), _f64(gy))


def haar_forward(x):
    """Single-level orthonormal Haar DWT over the last two axes (both even)."""
    x = _f64(x)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    bands = ACTIVE_KERNELS["haar_forward"](x.reshape(-1, h, w))
    return tuple(b.reshape(lead + (h // 2, w // 2)) for b in bands)


def haar_inverse(ll, lh, hl, hh):
    lead = ll.shape[:-2]
    h2, w2 = ll.shape[-2:]
    flat = [_f64(b).reshape(-1, h2, w2) for b in (ll, lh, hl, hh)]
    return ACTIVE_KERNELS["haar_inverse"](*flat).reshape(lead + (2 * h2, 2 * w2))


def median_filter(img, k):
    """Per-channel k x k median of a C x H x W image with edge replication."""
    return ACTIVE_KERNELS["median_filter"](_f64(img), int(k))


def average_ranks(values):
    """1-based fractional ranks; tied values share the mean of their ranks."""
    return ACTIVE_KERNELS["average_ranks"](_f64(np.ravel(values)))
