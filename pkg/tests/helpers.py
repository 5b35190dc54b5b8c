"""Hand-rolled reference computations for the test suite.

Everything here is written with plain Python loops (or the most naive
numpy expression possible) and deliberately shares no code with the
package. When a test compares a library result against one of these, a
bug would have to appear in two independent implementations to slip
through.
"""

import math

import numpy as np


def channel_rows(x):
    """Per-location channel vectors of a (N,C) or (N,C,H,W) array.

    Ordered the way the library promises to accumulate: sample-major,
    then row, then column.
    """
    x = np.asarray(x)
    if x.ndim == 2:
        return [x[n] for n in range(x.shape[0])]
    if x.ndim == 4:
        return [
            x[n, :, i, j]
            for n in range(x.shape[0])
            for i in range(x.shape[2])
            for j in range(x.shape[3])
        ]
    raise ValueError(f"rank must be 2 or 4, got {x.ndim}")


def loop_sequential_sum(rows):
    """Strict left-to-right fold, one row at a time, in the rows' dtype."""
    rows = [np.asarray(r) for r in rows]
    total = rows[0].copy()
    for r in rows[1:]:
        total = total + r
    return total


def loop_channel_sum(x):
    return loop_sequential_sum(channel_rows(x))


def loop_bn_forward(x, gamma, beta, eps):
    """Two-pass batch norm over the full batch, element by element.

    Returns (y, mu, var) in float64. Statistics use the biased variance,
    matching training-mode normalization.
    """
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[1]
    rows = [np.asarray(r, dtype=np.float64) for r in channel_rows(x)]
    m = len(rows)
    mu = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for r in rows:
            acc += float(r[ch])
        mu[ch] = acc / m
    var = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for r in rows:
            d = float(r[ch]) - mu[ch]
            acc += d * d
        var[ch] = acc / m
    y = np.zeros_like(x)
    it = np.ndindex(x.shape)
    for idx in it:
        ch = idx[1]
        xhat = (x[idx] - mu[ch]) / math.sqrt(var[ch] + eps)
        y[idx] = gamma[ch] * xhat + beta[ch]
    return y, mu, var


def loop_conv3x3(x, w, b):
    """Direct 3x3 convolution with zero padding, stride 1.

    Layouts: x (N, Cin, H, W), w (Cout, Cin, 3, 3), b (Cout,).
    """
    x = np.asarray(x, dtype=np.float64)
    n_, cin, h, wd = x.shape
    cout = w.shape[0]
    y = np.zeros((n_, cout, h, wd))
    for n in range(n_):
        for co in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = float(b[co])
                    for ci in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(w[co, ci, di, dj]) * float(x[n, ci, ii, jj])
                    y[n, co, i, j] = acc
    return y


def loop_dense(x, w, b):
    """y[n, o] = sum_i x[n, i] * w[o, i] + b[o]."""
    x = np.asarray(x, dtype=np.float64)
    n_, fin = x.shape
    out = w.shape[0]
    y = np.zeros((n_, out))
    for n in range(n_):
        for o in range(out):
            acc = float(b[o])
            for i in range(fin):
                acc += float(x[n, i]) * float(w[o, i])
            y[n, o] = acc
    return y


def loop_global_mean_pool(x):
    x = np.asarray(x, dtype=np.float64)
    n_, c, h, w = x.shape
    y = np.zeros((n_, c))
    for n in range(n_):
        for ch in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += float(x[n, ch, i, j])
            y[n, ch] = acc / (h * w)
    return y


def loop_softmax_xent(z, labels):
    """Mean cross-entropy of softmax(z) against integer labels."""
    z = np.asarray(z, dtype=np.float64)
    total = 0.0
    for n in range(z.shape[0]):
        mx = max(float(v) for v in z[n])
        lse = mx + math.log(sum(math.exp(float(v) - mx) for v in z[n]))
        total += lse - float(z[n, labels[n]])
    return total / z.shape[0]


def fd_entry(fn, arr, idx, h=1e-5):
    """Central difference of scalar-valued fn() in one array coordinate.

    `arr` must be a writable array that fn reads; it is restored before
    returning.
    """
    old = arr[idx]
    arr[idx] = old + h
    fp = fn()
    arr[idx] = old - h
    fm = fn()
    arr[idx] = old
    return (fp - fm) / (2.0 * h)


def rel_err(a, b, floor=1e-3):
    """Max elementwise relative error with an absolute floor on the scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))
