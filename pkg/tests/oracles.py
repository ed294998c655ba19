"""Independent brute-force oracles used to freeze expected test values.

Everything here is written as plain loops over Python floats / numpy scalars,
deliberately sharing no code with the package under test.
"""

import math

import numpy as np


def naive_conv1d(x, kernel, dilation=1):
    """Cross-correlation with SAME zero padding, element by element."""
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    B, C, L = x.shape
    c_out, c_in, k = kernel.shape
    assert c_in == C and k % 2 == 1
    pad = (k - 1) * dilation // 2
    out = np.zeros((B, c_out, L))
    for b in range(B):
        for o in range(c_out):
            for l in range(L):
                acc = 0.0
                for c in range(C):
                    for t in range(k):
                        src = l + t * dilation - pad
                        if 0 <= src < L:
                            acc += kernel[o, c, t] * x[b, c, src]
                out[b, o, l] = acc
    return out


def naive_pool1d(x, kind, k=3):
    x = np.asarray(x, dtype=float)
    B, C, L = x.shape
    pad = (k - 1) // 2
    out = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            for l in range(L):
                window = [x[b, c, l + t - pad] for t in range(k) if 0 <= l + t - pad < L]
                out[b, c, l] = max(window) if kind == "max" else sum(window) / len(window)
    return out


def naive_batchnorm_train(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=float)
    B, C, L = x.shape
    out = np.zeros_like(x)
    for c in range(C):
        vals = [x[b, c, l] for b in range(B) for l in range(L)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for b in range(B):
            for l in range(L):
                out[b, c, l] = gamma[c] * (x[b, c, l] - mu) / math.sqrt(var + eps) + beta[c]
    return out


def naive_softmax(v):
    v = np.asarray(v, dtype=float)
    m = v.max()
    e = np.exp(v - m)
    return e / e.sum()


def naive_xent(logits, target):
    """-sum target * log softmax(logits) for one row."""
    p = naive_softmax(logits)
    return -sum(t * math.log(pi) for t, pi in zip(target, p))


def naive_matmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out
