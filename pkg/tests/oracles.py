"""Independent reference implementations used as test oracles.

Everything here is written as plainly as possible (explicit loops, no
vectorization tricks) so that agreement with the library is meaningful.
"""

import math

import numpy as np


def naive_conv3d(x, w, b, stride, pad):
    n_, c_, d_, h_, w_ = x.shape
    co_, _, k, _, _ = w.shape
    xp = np.zeros((n_, c_, d_ + 2 * pad, h_ + 2 * pad, w_ + 2 * pad))
    xp[:, :, pad:pad + d_, pad:pad + h_, pad:pad + w_] = x
    do = (d_ + 2 * pad - k) // stride + 1
    ho = (h_ + 2 * pad - k) // stride + 1
    wo = (w_ + 2 * pad - k) // stride + 1
    out = np.zeros((n_, co_, do, ho, wo))
    for n in range(n_):
        for o in range(co_):
            for i in range(do):
                for j in range(ho):
                    for l in range(wo):
                        acc = b[o]
                        for c in range(c_):
                            for a in range(k):
                                for bb in range(k):
                                    for cc in range(k):
                                        acc += w[o, c, a, bb, cc] * xp[n, c, i * stride + a, j * stride + bb, l * stride + cc]
                        out[n, o, i, j, l] = acc
    return out


def whole_feature_norm(x, gamma, beta, eps):
    """Single-group normalization written straight from the definition."""
    out = np.empty_like(x)
    for n in range(x.shape[0]):
        vals = x[n].ravel()
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        normed = (x[n] - mean) / math.sqrt(var + eps)
        for c in range(x.shape[1]):
            out[n, c] = normed[c] * gamma[c] + beta[c]
    return out


def loop_linear(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            acc = b[j]
            for k in range(x.shape[1]):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc
    return out


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def sweep_average_precision(scores, labels):
    """Step-wise PR area: visit every distinct threshold from high to low and add
    precision times the recall gained."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Track one scalar parameter through a sequence of gradients."""
    m = v = 0.0
    history = []
    for t, g in enumerate(grads, start=1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        history.append(p)
    return history


def central_difference(f, arr, index, h=1e-5):
    """d f / d arr[index] by central differences; ``arr`` is perturbed in place and restored."""
    orig = arr[index]
    arr[index] = orig + h
    up = f()
    arr[index] = orig - h
    down = f()
    arr[index] = orig
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
