"""Independent reference implementations built from explicit loops and ``math``."""
import math

import numpy as np


def softmax(scores, temperature=1.0):
    z = [s / temperature for s in scores]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    tot = math.fsum(e)
    return [v / tot for v in e]


def kl(prev_ext, scores, temperature):
    q = softmax(prev_ext, temperature)
    p = softmax(scores, temperature)
    return math.fsum(qc * (math.log(qc) - math.log(pc)) for qc, pc in zip(q, p))


def cross_entropy(scores, target):
    m = max(scores)
    lse = m + math.log(math.fsum(math.exp(s - m) for s in scores))
    return lse - scores[target]


def attend_aggregate(fmap, weights):
    """f[c] = sum over (h, w) of e[c, h, w] * fmap[c, h, w] for one sample."""
    C, H, W = fmap.shape
    return [math.fsum(weights[c, h, w] * fmap[c, h, w] for h in range(H) for w in range(W))
            for c in range(C)]


def normalize_attention(raw):
    C, H, W = raw.shape
    out = np.empty_like(raw)
    for c in range(C):
        flat = [raw[c, h, w] for h in range(H) for w in range(W)]
        out[c] = np.array(softmax(flat)).reshape(H, W)
    return out


def conv2d(x, w, b, stride, pad):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((n, c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for i in range(n):
        for o in range(c_out):
            for r in range(ho):
                for c in range(wo):
                    terms = [xp[i, ci, r * stride + u, c * stride + v] * w[o, ci, u, v]
                             for ci in range(c_in) for u in range(k) for v in range(k)]
                    out[i, o, r, c] = math.fsum(terms) + (0.0 if b is None else b[o])
    return out


def linear(x, W, b):
    return [[math.fsum(x[n, j] * W[i, j] for j in range(x.shape[1])) + b[i] for i in range(W.shape[0])]
            for n in range(x.shape[0])]


def sgd(p, grads, lr, momentum, weight_decay):
    v = 0.0
    for g in grads:
        v = momentum * v + g + weight_decay * p
        p = p - lr * v
    return p
