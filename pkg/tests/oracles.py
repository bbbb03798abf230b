"""Naive loop implementations used as independent references in the tests."""

import numpy as np

KERNEL = (0.05, 0.25, 0.4, 0.25, 0.05)


def _mirror(i, n):
    # reflect without repeating the edge sample: -1 -> 1, n -> n - 2
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def reduce_naive(g, w=KERNEL):
    """g_l(i, j) = sum_{m,n} w(m) w(n) g_{l-1}(2i + m, 2j + n) over a 2-D array."""
    h, wd = g.shape
    out = np.zeros(((h + 1) // 2, (wd + 1) // 2))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for m in range(-2, 3):
                for n in range(-2, 3):
                    acc += w[m + 2] * w[n + 2] * g[_mirror(2 * i + m, h), _mirror(2 * j + n, wd)]
            out[i, j] = acc
    return out


def expand_naive(g, th, tw, w=KERNEL):
    """4 * sum_{m,n} w(m) w(n) g((i - m) / 2, (j - n) / 2), integer coordinates only."""
    h, wd = g.shape
    out = np.zeros((th, tw))
    for i in range(th):
        for j in range(tw):
            acc = 0.0
            for m in range(-2, 3):
                if (i - m) % 2:
                    continue
                for n in range(-2, 3):
                    if (j - n) % 2:
                        continue
                    acc += w[m + 2] * w[n + 2] * g[_mirror((i - m) // 2, h), _mirror((j - n) // 2, wd)]
            out[i, j] = 4.0 * acc
    return out


def conv2d_naive(x, w, b, stride):
    """Cross-correlation with zero 'same' padding k // 2; output ceil(in / stride)."""
    n, c, h, wd = x.shape
    m, _, k, _ = w.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((n, m, ho, wo))
    for bi in range(n):
        for o in range(m):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                r, s = i * stride + u - p, j * stride + v - p
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, ci, r, s] * w[o, ci, u, v]
                    out[bi, o, i, j] = acc
    return out


def deconv2d_naive(x, w, b, stride):
    """Scatter form of the transposed convolution; ``w`` is (in, out, k, k), output stride * in."""
    n, c, h, wd = x.shape
    _, m, k, _ = w.shape
    p = k // 2
    ho, wo = h * stride, wd * stride
    out = np.zeros((n, m, ho, wo))
    for bi in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    for u in range(k):
                        for v in range(k):
                            r, s = i * stride + u - p, j * stride + v - p
                            if 0 <= r < ho and 0 <= s < wo:
                                out[bi, :, r, s] += x[bi, ci, i, j] * w[ci, :, u, v]
    if b is not None:
        out += np.asarray(b).reshape(1, -1, 1, 1)
    return out


def grid_max_naive(x, gh, gw):
    """Per-cell maxima with cell edges floor(i * H / g + 0.5); columns ordered channel-major."""
    n, c, h, wd = x.shape
    re = [int(np.floor(i * h / gh + 0.5)) for i in range(gh + 1)]
    ce = [int(np.floor(j * wd / gw + 0.5)) for j in range(gw + 1)]
    out = np.zeros((n, c * gh * gw))
    for bi in range(n):
        for ch in range(c):
            for i in range(gh):
                for j in range(gw):
                    out[bi, ch * gh * gw + i * gw + j] = x[bi, ch, re[i]:re[i + 1], ce[j]:ce[j + 1]].max()
    return out


def adam_naive(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar Adam over a list of per-step gradients; returns every iterate."""
    theta = [float(v) for v in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    history = []
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mhat / (vhat ** 0.5 + eps)
        history.append(list(theta))
    return history


def softmax_xent_naive(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        top = max(row)
        lse = top + np.log(sum(np.exp(v - top) for v in row))
        total += lse - row[y]
    return total / len(labels)
