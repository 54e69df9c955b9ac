"""Independent reference computations written from the formulas with plain loops."""

import math
from fractions import Fraction

import numpy as np


def dense_adjacency_power(g, k):
    n = g.n
    a = np.eye(n)
    for u, v in g.edge_list():
        a[u, v] = a[v, u] = 1.0
    d = a.sum(1)  # includes the self-loop
    a_hat = a / np.sqrt(np.outer(d, d))
    return np.linalg.matrix_power(a_hat, k)


def cosine(u, v):
    nu, nv = math.sqrt(sum(a * a for a in u)), math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def exact_cosine_key(u, v):
    """sign(cos) * cos^2 as an exact fraction; orders integer vectors by cosine without rounding."""
    dot = sum(int(a) * int(b) for a, b in zip(u, v))
    nu, nv = sum(int(a) ** 2 for a in u), sum(int(b) ** 2 for b in v)
    if nu == 0 or nv == 0:
        return Fraction(0)
    return Fraction(dot * abs(dot), nu * nv)


def brute_topk(x, i, p_k):
    """Full sort by (-cosine, id); integer-valued features are compared exactly."""
    exact = np.all(np.asarray(x) == np.round(x))
    sim = exact_cosine_key if exact else cosine
    scored = [(-sim(x[i], x[j]), j) for j in range(len(x)) if j != i]
    scored.sort()
    return [j for _, j in scored[:p_k]]


def softmax_row(row):
    m = max(row)
    e = [math.exp(r - m) for r in row]
    s = sum(e)
    return [v / s for v in e]


def matmul(a, b):
    return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def attention(h, wq, wk, wv):
    q, k, v = matmul(h, wq), matmul(h, wk), matmul(h, wv)
    d_k = len(wq[0])
    s = len(h)
    out = []
    for r in range(s):
        logits = [sum(q[r][t] * k[c][t] for t in range(d_k)) / math.sqrt(d_k) for c in range(s)]
        w = softmax_row(logits)
        out.append([sum(w[c] * v[c][j] for c in range(s)) for j in range(len(v[0]))])
    return out


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def contrastive(P_a, N_a, P_t, N_t, tau):
    """Negatives-only denominator on raw dot products; P/N rows include row 0."""
    total = 0.0
    for P, N in ((P_a, N_a), (P_t, N_t)):
        p_k = len(P) - 1
        d = len(P[0])
        centre = [sum(P[j][c] for j in range(1, p_k + 1)) / p_k for c in range(d)]
        num = math.exp(sum(P[0][c] * centre[c] for c in range(d)) / tau)
        den = sum(math.exp(sum(P[0][c] * N[j][c] for c in range(d)) / tau) for j in range(1, len(N)))
        total += -math.log(num / den)
    return total


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        total += -math.log(softmax_row(row)[y])
    return total / len(labels)


def layer(h, wq, wk, wv, wo, w1, b1, w2, b2):
    """One residual Transformer layer, single head, GELU FFN; nn.Linear weights are out x in."""
    att = matmul(attention(h, wq, wk, wv), wo)
    h1 = [[att[r][c] + h[r][c] for c in range(len(h[0]))] for r in range(len(h))]
    hidden = [[gelu(sum(w1[o][i] * row[i] for i in range(len(row))) + b1[o]) for o in range(len(w1))] for row in h1]
    out = [[sum(w2[o][i] * row[i] for i in range(len(row))) + b2[o] for o in range(len(w2))] for row in hidden]
    return [[out[r][c] + h1[r][c] for c in range(len(h1[0]))] for r in range(len(h1))]


def finite_difference_grads(params, loss_fn, step=1e-5):
    """Central differences of ``loss_fn()`` with respect to every entry of every tensor in ``params``."""
    import torch

    grads = {}
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            g = torch.zeros_like(flat)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = loss_fn().item()
                flat[idx] = orig - step
                down = loss_fn().item()
                flat[idx] = orig
                g[idx] = (up - down) / (2 * step)
            grads[name] = g.view_as(p)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - f| / max(|a|, |f|, floor); the floor keeps exactly-zero gradients comparable."""
    worst = 0.0
    for name, a in analytic.items():
        f = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a.numpy()), np.abs(f.numpy())), floor)
        worst = max(worst, float((np.abs(a.numpy() - f.numpy()) / denom).max()))
    return worst
