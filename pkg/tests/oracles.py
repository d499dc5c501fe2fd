"""Straight-line reference implementations used only by the tests.

Everything here is written with Python loops and the ``math`` module in
double precision, independently of the vectorised library code.
"""
from __future__ import annotations

import math


def rows(a):
    return [[float(v) for v in r] for r in a]


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def norm(a):
    return math.sqrt(dot(a, a))


def cosine(a, b):
    return dot(a, b) / (norm(a) * norm(b))


def knn(bank, query, k, exclude=None):
    scored = [(-cosine(e, query), i) for i, e in enumerate(rows(bank)) if i != exclude]
    scored.sort()
    return [i for _, i in scored[:k]]


def moments(neighbors):
    nb = rows(neighbors)
    k, d = len(nb), len(nb[0])
    mu = [sum(r[j] for r in nb) / k for j in range(d)]
    var = [sum((r[j] - mu[j]) ** 2 for r in nb) / k for j in range(d)]
    return mu, var


def mlp(layers, x):
    """``layers``: list of (weight rows, bias, activation) with weight as fan_in x fan_out."""
    h = [float(v) for v in x]
    for w, b, act in layers:
        w = rows(w)
        b = [float(v) for v in b]
        h = [sum(h[i] * w[i][j] for i in range(len(h))) + b[j] for j in range(len(b))]
        if act == "relu":
            h = [max(v, 0.0) for v in h]
        elif act == "softmax":
            h = softmax(h)
    return h


def net_layers(net):
    return [(l.weight, l.bias.reshape(-1), l.activation) for l in net.layers]


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(rows(logits), labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[int(y)]
    return total / len(labels)


def infonce(P, P_pos, tau, denominator="literal"):
    P, P_pos = rows(P), rows(P_pos)
    m = len(P)
    total = 0.0
    for i in range(m):
        pos = dot(P[i], P_pos[i]) / tau
        terms = [math.exp(dot(P[i], P[j]) / tau) for j in range(m) if j != i]
        if denominator == "standard":
            terms.append(math.exp(pos))
        total += -(pos - math.log(sum(terms)))
    return total


def alpha_embedding(alpha, n_freqs):
    out = [math.sin((2.0**j) * math.pi * alpha) for j in range(n_freqs)]
    out += [math.cos((2.0**j) * math.pi * alpha) for j in range(n_freqs)]
    return out


def dvd_loss(model, z0, z1, alpha):
    z0, z1 = rows(z0), rows(z1)
    alphas = [alpha] * len(z0) if not hasattr(alpha, "__len__") else list(alpha)
    layers = net_layers(model.net)
    total = 0.0
    for a0, a1, a in zip(z0, z1, alphas):
        za = [(1 - a) * u + a * v for u, v in zip(a0, a1)]
        pred = mlp(layers, za + alpha_embedding(a, model.n_freqs))
        total += sum((p - (v - u)) ** 2 for p, u, v in zip(pred, a0, a1))
    return total / len(z0)


def h_score(known, unknown):
    return 0.0 if known + unknown == 0 else 2 * known * unknown / (known + unknown)
