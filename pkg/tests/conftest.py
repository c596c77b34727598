import itertools
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# ---------------------------------------------------------------------------
# Independent oracles (pure Python, no code shared with the package)
# ---------------------------------------------------------------------------


def oracle_cosine(x, y):
    dot = sum(a * b for a, b in zip(x, y))
    nx = math.sqrt(sum(a * a for a in x))
    ny = math.sqrt(sum(b * b for b in y))
    d = 1.0 - dot / (nx * ny)
    return 0.0 if d < 1e-14 else min(d, 2.0)


def monotone_paths(n, m):
    """Every path from (0, 0) to (n-1, m-1) with steps (1,0), (0,1), (1,1)."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in walk(a, b):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def oracle_dtw(a, b):
    """Minimum accumulated cost over all monotone paths (shortest path on ties), divided by its length."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    best = None
    for path in monotone_paths(len(a), len(b)):
        cost = sum(oracle_cosine(a[i], b[j]) for i, j in path)
        key = (cost, len(path))
        if best is None or key < best:
            best = key
    return min(best[0] / best[1], 2.0)


def oracle_dtw_dp(a, b):
    """Same quantity as :func:`oracle_dtw`, by a plain-Python DP over (cost, length) pairs."""
    n, m = len(a), len(b)
    INF = (math.inf, 0)
    acc = [[INF] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            d = oracle_cosine(a[i], b[j])
            if i == j == 0:
                acc[i][j] = (d, 1)
                continue
            prev = min(acc[i - 1][j] if i else INF, acc[i][j - 1] if j else INF,
                       acc[i - 1][j - 1] if i and j else INF)
            acc[i][j] = (prev[0] + d, prev[1] + 1)
    c, ln = acc[n - 1][m - 1]
    return min(c / ln, 2.0)


def oracle_sweep(exemplar, utterance, frame_skip=3, factors=(1.0,), dtw=oracle_dtw_dp):
    tk, tu = len(exemplar), len(utterance)
    lengths = sorted({max(1, math.floor(f * tk + 0.5)) for f in factors})
    if tu < lengths[0]:
        return dtw(exemplar, utterance)
    best = math.inf
    for s in range(0, tu, frame_skip):
        for ln in lengths:
            seg = min(ln, tu - s)
            if seg < 2:
                continue
            best = min(best, dtw(exemplar, utterance[s:s + seg]))
    return best if best < math.inf else dtw(exemplar, utterance)


def mann_whitney_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient_errors(model, x, y, lengths=None, seed=0, steps=(3e-3, 1e-3, 1e-4, 1e-5), floor=1e-5):
    """Max relative error of analytic vs central-difference gradients, per parameter tensor.

    The loss is the summed BCE of a train-mode forward pass with a fixed
    seed, so dropout masks and noise draws are identical in every call.
    Each element is compared at several step sizes and the closest estimate
    counts: large steps can cross a ReLU or max-pool switch, small ones lose
    tiny gradients to round-off, but a wrong analytic value disagrees at all.
    ``floor`` bounds the denominator, so near-zero gradients are held to an
    absolute tolerance of ``floor`` times the relative one.
    """
    from cnndtw.nn import backward, bce_loss, forward

    def loss(xs):
        y_hat, _ = forward(model, xs, "train", rng=seed, lengths=lengths)
        return float(np.sum(bce_loss(y, y_hat)))

    def rel(a, n):
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)

    def check(flat, analytic, xs):
        best = np.full(flat.size, np.inf)
        for h in steps:
            num = np.empty(flat.size)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                up = loss(xs)
                flat[j] = old - h
                down = loss(xs)
                flat[j] = old
                num[j] = (up - down) / (2 * h)
            best = np.minimum(best, rel(analytic, num))
        return best

    xs = np.array(x, dtype=np.float64)
    _, cache = forward(model, xs, "train", rng=seed, lengths=lengths)
    grads, g_in = backward(model, cache, y, return_input_grad=True)
    errors = {}
    for i, p in enumerate(model.params):
        for k, w in p.items():
            errors[f"{i}.{model.layers[i].kind}.{k}"] = float(np.max(check(w.reshape(-1), grads[i][k].reshape(-1), xs)))
    err = check(xs.reshape(-1), np.asarray(g_in).reshape(-1), xs).reshape(xs.shape)
    if lengths is not None:
        # padded frames are not part of the input
        err[np.arange(xs.shape[1])[None, :] >= np.asarray(lengths)[:, None]] = 0.0
    errors["input"] = float(np.max(err))
    return errors


def jitter_biases(model, rng, scale=0.1):
    """Move biases off their zero init so no pre-activation sits exactly on a ReLU kink."""
    for p in model.params:
        if "b" in p:
            p["b"][:] = rng.normal(0.0, scale, p["b"].shape)
    return model
