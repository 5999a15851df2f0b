"""Shared builders for the test suite."""

import numpy as np

from mdat.objective import DagOutput
from mdat.tensor import NEG_INF


def log_normalize(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return x - (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m)


def rand_dag(rng, S, V, scale=1.0):
    """A random normalized lattice: word rows and link rows (above the diagonal) sum to 1."""
    W = log_normalize(scale * rng.standard_normal((S, V)))
    L = np.full((S, S), NEG_INF)
    for s in range(S - 1):
        L[s, s + 1:] = log_normalize(scale * rng.standard_normal(S - s - 1))
    return DagOutput(W, L)


def peaked_dag(tokens, S, V, steps=None, sharp=8.0):
    """A lattice whose best path emits ``tokens`` at ``steps`` (evenly spread by default)."""
    T = len(tokens)
    if steps is None:
        steps = [round(i * (S - 1) / (T - 1)) for i in range(T)]
    W = np.zeros((S, V))
    for s, w in zip(steps, tokens):
        W[s, w] = sharp
    W = log_normalize(W)
    L = np.full((S, S), NEG_INF)
    nxt = dict(zip(steps, steps[1:]))
    for s in range(S - 1):
        row = np.zeros(S - s - 1)
        if s in nxt:
            row[nxt[s] - s - 1] = sharp
        L[s, s + 1:] = log_normalize(row)
    return DagOutput(W, L)
