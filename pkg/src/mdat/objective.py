"""Path likelihoods over a directed acyclic decoding lattice.

A lattice of ``S`` generation steps carries a word distribution per step and a
link distribution from every step to each later one. A target of length ``T``
is generated along a path ``a`` with ``a[0] = 0 < a[1] < ... < a[T-1] = S-1``
(steps are 0-based here). The sentence likelihood sums over all such paths and
is computed by a forward recursion in log space; its gradient comes from the
matching backward recursion, so no probability-space arithmetic is needed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import NEG_INF, Tensor, add, as_tensor, scale

MAX_ENUM_STEPS = 12


@dataclass
class DagOutput:
    """Decoder output for one sentence.

    ``word_logp`` is ``S x V``; ``link_logp`` is ``S x S`` with finite entries
    only above the diagonal (the last row is all ``NEG_INF``). Entries are
    numpy arrays for inference or :class:`Tensor` during training.
    """

    word_logp: np.ndarray | Tensor
    link_logp: np.ndarray | Tensor

    @property
    def S(self) -> int:
        return self.word_logp.shape[0]


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_lengths(T: int, S: int) -> None:
    if T < 2:
        raise ValueError(f"target length {T} < 2: a path needs distinct first and last steps")
    if T > S:
        raise ValueError(f"target longer than lattice (T={T}, S={S})")


def validate_path(a: Sequence[int], S: int) -> None:
    if len(a) < 2:
        raise ValueError("path must visit at least 2 steps")
    if a[0] != 0:
        raise ValueError(f"path must start at step 0, got {a[0]}")
    if a[-1] != S - 1:
        raise ValueError(f"path must end at the last step {S - 1}, got {a[-1]}")
    if any(b <= c for c, b in zip(a, a[1:])):
        raise ValueError(f"path steps must be strictly increasing: {tuple(a)}")


def path_log_prob(dag: DagOutput, y: Sequence[int], a: Sequence[int]) -> float:
    """Joint log-probability of ``y`` emitted along path ``a``."""
    W = _values(dag.word_logp)
    L = _values(dag.link_logp)
    S = W.shape[0]
    if len(a) != len(y):
        raise ValueError(f"path length {len(a)} != target length {len(y)}")
    validate_path(a, S)
    total = sum(float(W[s, w]) for s, w in zip(a, y))
    total += sum(float(L[p, n]) for p, n in zip(a, a[1:]))
    return total


def enumerate_paths(S: int, T: int) -> list[tuple[int, ...]]:
    """All paths of ``T`` steps through an ``S``-step lattice, in lexicographic order."""
    if S > MAX_ENUM_STEPS:
        raise ValueError(f"refusing to enumerate paths for S={S} > {MAX_ENUM_STEPS}")
    _check_lengths(T, S)
    return [(0, *mid, S - 1) for mid in itertools.combinations(range(1, S - 1), T - 2)]


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def _forward(W, L, y, tgt_lens):
    B, S, _ = W.shape
    T = y.shape[1]
    # emit[b, t, s] = W[b, s, y[b, t]]
    emit = np.take_along_axis(W, np.broadcast_to(y[:, None, :], (B, S, T)), axis=2).transpose(0, 2, 1)
    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    for t in range(1, T):
        alpha[:, t] = _lse(alpha[:, t - 1, :, None] + L, axis=1) + emit[:, t]
    return emit, alpha


def dag_log_likelihood_batch(word_logp: Tensor, link_logp: Tensor, targets: np.ndarray,
                             tgt_lens: Sequence[int], lattice_lens: Sequence[int]) -> Tensor:
    """Per-sentence log-likelihoods, marginalized over all lattice paths.

    Args:
        word_logp: ``B x S x V`` log-probabilities (rows past a sentence's
            lattice length are ignored).
        link_logp: ``B x S x S``; entries outside a sentence's lattice must be
            ``NEG_INF``.
        targets: ``B x T`` token ids, padded arbitrarily past ``tgt_lens``.
        tgt_lens, lattice_lens: true target length and lattice size per row.

    Returns:
        A ``B``-vector tensor. Computed in float64, cast back to the input dtype.
    """
    word_logp = as_tensor(word_logp)
    link_logp = as_tensor(link_logp)
    y = np.asarray(targets, dtype=np.int64)
    tl = np.asarray(tgt_lens, dtype=np.int64)
    sl = np.asarray(lattice_lens, dtype=np.int64)
    B, S, V = word_logp.shape
    if link_logp.shape != (B, S, S):
        raise ValueError(f"link table shape {link_logp.shape} does not match word table {word_logp.shape}")
    for T_b, S_b in zip(tl, sl):
        _check_lengths(int(T_b), int(S_b))
        if S_b > S:
            raise ValueError(f"lattice length {S_b} exceeds table size {S}")
    if y.shape[1] < tl.max():
        raise ValueError("targets array shorter than declared lengths")
    y = y[:, : tl.max()]
    W = word_logp.data.astype(np.float64)
    L = link_logp.data.astype(np.float64)
    emit, alpha = _forward(W, L, y, tl)
    rows = np.arange(B)
    ll = alpha[rows, tl - 1, sl - 1]
    dtype = word_logp.dtype

    def backward(g):
        T = y.shape[1]
        beta = np.full((B, T, S), NEG_INF)
        beta[rows, tl - 1, sl - 1] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = _lse(L + (emit[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
            live = (t < tl - 1)[:, None]
            beta[:, t] = np.where(live, nxt, beta[:, t])
        gg = np.asarray(g, dtype=np.float64)[:, None, None]
        base = ll[:, None, None]
        if word_logp.requires_grad:
            post = np.exp(alpha + beta - base) * gg  # B x T x S
            gW = np.zeros_like(W)
            srange = np.arange(S)[None, :]
            for t in range(T):
                gW[rows[:, None], srange, y[:, t][:, None]] += post[:, t]
            word_logp.accumulate(gW.astype(dtype))
        if link_logp.requires_grad:
            gL = np.zeros_like(L)
            for t in range(1, T):
                gL += np.exp(alpha[:, t - 1, :, None] + L + (emit[:, t] + beta[:, t])[:, None, :] - base)
            link_logp.accumulate((gL * gg).astype(dtype))

    return Tensor.from_op(ll.astype(dtype), (word_logp, link_logp), backward)


def dag_log_likelihood(dag: DagOutput, y: Sequence[int]):
    """``log p(y)`` summed over every path of ``len(y)`` steps.

    Returns a scalar :class:`Tensor` when the lattice tables are tensors
    (differentiable), otherwise a float.
    """
    S = dag.S
    T = len(y)
    _check_lengths(T, S)
    W, L = dag.word_logp, dag.link_logp
    tensors = isinstance(W, Tensor) or isinstance(L, Tensor)
    W3 = as_tensor(W).reshape(1, *W.shape)
    L3 = as_tensor(L).reshape(1, *L.shape)
    out = dag_log_likelihood_batch(W3, L3, np.asarray([y]), [T], [S]).reshape(())
    return out if tensors else float(out.data)


def brute_force_log_likelihood(dag: DagOutput, y: Sequence[int]) -> float:
    """Reference value by explicit path enumeration (small lattices only)."""
    scores = [path_log_prob(dag, y, a) for a in enumerate_paths(dag.S, len(y))]
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


def batch_dag_loss(pairs: Sequence[tuple[DagOutput, Sequence[int]]]) -> tuple[Tensor, int]:
    """Mean negative log-likelihood over the usable pairs.

    Pairs whose target cannot fit the lattice (``T < 2`` or ``T > S``) are
    skipped. Returns the loss and the number of skipped pairs.
    """
    terms = []
    skipped = 0
    for dag, y in pairs:
        if not 2 <= len(y) <= dag.S:
            skipped += 1
            continue
        terms.append(as_tensor(dag_log_likelihood(dag, y)))
    if not terms:
        raise ValueError("no usable samples in batch")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, -1.0 / len(terms)), skipped
