import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdat.objective import (DagOutput, batch_dag_loss, brute_force_log_likelihood, dag_log_likelihood,
                            dag_log_likelihood_batch, enumerate_paths, path_log_prob, validate_path)
from mdat.tensor import NEG_INF, Tensor, backward, gradcheck, parameter
from util import rand_dag


@settings(max_examples=60, deadline=None)
@given(S=st.integers(2, 7), data=st.data(), seed=st.integers(0, 2**31 - 1))
def test_dp_matches_enumeration(S, data, seed):
    rng = np.random.default_rng(seed)
    T = data.draw(st.integers(2, S))
    dag = rand_dag(rng, S, 5)
    y = rng.integers(0, 5, T)
    assert abs(dag_log_likelihood(dag, y) - brute_force_log_likelihood(dag, y)) <= 1e-9


def test_enumerate_paths_counts_and_shape():
    for S in range(2, 9):
        for T in range(2, S + 1):
            paths = enumerate_paths(S, T)
            assert len(paths) == math.comb(S - 2, T - 2)
            for a in paths:
                validate_path(a, S)
                assert len(a) == T


def test_enumerate_refuses_large_lattice():
    with pytest.raises(ValueError, match="refusing"):
        enumerate_paths(13, 3)


@pytest.mark.parametrize("S", [3, 4, 5])
def test_total_mass_is_one(S):
    rng = np.random.default_rng(S)
    V = 3
    dag = rand_dag(rng, S, V)
    total = sum(math.exp(dag_log_likelihood(dag, y))
                for T in range(2, S + 1) for y in itertools.product(range(V), repeat=T))
    assert abs(total - 1) < 1e-9


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    dag = rand_dag(rng, 6, 4)
    W, L = parameter(dag.word_logp), parameter(dag.link_logp)
    y = [1, 3, 0, 0]
    assert gradcheck(lambda: dag_log_likelihood(DagOutput(W, L), y), [W, L], h=1e-5) < 1e-6


def test_gradient_is_path_posterior():
    # d log p / d W[s, w] sums the posterior mass of paths emitting w at s.
    rng = np.random.default_rng(4)
    dag = rand_dag(rng, 5, 3)
    y = [2, 0, 1]
    W, L = parameter(dag.word_logp), parameter(dag.link_logp)
    backward(dag_log_likelihood(DagOutput(W, L), y))
    paths = enumerate_paths(5, 3)
    scores = np.array([path_log_prob(dag, y, a) for a in paths])
    post = np.exp(scores - np.logaddexp.reduce(scores))
    expect = np.zeros((5, 3))
    for p, a in zip(post, paths):
        for s, w in zip(a, y):
            expect[s, w] += p
    np.testing.assert_allclose(W.grad, expect, atol=1e-12)
    # each target position is emitted exactly once, so total word-gradient mass is T
    assert abs(W.grad.sum() - 3) < 1e-12


def test_monotone_in_emission_log_prob():
    rng = np.random.default_rng(5)
    dag = rand_dag(rng, 6, 4)
    y = [1, 2, 3]
    base = dag_log_likelihood(dag, y)
    W = dag.word_logp.copy()
    W[2, 2] += 0.5
    assert dag_log_likelihood(DagOutput(W, dag.link_logp), y) > base


def test_batch_with_padding_matches_single():
    rng = np.random.default_rng(6)
    d1, d2 = rand_dag(rng, 6, 4), rand_dag(rng, 4, 4)
    y1, y2 = [0, 1, 2, 3, 0], [2, 2]
    W = np.full((2, 6, 4), -3.0)
    L = np.full((2, 6, 6), NEG_INF)
    W[0], L[0] = d1.word_logp, d1.link_logp
    W[1, :4], L[1, :4, :4] = d2.word_logp, d2.link_logp
    Y = np.array([y1, y2 + [0, 0, 0]])
    out = dag_log_likelihood_batch(Tensor(W), Tensor(L), Y, [5, 2], [6, 4]).data
    np.testing.assert_allclose(out, [dag_log_likelihood(d1, y1), dag_log_likelihood(d2, y2)], atol=1e-12)


def test_batch_gradient():
    rng = np.random.default_rng(7)
    W = parameter(np.stack([rand_dag(rng, 5, 3).word_logp for _ in range(2)]))
    L = parameter(np.stack([rand_dag(rng, 5, 3).link_logp for _ in range(2)]))
    Y = np.array([[0, 1, 2, 0], [1, 1, 0, 0]])
    fn = lambda: dag_log_likelihood_batch(W, L, Y, [4, 2], [5, 5]).sum()  # noqa: E731
    assert gradcheck(fn, [W, L], h=1e-5) < 1e-6


def test_target_longer_than_lattice_raises():
    dag = rand_dag(np.random.default_rng(0), 3, 3)
    with pytest.raises(ValueError, match=r"target longer than lattice \(T=4, S=3\)"):
        dag_log_likelihood(dag, [0, 1, 2, 0])
    with pytest.raises(ValueError):
        dag_log_likelihood(dag, [0])


@pytest.mark.parametrize("a", [(1, 2), (0, 1), (0, 2, 1, 3), (0,)])
def test_validate_path_rejects_bad_paths(a):
    with pytest.raises(ValueError):
        validate_path(a, 4)


def test_float_inputs_give_float_output_and_tensor_inputs_give_tensor():
    dag = rand_dag(np.random.default_rng(1), 4, 3)
    assert isinstance(dag_log_likelihood(dag, [0, 1]), float)
    out = dag_log_likelihood(DagOutput(Tensor(dag.word_logp), dag.link_logp), [0, 1])
    assert isinstance(out, Tensor) and out.shape == ()


def test_float32_tables_keep_dtype():
    dag = rand_dag(np.random.default_rng(2), 5, 3)
    W = Tensor(dag.word_logp.astype(np.float32), requires_grad=True)
    L = Tensor(dag.link_logp.astype(np.float32), requires_grad=True)
    out = dag_log_likelihood_batch(W.reshape(1, 5, 3), L.reshape(1, 5, 5), np.array([[0, 1, 2]]), [3], [5])
    assert out.dtype == np.float32
    backward(out.sum())
    assert W.grad.dtype == np.float32


def test_batch_loss_skips_unfit_pairs():
    rng = np.random.default_rng(8)
    d = rand_dag(rng, 4, 3)
    loss, skipped = batch_dag_loss([(d, [0, 1]), (d, [0, 1, 2, 0, 1]), (d, [1])])
    assert skipped == 2
    assert abs(loss.item() + dag_log_likelihood(d, [0, 1])) < 1e-12
