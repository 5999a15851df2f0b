import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdat.data import BOS, EOS, N_SPECIAL
from mdat.decoding import (DecodeOptions, NgramLM, beam_candidates, dag_score, decode_dag, lm_train,
                           lookahead_decode, lookahead_path, ngram_beam_search, postprocess)
from mdat.objective import DagOutput, enumerate_paths, path_log_prob
from mdat.tensor import NEG_INF
from util import log_normalize, peaked_dag, rand_dag

V = 12  # ids below N_SPECIAL are reserved


def test_postprocess_cuts_collapses_and_drops_reserved():
    assert postprocess([5, 5, 6, 1, 6, 6, EOS, 7]) == [5, 6, 6]
    assert postprocess([5, 5, 6], collapse=False) == [5, 5, 6]
    assert postprocess([EOS, 5]) == []


def test_lookahead_follows_peaked_path():
    dag = peaked_dag([5, 6, 7, 8], S=9, V=V)
    assert lookahead_decode(dag) == [5, 6, 7, 8]
    res = lookahead_path(dag)
    assert res.steps[0] == 0 and res.steps[-1] == 8
    assert abs(res.score - path_log_prob(dag, res.tokens, res.steps)) < 1e-12


def test_lookahead_is_exact_on_jointly_greedy_choice():
    rng = np.random.default_rng(0)
    dag = rand_dag(rng, 7, V)
    W, L = dag.word_logp, dag.link_logp
    res = lookahead_path(dag)
    for s, n in zip(res.steps, res.steps[1:]):
        assert n == s + 1 + int(np.argmax(L[s, s + 1:] + W[s + 1:].max(1)))


def test_lookahead_ties_pick_lowest_step_then_token():
    S = 4
    W = np.full((S, V), -10.0)
    W[:, 5] = W[:, 6] = 0.0
    L = np.full((S, S), NEG_INF)
    for s in range(S - 1):
        L[s, s + 1:] = math.log(1 / (S - s - 1))
    L[0, 1:] = 0.0
    res = lookahead_path(DagOutput(W, L))
    assert res.steps == [0, 1, 2, 3]
    assert set(res.tokens) == {5}


def test_single_step_lattice():
    W = log_normalize(np.arange(V, dtype=float)[None, :])
    dag = DagOutput(W, np.full((1, 1), NEG_INF))
    assert lookahead_decode(dag) == [V - 1]
    assert ngram_beam_search(dag, 4) == [V - 1]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), S=st.integers(2, 9))
def test_beam_width_one_equals_lookahead(seed, S):
    dag = rand_dag(np.random.default_rng(seed), S, V)
    assert ngram_beam_search(dag, 1, lm_weight=0.0) == lookahead_decode(dag)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), S=st.integers(2, 9), K=st.integers(2, 8))
def test_beam_dag_score_dominates_lookahead(seed, S, K):
    dag = rand_dag(np.random.default_rng(seed), S, V, scale=2.0)
    best = beam_candidates(dag, K, lm_weight=0.0, len_alpha=0.0)[0]
    greedy = lookahead_path(dag)
    assert best.dag_score >= greedy.score - 1e-12
    assert abs(best.dag_score - dag_score(dag, best.tokens, best.steps)) < 1e-9


def test_wide_beam_finds_exact_best_path():
    rng = np.random.default_rng(11)
    V_small = N_SPECIAL + 2
    for _ in range(20):
        dag = rand_dag(rng, 5, V_small, scale=2.0)
        best = max(path_log_prob(dag, y, a)
                   for T in range(2, 6) for a in enumerate_paths(5, T)
                   for y in itertools.product(range(V_small), repeat=T))
        cand = beam_candidates(dag, 200, lm_weight=0.0, len_alpha=0.0)[0]
        assert abs(cand.dag_score - best) < 1e-9


def test_lm_breaks_tie_between_equal_lattice_scores():
    # two words equally likely at the middle step; the LM prefers 6 after 5
    S = 3
    W = np.full((S, V), -20.0)
    W[0, 5] = 0.0
    W[1, 6] = W[1, 7] = math.log(0.5)
    W[2, 8] = 0.0
    W = log_normalize(W)
    L = np.full((S, S), NEG_INF)
    L[0, 1], L[0, 2] = 0.0, NEG_INF
    L[1, 2] = 0.0
    dag = DagOutput(W, L)
    lm = lm_train([([5, 6, 8], 0)] * 5, order=3, vocab_size=V)
    assert ngram_beam_search(dag, 4, lm, 0, lm_weight=1.0) == [5, 6, 8]
    lm2 = lm_train([([5, 7, 8], 0)] * 5, order=3, vocab_size=V)
    assert ngram_beam_search(dag, 4, lm2, 0, lm_weight=1.0) == [5, 7, 8]


def test_lm_distributions_are_normalized():
    rng = np.random.default_rng(1)
    data = [(list(rng.integers(N_SPECIAL, V, rng.integers(1, 6))), int(rng.integers(2))) for _ in range(50)]
    lm = lm_train(data, order=3, vocab_size=V)
    for lang in (0, 1):
        for hist in ([], [5], [5, 6], [9, 9, 9], [11, 4]):
            total = sum(math.exp(lm.logprob(w, hist, lang)) for w in range(V))
            assert abs(total - 1) < 1e-9


def test_lm_backs_off_on_unseen_context():
    lm = lm_train([([5, 6], 0)], order=3, vocab_size=V, k=0.1)
    # context (9, 9) unseen and (9,) unseen -> unigram estimate
    uni_total = sum(c for g, c in lm.counts[0].items() if len(g) == 1)
    expect = math.log((lm.counts[0][(6,)] + 0.1) / (uni_total + 0.1 * V))
    assert abs(lm.logprob(6, [9, 9], 0) - expect) < 1e-12


def test_lm_score_includes_eos_and_prefers_seen():
    lm = lm_train([([5, 6, 7], 0)] * 3, order=2, vocab_size=V)
    assert lm.score([5, 6, 7], 0) > lm.score([7, 6, 5], 0)
    s = lm.score([5], 0)
    assert abs(s - (lm.logprob(5, [], 0) + lm.logprob(EOS, [5], 0))) < 1e-12


def test_lm_save_load_roundtrip(tmp_path):
    lm = lm_train([([5, 6, 7], 0), ([8, 9], 1)], order=3, vocab_size=V, k=0.3)
    lm.save(tmp_path / "lm.txt")
    back = NgramLM.load(tmp_path / "lm.txt")
    assert back.order == 3 and back.k == 0.3 and back.vocab_size == V
    for lang, toks in ((0, [5, 6, 7]), (1, [8, 9]), (0, [9])):
        assert back.score(toks, lang) == lm.score(toks, lang)


def test_lm_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        NgramLM.load(p)


def test_lm_train_rejects_empty():
    with pytest.raises(ValueError):
        lm_train([])


def test_decode_options_validation_and_dispatch():
    dag = peaked_dag([5, 6, 7], 6, V)
    assert decode_dag(dag, DecodeOptions("lookahead")) == [5, 6, 7]
    assert decode_dag(dag, DecodeOptions("ngram-beam", beam_width=3, lm_weight=0)) == [5, 6, 7]
    with pytest.raises(ValueError):
        DecodeOptions("sampling").validate()
    with pytest.raises(ValueError):
        DecodeOptions(beam_width=0).validate()
    with pytest.raises(ValueError):
        beam_candidates(dag, 0)


def test_candidates_sorted_and_unique():
    dag = rand_dag(np.random.default_rng(5), 8, V)
    cands = beam_candidates(dag, 6)
    finals = [c.final_score for c in cands]
    assert finals == sorted(finals, reverse=True)
    assert len({c.tokens for c in cands}) == len(cands)
    assert len(cands) <= 6
    assert BOS not in cands[0].output
