"""Inference over lattice outputs: lookahead, n-gram beam search and the n-gram LM.

Ties are broken towards the lowest step index, then the lowest token id.
"""

from __future__ import annotations

import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import BOS, EOS, N_SPECIAL
from .objective import DagOutput, path_log_prob

NGRAM_HEADER = "#mdat-ngram v1"


def postprocess(raw: Sequence[int], collapse: bool = True, reserved: int = N_SPECIAL) -> list[int]:
    """Cut at the first EOS, merge adjacent repeats, drop reserved ids (< ``reserved``)."""
    out: list[int] = []
    prev = None
    for tok in raw:
        if tok == EOS:
            break
        if collapse and tok == prev:
            continue
        prev = tok
        if tok >= reserved:
            out.append(int(tok))
    return out


@dataclass
class LookaheadResult:
    steps: list[int]
    tokens: list[int]
    score: float


def lookahead_path(dag: DagOutput) -> LookaheadResult:
    """Greedy walk from step 0 to ``S-1`` choosing the best (next step, word) pair."""
    W = np.asarray(dag.word_logp)
    L = np.asarray(dag.link_logp)
    S = W.shape[0]
    # independent per step, so computed for all steps up front
    best_word = W.argmax(axis=1)
    best_score = W.max(axis=1)
    s = 0
    steps = [0]
    tokens = [int(best_word[0])]
    score = float(best_score[0])
    while s < S - 1:
        cand = L[s, s + 1:] + best_score[s + 1:]
        j = int(np.argmax(cand))
        score += float(cand[j])
        s = s + 1 + j
        steps.append(s)
        tokens.append(int(best_word[s]))
    return LookaheadResult(steps, tokens, score)


def lookahead_decode(dag: DagOutput, collapse: bool = True, reserved: int = N_SPECIAL) -> list[int]:
    return postprocess(lookahead_path(dag).tokens, collapse, reserved)


class NgramLM:
    """Add-k smoothed n-gram model per language with back-off on unseen contexts.

    For a history whose ``n-1`` token context was never observed, the next
    shorter context is used, down to the unigram. Every conditional
    distribution is therefore a proper add-k estimate over ``vocab_size``.
    """

    def __init__(self, order: int, vocab_size: int, k: float = 0.1):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.vocab_size = vocab_size
        self.k = k
        self.counts: dict[int, dict[tuple[int, ...], int]] = {}
        self._ctx: dict[int, dict[tuple[int, ...], int]] = {}

    def _padded(self, tokens: Sequence[int]) -> list[int]:
        return [BOS] * (self.order - 1) + list(tokens) + [EOS]

    def add_sentence(self, tokens: Sequence[int], lang: int) -> None:
        table = self.counts.setdefault(lang, defaultdict(int))
        ctx = self._ctx.setdefault(lang, defaultdict(int))
        padded = self._padded(tokens)
        for i in range(self.order - 1, len(padded)):
            for n in range(1, self.order + 1):
                gram = tuple(padded[i - n + 1: i + 1])
                table[gram] += 1
                ctx[gram[:-1]] += 1

    def _rebuild_contexts(self) -> None:
        self._ctx = {}
        for lang, table in self.counts.items():
            ctx = self._ctx.setdefault(lang, defaultdict(int))
            for gram, c in table.items():
                ctx[gram[:-1]] += c

    def logprob(self, word: int, history: Sequence[int], lang: int) -> float:
        table = self.counts.get(lang, {})
        ctx_tot = self._ctx.get(lang, {})
        context = ([BOS] * (self.order - 1) + list(history))[len(history):] if self.order > 1 else []
        for n in range(self.order, 0, -1):
            ctx = tuple(context[len(context) - (n - 1):]) if n > 1 else ()
            total = ctx_tot.get(ctx, 0)
            if total > 0 or n == 1:
                c = table.get(ctx + (word,), 0)
                return math.log((c + self.k) / (total + self.k * self.vocab_size))
        raise AssertionError("unreachable")

    def score(self, tokens: Sequence[int], lang: int) -> float:
        """Log-probability of ``tokens`` followed by EOS."""
        seq = list(tokens) + [EOS]
        return sum(self.logprob(w, seq[:i], lang) for i, w in enumerate(seq))

    def save(self, path: str | os.PathLike) -> None:
        lines = [NGRAM_HEADER, f"order {self.order}", f"k {self.k!r}", f"vocab_size {self.vocab_size}"]
        for lang in sorted(self.counts):
            lines.append(f"lang {lang}")
            for gram, c in sorted(self.counts[lang].items(), key=lambda kv: (len(kv[0]), kv[0])):
                lines.append(f"{c}\t{' '.join(map(str, gram))}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NgramLM":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != NGRAM_HEADER:
            raise ValueError(f"{path}: not an n-gram count file")
        header = dict(line.split(" ", 1) for line in lines[1:4])
        lm = cls(int(header["order"]), int(header["vocab_size"]), float(header["k"]))
        lang = None
        for line in lines[4:]:
            if line.startswith("lang "):
                lang = int(line.split()[1])
                lm.counts[lang] = defaultdict(int)
            elif line:
                c, gram = line.split("\t")
                lm.counts[lang][tuple(int(t) for t in gram.split())] = int(c)
        lm._rebuild_contexts()
        return lm


def lm_train(corpus: Iterable[tuple[Sequence[int], int]], order: int = 3, vocab_size: int | None = None,
             k: float = 0.1) -> NgramLM:
    """Count n-grams over ``(tokens, lang)`` pairs; tokens exclude EOS."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train a language model on an empty corpus")
    if vocab_size is None:
        vocab_size = max(max(t, default=0) for t, _ in corpus) + 1
        vocab_size = max(vocab_size, EOS + 1)
    lm = NgramLM(order, vocab_size, k)
    for tokens, lang in corpus:
        lm.add_sentence(tokens, lang)
    return lm


@dataclass
class Candidate:
    tokens: tuple[int, ...]
    steps: tuple[int, ...]
    dag_score: float
    output: list[int]
    final_score: float = 0.0


def beam_candidates(dag: DagOutput, beam_width: int = 8, lm: NgramLM | None = None, lang: int | None = None,
                    lm_weight: float = 0.1, len_alpha: float = 0.6, collapse: bool = True,
                    reserved: int = N_SPECIAL) -> list[Candidate]:
    """Finished lattice hypotheses, best first by the final reranking score.

    Each round extends every live hypothesis by one (step, word) pair and
    keeps the ``beam_width`` best extensions by lattice score; extensions that
    land on the last step finish. The lookahead path is always a candidate.
    The ``beam_width`` best finished paths (by length-normalized lattice
    score) are reranked with ``dag / len**len_alpha + lm_weight * lm / (len+1)``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    W = np.asarray(dag.word_logp)
    L = np.asarray(dag.link_logp)
    S, V = W.shape
    K = min(beam_width, V)
    order = np.argsort(-W, axis=1, kind="stable")[:, :K]  # best words per step, lowest id on ties
    top = np.take_along_axis(W, order, axis=1)

    greedy = lookahead_path(dag)
    finished: dict[tuple[int, ...], tuple[float, tuple[int, ...]]] = {
        tuple(greedy.tokens): (greedy.score, tuple(greedy.steps))}

    def finish(tokens, steps, score):
        old = finished.get(tokens)
        if old is None or score > old[0]:
            finished[tokens] = (score, steps)

    if S == 1:
        live = []
    else:
        live = [((int(order[0, 0]),), (0,), float(top[0, 0]))]
        for j in range(1, K):
            live.append(((int(order[0, j]),), (0,), float(top[0, j])))
        live.sort(key=lambda h: (-h[2], h[0][0]))
        live = live[:beam_width]

    while live:
        scores, hyp_idx, nxt, wid = [], [], [], []
        for i, (_, steps, score) in enumerate(live):
            s = steps[-1]
            cand = score + L[s, s + 1:, None] + top[s + 1:]
            n = cand.shape[0]
            scores.append(cand.reshape(-1))
            hyp_idx.append(np.full(n * K, i))
            nxt.append(np.repeat(np.arange(s + 1, S), K))
            wid.append(np.tile(np.arange(K), n))
        scores = np.concatenate(scores)
        hyp_idx = np.concatenate(hyp_idx)
        nxt = np.concatenate(nxt)
        wid = np.concatenate(wid)
        words = order[nxt, wid]
        rank = np.lexsort((hyp_idx, words, nxt, -scores))
        new_live = []
        seen: set[tuple] = set()
        for r in rank:
            if len(seen) >= beam_width:
                break
            tokens, steps, _ = live[hyp_idx[r]]
            tokens = tokens + (int(words[r]),)
            steps = steps + (int(nxt[r]),)
            key = (tokens, steps[-1])
            if key in seen:
                continue
            seen.add(key)
            if steps[-1] == S - 1:
                finish(tokens, steps, float(scores[r]))
            else:
                new_live.append((tokens, steps, float(scores[r])))
        live = new_live

    def norm(score, tokens):
        return score / (len(tokens) ** len_alpha) if len_alpha else score

    pool = sorted(finished.items(), key=lambda kv: (-norm(kv[1][0], kv[0]), kv[0]))[:beam_width]
    out = []
    for tokens, (score, steps) in pool:
        words = postprocess(tokens, collapse, reserved)
        final = norm(score, tokens)
        if lm is not None and lm_weight:
            final += lm_weight * lm.score(words, lang) / (len(words) + 1)
        out.append(Candidate(tokens, steps, score, words, final))
    out.sort(key=lambda c: -c.final_score)
    return out


def ngram_beam_search(dag: DagOutput, beam_width: int = 8, lm: NgramLM | None = None, lang: int | None = None,
                      lm_weight: float = 0.1, len_alpha: float = 0.6, collapse: bool = True,
                      reserved: int = N_SPECIAL) -> list[int]:
    """Best candidate of :func:`beam_candidates`, post-processed."""
    return beam_candidates(dag, beam_width, lm, lang, lm_weight, len_alpha, collapse, reserved)[0].output


def dag_score(dag: DagOutput, tokens: Sequence[int], steps: Sequence[int]) -> float:
    return path_log_prob(dag, tokens, steps)


@dataclass
class DecodeOptions:
    method: str = "lookahead"
    beam_width: int = 8
    lm_weight: float = 0.1
    len_alpha: float = 0.6
    collapse: bool = True

    def validate(self) -> None:
        if self.method not in ("lookahead", "ngram-beam"):
            raise ValueError(f"unknown decode method {self.method!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


def decode_dag(dag: DagOutput, opts: DecodeOptions, lm: NgramLM | None = None, lang: int | None = None,
               reserved: int = N_SPECIAL) -> list[int]:
    if opts.method == "lookahead":
        return lookahead_decode(dag, opts.collapse, reserved)
    if opts.method == "ngram-beam":
        return ngram_beam_search(dag, opts.beam_width, lm, lang, opts.lm_weight, opts.len_alpha,
                                 opts.collapse, reserved)
    raise ValueError(f"unknown decode method {opts.method!r}")


def translate(model, sources: Sequence[Sequence[int]], tgt_langs: Sequence[int],
              opts: DecodeOptions | None = None, lm: NgramLM | None = None,
              reserved: int = N_SPECIAL, batch_size: int = 64) -> list[list[int]]:
    """Translate a list of id sequences with an :class:`~mdat.model.MDAT` model."""
    opts = opts or DecodeOptions()
    opts.validate()
    out: list[list[int]] = []
    for lo in range(0, len(sources), batch_size):
        chunk = sources[lo: lo + batch_size]
        langs = tgt_langs[lo: lo + batch_size]
        for dag, lang in zip(model.dags(chunk, langs), langs):
            out.append(decode_dag(dag, opts, lm, lang, reserved))
    return out
