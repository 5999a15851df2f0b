"""Evaluation: corpus BLEU, low-frequency word preservation, latency."""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import EOS, Sample
from .decoding import DecodeOptions, NgramLM, translate


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def bleu_stats(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> BleuStats:
    """Corpus BLEU with clipped n-gram precisions and exponential brevity penalty.

    A zero precision at any order makes the score 0 (no smoothing).
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    if min(precisions) == 0:
        score = 0.0
    else:
        score = 100 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuStats(score, precisions, bp, hyp_len, ref_len)


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    return bleu_stats(hypotheses, references).score


def strip_eos(y: Sequence[int]) -> list[int]:
    return [t for t in y if t != EOS]


def evaluate_directions(model, data: Mapping[tuple[int, int], Sequence[Sample]],
                        opts: DecodeOptions | None = None, lm: NgramLM | None = None,
                        outputs: dict | None = None) -> dict[tuple[int, int], float]:
    """BLEU per direction; hypotheses are stored into ``outputs`` when given."""
    scores = {}
    was_training = model.training
    model.eval()
    try:
        for d, samples in sorted(data.items()):
            if not samples:
                continue
            hyps = translate(model, [s.x for s in samples], [s.l_tgt for s in samples], opts, lm)
            scores[d] = bleu(hyps, [strip_eos(s.y) for s in samples])
            if outputs is not None:
                outputs[d] = hyps
    finally:
        model.train(was_training)
    return scores


@dataclass
class PreservationCurve:
    """Per-bucket preservation ratios, rarest bucket first.

    ``edges`` are the bucket boundaries on training counts (``n_buckets + 1``
    log-spaced values); a bucket with no occurrences has ratio ``None``.
    """

    edges: list[float]
    ratios: list[float | None]
    occurrences: list[int]
    missing_from_lexicon: int = 0


def preservation_ratio(samples: Sequence[Sample], hypotheses: Sequence[Sequence[int]],
                       lexicon: Callable[[int, int], Mapping[int, int]] | Mapping[tuple[int, int], Mapping[int, int]],
                       train_counts: Mapping[int, int], n_buckets: int = 10) -> PreservationCurve:
    """Fraction of source-token occurrences whose translation shows up in the hypothesis.

    ``lexicon(l_src, l_tgt)`` (or a mapping keyed by direction) gives each
    source token's unique target token. Tokens are bucketed by their training
    count on a log scale.
    """
    if len(samples) != len(hypotheses):
        raise ValueError("need one hypothesis per sample")

    def lex(d):
        return lexicon(*d) if callable(lexicon) else lexicon[d]

    events = []  # (count, preserved)
    missing = 0
    cache = {}
    for s, hyp in zip(samples, hypotheses):
        d = (s.l_src, s.l_tgt)
        if d not in cache:
            cache[d] = lex(d)
        table = cache[d]
        present = set(hyp)
        for tok in s.x:
            if tok not in table:
                missing += 1
                continue
            events.append((train_counts.get(tok, 0), table[tok] in present))
    if not events:
        return PreservationCurve([], [None] * n_buckets, [0] * n_buckets, missing)
    counts = np.array([max(c, 1) for c, _ in events], dtype=np.float64)
    kept = np.array([p for _, p in events], dtype=bool)
    lo, hi = counts.min(), counts.max()
    edges = np.geomspace(lo, hi * (1 + 1e-9) if hi > lo else lo + 1, n_buckets + 1)
    which = np.clip(np.searchsorted(edges, counts, side="right") - 1, 0, n_buckets - 1)
    ratios, occ = [], []
    for b in range(n_buckets):
        sel = which == b
        occ.append(int(sel.sum()))
        ratios.append(float(kept[sel].mean()) if sel.any() else None)
    return PreservationCurve([float(e) for e in edges], ratios, occ, missing)


def corpus_token_counts(data: Mapping[tuple[int, int], Sequence[Sample]]) -> dict[int, int]:
    """Occurrences of every token on both sides of a split (EOS excluded)."""
    counts: Counter = Counter()
    for samples in data.values():
        for s in samples:
            counts.update(s.x)
            counts.update(t for t in s.y if t != EOS)
    return dict(counts)


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    n: int
    speedup: float | None = None


def bench_latency(run_one: Callable[[object], object], items: Sequence, warmup: int = 3,
                  batch_size: int = 1, baseline: LatencyStats | None = None) -> LatencyStats:
    """Wall-clock time per item, one item at a time, after ``warmup`` untimed calls."""
    if batch_size != 1:
        raise ValueError("latency is measured at batch size 1")
    if not items:
        raise ValueError("no items to benchmark")
    for item in list(items)[:warmup]:
        run_one(item)
    times = []
    for item in items:
        t0 = time.perf_counter()
        run_one(item)
        times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.array(times)
    stats = LatencyStats(float(arr.mean()), float(np.percentile(arr, 50)), float(np.percentile(arr, 95)), len(arr))
    if baseline is not None:
        stats.speedup = baseline.mean_ms / stats.mean_ms
    return stats


def latency_runner(model, method: str, lm: NgramLM | None = None, opts: DecodeOptions | None = None):
    """A single-sentence decode callable for :func:`bench_latency`.

    ``method`` is ``lookahead`` or ``ngram-beam`` for a lattice model, or
    ``at-greedy`` for the autoregressive baseline. Items are ``Sample``s; the
    baseline decodes exactly ``len(sample.y)`` steps so both models emit
    sentences of the reference length.
    """
    if method == "at-greedy":
        def run(s: Sample):
            return model.greedy(s.x, s.l_tgt, max_len=len(s.y), stop_at_eos=False)
        return run
    o = DecodeOptions(**{**asdict(opts or DecodeOptions()), "method": method})
    o.validate()

    def run(s: Sample):
        return translate(model, [s.x], [s.l_tgt], o, lm)[0]
    return run


@dataclass
class EvalReport:
    """Schema of an evaluation file.

    ``bleu`` maps ``"<src>-<tgt>"`` to corpus BLEU; ``supervised_avg`` and
    ``zero_shot_avg`` are arithmetic means over the listed supervised and
    zero-shot directions (``None`` when there are none). ``preservation``
    holds a :class:`PreservationCurve` as a dict and ``latency`` maps a decoder
    name to :class:`LatencyStats` fields.
    """

    decoder: str
    bleu: dict[str, float]
    supervised: list[str]
    zero_shot: list[str]
    supervised_avg: float | None
    zero_shot_avg: float | None
    preservation: dict | None = None
    latency: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _avg(values: Iterable[float]) -> float | None:
    values = list(values)
    return float(np.mean(values)) if values else None


def evaluate(model, corpus, split: str = "test", opts: DecodeOptions | None = None,
             lm: NgramLM | None = None, with_preservation: bool = True) -> EvalReport:
    """BLEU over every direction of a split, plus the preservation curve when an oracle exists."""
    opts = opts or DecodeOptions()
    data = corpus.split(split)
    outputs: dict = {}
    scores = evaluate_directions(model, data, opts, lm, outputs)
    names = corpus.vocab.languages

    def key(d):
        return f"{names[d[0]]}-{names[d[1]]}"

    sup = [d for d in scores if corpus.graph.has(*d)]
    zs = [d for d in scores if not corpus.graph.has(*d)]
    pres = None
    if with_preservation and corpus.oracle is not None:
        samples, hyps = [], []
        for d in sorted(outputs):
            samples += data[d]
            hyps += outputs[d]
        curve = preservation_ratio(samples, hyps, corpus.oracle.lexicon, corpus_token_counts(corpus.train))
        pres = asdict(curve)
    return EvalReport(opts.method, {key(d): scores[d] for d in sorted(scores)}, [key(d) for d in sup],
                      [key(d) for d in zs], _avg(scores[d] for d in sup), _avg(scores[d] for d in zs), pres)
