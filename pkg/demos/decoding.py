"""Three ways to read a sentence off a lattice.

Lookahead takes one greedy walk: at each step it jumps to the (next step, word)
pair with the best combined link and word score. Beam search keeps several
partial paths and can recover from a greedy choice that looked good locally.
An n-gram language model then reranks the finished candidates, which settles
choices the lattice itself is unsure about.

Run: python demos/decoding.py
"""

import numpy as np

from mdat.data import N_SPECIAL
from mdat.decoding import beam_candidates, lm_train, lookahead_path, ngram_beam_search
from mdat.objective import DagOutput
from mdat.tensor import NEG_INF

V = N_SPECIAL + 6


def normalize(x):
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def random_lattice(rng, S):
    W = normalize(2.5 * rng.standard_normal((S, V)))
    W[:, :N_SPECIAL] = -30.0  # keep reserved ids out of the way
    W = normalize(W)
    L = np.full((S, S), NEG_INF)
    for s in range(S - 1):
        L[s, s + 1:] = normalize(2.5 * rng.standard_normal(S - s - 1))
    return DagOutput(W, L)


# Look for a lattice on which the greedy walk is clearly beaten.
rng = np.random.default_rng(0)
while True:
    dag = random_lattice(rng, 6)
    greedy = lookahead_path(dag)
    best = beam_candidates(dag, beam_width=4, lm_weight=0.0, len_alpha=0.0)[0]
    if best.dag_score > greedy.score + 0.5:
        break

print("lookahead   steps", greedy.steps, "words", greedy.tokens, f"log p {greedy.score:.2f}")
print("beam (k=4)  steps", list(best.steps), "words", list(best.tokens), f"log p {best.dag_score:.2f}")
print("\nall finished beam candidates:")
cands = beam_candidates(dag, beam_width=4, lm_weight=0.0, len_alpha=0.0)
for c in cands:
    print("  words", list(c.tokens), f"log p {c.dag_score:.2f}")

# A language model trained only on the runner-up sentence pulls it to the top.
runner_up = cands[1].output
lm = lm_train([(runner_up, 0)] * 5, order=3, vocab_size=V)
print("\nLM that has seen", runner_up, "->", ngram_beam_search(dag, 4, lm, lang=0, lm_weight=2.0, len_alpha=0.0))
print("no LM                          ->", ngram_beam_search(dag, 4, None, lm_weight=0.0, len_alpha=0.0))
