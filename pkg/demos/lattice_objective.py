"""How a lattice scores a sentence.

A lattice has S generation steps. Each step holds a word distribution and each
step links forward to every later step. A target of T words is produced along
a path of T steps that starts at step 0 and ends at step S-1, and its
probability is the sum over all such paths.

Run: python demos/lattice_objective.py
"""

import itertools
import math

import numpy as np

from mdat.objective import DagOutput, dag_log_likelihood, enumerate_paths, path_log_prob
from mdat.tensor import NEG_INF, backward, parameter


def random_lattice(rng, S, V):
    W = rng.standard_normal((S, V))
    W -= np.log(np.exp(W).sum(1, keepdims=True))
    L = np.full((S, S), NEG_INF)
    for s in range(S - 1):
        r = rng.standard_normal(S - s - 1)
        L[s, s + 1:] = r - np.log(np.exp(r).sum())
    return DagOutput(W, L)


rng = np.random.default_rng(0)
S, V = 6, 3
dag = random_lattice(rng, S, V)
y = [2, 0, 1]

# Brute force: list every path and add up its probability.
paths = enumerate_paths(S, len(y))
print(f"{len(paths)} paths of {len(y)} steps through {S} steps:")
for a in paths[:4]:
    print(f"  {a}  log p = {path_log_prob(dag, y, a):.4f}")
print("  ...")
brute = math.log(sum(math.exp(path_log_prob(dag, y, a)) for a in paths))

# The forward recursion gets the same number in O(T * S^2).
dp = dag_log_likelihood(dag, y)
print(f"\nenumeration {brute:.12f}\nrecursion   {dp:.12f}")

# Probabilities over all sentences of all lengths sum to one.
total = sum(math.exp(dag_log_likelihood(dag, list(y2)))
            for T in range(2, S + 1) for y2 in itertools.product(range(V), repeat=T))
print(f"\nmass over every sentence of length 2..{S}: {total:.12f}")

# The gradient with respect to the word table is the posterior probability
# that a step emits each target word.
W, L = parameter(dag.word_logp), parameter(dag.link_logp)
backward(dag_log_likelihood(DagOutput(W, L), y))
print("\nposterior of each step emitting each target position (rows: steps):")
for s in range(S):
    print("  step", s, " ".join(f"{W.grad[s, w]:.3f}" for w in y))
