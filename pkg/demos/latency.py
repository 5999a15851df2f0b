"""Why parallel decoding is fast.

The autoregressive baseline runs its decoder once per output word. The lattice
model runs its decoder once per sentence and then walks the lattice in numpy.
This script times both at batch size 1 on 32-word sentences, using untrained
weights of the same size (timing does not depend on what the weights are).

Run: python demos/latency.py
"""

from threadpoolctl import threadpool_limits

from mdat.cli import bench_samples
from mdat.data import SyntheticSpec, gen_corpus
from mdat.decoding import DecodeOptions, lm_train
from mdat.evaluation import bench_latency, latency_runner
from mdat.model import ATModel, MDAT, ModelConfig

threadpool_limits(1)
corpus = gen_corpus(SyntheticSpec(train_per_direction=200))
cfg = ModelConfig(vocab_size=len(corpus.vocab), dtype="float32")
lattice, at = MDAT(cfg).eval(), ATModel(cfg).eval()
lm = lm_train(((list(s.y[:-1]), s.l_tgt) for ss in corpus.train.values() for s in ss), vocab_size=len(corpus.vocab))
items = bench_samples(corpus, 10, 32)

base = bench_latency(latency_runner(at, "at-greedy"), items)
print(f"AT greedy        {base.mean_ms:7.1f} ms")
for method, width in (("lookahead", 1), ("ngram-beam", 4), ("ngram-beam", 8)):
    st = bench_latency(latency_runner(lattice, method, lm, DecodeOptions(beam_width=width)), items, baseline=base)
    label = method if method == "lookahead" else f"{method} k={width}"
    print(f"{label:16s} {st.mean_ms:7.1f} ms  ({st.speedup:.1f}x)")
