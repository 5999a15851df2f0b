"""Vocabulary, multilingual samples and synthetic cipher corpora.

Each synthetic language renders a shared sequence of concept ids through its
own substitution cipher and word-order rule, so translation between any two
languages is an exact, invertible function. The hub language is paired with
every other language for training; the remaining pairs are held out as
zero-shot test directions.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
N_SPECIAL = len(SPECIAL_TOKENS)
VOCAB_HEADER = "#mdat-vocab v1"

WORD_ORDERS = ("identity", "reverse", "rotate")


def tag_token(lang: int) -> int:
    """Vocabulary id of the tag token for language ``lang``."""
    return N_SPECIAL + lang


class Vocabulary:
    """Token table: fixed specials, one tag per language, then surface words."""

    def __init__(self, languages: Sequence[str], words: Iterable[str] = ()):
        self.languages = list(languages)
        self.itos: list[str] = list(SPECIAL_TOKENS) + [f"<2{name}>" for name in self.languages]
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            self.stoi[tok] = i
        for w in words:
            self.add(w)

    @property
    def n_reserved(self) -> int:
        return N_SPECIAL + len(self.languages)

    def add(self, word: str) -> int:
        if word in self.stoi:
            return self.stoi[word]
        self.stoi[word] = len(self.itos)
        self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def lang_id(self, name: str) -> int:
        try:
            return self.languages.index(name)
        except ValueError:
            raise KeyError(f"unknown language {name!r}; known: {', '.join(self.languages)}") from None

    def is_special(self, idx: int) -> bool:
        return idx < self.n_reserved

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def save(self, path: str | os.PathLike) -> None:
        lines = [VOCAB_HEADER, "languages " + " ".join(self.languages)]
        lines += self.itos[self.n_reserved:]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise ValueError(f"{path}: not a vocabulary file")
        langs = lines[1].split()[1:]
        return cls(langs, lines[2:])


@dataclass(frozen=True)
class Sample:
    """One parallel pair: ``x`` in ``l_src`` translates to ``y`` in ``l_tgt``.

    ``y`` carries a trailing EOS; ``x`` does not.
    """

    x: tuple[int, ...]
    l_src: int
    y: tuple[int, ...]
    l_tgt: int

    def __post_init__(self):
        if self.l_src == self.l_tgt:
            raise ValueError("source and target language must differ")
        if not self.x or not self.y:
            raise ValueError("sample sequences must be non-empty")

    @property
    def n_tokens(self) -> int:
        return len(self.x) + len(self.y)


def make_sample(vocab: Vocabulary, src: str, l_src: int, tgt: str, l_tgt: int) -> Sample:
    x = tuple(vocab.encode(src))
    y = tuple(vocab.encode(tgt))
    if not y:
        raise ValueError("empty target sentence")
    return Sample(x, l_src, y + (EOS,), l_tgt)


@dataclass(frozen=True)
class DirectionGraph:
    edges: frozenset[tuple[int, int]]
    hub: int

    def has(self, src: int, tgt: int) -> bool:
        return (src, tgt) in self.edges

    @classmethod
    def hub_centric(cls, n_langs: int, hub: int = 0) -> "DirectionGraph":
        edges = set()
        for x in range(n_langs):
            if x != hub:
                edges |= {(hub, x), (x, hub)}
        return cls(frozenset(edges), hub)


@dataclass
class SyntheticSpec:
    """Recipe for a cipher corpus.

    ``word_orders`` names one rule per language (``identity``, ``reverse`` or
    ``rotate``); ``None`` means identity everywhere. Concepts are drawn from a
    Zipf law with exponent ``zipf`` so that token frequencies span a range.
    """

    n_langs: int = 3
    n_concepts: int = 24
    word_orders: list[str] | None = None
    min_len: int = 3
    max_len: int = 7
    zipf: float = 1.0
    train_per_direction: int = 1500
    valid_per_direction: int = 50
    test_per_direction: int = 100
    hub: int = 0
    seed: int = 1
    prefixes: list[str] | None = None

    def language_names(self) -> list[str]:
        return [f"L{i}" for i in range(self.n_langs)]

    def orders(self) -> list[str]:
        return list(self.word_orders) if self.word_orders else ["identity"] * self.n_langs

    def validate(self) -> None:
        if self.n_langs < 3:
            raise ValueError("need at least 3 languages: zero-shot requires two non-hub languages")
        if not 0 <= self.hub < self.n_langs:
            raise ValueError(f"hub {self.hub} out of range")
        orders = self.orders()
        if len(orders) != self.n_langs:
            raise ValueError(f"{len(orders)} word orders for {self.n_langs} languages")
        for o in orders:
            if o not in WORD_ORDERS:
                raise ValueError(f"unknown word order {o!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.n_concepts < 3:
            raise ValueError("need at least 3 concepts")
        prefixes = self.surface_prefixes()
        if len(set(prefixes)) != len(prefixes):
            raise ValueError(f"cipher collision: surface prefixes {prefixes} are not distinct")

    def surface_prefixes(self) -> list[str]:
        return list(self.prefixes) if self.prefixes else [name.lower() for name in self.language_names()]


def _order(seq: list, rule: str) -> list:
    if rule == "reverse":
        return seq[::-1]
    if rule == "rotate":
        return seq[1:] + seq[:1]
    return list(seq)


def _unorder(seq: list, rule: str) -> list:
    if rule == "reverse":
        return seq[::-1]
    if rule == "rotate":
        return seq[-1:] + seq[:-1]
    return list(seq)


class OracleTranslator:
    """Exact translation between synthetic languages, on surface strings or ids."""

    def __init__(self, spec: SyntheticSpec, vocab: Vocabulary, ciphers: list[list[str]]):
        self.spec = spec
        self.vocab = vocab
        self.ciphers = ciphers  # ciphers[lang][concept] -> surface token
        self.orders = spec.orders()
        self._decipher = [{tok: c for c, tok in enumerate(ci)} for ci in ciphers]

    def render(self, concepts: Sequence[int], lang: int) -> list[str]:
        return _order([self.ciphers[lang][c] for c in concepts], self.orders[lang])

    def concepts(self, tokens: Sequence[str], lang: int) -> list[int]:
        return [self._decipher[lang][t] for t in _unorder(list(tokens), self.orders[lang])]

    def translate(self, tokens: Sequence[str], src: int, tgt: int) -> list[str]:
        return self.render(self.concepts(tokens, src), tgt)

    def translate_ids(self, ids: Sequence[int], src: int, tgt: int) -> list[int]:
        words = [self.vocab.itos[i] for i in ids if i != EOS]
        return self.vocab.encode(" ".join(self.translate(words, src, tgt)))

    def lexicon(self, src: int, tgt: int) -> dict[int, int]:
        """Source token id -> its unique target token id."""
        return {self.vocab.stoi[a]: self.vocab.stoi[b] for a, b in zip(self.ciphers[src], self.ciphers[tgt])}


@dataclass
class Corpus:
    """Splits keyed by direction ``(l_src, l_tgt)``."""

    vocab: Vocabulary
    graph: DirectionGraph
    train: dict[tuple[int, int], list[Sample]]
    valid: dict[tuple[int, int], list[Sample]]
    test: dict[tuple[int, int], list[Sample]]
    oracle: OracleTranslator | None = None
    spec: SyntheticSpec | None = None

    @property
    def languages(self) -> list[int]:
        return list(range(len(self.vocab.languages)))

    def zero_shot_directions(self) -> list[tuple[int, int]]:
        return [d for d in self.test if not self.graph.has(*d)]

    def supervised_directions(self) -> list[tuple[int, int]]:
        return [d for d in self.test if self.graph.has(*d)]

    def split(self, name: str) -> dict[tuple[int, int], list[Sample]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def _draw_concepts(rng: np.random.Generator, spec: SyntheticSpec, probs: np.ndarray) -> list[int]:
    # No concept repeats its neighbour, cyclically, so no word order produces
    # adjacent duplicates (which decoding would merge).
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    out: list[int] = []
    while len(out) < n:
        c = int(rng.choice(spec.n_concepts, p=probs))
        if out and c == out[-1]:
            continue
        if n > 1 and len(out) == n - 1 and c == out[0]:
            continue
        out.append(c)
    return out


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def gen_corpus(spec: SyntheticSpec) -> Corpus:
    """Generate train/valid/test splits, the direction graph and an exact oracle.

    Training and validation contain hub<->X directions only; the test split
    adds every X<->Y pair between non-hub languages.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = spec.language_names()
    prefixes = spec.surface_prefixes()
    ciphers = []
    for p in prefixes:
        perm = rng.permutation(spec.n_concepts)
        ciphers.append([f"{p}_{int(perm[c])}" for c in range(spec.n_concepts)])
    vocab = Vocabulary(names)
    for ci in ciphers:
        for tok in sorted(ci, key=lambda t: int(t.rsplit("_", 1)[1])):
            vocab.add(tok)
    oracle = OracleTranslator(spec, vocab, ciphers)
    graph = DirectionGraph.hub_centric(spec.n_langs, spec.hub)
    probs = zipf_probs(spec.n_concepts, spec.zipf)

    def pairs(direction, n):
        src, tgt = direction
        out = []
        for _ in range(n):
            c = _draw_concepts(rng, spec, probs)
            x = tuple(vocab.stoi[t] for t in oracle.render(c, src))
            y = tuple(vocab.stoi[t] for t in oracle.render(c, tgt)) + (EOS,)
            out.append(Sample(x, src, y, tgt))
        return out

    supervised = sorted(graph.edges)
    zero_shot = [(a, b) for a in range(spec.n_langs) for b in range(spec.n_langs)
                 if a != b and (a, b) not in graph.edges]
    train = {d: pairs(d, spec.train_per_direction) for d in supervised}
    valid = {d: pairs(d, spec.valid_per_direction) for d in supervised}
    test = {d: pairs(d, spec.test_per_direction) for d in supervised + zero_shot}
    return Corpus(vocab, graph, train, valid, test, oracle, spec)


def direction_weights(sizes: Sequence[int], temperature_exponent: float = 1.0 / 3.0) -> np.ndarray:
    """Sampling probabilities proportional to ``size ** exponent``."""
    w = np.asarray(sizes, dtype=np.float64) ** temperature_exponent
    return w / w.sum()


def sample_batch(rng: np.random.Generator, datasets: dict[tuple[int, int], list[Sample]],
                 token_budget: int, exponent: float = 1.0 / 3.0) -> list[Sample]:
    """Draw samples until the next one would overflow ``token_budget``.

    Each sample's direction is drawn with probability proportional to
    ``n_d ** exponent``; the sentence is then drawn uniformly within it.
    """
    dirs = [d for d in sorted(datasets) if datasets[d]]
    if not dirs:
        raise ValueError("no non-empty dataset to sample from")
    longest = max(s.n_tokens for d in dirs for s in datasets[d])
    if token_budget < longest:
        raise ValueError(f"token budget {token_budget} below longest sample ({longest} tokens)")
    probs = direction_weights([len(datasets[d]) for d in dirs], exponent)
    batch: list[Sample] = []
    used = 0
    while True:
        d = dirs[int(rng.choice(len(dirs), p=probs))]
        pool = datasets[d]
        s = pool[int(rng.integers(len(pool)))]
        if used + s.n_tokens > token_budget:
            return batch
        batch.append(s)
        used += s.n_tokens


# -- on-disk corpus -----------------------------------------------------------
MANIFEST = "manifest.json"


def _write_lines(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def save_corpus(corpus: Corpus, out_dir: str | os.PathLike) -> None:
    """Write parallel files ``<split>.<src>-<tgt>.<lang>``, the vocabulary and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = corpus.vocab.languages
    v = corpus.vocab
    manifest = {"format": "mdat-corpus", "version": 1, "languages": names, "hub": names[corpus.graph.hub],
                "splits": {}}
    for split in ("train", "valid", "test"):
        dirs = []
        for (a, b), samples in sorted(corpus.split(split).items()):
            sa, sb = names[a], names[b]
            _write_lines(out / f"{split}.{sa}-{sb}.{sa}", (v.decode(s.x) for s in samples))
            _write_lines(out / f"{split}.{sa}-{sb}.{sb}", (v.decode(s.y[:-1]) for s in samples))
            dirs.append(f"{sa}-{sb}")
        manifest["splits"][split] = dirs
    if corpus.spec is not None:
        manifest["spec"] = asdict(corpus.spec)
    v.save(out / "vocab.txt")
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(in_dir: str | os.PathLike) -> Corpus:
    """Read a corpus written by :func:`save_corpus`.

    The oracle is rebuilt when the manifest records the generating spec.
    """
    src = Path(in_dir)
    manifest = json.loads((src / MANIFEST).read_text(encoding="utf-8"))
    vocab = Vocabulary.load(src / "vocab.txt")
    names = manifest["languages"]
    hub = names.index(manifest["hub"])
    splits = {}
    for split in ("train", "valid", "test"):
        data = {}
        for d in manifest["splits"][split]:
            sa, sb = d.split("-")
            xs = (src / f"{split}.{d}.{sa}").read_text(encoding="utf-8").splitlines()
            ys = (src / f"{split}.{d}.{sb}").read_text(encoding="utf-8").splitlines()
            if len(xs) != len(ys):
                raise ValueError(f"{split}.{d}: line counts differ ({len(xs)} vs {len(ys)})")
            a, b = names.index(sa), names.index(sb)
            data[(a, b)] = [make_sample(vocab, x, a, y, b) for x, y in zip(xs, ys)]
        splits[split] = data
    edges = frozenset(splits["train"])
    graph = DirectionGraph(edges, hub)
    spec = oracle = None
    if "spec" in manifest:
        spec = SyntheticSpec(**manifest["spec"])
        regenerated = gen_corpus(spec)
        oracle = regenerated.oracle
    return Corpus(vocab, graph, splits["train"], splits["valid"], splits["test"], oracle, spec)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lens.max())), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


def token_counts(samples: Iterable[Sample]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for s in samples:
        for tok in s.x:
            counts[tok] = counts.get(tok, 0) + 1
    return counts
