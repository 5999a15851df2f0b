"""Multilingual encoder-decoder models on top of :mod:`mdat.tensor`.

:class:`MDAT` is the non-autoregressive lattice model: the encoder reads the
target-language tag followed by the source tokens, and the decoder turns ``S``
learned position embeddings (no token inputs, no causal mask) into per-step
word distributions and step-to-step link distributions.

:class:`ATModel` is the autoregressive baseline with the same encoder and a
causal decoder, used for speed and quality comparisons.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .data import BOS, EOS, PAD, pad_batch, tag_token
from .objective import DagOutput
from .tensor import NEG_INF, Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_width: int = 128
    max_positions: int = 256
    upsample_factor: float = 4.0
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")
        if self.max_positions < 2:
            raise ValueError("max_positions must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, dtype, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = tn.parameter(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype))
        self.bias = tn.parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = tn.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int, dtype):
        self.gamma = tn.parameter(np.ones(d, dtype=dtype))
        self.beta = tn.parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, n_heads: int, dtype):
        self.h = n_heads
        self.q = Linear(rng, d, d, dtype)
        self.k = Linear(rng, d, d, dtype)
        self.v = Linear(rng, d, d, dtype)
        self.o = Linear(rng, d, d, dtype)

    def split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.h, d // self.h).transpose(0, 2, 1, 3)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None,
               rate: float, rng) -> Tensor:
        B, H, Lq, dh = q.shape
        scores = tn.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = tn.masked_fill(scores, mask, NEG_INF)
        attn = tn.dropout(tn.softmax(scores), rate, rng, self.training)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Lq, H * dh)
        return self.o(out)

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None, rate: float = 0.0, rng=None) -> Tensor:
        return self.attend(self.split(self.q(xq)), self.split(self.k(xkv)), self.split(self.v(xkv)),
                           mask, rate, rng)


class FeedForward(Module):
    def __init__(self, rng, d: int, width: int, dtype):
        self.fc1 = Linear(rng, d, width, dtype)
        self.fc2 = Linear(rng, width, d, dtype)

    def __call__(self, x: Tensor, rate: float, rng) -> Tensor:
        return self.fc2(tn.dropout(tn.relu(self.fc1(x)), rate, rng, self.training))


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_width, dtype)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, key_pad: np.ndarray, rng) -> Tensor:
        h = self.ln1(x)
        x = x + tn.dropout(self.attn(h, h, key_pad[:, None, None, :], self.rate, rng), self.rate, rng, self.training)
        return x + tn.dropout(self.ffn(self.ln2(x), self.rate, rng), self.rate, rng, self.training)


class DecoderLayer(Module):
    """Self-attention (causal or not), cross-attention, feed-forward; pre-norm."""

    def __init__(self, rng, cfg: ModelConfig, dtype):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads, dtype)
        self.ln3 = LayerNorm(cfg.d_model, dtype)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_width, dtype)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, self_mask, enc: Tensor, enc_pad: np.ndarray, rng) -> Tensor:
        r = self.rate
        h = self.ln1(x)
        x = x + tn.dropout(self.self_attn(h, h, self_mask, r, rng), r, rng, self.training)
        h = self.ln2(x)
        x = x + tn.dropout(self.cross_attn(h, enc, enc_pad[:, None, None, :], r, rng), r, rng, self.training)
        return x + tn.dropout(self.ffn(self.ln3(x), r, rng), r, rng, self.training)

    def step(self, x: Tensor, cache: dict, enc_k: Tensor, enc_v: Tensor) -> Tensor:
        """One incremental position for inference; ``cache`` keeps past keys/values."""
        h = self.ln1(x)
        sa = self.self_attn
        k_new, v_new = sa.split(sa.k(h)), sa.split(sa.v(h))
        if "k" in cache:
            cache["k"] = Tensor(np.concatenate([cache["k"].data, k_new.data], axis=2))
            cache["v"] = Tensor(np.concatenate([cache["v"].data, v_new.data], axis=2))
        else:
            cache["k"], cache["v"] = k_new, v_new
        x = x + sa.attend(sa.split(sa.q(h)), cache["k"], cache["v"], None, 0.0, None)
        h = self.ln2(x)
        ca = self.cross_attn
        x = x + ca.attend(ca.split(ca.q(h)), enc_k, enc_v, None, 0.0, None)
        return x + self.ffn(self.ln3(x), 0.0, None)


class Encoder(Module):
    """Token + position embeddings over ``[tag] + x``, then pre-norm layers."""

    def __init__(self, rng, cfg: ModelConfig, dtype):
        d = cfg.d_model
        self.embed = tn.parameter(rng.normal(0, d ** -0.5, (cfg.vocab_size, d)).astype(dtype))
        self.pos = tn.parameter(rng.normal(0, d ** -0.5, (cfg.max_positions + 1, d)).astype(dtype))
        self.layers = [EncoderLayer(rng, cfg, dtype) for _ in range(cfg.n_enc_layers)]
        self.ln = LayerNorm(d, dtype)
        self.cfg = cfg

    def __call__(self, src: np.ndarray, src_lens: np.ndarray, tgt_langs: Sequence[int], rng=None):
        """Returns states for the source tokens (tag position dropped) and their pad mask."""
        B, Lx = src.shape
        ids = np.concatenate([np.array([[tag_token(l)] for l in tgt_langs], dtype=np.int64), src], axis=1)
        pad = np.arange(Lx + 1)[None, :] > np.asarray(src_lens)[:, None]
        d = self.cfg.d_model
        x = tn.scale(tn.embedding(self.embed, ids), math.sqrt(d)) + tn.embedding(self.pos, np.arange(Lx + 1))
        x = tn.dropout(x, self.cfg.dropout, rng, self.training)
        for layer in self.layers:
            x = layer(x, pad, rng)
        x = self.ln(x)
        return x[:, 1:], pad[:, 1:]


def check_source(src: Sequence[int], cfg: ModelConfig) -> None:
    if len(src) == 0:
        raise ValueError("empty source sentence")
    if len(src) > cfg.max_positions:
        raise ValueError(f"source length {len(src)} exceeds max_positions {cfg.max_positions}")
    bad = [t for t in src if not 0 <= t < cfg.vocab_size]
    if bad:
        raise ValueError(f"token ids out of vocabulary: {bad[:5]}")


class MDAT(Module):
    """Non-autoregressive lattice translator."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.encoder = Encoder(rng, cfg, dtype)
        self.dec_pos = tn.parameter(rng.normal(0, 1.0, (cfg.max_positions, d)).astype(dtype))
        self.layers = [DecoderLayer(rng, cfg, dtype) for _ in range(cfg.n_dec_layers)]
        self.ln = LayerNorm(d, dtype)
        self.word_proj = Linear(rng, d, cfg.vocab_size, dtype)
        self.link_k = Linear(rng, d, d, dtype, bias=False)
        self.link_q = Linear(rng, d, d, dtype, bias=False)

    def lattice_size(self, src_len: int, tgt_len: int | None = None) -> int:
        """``ceil(upsample * T_x)`` clamped to ``[2, max_positions]``; grown to fit ``tgt_len`` if given."""
        S = math.ceil(round(self.cfg.upsample_factor * src_len, 9))
        if tgt_len is not None:
            S = max(S, tgt_len)
        return int(min(max(S, 2), self.cfg.max_positions))

    # -- single-sentence API --------------------------------------------------
    def encode(self, x: Sequence[int], l_tgt: int) -> Tensor:
        check_source(x, self.cfg)
        enc, _ = self.encoder(np.asarray([x], dtype=np.int64), np.array([len(x)]), [l_tgt])
        return enc.reshape(len(x), self.cfg.d_model)

    def decode_dag(self, enc: Tensor, T_x: int) -> DagOutput:
        if T_x < 1:
            raise ValueError("source length must be >= 1")
        S = self.lattice_size(T_x)
        enc3 = enc.reshape(1, T_x, self.cfg.d_model)
        W, L = self._decode(enc3, np.zeros((1, T_x), dtype=bool), np.array([S]))
        return DagOutput(W.reshape(S, -1), L.reshape(S, S))

    def link_head(self, h: Tensor) -> Tensor:
        """Link log-probabilities for one ``S x d`` state matrix."""
        S = h.shape[0]
        if S < 2:
            raise ValueError("link prediction needs S >= 2")
        return self._links(h.reshape(1, S, -1), np.array([S])).reshape(S, S)

    # -- batched --------------------------------------------------------------
    def _links(self, h: Tensor, lat_lens: np.ndarray) -> Tensor:
        B, S, d = h.shape
        k = self.link_k(h)
        q = self.link_q(h)
        scores = tn.scale(k @ q.transpose(0, 2, 1), 1.0 / math.sqrt(d))
        steps = np.arange(S)
        allowed = (steps[None, None, :] > steps[None, :, None]) & (steps[None, None, :] < lat_lens[:, None, None])
        return tn.masked_log_softmax(scores, allowed)

    def _decode(self, enc: Tensor, enc_pad: np.ndarray, lat_lens: np.ndarray, rng=None):
        B = enc.shape[0]
        S = int(lat_lens.max())
        x = tn.embedding(self.dec_pos, np.broadcast_to(np.arange(S), (B, S)))
        x = tn.dropout(x, self.cfg.dropout, rng, self.training)
        lat_pad = np.arange(S)[None, :] >= lat_lens[:, None]
        self_mask = lat_pad[:, None, None, :]
        for layer in self.layers:
            x = layer(x, self_mask, enc, enc_pad, rng)
        h = self.ln(x)
        word_logp = tn.log_softmax(self.word_proj(h))
        return word_logp, self._links(h, lat_lens)

    def forward_batch(self, srcs: Sequence[Sequence[int]], tgt_langs: Sequence[int],
                      tgt_lens: Sequence[int] | None = None, rng=None):
        """Lattice tables for a batch.

        Returns ``(word_logp, link_logp, lattice_lens)`` with tables padded to
        the longest lattice. ``tgt_lens`` (training) enlarges a lattice that
        would be shorter than its target.
        """
        for s in srcs:
            check_source(s, self.cfg)
        src, src_lens = pad_batch(srcs, PAD)
        if tgt_lens is None:
            lat = np.array([self.lattice_size(n) for n in src_lens])
        else:
            lat = np.array([self.lattice_size(n, t) for n, t in zip(src_lens, tgt_lens)])
        enc, enc_pad = self.encoder(src, src_lens, tgt_langs, rng)
        W, L = self._decode(enc, enc_pad, lat, rng)
        return W, L, lat

    def dags(self, srcs: Sequence[Sequence[int]], tgt_langs: Sequence[int]) -> list[DagOutput]:
        """Inference: one numpy :class:`DagOutput` per source sentence."""
        with tn.no_grad():
            W, L, lat = self.forward_batch(srcs, tgt_langs)
        return [DagOutput(W.data[i, :S], L.data[i, :S, :S]) for i, S in enumerate(lat)]


class ATModel(Module):
    """Autoregressive baseline: same encoder, causal decoder over shifted targets."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.encoder = Encoder(rng, cfg, dtype)
        self.embed = tn.parameter(rng.normal(0, d ** -0.5, (cfg.vocab_size, d)).astype(dtype))
        self.pos = tn.parameter(rng.normal(0, d ** -0.5, (cfg.max_positions + 1, d)).astype(dtype))
        self.layers = [DecoderLayer(rng, cfg, dtype) for _ in range(cfg.n_dec_layers)]
        self.ln = LayerNorm(d, dtype)
        self.out = Linear(rng, d, cfg.vocab_size, dtype)

    def encode(self, x: Sequence[int], l_tgt: int) -> Tensor:
        check_source(x, self.cfg)
        enc, _ = self.encoder(np.asarray([x], dtype=np.int64), np.array([len(x)]), [l_tgt])
        return enc.reshape(len(x), self.cfg.d_model)

    def _embed(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        L = ids.shape[1]
        return (tn.scale(tn.embedding(self.embed, ids), math.sqrt(self.cfg.d_model))
                + tn.embedding(self.pos, np.arange(offset, offset + L)))

    def teacher_forced(self, enc: Tensor, enc_pad: np.ndarray, prefix: np.ndarray,
                       prefix_lens: np.ndarray, rng=None) -> Tensor:
        """Next-token log-probabilities at every prefix position (``B x L x V``)."""
        B, L = prefix.shape
        if L > self.cfg.max_positions:
            raise ValueError(f"prefix length {L} exceeds max_positions")
        x = tn.dropout(self._embed(prefix), self.cfg.dropout, rng, self.training)
        causal = np.triu(np.ones((L, L), dtype=bool), 1)[None, None]
        key_pad = (np.arange(L)[None, :] >= prefix_lens[:, None])[:, None, None, :]
        mask = causal | key_pad
        for layer in self.layers:
            x = layer(x, mask, enc, enc_pad, rng)
        return tn.log_softmax(self.out(self.ln(x)))

    def decode_ar_step(self, enc: Tensor, prefix: Sequence[int]) -> np.ndarray:
        """Log-probabilities of the token following ``prefix`` (which starts with BOS)."""
        if not prefix or prefix[0] != BOS:
            raise ValueError("prefix must start with BOS")
        if len(prefix) > self.cfg.max_positions:
            raise ValueError(f"prefix length {len(prefix)} exceeds max_positions")
        enc3 = enc.reshape(1, *enc.shape)
        with tn.no_grad():
            logp = self.teacher_forced(enc3, np.zeros((1, enc.shape[0]), dtype=bool),
                                       np.asarray([prefix], dtype=np.int64), np.array([len(prefix)]))
        return logp.data[0, -1]

    def sequence_log_prob(self, x: Sequence[int], l_tgt: int, y: Sequence[int]) -> float:
        """Teacher-forced ``log p(y | x)`` in one pass; ``y`` ends with EOS."""
        enc = self.encode(x, l_tgt)
        prefix = np.asarray([[BOS, *y[:-1]]], dtype=np.int64)
        with tn.no_grad():
            logp = self.teacher_forced(enc.reshape(1, *enc.shape), np.zeros((1, len(x)), dtype=bool),
                                       prefix, np.array([len(y)]))
        return float(logp.data[0, np.arange(len(y)), list(y)].sum())

    def loss(self, samples, rng=None) -> Tensor:
        """Mean per-sentence negative log-likelihood under teacher forcing."""
        src, src_lens = pad_batch([s.x for s in samples])
        enc, enc_pad = self.encoder(src, src_lens, [s.l_tgt for s in samples], rng)
        prefix, lens = pad_batch([(BOS, *s.y[:-1]) for s in samples])
        tgt, _ = pad_batch([s.y for s in samples])
        logp = self.teacher_forced(enc, enc_pad, prefix, lens, rng)
        picked = tn.take_last(logp, tgt[:, :, None]).reshape(tgt.shape)
        valid = np.arange(tgt.shape[1])[None, :] < lens[:, None]
        picked = tn.masked_fill(picked, ~valid, 0.0)
        return tn.scale(picked.sum(), -1.0 / len(samples))

    def greedy(self, x: Sequence[int], l_tgt: int, max_len: int | None = None,
               stop_at_eos: bool = True) -> list[int]:
        """Greedy left-to-right decoding with cached self-attention keys/values."""
        if max_len is None:
            max_len = min(2 * len(x) + 10, self.cfg.max_positions)
        with tn.no_grad():
            enc = self.encode(x, l_tgt).reshape(1, len(x), self.cfg.d_model)
            enc_kv = [(l.cross_attn.split(l.cross_attn.k(enc)), l.cross_attn.split(l.cross_attn.v(enc)))
                      for l in self.layers]
            caches = [{} for _ in self.layers]
            out: list[int] = []
            tok = BOS
            for t in range(max_len):
                h = self._embed(np.array([[tok]]), offset=t)
                for layer, cache, (ek, ev) in zip(self.layers, caches, enc_kv):
                    h = layer.step(h, cache, ek, ev)
                logits = self.out(self.ln(h)).data[0, 0]
                tok = int(np.argmax(logits))
                out.append(tok)
                if stop_at_eos and tok == EOS:
                    break
        return out
