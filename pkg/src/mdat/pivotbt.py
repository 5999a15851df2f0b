"""Online back-translation with pivot routing.

For a real pair ``(x, l_src, y, l_tgt)`` an augmentation language ``l_aug`` is
chosen and ``y`` is translated into it by the model being trained. When the
model never saw ``l_tgt -> l_aug`` the translation goes through the hub
language instead, as two supervised hops. The synthetic pair
``(x_hat, l_aug, y, l_tgt)`` joins the batch with loss weight ``lam``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import EOS, DirectionGraph, Sample
from .decoding import DecodeOptions, NgramLM, translate
from .tensor import Tensor, add, scale

log = logging.getLogger(__name__)

MODES = ("pivotbt", "rand-lang", "src-lang", "off")


@dataclass
class BtPolicy:
    """How synthetic samples are made.

    ``pivotbt`` routes unseen back-translation directions through the hub;
    ``rand-lang`` picks a random language and always translates directly;
    ``src-lang`` back-translates into the sample's own source language;
    ``off`` disables augmentation.
    """

    mode: str = "pivotbt"
    lam: float = 0.5
    warmup_fraction: float = 0.1
    decode: DecodeOptions = field(default_factory=DecodeOptions)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown back-translation mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ValueError("back-translation strength must be >= 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must be in [0, 1]")
        self.decode.validate()

    @property
    def active(self) -> bool:
        return self.mode != "off" and self.lam > 0


@dataclass(frozen=True)
class BtRoute:
    kind: str  # "direct" or "pivot"
    l_aug: int
    l_pivot: int | None = None

    def hops(self, l_tgt: int) -> list[int]:
        """Languages visited after ``l_tgt``."""
        return [self.l_aug] if self.kind == "direct" else [self.l_pivot, self.l_aug]

    def check(self, l_tgt: int, graph: DirectionGraph) -> None:
        if self.kind == "direct":
            ok = graph.has(l_tgt, self.l_aug)
        else:
            ok = (self.l_pivot is not None and graph.has(l_tgt, self.l_pivot)
                  and graph.has(self.l_pivot, self.l_aug))
        if not ok:
            raise ValueError(f"route {self} is not supported by the direction graph from {l_tgt}")


def pick_aug_language(rng: np.random.Generator, languages: Sequence[int], l_tgt: int) -> int:
    """Uniform choice among ``languages`` other than ``l_tgt``."""
    others = [l for l in languages if l != l_tgt]
    if not others:
        raise ValueError("need at least two languages to pick an augmentation language")
    return others[int(rng.integers(len(others)))]


def plan_route(l_tgt: int, l_aug: int, graph: DirectionGraph) -> BtRoute:
    if l_aug == l_tgt:
        raise ValueError("augmentation language equals target language")
    if graph.has(l_tgt, l_aug):
        return BtRoute("direct", l_aug)
    hub = graph.hub
    if graph.has(l_tgt, hub) and graph.has(hub, l_aug):
        return BtRoute("pivot", l_aug, hub)
    raise ValueError(f"unroutable direction {l_tgt} -> {l_aug}")


def decode_hop(model, sources: Sequence[Sequence[int]], tgt_langs: Sequence[int],
               opts: DecodeOptions, lm: NgramLM | None = None) -> list[list[int]]:
    """One batched translation pass with gradients off."""
    was_training = model.training
    model.eval()
    try:
        return translate(model, sources, tgt_langs, opts, lm)
    finally:
        model.train(was_training)


def _clip(seq: Sequence[int], model) -> list[int]:
    return list(seq[: model.cfg.max_positions])


def back_translate(model, y: Sequence[int], l_tgt: int, route: BtRoute,
                   opts: DecodeOptions | None = None, lm: NgramLM | None = None) -> tuple[list[int], bool]:
    """Synthesize a source sentence in ``route.l_aug`` for target ``y``.

    Returns ``(x_hat, fell_back)``; when a hop produces nothing, ``x_hat`` is a
    copy of ``y`` (without EOS) and ``fell_back`` is true.
    """
    opts = opts or DecodeOptions()
    src = [t for t in y if t != EOS]
    cur = src
    for lang in route.hops(l_tgt):
        if not cur:
            break
        cur = _clip(decode_hop(model, [cur], [lang], opts, lm)[0], model)
    if not cur:
        log.debug("empty back-translation for %s -> %s; copying target", l_tgt, route.l_aug)
        return src, True
    return cur, False


@dataclass
class BtStats:
    direct: int = 0
    pivot: int = 0
    fallbacks: int = 0

    def as_dict(self) -> dict:
        return {"bt_direct": self.direct, "bt_pivot": self.pivot, "bt_fallbacks": self.fallbacks}


def choose_route(rng: np.random.Generator, sample: Sample, policy: BtPolicy, graph: DirectionGraph,
                 languages: Sequence[int]) -> BtRoute:
    if policy.mode == "pivotbt":
        return plan_route(sample.l_tgt, pick_aug_language(rng, languages, sample.l_tgt), graph)
    if policy.mode == "rand-lang":
        return BtRoute("direct", pick_aug_language(rng, languages, sample.l_tgt))
    if policy.mode == "src-lang":
        return BtRoute("direct", sample.l_src)
    raise ValueError(f"no augmentation in mode {policy.mode!r}")


def augment_batch(rng: np.random.Generator, batch: Sequence[Sample], model, policy: BtPolicy,
                  graph: DirectionGraph, languages: Sequence[int],
                  lm: NgramLM | None = None) -> tuple[list[Sample], BtStats]:
    """One synthetic sample per real sample, decoded in at most two batched passes."""
    if policy.mode == "off":
        raise ValueError("augment_batch called with augmentation off")
    routes = [choose_route(rng, s, policy, graph, languages) for s in batch]
    stats = BtStats()
    cur = [[t for t in s.y if t != EOS] for s in batch]
    max_hops = max(len(r.hops(0)) for r in routes)
    for hop in range(max_hops):
        idx = [i for i, r in enumerate(routes) if hop < len(r.hops(0)) and cur[i]]
        if not idx:
            continue
        outs = decode_hop(model, [cur[i] for i in idx], [routes[i].hops(batch[i].l_tgt)[hop] for i in idx],
                          policy.decode, lm)
        for i, out in zip(idx, outs):
            cur[i] = _clip(out, model)
    synthetic = []
    for s, r, x_hat in zip(batch, routes, cur):
        if r.kind == "pivot":
            stats.pivot += 1
        else:
            stats.direct += 1
        if not x_hat:
            stats.fallbacks += 1
            x_hat = [t for t in s.y if t != EOS] or list(s.y)
        synthetic.append(Sample(tuple(x_hat), r.l_aug, s.y, s.l_tgt))
    return synthetic, stats


def combined_loss(l_real: Tensor | float, l_bt: Tensor | float, lam: float):
    """``l_real + lam * l_bt``."""
    if lam < 0:
        raise ValueError("back-translation strength must be >= 0")
    if isinstance(l_real, Tensor) or isinstance(l_bt, Tensor):
        return add(l_real, scale(l_bt, lam))
    return l_real + lam * l_bt
