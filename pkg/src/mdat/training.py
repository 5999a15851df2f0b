"""Optimization: Adam, warmup + inverse-sqrt schedule, the training loop,
checkpoint selection and weight averaging."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import load_arrays, save_arrays, save_model
from .data import Corpus, Sample, pad_batch, sample_batch
from .decoding import DecodeOptions
from .model import MDAT, Module
from .objective import dag_log_likelihood_batch
from .pivotbt import BtPolicy, BtStats, augment_batch, combined_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup: int = 1000
    total_updates: int = 20000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    token_budget: int = 2048
    direction_exponent: float = 1.0 / 3.0
    seed: int = 0
    checkpoint_interval: int = 1000
    keep_best: int = 5
    valid_max_sentences: int = 50
    clip_norm: float = 0.0

    def validate(self) -> None:
        if self.warmup > self.total_updates:
            raise ValueError("warmup must not exceed total_updates")
        if self.keep_best < 1:
            raise ValueError("keep_best must be >= 1")
        if self.total_updates < 1 or self.checkpoint_interval < 1:
            raise ValueError("total_updates and checkpoint_interval must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then ``peak_lr * sqrt(warmup / step)``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if cfg.warmup <= 0:
        return cfg.peak_lr
    if step <= cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    return cfg.peak_lr * math.sqrt(cfg.warmup / step)


class Adam:
    def __init__(self, params: Sequence[tn.Tensor], beta1=0.9, beta2=0.98, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(params: Sequence[tn.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / (total + 1e-12)
    return total


def batch_loss(model: Module, samples: Sequence[Sample], rng=None) -> tuple[tn.Tensor, int, int]:
    """Mean per-sentence NLL; returns ``(loss, skipped, target_tokens)``."""
    if isinstance(model, MDAT):
        usable = [s for s in samples if len(s.y) >= 2]
        skipped = len(samples) - len(usable)
        if not usable:
            raise ValueError("no usable samples in batch")
        W, L, lat = model.forward_batch([s.x for s in usable], [s.l_tgt for s in usable],
                                        [len(s.y) for s in usable], rng)
        y, tl = pad_batch([s.y for s in usable])
        ll = dag_log_likelihood_batch(W, L, y, tl, lat)
        return tn.scale(ll.sum(), -1.0 / len(usable)), skipped, int(tl.sum())
    return model.loss(samples, rng), 0, sum(len(s.y) for s in samples)


@dataclass
class CheckpointRecord:
    step: int
    score: float
    path: str | None = None


@dataclass
class TrainResult:
    checkpoints: list[CheckpointRecord]
    metrics: list[dict]
    averaged: dict[str, np.ndarray] | None = None
    final_step: int = 0


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def average_states(states: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise mean of parameter dictionaries."""
    if not states:
        raise ValueError("nothing to average")
    keys = list(states[0])
    out = {}
    for k in keys:
        arrs = []
        for st in states:
            if k not in st:
                raise KeyError(f"parameter {k!r} missing from a checkpoint")
            if st[k].shape != states[0][k].shape:
                raise ValueError(f"{k}: shape mismatch {st[k].shape} vs {states[0][k].shape}")
            arrs.append(st[k].astype(np.float64))
        out[k] = (sum(arrs) / len(arrs)).astype(states[0][k].dtype)
    return out


def average_checkpoints(paths: Sequence[str | os.PathLike], k: int, scores: Sequence[float] | None = None):
    """Load and average the ``k`` best checkpoint files.

    ``scores`` ranks the files (higher is better); by default the validation
    score stored in each file is used. Returns the averaged model.
    """
    from .checkpoint import load_model

    if not 1 <= k <= len(paths):
        raise ValueError(f"k={k} but {len(paths)} checkpoints available")
    loaded = []
    for i, p in enumerate(paths):
        arrays, meta = load_arrays(p)
        s = scores[i] if scores is not None else meta.get("extra", {}).get("valid_bleu", 0.0)
        loaded.append((-s, i, p, arrays))
    loaded.sort(key=lambda t: (t[0], t[1]))
    chosen = loaded[:k]
    model = load_model(chosen[0][2])
    model.load_state_dict(average_states([c[3] for c in chosen]))
    return model


class Trainer:
    """Runs updates on one model; single writer on its parameters.

    With ``out_dir`` set, checkpoints, a metrics log (one JSON record per
    line) and a resumable trainer state are written there; otherwise the best
    checkpoints are kept in memory.
    """

    def __init__(self, model: Module, corpus: Corpus, policy: BtPolicy | None, cfg: TrainConfig,
                 out_dir: str | os.PathLike | None = None, eval_opts: DecodeOptions | None = None):
        cfg.validate()
        self.policy = policy or BtPolicy(mode="off")
        self.policy.validate()
        self.model, self.corpus, self.cfg = model, corpus, cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.eval_opts = eval_opts or DecodeOptions()
        self.opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
        self.data_rng = np.random.default_rng([cfg.seed, 0])
        self.bt_rng = np.random.default_rng([cfg.seed, 1])
        self.drop_rng = np.random.default_rng([cfg.seed, 2])
        self.step = 0
        self.metrics: list[dict] = []
        self.best: list[CheckpointRecord] = []
        self._mem_ckpts: dict[int, dict[str, np.ndarray]] = {}
        self.bt_start = int(round(self.policy.warmup_fraction * cfg.total_updates))
        if self.out_dir is not None:
            (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    # -- persistence ----------------------------------------------------------
    @property
    def state_path(self) -> Path:
        return self.out_dir / "trainer_state.bin"

    @property
    def log_path(self) -> Path:
        return self.out_dir / "metrics.jsonl"

    def save_state(self) -> None:
        arrays = {}
        for (name, p), m, v in zip(self.model.named_parameters(), self.opt.m, self.opt.v):
            arrays[f"param/{name}"] = p.data
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
        meta = {"step": self.step, "adam_t": self.opt.t,
                "rng": {"data": _rng_state(self.data_rng), "bt": _rng_state(self.bt_rng),
                        "drop": _rng_state(self.drop_rng)},
                "best": [self._portable(r) for r in self.best], "n_metrics": len(self.metrics)}
        save_arrays(self.state_path, arrays, meta)

    def _portable(self, rec: CheckpointRecord) -> dict:
        # paths relative to the run directory, so a moved run still resumes
        d = asdict(rec)
        if rec.path:
            d["path"] = Path(rec.path).relative_to(self.out_dir).as_posix()
        return d

    def load_state(self) -> None:
        arrays, meta = load_arrays(self.state_path)
        names = [n for n, _ in self.model.named_parameters()]
        self.model.load_state_dict({n: arrays[f"param/{n}"] for n in names})
        self.opt.m = [arrays[f"adam_m/{n}"].copy() for n in names]
        self.opt.v = [arrays[f"adam_v/{n}"].copy() for n in names]
        self.opt.t = meta["adam_t"]
        self.step = meta["step"]
        _set_rng_state(self.data_rng, meta["rng"]["data"])
        _set_rng_state(self.bt_rng, meta["rng"]["bt"])
        _set_rng_state(self.drop_rng, meta["rng"]["drop"])
        self.best = [CheckpointRecord(r["step"], r["score"], r["path"] and str(self.out_dir / r["path"]))
                     for r in meta["best"]]
        lines = self.log_path.read_text(encoding="utf-8").splitlines()[: meta["n_metrics"]]
        self.metrics = [json.loads(line) for line in lines]
        with open(self.log_path, "w", encoding="utf-8") as f:
            for line in lines:
                f.write(line + "\n")

    def _log(self, record: dict) -> None:
        self.metrics.append(record)
        if self.out_dir is not None:
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    # -- training -------------------------------------------------------------
    def validate_bleu(self) -> float:
        from .evaluation import evaluate_directions

        dirs = {d: s[: self.cfg.valid_max_sentences] for d, s in self.corpus.valid.items()}
        if not dirs:
            return 0.0
        scores = evaluate_directions(self.model, dirs, self.eval_opts)
        return float(np.mean(list(scores.values())))

    def _checkpoint(self) -> None:
        bleu = self.validate_bleu()
        rec = CheckpointRecord(self.step, bleu)
        if self.out_dir is not None:
            rec.path = str(self.out_dir / "checkpoints" / f"ckpt_{self.step:07d}.bin")
            save_model(rec.path, self.model, {"step": self.step, "valid_bleu": bleu})
        else:
            self._mem_ckpts[self.step] = {k: v.copy() for k, v in self.model.state_dict().items()}
        self.best.append(rec)
        self.best.sort(key=lambda r: (-r.score, -r.step))
        for dropped in self.best[self.cfg.keep_best:]:
            if dropped.path and os.path.exists(dropped.path):
                os.remove(dropped.path)
            self._mem_ckpts.pop(dropped.step, None)
        self.best = self.best[: self.cfg.keep_best]
        self._log({"step": self.step, "valid_bleu": bleu})
        if self.out_dir is not None:
            self.save_state()

    def train_step(self) -> dict:
        cfg, model = self.cfg, self.model
        self.step += 1
        model.train()
        batch = sample_batch(self.data_rng, self.corpus.train, cfg.token_budget, cfg.direction_exponent)
        loss_real, skipped, ntok = batch_loss(model, batch, self.drop_rng)
        record = {"step": self.step, "lr": lr_at(self.step, cfg), "loss_real": float(loss_real.data),
                  "nll_per_token": float(loss_real.data) * len(batch) / max(ntok, 1),
                  "skipped": skipped, "batch_size": len(batch)}
        loss = loss_real
        if self.policy.active and self.step > self.bt_start:
            synthetic, stats = augment_batch(self.bt_rng, batch, model, self.policy, self.corpus.graph,
                                             self.corpus.languages)
            loss_bt, skipped_bt, _ = batch_loss(model, synthetic, self.drop_rng)
            loss = combined_loss(loss_real, loss_bt, self.policy.lam)
            record["loss_bt"] = float(loss_bt.data)
            record["skipped"] += skipped_bt
            record.update(stats.as_dict())
        elif self.policy.active:
            record.update(BtStats().as_dict())
        if not np.isfinite(loss.data):
            dirs = sorted({(s.l_src, s.l_tgt) for s in batch})
            raise TrainingError(f"non-finite loss at step {self.step}; directions {dirs}; "
                                f"batch of {len(batch)} samples, first source {batch[0].x}")
        model.zero_grad()
        tn.backward(loss)
        if cfg.clip_norm > 0:
            record["grad_norm"] = clip_grad_norm(self.opt.params, cfg.clip_norm)
        self.opt.step(record["lr"])
        return record

    def run(self, resume: bool = False, stop_after: int | None = None) -> TrainResult:
        """Train to ``total_updates`` (or stop early after ``stop_after`` updates, for testing resume)."""
        if resume:
            if self.out_dir is None or not self.state_path.exists():
                raise TrainingError("nothing to resume from")
            self.load_state()
        elif self.out_dir is not None and self.log_path.exists():
            self.log_path.unlink()
        done = 0
        while self.step < self.cfg.total_updates:
            record = self.train_step()
            self._log(record)
            if self.step % self.cfg.checkpoint_interval == 0 or self.step == self.cfg.total_updates:
                self._checkpoint()
            done += 1
            if stop_after is not None and done >= stop_after:
                break
        return self.result()

    def result(self) -> TrainResult:
        averaged = None
        if self.best:
            if self.out_dir is not None:
                states = [load_arrays(r.path)[0] for r in self.best]
            else:
                states = [self._mem_ckpts[r.step] for r in self.best]
            averaged = average_states(states)
        return TrainResult(list(self.best), list(self.metrics), averaged, self.step)


def train(model: Module, corpus: Corpus, policy: BtPolicy | None, cfg: TrainConfig,
          out_dir: str | os.PathLike | None = None, resume: bool = False) -> TrainResult:
    """Train ``model`` in place; see :class:`Trainer`."""
    return Trainer(model, corpus, policy, cfg, out_dir).run(resume=resume)
