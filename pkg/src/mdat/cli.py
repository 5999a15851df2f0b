"""Command-line entry point: ``mdat <command> [--config FILE] [--section-key VALUE ...]``.

Commands: gen-corpus, train, translate, evaluate, bench, ablate.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Log verbosity comes from the ``MDAT_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, dump_config, load_config

log = logging.getLogger("mdat")

ABLATION_ROWS = [("pivotbt", "PivotBT"), ("rand-lang", "rand-lang & w/o pivot"),
                 ("src-lang", "src-lang & w/o pivot"), ("off", "w/o BT")]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bit-reproducibility)")

    g = sub.add_parser("gen-corpus", help="write a synthetic multilingual corpus")
    common(g)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="train a lattice model")
    common(t)
    t.add_argument("--dry-run", action="store_true", help="validate configuration and exit")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's trainer state")

    tr = sub.add_parser("translate", help="translate a file, one sentence per line")
    common(tr)
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--src", required=True, help="source language name")
    tr.add_argument("--tgt", required=True, help="target language name")
    tr.add_argument("--decode", choices=["lookahead", "ngram-beam"], help="decoding method")

    e = sub.add_parser("evaluate", help="BLEU and preservation report on a split")
    common(e)
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--decode", choices=["lookahead", "ngram-beam"])
    e.add_argument("--output", help="report path (default: <run_dir>/eval_<decoder>.json)")

    b = sub.add_parser("bench", help="batch-size-1 latency of lattice decoders vs. the AT baseline")
    common(b)
    b.add_argument("--batch-size", type=int, default=None)
    b.add_argument("--output")

    a = sub.add_parser("ablate", help="train the four back-translation variants and tabulate BLEU")
    common(a)
    a.add_argument("--skip-train", action="store_true", help="reuse existing runs; error if one is missing")
    return p


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, value = name.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"option --{name} needs a value")
            value = extra[i + 1]
            i += 1
        out[name] = value
        i += 1
    return out


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


# -- commands -----------------------------------------------------------------
def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    from .data import gen_corpus, save_corpus

    out = Path(cfg.paths.corpus_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    corpus = gen_corpus(cfg.corpus)
    save_corpus(corpus, out)
    names = corpus.vocab.languages
    print(f"hub: {names[corpus.graph.hub]}")
    for split in ("train", "valid", "test"):
        dirs = ", ".join(f"{names[a]}->{names[b]}({len(s)})" for (a, b), s in sorted(corpus.split(split).items()))
        print(f"{split}: {dirs}")
    return 0


def _load_corpus(cfg: RunConfig):
    from .data import load_corpus

    path = Path(cfg.paths.corpus_dir)
    if not (path / "manifest.json").exists():
        raise UsageError(f"no corpus at {path} (run gen-corpus first)")
    return load_corpus(path)


def _train_one(cfg: RunConfig, corpus, run_dir: Path, mode: str, seed: int | None = None,
               resume: bool = False) -> dict:
    from .checkpoint import save_model
    from .decoding import lm_train
    from .model import MDAT
    from .training import Trainer

    model = MDAT(cfg.model_config(len(corpus.vocab), seed))
    tcfg = cfg.train if seed is None else type(cfg.train)(**{**cfg.train.__dict__, "seed": seed})
    trainer = Trainer(model, corpus, cfg.bt_policy(mode), tcfg, run_dir, cfg.decode_options("lookahead"))
    result = trainer.run(resume=resume)
    model.load_state_dict(result.averaged)
    save_model(run_dir / "model.bin", model, {"averaged": [r.step for r in result.checkpoints]})
    lm = lm_train(((list(s.y[:-1]), s.l_tgt) for ss in corpus.train.values() for s in ss),
                  cfg.decode.lm_order, len(corpus.vocab), cfg.decode.lm_k)
    lm.save(run_dir / "lm.txt")
    (run_dir / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    return {"steps": result.final_step, "best": [(r.step, r.score) for r in result.checkpoints]}


def cmd_train(cfg: RunConfig, args) -> int:
    corpus = _load_corpus(cfg)
    if args.dry_run:
        print("configuration ok")
        return 0
    run_dir = Path(cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    info = _train_one(cfg, corpus, run_dir, cfg.bt.mode, resume=args.resume)
    print(f"trained {info['steps']} updates; averaged checkpoints {[s for s, _ in info['best']]}")
    return 0


def _load_run(cfg: RunConfig, run_dir: Path | None = None):
    from .checkpoint import load_model
    from .decoding import NgramLM

    run_dir = run_dir or Path(cfg.paths.run_dir)
    path = run_dir / "model.bin"
    if not path.exists():
        raise UsageError(f"missing checkpoint {path}")
    lm_path = run_dir / "lm.txt"
    lm = NgramLM.load(lm_path) if lm_path.exists() else None
    return load_model(path), lm


def cmd_translate(cfg: RunConfig, args) -> int:
    from .data import Vocabulary
    from .decoding import translate

    vocab = Vocabulary.load(Path(cfg.paths.corpus_dir) / "vocab.txt")
    try:
        vocab.lang_id(args.src)
        tgt = vocab.lang_id(args.tgt)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    method = args.decode or cfg.decode.method
    model, lm = _load_run(cfg)
    if method == "ngram-beam" and lm is None:
        raise UsageError("ngram-beam decoding needs lm.txt in the run directory")
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    sources = [vocab.encode(line) for line in lines]
    outputs = [""] * len(lines)
    keep = [i for i, s in enumerate(sources) if s]
    if keep:
        hyps = translate(model, [sources[i] for i in keep], [tgt] * len(keep), cfg.decode_options(method), lm,
                         reserved=vocab.n_reserved)
        for i, h in zip(keep, hyps):
            outputs[i] = vocab.decode(h)
    with open(args.output, "w", encoding="utf-8", newline="\n") as f:
        for line in outputs:
            f.write(line + "\n")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .evaluation import evaluate

    corpus = _load_corpus(cfg)
    model, lm = _load_run(cfg)
    method = args.decode or cfg.decode.method
    report = evaluate(model, corpus, args.split, cfg.decode_options(method), lm)
    out = Path(args.output) if args.output else Path(cfg.paths.run_dir) / f"eval_{method}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"supervised BLEU {report.supervised_avg}, zero-shot BLEU {report.zero_shot_avg}")
    return 0


def bench_samples(corpus, n: int, length: int):
    """Sentences of exactly ``length`` tokens for every test direction, cycling through directions."""
    import numpy as np

    from .data import EOS, Sample, zipf_probs, _draw_concepts

    spec = corpus.spec
    rng = np.random.default_rng([spec.seed, 7])
    long_spec = type(spec)(**{**spec.__dict__, "min_len": length, "max_len": length})
    probs = zipf_probs(spec.n_concepts, spec.zipf)
    dirs = sorted(corpus.test)
    out = []
    for i in range(n):
        a, b = dirs[i % len(dirs)]
        c = _draw_concepts(rng, long_spec, probs)
        v = corpus.vocab
        out.append(Sample(tuple(v.stoi[t] for t in corpus.oracle.render(c, a)), a,
                          tuple(v.stoi[t] for t in corpus.oracle.render(c, b)) + (EOS,), b))
    return out


def run_bench(model, lm, corpus, sentences: int, length: int, warmup: int, opts) -> dict:
    from dataclasses import asdict

    from .evaluation import bench_latency, latency_runner
    from .model import ATModel

    if model.cfg.max_positions < length + 1:
        raise UsageError(f"max_positions {model.cfg.max_positions} too small for length {length}")
    items = bench_samples(corpus, sentences, length)
    at = ATModel(model.cfg).eval()
    base = bench_latency(latency_runner(at, "at-greedy"), items, warmup)
    out = {"at-greedy": asdict(base)}
    for method in ("lookahead", "ngram-beam"):
        stats = bench_latency(latency_runner(model, method, lm, opts), items, warmup, baseline=base)
        out[method] = asdict(stats)
    return out


def cmd_bench(cfg: RunConfig, args) -> int:
    batch = args.batch_size if args.batch_size is not None else cfg.bench.batch_size
    if batch != 1:
        raise UsageError("latency is measured at batch size 1 only")
    corpus = _load_corpus(cfg)
    if corpus.oracle is None:
        raise UsageError("bench needs a synthetic corpus with a recorded spec")
    model, lm = _load_run(cfg)
    model.eval()
    res = run_bench(model, lm, corpus, cfg.bench.sentences, cfg.bench.length, cfg.bench.warmup,
                    cfg.decode_options())
    out = Path(args.output) if args.output else Path(cfg.paths.run_dir) / "bench.json"
    out.write_text(json.dumps({"latency": res}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for k, v in res.items():
        sp = f"  speedup {v['speedup']:.2f}x" if v.get("speedup") else ""
        print(f"{k:12s} mean {v['mean_ms']:.2f} ms  p50 {v['p50_ms']:.2f}  p95 {v['p95_ms']:.2f}{sp}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    import numpy as np

    from .evaluation import evaluate

    corpus = _load_corpus(cfg)
    seeds = cfg.seeds()
    root = Path(cfg.paths.run_dir) / "ablate"
    rows = []
    for mode, label in ABLATION_ROWS:
        sup, zs = [], []
        for seed in seeds:
            run_dir = root / f"{mode}-seed{seed}"
            if not args.skip_train:
                run_dir.mkdir(parents=True, exist_ok=True)
                _train_one(cfg, corpus, run_dir, mode, seed)
            model, lm = _load_run(cfg, run_dir)
            rep = evaluate(model, corpus, "test", cfg.decode_options(), lm, with_preservation=False)
            sup.append(rep.supervised_avg)
            zs.append(rep.zero_shot_avg)
        rows.append({"variant": label, "mode": mode, "supervised": float(np.mean(sup)),
                     "zero_shot": float(np.mean(zs)), "seeds": seeds})
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    lines = ["variant\tsupervised\tzero_shot"] + [f"{r['variant']}\t{r['supervised']:.2f}\t{r['zero_shot']:.2f}"
                                                  for r in rows]
    (root / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "translate": cmd_translate,
            "evaluate": cmd_evaluate, "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MDAT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, _split_overrides(extra))
        cfg.validate()
    except (ConfigError, UsageError) as e:
        print(f"mdat: config error: {e}", file=sys.stderr)
        return 1
    _limit_threads(args.threads)
    try:
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"mdat: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level runtime boundary
        log.debug("failure", exc_info=True)
        print(f"mdat: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
