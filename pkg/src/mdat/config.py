"""Run configuration: an INI file with sections, overridable by ``--section-key value`` flags.

Sections and their keys mirror the dataclasses below; every key has a default
and unknown sections or keys are rejected. Example::

    [corpus]
    word_orders = identity,reverse,rotate

    [train]
    total_updates = 2000

    [bt]
    mode = pivotbt
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 2
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_width: int = 128
    max_positions: int = 256
    upsample_factor: float = 4.0
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"


@dataclass
class BtSection:
    mode: str = "pivotbt"
    lam: float = 0.5
    warmup_fraction: float = 0.1
    decode: str = "lookahead"


@dataclass
class DecodeSection:
    method: str = "lookahead"
    beam_width: int = 8
    lm_weight: float = 0.1
    len_alpha: float = 0.6
    collapse: bool = True
    lm_order: int = 3
    lm_k: float = 0.1


@dataclass
class PathsSection:
    corpus_dir: str = "corpus"
    run_dir: str = "run"


@dataclass
class BenchSection:
    sentences: int = 20
    length: int = 32
    warmup: int = 3
    batch_size: int = 1


@dataclass
class AblateSection:
    seeds: str = "0"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    bt: BtSection = field(default_factory=BtSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    corpus: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsSection = field(default_factory=PathsSection)
    bench: BenchSection = field(default_factory=BenchSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def set(self, section: str, key: str, raw: str) -> None:
        sections = self.sections()
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        obj = sections[section]
        hints = typing.get_type_hints(type(obj))
        if key not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            setattr(obj, key, _coerce(raw, hints[key]))
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from None

    def flat_keys(self) -> dict[str, tuple[str, str]]:
        """``section-key`` flag name -> (section, key)."""
        out = {}
        for name, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                out[f"{name}-{f.name}".replace("_", "-")] = (name, f.name)
        return out

    def validate(self) -> None:
        from .decoding import DecodeOptions
        from .model import ModelConfig
        from .pivotbt import BtPolicy

        try:
            ModelConfig(vocab_size=10, **dataclasses.asdict(self.model)).validate()
            self.train.validate()
            self.bt_policy().validate()
            self.decode_options().validate()
            DecodeOptions(method=self.bt.decode).validate()
            self.corpus.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.bench.sentences < 1 or self.bench.length < 1:
            raise ConfigError("bench sentences and length must be >= 1")
        self.seeds()

    def seeds(self) -> list[int]:
        try:
            return [int(s) for s in self.ablate.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"[ablate] seeds must be a comma list of integers, got {self.ablate.seeds!r}") from None

    def model_config(self, vocab_size: int, seed: int | None = None):
        from .model import ModelConfig

        kw = dataclasses.asdict(self.model)
        if seed is not None:
            kw["seed"] = seed
        return ModelConfig(vocab_size=vocab_size, **kw)

    def decode_options(self, method: str | None = None):
        from .decoding import DecodeOptions

        d = self.decode
        return DecodeOptions(method or d.method, d.beam_width, d.lm_weight, d.len_alpha, d.collapse)

    def bt_policy(self, mode: str | None = None):
        from .decoding import DecodeOptions
        from .pivotbt import BtPolicy

        return BtPolicy(mode or self.bt.mode, self.bt.lam, self.bt.warmup_fraction,
                        DecodeOptions(method=self.bt.decode, collapse=self.decode.collapse))


def _coerce(raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, inner[0])
    if origin is list:
        return [_coerce(part.strip(), args[0]) for part in raw.split(",") if part.strip()]
    if hint is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw.strip()


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then flag overrides keyed ``section-key``."""
    cfg = RunConfig()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
    flat = cfg.flat_keys()
    for name, raw in (overrides or {}).items():
        if name not in flat:
            raise ConfigError(f"unknown option --{name}")
        cfg.set(*flat[name], raw)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, obj in cfg.sections().items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, list):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {'' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
