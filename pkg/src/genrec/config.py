"""Run configuration: plain-text ``key = value`` files with CLI overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0
    threads: int = 1
    # representation / quantizer
    dim: int = 64
    latent: int = 32
    id_length: int = 4
    codebook_size: int = 128
    beta: float = 0.25
    gcn_layers: int = 2
    max_group: int = 256
    token_variant: str = "popularity"
    # optimization
    optimizer: str = "sgd"
    lr: float = 0.001
    l2: float = 1e-5
    batch_size: int = 1000
    item_batch_size: int = 256
    patience: int = 20
    eval_every: int = 1
    joint_epochs: int = 200
    quantizer_refine_epochs: int = 0
    rec_epochs: int = 200
    rec_lr: float = 0.001
    # transformer
    max_len: int = 20
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.0
    pos_encoding: str = "relation"
    # evaluation
    k: int = 10
    beam_width: int = 10
    exclude_train: bool = True
    # synthetic data
    synth_users: int = 200
    synth_items: int = 400
    synth_density: float = 0.05
    synth_dims: str = "32,16,16"
    synth_rank: int = 8
    synth_noise: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dim > 0 and self.latent > 0, "dim and latent must be positive")
        need(self.id_length >= 2, "id_length must be >= 2")
        need(2 <= self.codebook_size <= 4096 and self.codebook_size & (self.codebook_size - 1) == 0,
             "codebook_size must be a power of two in [2, 4096]")
        need(self.beta >= 0, "beta must be >= 0")
        need(self.lr > 0 and self.rec_lr > 0, "learning rates must be positive")
        need(self.l2 >= 0, "l2 must be >= 0")
        need(self.batch_size > 0 and self.item_batch_size > 0, "batch sizes must be positive")
        need(self.layers >= 1 and self.gcn_layers >= 1, "layer counts must be >= 1")
        need(self.heads >= 1 and self.dim % self.heads == 0, "dim must be divisible by heads")
        need(self.max_len >= 1 and self.k >= 1 and self.beam_width >= 1, "max_len, k, beam_width must be >= 1")
        need(self.patience >= 1 and self.eval_every >= 1, "patience and eval_every must be >= 1")
        need(0 <= self.dropout < 1, "dropout must be in [0, 1)")
        need(self.threads >= 1, "threads must be >= 1")
        need(self.pos_encoding in ("relation", "sinusoid", "none"), "pos_encoding must be relation|sinusoid|none")
        need(self.token_variant in ("popularity", "random"), "token_variant must be popularity|random")
        need(self.optimizer in ("sgd", "adam"), "optimizer must be sgd|adam")
        need(1 <= self.max_group <= 65536, "max_group out of range")
        need(self.synth_users > 0 and self.synth_items > 0 and 0 < self.synth_density <= 1, "bad synth sizes")
        try:
            dims = self.dims()
        except ValueError:
            raise ConfigError("synth_dims must be three comma-separated integers") from None
        need(len(dims) == 3 and all(d >= 0 for d in dims) and any(dims), "synth_dims must be three non-negative ints")

    @property
    def levels(self) -> int:
        return self.id_length - 1

    def dims(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.synth_dims.split(","))

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    # serialization

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "Config":
        return cls.from_mapping(parse_pairs(text))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "Config | None" = None) -> "Config":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        current = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            current[key] = _coerce(known[key].type, raw, key)
        return cls(**current)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_text(Path(path).read_text())


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(type_name, raw, key):
    if not isinstance(raw, str):
        return raw
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {t}") from None
    return raw
