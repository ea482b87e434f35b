"""Run configuration: flat dotted-key TOML, validated with key paths in errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | csv | bank
    csv: str = ""
    schema: str = ""
    rows: int = 4000
    features: int = 20
    class_sep: float = 1.0
    prevalence: float = 0.5
    test_fraction: float = 0.2


@dataclass
class PartitionConfig:
    active: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    clients: list = field(default_factory=list)
    random: int = 0  # >0: random single-client groups over the non-active features
    shard: str = "round_robin"


@dataclass
class ModelConfig:
    group_width: int = 16
    widths: list = field(default_factory=list)  # per-group override of group_width
    active_hidden: list = field(default_factory=list)
    group_hidden: list = field(default_factory=list)
    top_hidden: list = field(default_factory=list)


@dataclass
class QCodeConfig:
    t: float = 4.0
    r: int = 1 << 27
    t_update: float = 4.0


@dataclass
class DropoutConfig:
    p_round: float = 0.0
    f_clients: float = 0.1


@dataclass
class OutputConfig:
    dir: str = "runs/latest"


@dataclass
class RunConfig:
    seed: int = 0
    rounds: int = 50
    batch_size: int = 256
    lr: float = 0.01
    rotate_every: int = 5
    eval_every: int = 10
    mode: str = "pad"  # pad | discard | both
    secure: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    qcode: QCodeConfig = field(default_factory=QCodeConfig)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def fingerprint(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "RunConfig":
        errs = []

        def need(ok, path, msg):
            if not ok:
                errs.append(f"{path}: {msg}")

        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.batch_size >= 2, "batch_size", "must be >= 2")
        need(self.lr > 0, "lr", "must be positive")
        need(self.rotate_every >= 1, "rotate_every", "must be >= 1")
        need(self.eval_every >= 0, "eval_every", "must be >= 0")
        need(self.mode in ("pad", "discard", "both"), "mode", "must be pad, discard or both")
        need(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
        d = self.data
        need(d.source in ("synthetic", "csv", "bank"), "data.source", "must be synthetic, csv or bank")
        if d.source == "csv":
            need(bool(d.csv), "data.csv", "required when data.source = csv")
            need(bool(d.schema), "data.schema", "required when data.source = csv")
        need(d.rows >= 2, "data.rows", "must be >= 2")
        need(d.features >= 2, "data.features", "must be >= 2")
        need(d.class_sep >= 0, "data.class_sep", "must be >= 0")
        need(0 < d.prevalence < 1, "data.prevalence", "must lie in (0, 1)")
        need(0 < d.test_fraction < 1, "data.test_fraction", "must lie in (0, 1)")
        p = self.partition
        need(p.random >= 0, "partition.random", "must be >= 0")
        need(p.shard in ("round_robin", "random"), "partition.shard", "must be round_robin or random")
        if p.groups:
            need(len(p.clients) in (0, len(p.groups)), "partition.clients", "one count per group")
            need(all(isinstance(k, int) and 1 <= k <= 30 for k in p.clients), "partition.clients",
                 "each group needs 1..30 clients")
        m = self.model
        need(m.group_width >= 1, "model.group_width", "must be >= 1")
        need(all(isinstance(w, int) and w >= 1 for w in m.widths), "model.widths", "positive integers")
        for key in ("active_hidden", "group_hidden", "top_hidden"):
            need(all(isinstance(w, int) and w >= 1 for w in getattr(m, key)), f"model.{key}", "positive integers")
        q = self.qcode
        need(q.t > 0, "qcode.t", "must be positive")
        need(q.t_update > 0, "qcode.t_update", "must be positive")
        need(q.r >= 2 and q.r & (q.r - 1) == 0, "qcode.r", "must be a power of two")
        need(q.r <= 1 << 27, "qcode.r", "must be <= 2**27 to leave summation headroom")
        dr = self.dropout
        need(0 <= dr.p_round <= 1, "dropout.p_round", "must lie in [0, 1]")
        need(0 < dr.f_clients <= 1, "dropout.f_clients", "must lie in (0, 1]")
        if errs:
            raise ConfigError(errs)
        return self


def _coerce(value, default, path, errs):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errs.append(f"{path}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append(f"{path}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append(f"{path}: expected a number")
            return value
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errs.append(f"{path}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            errs.append(f"{path}: expected a list")
        return value
    return value


def _fill(obj, mapping: dict, prefix: str, errs: list):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in mapping.items():
        path = f"{prefix}{key}"
        if key not in fields:
            errs.append(f"{path}: unknown key")
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                errs.append(f"{path}: expected a section")
                continue
            _fill(current, value, f"{path}.", errs)
        else:
            setattr(obj, key, _coerce(value, current, path, errs))


def from_mapping(mapping: dict) -> RunConfig:
    cfg = RunConfig()
    errs: list[str] = []
    _fill(cfg, mapping, "", errs)
    if errs:
        raise ConfigError(errs)
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config: file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {path}: {exc}") from exc
    return from_mapping(raw)
