"""Tabular datasets, preprocessing and vertical partitioning."""

from __future__ import annotations

import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataError(ValueError):
    pass


@dataclass
class Schema:
    columns: dict[str, str]
    label: str
    positive: str | None = None
    delimiter: str = ","

    @classmethod
    def from_file(cls, path) -> "Schema":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        try:
            columns = dict(raw["columns"])
            label = raw["label"]
        except KeyError as exc:
            raise DataError(f"schema {path}: missing key {exc.args[0]!r}") from exc
        for name, kind in columns.items():
            if kind not in (NUMERIC, CATEGORICAL):
                raise DataError(f"schema {path}: columns.{name} has unknown kind {kind!r}")
        return cls(columns, label, raw.get("positive"), raw.get("delimiter", ","))


@dataclass
class Table:
    """Preprocessed table; each original feature maps to an encoded block of columns."""

    blocks: dict[str, np.ndarray]
    kinds: dict[str, str]
    labels: np.ndarray
    row_ids: np.ndarray
    train: np.ndarray  # boolean mask
    task: str = "binary"
    n_classes: int = 2
    info: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_names(self) -> list[str]:
        return list(self.blocks)

    def width(self, names) -> int:
        return sum(self.blocks[n].shape[1] for n in names)

    def matrix(self, names) -> np.ndarray:
        if not names:
            return np.zeros((self.n_rows, 0))
        return np.hstack([self.blocks[n] for n in names])

    def train_ids(self) -> np.ndarray:
        return np.flatnonzero(self.train)

    def test_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.train)


def split_mask(n_rows: int, test_fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 < test_fraction < 1:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = max(1, int(round(n_rows * test_fraction)))
    mask = np.ones(n_rows, dtype=bool)
    mask[rng.permutation(n_rows)[:n_test]] = False
    return mask


def _standardize(values: np.ndarray, train: np.ndarray) -> np.ndarray:
    mu = values[train].mean()
    sd = values[train].std()
    return ((values - mu) / (sd if sd > 0 else 1.0)).reshape(-1, 1)


def _one_hot(values: np.ndarray, train: np.ndarray) -> np.ndarray:
    # levels come from the train split; unseen test levels encode as all zeros
    levels = sorted(set(values[train].tolist()))
    index = {lv: i for i, lv in enumerate(levels)}
    out = np.zeros((values.shape[0], len(levels)))
    for row, v in enumerate(values):
        j = index.get(v)
        if j is not None:
            out[row, j] = 1.0
    return out


def preprocess(frame: pd.DataFrame, schema: Schema, train: np.ndarray) -> tuple[dict, dict]:
    blocks, kinds = {}, {}
    for name, kind in schema.columns.items():
        if name == schema.label:
            continue
        col = frame[name]
        if kind == NUMERIC:
            values = pd.to_numeric(col, errors="coerce").to_numpy(dtype=np.float64)
            bad = np.flatnonzero(~np.isfinite(values))
            if bad.size:
                row = int(bad[0])
                raise DataError(f"unparseable numeric cell at row {row + 2}, column {name!r}: {col.iloc[row]!r}")
            blocks[name] = _standardize(values, train)
        else:
            blocks[name] = _one_hot(col.astype(str).to_numpy(), train)
        kinds[name] = kind
    return blocks, kinds


def load_csv(path, schema: Schema, test_fraction: float = 0.2, rng: np.random.Generator | None = None) -> Table:
    """Read a headered CSV, drop rows with missing cells, encode and standardize.

    Standardization statistics and one-hot vocabularies come from the train
    split only.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=True, skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    needed = list(schema.columns) + ([schema.label] if schema.label not in schema.columns else [])
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    frame = frame[needed].dropna().reset_index(drop=True)
    if frame.empty:
        raise DataError(f"{path}: no complete rows")

    raw_labels = frame[schema.label].astype(str).str.strip()
    if schema.positive is not None:
        labels = (raw_labels == schema.positive).to_numpy(dtype=np.int64)
        task, n_classes = "binary", 2
    else:
        levels = sorted(raw_labels.unique())
        labels = raw_labels.map({lv: i for i, lv in enumerate(levels)}).to_numpy(dtype=np.int64)
        n_classes = len(levels)
        task = "binary" if n_classes == 2 else "multiclass"

    train = split_mask(len(frame), test_fraction, rng)
    blocks, kinds = preprocess(frame, schema, train)
    table = Table(blocks, kinds, labels, np.arange(len(frame)), train, task, n_classes)
    table.info = {"source": str(path), "widths": {n: b.shape[1] for n, b in blocks.items()}}
    log.info("loaded %s: %d rows, encoded widths %s", path, table.n_rows, table.info["widths"])
    return table


def synthesize(n_rows: int, n_features: int, class_sep: float, rng: np.random.Generator,
               test_fraction: float = 0.2, prevalence: float = 0.5) -> Table:
    """Two Gaussian classes with identity covariance.

    Class means sit at ``-class_sep/2`` and ``+class_sep/2`` on every
    coordinate, so the Mahalanobis gap is ``class_sep * sqrt(n_features)``.
    """
    if n_rows < 2 or n_features < 2:
        raise DataError("synthetic tables need at least 2 rows and 2 features")
    labels = (rng.random(n_rows) < prevalence).astype(np.int64)
    x = rng.standard_normal((n_rows, n_features)) + (labels[:, None] - 0.5) * class_sep
    train = split_mask(n_rows, test_fraction, rng)
    # standardized with train statistics like any loaded table
    blocks = {f"f{j}": _standardize(x[:, j], train) for j in range(n_features)}
    table = Table(blocks, {n: NUMERIC for n in blocks}, labels, np.arange(n_rows), train)
    table.info = {"source": "synthetic", "class_sep": class_sep, "n_features": n_features,
                  "bayes_auc": bayes_auc(class_sep, n_features)}
    return table


def bayes_accuracy(class_sep: float, n_features: int) -> float:
    """Accuracy of the optimal classifier at equal priors: Phi(gap / 2)."""
    return float(norm.cdf(class_sep * math.sqrt(n_features) / 2.0))


def bayes_auc(class_sep: float, n_features: int) -> float:
    """AUC of the optimal linear score: Phi(gap / sqrt(2))."""
    return float(norm.cdf(class_sep * math.sqrt(n_features) / math.sqrt(2.0)))


# partitioning

@dataclass
class PartitionSpec:
    active: list[str]
    groups: list[list[str]]
    clients: list[int]
    shard: str = "round_robin"

    def validate(self, table: Table | None = None) -> None:
        if len(self.groups) != len(self.clients):
            raise DataError("partition: one client count per group is required")
        if not self.groups:
            raise DataError("partition: at least one passive group is required")
        seen = set(self.active)
        if len(seen) != len(self.active):
            raise DataError("partition: duplicate feature in the active party")
        for i, feats in enumerate(self.groups):
            if not feats:
                raise DataError(f"partition: group {i + 1} has no features")
            overlap = seen.intersection(feats)
            if overlap or len(set(feats)) != len(feats):
                raise DataError(f"partition: overlapping features {sorted(overlap) or feats}")
            seen.update(feats)
        for i, k in enumerate(self.clients):
            if k < 1:
                raise DataError(f"partition: group {i + 1} needs at least one client")
        if self.shard not in ("round_robin", "random"):
            raise DataError(f"partition: unknown shard rule {self.shard!r}")
        if table is not None:
            unknown = seen - set(table.feature_names)
            if unknown:
                raise DataError(f"partition: unknown features {sorted(unknown)}")
            uncovered = set(table.feature_names) - seen
            if uncovered:
                raise DataError(f"partition: features not assigned {sorted(uncovered)}")


@dataclass
class GroupView:
    group_id: int
    features: list[str]
    x: np.ndarray
    shards: list[np.ndarray]  # sample ids owned by each client of the group


@dataclass
class PartitionView:
    active_features: list[str]
    x_active: np.ndarray
    groups: list[GroupView]
    table: Table

    def manifest(self) -> str:
        lines = [f"active: {','.join(self.active_features)}"]
        for g in self.groups:
            lines.append(f"group {g.group_id}: {','.join(g.features)} ({g.x.shape[1]} input columns)")
            for k, shard in enumerate(g.shards):
                lines.append(f"  client {k}: {shard.size} rows: {','.join(map(str, shard.tolist()))}")
        return "\n".join(lines) + "\n"


def shard_rows(n_rows: int, k: int, rule: str, rng: np.random.Generator) -> list[np.ndarray]:
    ids = np.arange(n_rows)
    if rule == "random":
        ids = rng.permutation(n_rows)
        return [np.sort(ids[j::k]) for j in range(k)]
    return [ids[j::k] for j in range(k)]


def partition(table: Table, spec: PartitionSpec, rng: np.random.Generator) -> PartitionView:
    spec.validate(table)
    groups = []
    for i, (feats, k) in enumerate(zip(spec.groups, spec.clients), start=1):
        groups.append(GroupView(i, list(feats), table.matrix(feats), shard_rows(table.n_rows, k, spec.shard, rng)))
    return PartitionView(list(spec.active), table.matrix(spec.active), groups, table)


def random_feature_partition(table: Table, n_parts: int, rng: np.random.Generator, active=()) -> PartitionSpec:
    """Shuffle the non-active features into ``n_parts`` single-client groups."""
    passive = [n for n in table.feature_names if n not in set(active)]
    if n_parts < 1 or n_parts > len(passive):
        raise DataError(f"cannot split {len(passive)} features into {n_parts} parts")
    order = rng.permutation(len(passive))
    parts = np.array_split(np.array(passive, dtype=object)[order], n_parts)
    return PartitionSpec(list(active), [list(p) for p in parts], [1] * n_parts)


# Bank Marketing layout: day one-hot (31 levels) gives the 57/3/20 input widths

BANK_COLUMNS = {
    "age": NUMERIC, "job": CATEGORICAL, "marital": CATEGORICAL, "education": CATEGORICAL,
    "default": CATEGORICAL, "balance": NUMERIC, "housing": CATEGORICAL, "loan": CATEGORICAL,
    "contact": CATEGORICAL, "day": CATEGORICAL, "month": CATEGORICAL, "campaign": NUMERIC,
    "pdays": NUMERIC, "previous": NUMERIC, "poutcome": CATEGORICAL,
}
BANK_ACTIVE = ["housing", "loan", "contact", "day", "month", "campaign", "pdays", "previous", "poutcome"]
BANK_GROUPS = [["default", "balance"], ["age", "job", "marital", "education"]]


def bank_schema(delimiter: str = ";") -> Schema:
    return Schema(dict(BANK_COLUMNS), label="y", positive="yes", delimiter=delimiter)


def bank_partition() -> PartitionSpec:
    return PartitionSpec(list(BANK_ACTIVE), [list(g) for g in BANK_GROUPS], [2, 2])


def find_bank_csv(candidates=None) -> Path | None:
    paths = list(candidates or [])
    env = os.environ.get("VFEDSEC_BANK_CSV")
    if env:
        paths.insert(0, env)
    paths += ["data/bank-full.csv", "data/bank.csv"]
    for p in paths:
        if Path(p).is_file():
            return Path(p)
    return None
