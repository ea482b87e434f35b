"""Experiment driver: dropout injection, pad/discard rounds, evaluation and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import datahub
from .config import ConfigError, RunConfig
from .ledger import OVERHEAD_TAGS, TAGS, OverheadLedger
from .protocol import Federation, NoSurvivorsError, ProtocolConfig, RoundOutcome, stream
from .qcode import QConfig

log = logging.getLogger(__name__)

_DROPOUT = 4
_DATA = 6


@dataclass
class DropoutModel:
    p_round: float = 0.0
    f_clients: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_round <= 1:
            raise ValueError("p_round must lie in [0, 1]")
        if not 0 < self.f_clients <= 1:
            raise ValueError("f_clients must lie in (0, 1]")


def dropout_draw(model: DropoutModel, rnd: int, passive_clients) -> frozenset:
    """With probability ``p_round`` drop max(1, round_half_up(f * pool)) random clients."""
    pool = sorted(passive_clients)
    if not pool:
        raise ValueError("empty client pool")
    rng = stream(model.seed, _DROPOUT, rnd)
    if rng.random() >= model.p_round:
        return frozenset()
    k = min(len(pool), max(1, math.floor(model.f_clients * len(pool) + 0.5)))
    return frozenset(int(c) for c in rng.choice(pool, size=k, replace=False))


def run_round(fed: Federation, rnd: int, mode: str, dropped) -> RoundOutcome:
    dropped = frozenset(dropped)
    if mode not in ("pad", "discard"):
        raise ValueError(f"unknown mode {mode!r}")
    groups = frozenset(fed.topology.group_of(c).group_id for c in dropped)
    if dropped and mode == "discard":
        return RoundOutcome("discard", groups, math.nan, math.nan, False)
    try:
        return fed.train_round(rnd, dropped)
    except NoSurvivorsError:
        return RoundOutcome("discard", groups, math.nan, math.nan, False)


# setup

def load_table(cfg: RunConfig) -> datahub.Table:
    rng = stream(cfg.seed, _DATA)
    d = cfg.data
    if d.source == "synthetic":
        return datahub.synthesize(d.rows, d.features, d.class_sep, rng, d.test_fraction, d.prevalence)
    if d.source == "bank":
        path = datahub.find_bank_csv([d.csv] if d.csv else None)
        if path is None:
            raise ConfigError("data.csv: Bank CSV not found")
        schema = datahub.bank_schema() if not d.schema else datahub.Schema.from_file(d.schema)
        return datahub.load_csv(path, schema, d.test_fraction, rng)
    return datahub.load_csv(d.csv, datahub.Schema.from_file(d.schema), d.test_fraction, rng)


def partition_spec(cfg: RunConfig, table: datahub.Table) -> datahub.PartitionSpec:
    p = cfg.partition
    rng = stream(cfg.seed, _DATA, 1)
    if cfg.data.source == "bank" and not p.groups and not p.random:
        return datahub.bank_partition()
    active = list(p.active)
    if not active and not p.groups:
        names = table.feature_names
        active = names[: max(1, len(names) // 4)]
    if p.random:
        spec = datahub.random_feature_partition(table, p.random, rng, active)
        spec.shard = p.shard
        return spec
    if p.groups:
        clients = list(p.clients) or [1] * len(p.groups)
        return datahub.PartitionSpec(active, [list(g) for g in p.groups], clients, p.shard)
    rest = [n for n in table.feature_names if n not in set(active)]
    halves = [list(h) for h in np.array_split(np.array(rest, dtype=object), 2)]
    return datahub.PartitionSpec(active, halves, [2, 2], p.shard)


def build_federation(cfg: RunConfig, secure: bool | None = None, ledger: OverheadLedger | None = None,
                     capture: bool = False, table: datahub.Table | None = None):
    table = table if table is not None else load_table(cfg)
    spec = partition_spec(cfg, table)
    view = datahub.partition(table, spec, stream(cfg.seed, _DATA, 2))
    widths = list(cfg.model.widths) or [cfg.model.group_width] * len(view.groups)
    if len(widths) != len(view.groups):
        raise ConfigError(f"model.widths: {len(widths)} widths for {len(view.groups)} groups")
    pcfg = ProtocolConfig(
        qcfg=QConfig(t=cfg.qcode.t, r=cfg.qcode.r, t_update=cfg.qcode.t_update),
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        active_hidden=tuple(cfg.model.active_hidden),
        group_hidden=tuple(cfg.model.group_hidden),
        top_hidden=tuple(cfg.model.top_hidden),
    )
    fed = Federation(view, widths, pcfg, cfg.seed, cfg.secure if secure is None else secure, ledger, capture)
    fed.setup_keys(0)
    return fed, view


# reports

@dataclass
class TrainReport:
    fingerprint: str
    mode: str
    records: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (rounds completed, metric)
    ledger_bytes: dict = field(default_factory=dict)
    ledger: OverheadLedger | None = field(default=None, repr=False, compare=False)
    checkpoint: bytes = field(default=b"", repr=False)
    manifest: str = field(default="", repr=False)

    def metric_at(self, rounds_done: int) -> float:
        for r, m in self.evals:
            if r == rounds_done:
                return m
        raise KeyError(f"no evaluation after {rounds_done} rounds")

    @property
    def final_metric(self) -> float:
        return self.evals[-1][1]

    def to_ndjson(self) -> str:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.records]
        return "\n".join(lines) + ("\n" if lines else "")

    def to_json(self) -> str:
        return json.dumps({
            "fingerprint": self.fingerprint,
            "mode": self.mode,
            "records": self.records,
            "evals": self.evals,
            "ledger_bytes": self.ledger_bytes,
        }, sort_keys=True)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rounds_completed", "metric"])
        for r, m in self.evals:
            w.writerow([r, f"{m:.6f}"])
        return buf.getvalue()


def _clean(x: float):
    return None if isinstance(x, float) and math.isnan(x) else x


def run_training(cfg: RunConfig, mode: str | None = None, secure: bool | None = None,
                 eval_rounds=(), table: datahub.Table | None = None) -> TrainReport:
    """Train for ``cfg.rounds`` rounds, rotating keys every ``cfg.rotate_every`` rounds.

    The test split is scored before the first round, every ``eval_every``
    rounds, after each round listed in ``eval_rounds`` and at the end.
    """
    cfg.validate()
    mode = mode or cfg.mode
    if mode == "both":
        raise ValueError("run_training runs a single mode; fan out in the caller")
    ledger = OverheadLedger()
    fed, view = build_federation(cfg, secure, ledger, table=table)
    dropout = DropoutModel(cfg.dropout.p_round, cfg.dropout.f_clients, cfg.seed)
    clients = fed.topology.passive_clients
    report = TrainReport(cfg.fingerprint(), mode, ledger=ledger, manifest=view.manifest())
    report.evals.append((0, fed.evaluate()))
    wanted = set(eval_rounds)
    for rnd in range(cfg.rounds):
        if rnd and rnd % cfg.rotate_every == 0:
            fed.setup_keys(rnd // cfg.rotate_every)
        dropped = dropout_draw(dropout, rnd, clients)
        out = run_round(fed, rnd, mode, dropped)
        ledger.end_round()
        report.records.append({
            "round": rnd,
            "epoch": fed.epoch,
            "mode": out.mode,
            "served": out.served,
            "dropped_clients": sorted(dropped),
            "dropped_groups": sorted(out.dropped_groups),
            "loss": _clean(out.loss),
            "batch_metric": _clean(out.metric),
        })
        done = rnd + 1
        if (cfg.eval_every and done % cfg.eval_every == 0) or done in wanted or done == cfg.rounds:
            report.evals.append((done, fed.evaluate()))
    report.ledger_bytes = ledger.byte_totals()
    report.checkpoint = fed.checkpoint()
    return report


def ledger_summary(ledger: OverheadLedger, baseline: OverheadLedger) -> list[dict]:
    """Per-party Total/Overhead rows (bytes and seconds, averaged per round).

    Passive clients are averaged into a single ``passive`` row. Overhead is the
    secure run's traffic and CPU time under the secure-layer tags.
    """
    if ledger.rounds != baseline.rounds:
        raise ValueError(f"ledgers cover {ledger.rounds} and {baseline.rounds} rounds")
    rounds = max(ledger.rounds, 1)

    def row(name, parties, led):
        n = max(len(parties), 1)
        return {
            "party": name,
            "total_bytes": sum(led.bytes_for(p, TAGS) for p in parties) / n / rounds,
            "overhead_bytes": sum(led.bytes_for(p, OVERHEAD_TAGS) for p in parties) / n / rounds,
            "total_seconds": sum(led.seconds_for(p, TAGS) for p in parties) / n / rounds,
            "overhead_seconds": sum(led.seconds_for(p, OVERHEAD_TAGS) for p in parties) / n / rounds,
        }

    parties = ledger.parties()
    clients = [p for p in parties if p.startswith("client")]
    rows = [row("active", ["active"], ledger), row("passive", clients, ledger), row("server", ["server"], ledger)]
    base_clients = [p for p in baseline.parties() if p.startswith("client")]
    base = [row("active", ["active"], baseline), row("passive", base_clients, baseline),
            row("server", ["server"], baseline)]
    for r, b in zip(rows, base):
        r["baseline_bytes"] = b["total_bytes"]
        r["baseline_seconds"] = b["total_seconds"]
    return rows


def summary_table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
