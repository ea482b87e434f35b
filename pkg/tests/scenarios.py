"""Config builders shared by the harness and acceptance tests."""

import numpy as np

from vfedsec.config import from_mapping
from vfedsec.ledger import OVERHEAD_TAGS
from vfedsec.simharness import run_training


def synthetic(seed=0, rounds=50, **overrides):
    raw = {"seed": seed, "rounds": rounds, "data": {"rows": 4000, "features": 20, "class_sep": 1.0}}
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return from_mapping(raw)


def one_group(n_clients, batch, width=8, rounds=10, seed=0):
    """All passive features in one group of ``n_clients`` clients."""
    active = [f"f{j}" for j in range(5)]
    rest = [f"f{j}" for j in range(5, 20)]
    return synthetic(seed, rounds, batch_size=batch, eval_every=0,
                     partition={"active": active, "groups": [rest], "clients": [n_clients]},
                     model={"widths": [width]})


def overhead_point(n_clients, batch, width=8, rounds=10):
    """Per-client per-round overhead bytes and mask seconds, and the server's sealed-table relay bytes."""
    cfg = one_group(n_clients, batch, width, rounds)
    report = run_training(cfg)
    led = report.ledger
    clients = [p for p in led.parties() if p.startswith("client")]
    per_client = np.mean([led.bytes_for(c, OVERHEAD_TAGS) for c in clients]) / led.rounds
    mask_seconds = np.mean([led.seconds_for(c, ("mask_compute",)) for c in clients]) / led.rounds
    relay = led.bytes_for("server", ("seal_ids",), "sent") / led.rounds
    return per_client, mask_seconds, relay


def affine_residual(features, y):
    """Max |residual| of a least-squares affine fit, relative to mean(y)."""
    x = np.column_stack([np.ones(len(y)), *features])
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    return float(np.max(np.abs(x @ coef - y)) / np.mean(y)), coef


ACCEPTANCE_LINES: list[str] = []


def record(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
