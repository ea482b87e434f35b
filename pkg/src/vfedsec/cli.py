"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 protocol error.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import neuralnet as nn
from .config import ConfigError, RunConfig, from_mapping, load_config
from .datahub import DataError
from .protocol import ProtocolError
from .qcode import QConfig, QuantizationError, dequantize_sum, quantize_matrix
from .secure_layer import NoiseTag, Phase, SecureLayerError, orient, prf_stream
from .simharness import build_federation, ledger_summary, run_training, summary_table_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SEED_ENV = "VFEDSEC_SEED"

log = logging.getLogger("vfedsec")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_mapping({})
    if args.config is None and not getattr(args, "synthetic", False):
        raise ConfigError("--config: required unless --synthetic is given")
    if getattr(args, "synthetic", False):
        cfg.data.source = "synthetic"
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env_seed!r}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "rounds", None) is not None:
        cfg.rounds = args.rounds
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "out", None) is not None:
        cfg.output.dir = args.out
    return cfg.validate()


def write_report(report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.ndjson").write_text(report.to_ndjson())
    (out / "summary.csv").write_text(report.summary_csv())
    (out / "report.json").write_text(report.to_json())
    (out / "checkpoint.bin").write_bytes(report.checkpoint)
    (out / "manifest.txt").write_text(report.manifest)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    modes = ["pad", "discard"] if cfg.mode == "both" else [cfg.mode]
    out = Path(cfg.output.dir)
    for mode in modes:
        report = run_training(cfg, mode=mode)
        target = out / mode if len(modes) > 1 else out
        write_report(report, target)
        if cfg.secure:
            baseline = run_training(cfg, mode=mode, secure=False)
            (target / "overhead.csv").write_text(summary_table_csv(ledger_summary(report.ledger, baseline.ledger)))
        print(f"{mode}: fingerprint {report.fingerprint} final metric {report.final_metric:.4f} -> {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    fed, _ = build_federation(cfg)
    blob = Path(args.checkpoint).read_bytes()
    try:
        fed.restore(blob)
    except (nn.ShapeError, ValueError) as exc:
        raise ConfigError(f"--checkpoint: incompatible with config widths: {exc}") from exc
    metric = fed.evaluate()
    name = "auc" if fed.task == "binary" else "accuracy"
    print(f"{name} {metric:.6f}")
    return EXIT_OK


# masking benchmark: pure-Python loops on both paths, as in the HE comparison setting

def _matmul_py(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][j] * b[j][c] for j in range(k)) for c in range(m)] for i in range(n)]


def _masked_path_py(a, b, qcfg: QConfig, rng, tag: NoiseTag, secret: bytes):
    y = _matmul_py(a, b)
    q = quantize_matrix(np.asarray(y), qcfg, rng).tolist()
    p = prf_stream(secret, tag)
    n_hi, n_lo = orient(p, 2, 1).tolist(), orient(p, 1, 2).tolist()
    mod = qcfg.field_modulus
    half = qcfg.r // 2
    rows, cols = len(q), len(q[0])
    m1 = [[(q[i][j] + n_hi[i][j]) % mod for j in range(cols)] for i in range(rows)]
    # the peer contributes an exact zero embedding, q(0) = r/2
    m2 = [[(half + n_lo[i][j]) % mod for j in range(cols)] for i in range(rows)]
    s = [[(m1[i][j] + m2[i][j]) % mod for j in range(cols)] for i in range(rows)]
    return dequantize_sum(np.asarray(s, dtype=np.uint32), 2, qcfg)


def bench_mask(shape=(256, 8, 8), trials: int = 10, seed: int = 0) -> dict:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    batch, inner, outer = shape
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (batch, inner)).tolist()
    b = rng.uniform(-1, 1, (inner, outer)).tolist()
    qcfg = QConfig()
    secret = rng.bytes(32)
    plain, masked = [], []
    for i in range(trials):
        start = time.process_time()
        _matmul_py(a, b)
        plain.append(time.process_time() - start)
        tag = NoiseTag(0, i, Phase.FORWARD_EMBEDDING, (batch, outer))
        start = time.process_time()
        _masked_path_py(a, b, qcfg, rng, tag, secret)
        masked.append(time.process_time() - start)

    def stats(xs):
        return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)

    (pm, ps), (mm, ms) = stats(plain), stats(masked)
    return {"shape": list(shape), "trials": trials, "plain_mean": pm, "plain_std": ps,
            "masked_mean": mm, "masked_std": ms, "ratio": mm / pm if pm > 0 else float("inf"),
            "he": "out of scope"}


def cmd_bench_mask(args) -> int:
    try:
        shape = tuple(int(v) for v in args.shape.split(","))
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError("--shape: expected BATCH,IN,OUT positive integers") from exc
    if args.trials < 1:
        raise ConfigError("--trials: must be >= 1")
    res = bench_mask(shape, args.trials)
    print("path,mean_s,std_s")
    print(f"plaintext_matmul,{res['plain_mean']:.6f},{res['plain_std']:.6f}")
    print(f"quantize_mask_unmask,{res['masked_mean']:.6f},{res['masked_std']:.6f}")
    print(f"he,{res['he']},")
    print(f"# masked/plain ratio {res['ratio']:.2f} over {res['trials']} trials, shape {res['shape']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfedsec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training experiment")
    train.add_argument("--config", type=Path)
    train.add_argument("--mode", choices=["pad", "discard", "both"])
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.add_argument("--rounds", type=int)
    train.add_argument("--synthetic", action="store_true", help="use the synthetic dataset")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on the test split")
    ev.add_argument("--config", type=Path)
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--synthetic", action="store_true")
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench-mask", help="time plaintext matmul against the masked path")
    bench.add_argument("--shape", default="256,8,8")
    bench.add_argument("--trials", type=int, default=10)
    bench.set_defaults(func=cmd_bench_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, QuantizationError, FileNotFoundError) as exc:
        for line in getattr(exc, "problems", [str(exc)]):
            print(f"error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, SecureLayerError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
