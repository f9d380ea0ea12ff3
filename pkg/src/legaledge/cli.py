"""Command line: ``run``, ``verify-ledger``, ``replay``, ``export-model``.

Exit codes: 0 success, 1 domain failure (tampered ledger, replay divergence,
runtime error), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import QUANTIZE_ALIASES, ConfigError, ExperimentConfig, load_config, parse_config
from .dfa import LEGALEDGE
from .ledger import LedgerFormatError, latency_stats, load_blocks, verify_chain
from .nn import ModelParams
from .quant import export_quantized, quantize

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("legaledge")


def save_model(params: ModelParams, path: str | Path) -> None:
    arrays = {}
    for i, (w, b) in enumerate(params.layers):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> ModelParams:
    with np.load(path) as z:
        n = len([k for k in z.files if k.startswith("w")])
        return ModelParams([(z[f"w{i}"].astype(np.float64), z[f"b{i}"].astype(np.float64)) for i in range(n)])


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.strict_seed is not None:
        updates["seed"] = args.strict_seed
    elif cfg.seed is None:
        updates["seed"] = int(time.time_ns() % 2**31)
    if args.quantize is not None:
        updates["quantize_uploads"] = QUANTIZE_ALIASES[args.quantize]
    if args.qat:
        updates["qat"] = True
    if args.output:
        updates["output_dir"] = args.output
    elif os.environ.get("LEGALEDGE_OUTPUT"):
        updates["output_dir"] = os.environ["LEGALEDGE_OUTPUT"]
    if updates:
        cfg = parse_config({**cfg.model_dump(mode="json"), **updates})
    return cfg


def cmd_run(args) -> int:
    from .federated import run_experiment
    from .metrics import export

    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"seed: {cfg.seed}")
    out = Path(cfg.output_dir)
    try:
        res = run_experiment(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        lat = latency_stats(res.ledger) if res.ledger.tx_count else None
        extra = {
            "seed": res.seed,
            "model_sha256": res.model_hash,
            "ledger_head": res.ledger_hash,
            "ledger_blocks": len(res.ledger),
            "latency": None if lat is None else {"mean_s": lat.mean, "stddev_s": lat.stddev, "p99_s": lat.p99},
        }
        export(res.metrics, out, charts=cfg.charts, extra=extra)
        res.ledger.dump_jsonl(out / "ledger.jsonl")
        save_model(res.params, out / "model.npz")
        if cfg.quantize_uploads != "off" or cfg.qat:
            (out / "model.leq1").write_bytes(export_quantized(quantize(res.params)))
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("run failed")
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if res.metrics:
        last = res.metrics[-1]
        print(f"rounds: {len(res.metrics)}  efficiency: {last.efficiency:.3f}  "
              f"td_error: {last.td_error:.4f}  integrity: {last.integrity:.3f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_verify_ledger(args) -> int:
    try:
        blocks = load_blocks(args.path)
    except (LedgerFormatError, OSError) as exc:
        print(f"cannot read ledger: {exc}", file=sys.stderr)
        return EXIT_USAGE
    check = verify_chain(blocks)
    if check.ok:
        print(f"ok: {len(blocks)} blocks")
        return EXIT_OK
    print(f"tampered: first bad height {check.bad_height}")
    return EXIT_FAIL


def replay_trace(blocks, contract_id: str) -> tuple[list[str], bool]:
    """Rebuild a contract's lifecycle from its transactions.

    Returns the printable trace and whether it is consistent with both the
    contract automaton and the state recorded in the last transaction.
    """
    txs = [tx for b in blocks for tx in b.tx_list if tx.contract_id == contract_id]
    if not txs:
        raise KeyError(contract_id)
    lines = []
    state = LEGALEDGE.initial
    ok = True
    for tx in txs:
        data = tx.data
        for ev in data.get("events", []):
            expected = LEGALEDGE.transitions.get((ev["from"], ev["event"]))
            if ev.get("error"):
                lines.append(f"tx {tx.tx_id} {tx.op_name}: {ev['event']} from {ev['from']} -> {ev['error']}")
                if expected is not None or ev["from"] != state:
                    lines.append("  divergence: recorded rejection but the automaton accepts it here")
                    ok = False
                continue
            lines.append(f"tx {tx.tx_id} {tx.op_name}: {ev['event']} {ev['from']} -> {ev['to']}")
            if ev["from"] != state or expected != ev["to"]:
                lines.append(f"  divergence: automaton is in {state}, expected {expected}")
                ok = False
            state = ev["to"]
    recorded = txs[-1].data.get("state")
    lines.append(f"final: {state} (recorded {recorded})")
    if recorded != state:
        ok = False
    return lines, ok


def cmd_replay(args) -> int:
    try:
        blocks = load_blocks(args.ledger)
    except (LedgerFormatError, OSError) as exc:
        print(f"cannot read ledger: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        lines, ok = replay_trace(blocks, args.contract_id)
    except KeyError:
        print(f"unknown contract id {args.contract_id!r}", file=sys.stderr)
        return EXIT_USAGE
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_export_model(args) -> int:
    try:
        params = load_model(args.model)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot read model: {exc}", file=sys.stderr)
        return EXIT_USAGE
    mode = QUANTIZE_ALIASES[args.mode]
    rng = np.random.default_rng(args.seed) if mode == "stochastic" else None
    data = export_quantized(quantize(params, mode, rng))
    Path(args.output).write_bytes(data)
    print(f"wrote {len(data)} bytes to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="legaledge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a federated experiment")
    r.add_argument("--config", metavar="PATH")
    r.add_argument("--output", metavar="DIR")
    r.add_argument("--strict-seed", type=int, metavar="N")
    r.add_argument("--quantize", choices=["off", "det", "stoch"])
    r.add_argument("--qat", action="store_true")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify-ledger", help="check a ledger.jsonl hash chain")
    v.add_argument("path")
    v.set_defaults(func=cmd_verify_ledger)

    rp = sub.add_parser("replay", help="print a contract's state trace from a ledger")
    rp.add_argument("ledger")
    rp.add_argument("contract_id")
    rp.set_defaults(func=cmd_replay)

    e = sub.add_parser("export-model", help="write a float model (.npz) as LEQ1 int8")
    e.add_argument("model")
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--mode", choices=["det", "stoch"], default="det")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_export_model)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
