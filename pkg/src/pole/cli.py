"""Command-line entry point: experiments, free-form runs and block inspection."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .datasets import load_dataset
from .experiments import DEFAULT_SETTINGS, exp1_block_time, exp2_secure_accuracy, exp3_sml_replacement
from .ledger import Block, read_chain, validate_chain, write_chain
from .simnet import SimResult, load_config, run_simulation, write_events

CONFIG_DIR = Path(__file__).parent / "configs"


def _config(args, default: str):
    path = args.config or CONFIG_DIR / default
    return load_config(path, seed=args.seed, blocks=args.blocks, dataset=getattr(args, "dataset", None))


def _write_sim(out: Path, sim: SimResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_chain(out / "chain.bin", sim.chain)
    write_events(out / "events.ndjson", sim.events)
    rows = [asdict(s) for s in sim.stats]
    with open(out / "heights.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _print_summary(summary: dict) -> None:
    for row, vals in summary.items():
        cells = "  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in vals.items())
        print(f"{row:10s} {cells}")


def cmd_exp1(args) -> int:
    cfg = _config(args, "exp1.ini")
    report = exp1_block_time(cfg)
    out = Path(args.out)
    report.write_csv(out)
    _write_sim(out, report.sim)
    _print_summary(report.summary)
    return 0


def _dataset_args(args):
    ds = load_dataset(args.dataset, args.data, args.seed or 0)
    return ds, DEFAULT_SETTINGS[ds.name]


def cmd_exp2(args) -> int:
    ds, settings = _dataset_args(args)
    report = exp2_secure_accuracy(ds, settings, args.seed or 0, args.epochs)
    report.write_csv(args.out)
    _print_summary(report.summary)
    return 0


def cmd_exp3(args) -> int:
    ds, settings = _dataset_args(args)
    report = exp3_sml_replacement(ds, settings, args.seed or 0, args.replacements, args.epochs)
    report.write_csv(args.out)
    for row in report.attack:
        print(f"{row['sml']:12s} test_accuracy={row['test_accuracy']:.4f} verified={row['verified']}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args, "default.ini")
    sim = run_simulation(cfg)
    _write_sim(Path(args.out), sim)
    for s in sim.stats:
        print(f"height {s.height:4d} winner {s.winner:4s} task {s.task_id:10s} "
              f"t={s.appended_at:10.3f} dt={s.block_time:8.3f} test={s.test_accuracy:.3f}")
    return 0


def describe_block(block: Block) -> dict:
    h, b = block.header, block.body
    model = None
    if h.model is not None:
        m = h.model
        model = {"task": m.spec_id, "layers": [list(w.shape) for w, _ in m.params],
                 "sml": {"k": m.sml.k, "queries": m.sml.n_queries, "dim": m.sml.dim,
                         "source_hash": m.sml.source_hash.hex()},
                 "train_accuracy": m.train_accuracy}
    return {
        "hash": block.hash.hex(), "block_id": h.block_id, "winner_id": h.winner_id, "task_id": h.task_id,
        "prev_hash": h.prev_hash.hex(), "train_accuracy": h.train_accuracy, "test_accuracy": h.test_accuracy,
        "timestamp": h.timestamp, "merkle_root": h.merkle_root.hex(),
        "ommer_hashes": [o.hex() for o in h.ommer_hashes], "model": model,
        "pending_tasks": [{"task_id": t.task_id, "poster": t.poster, "reward": t.reward,
                           "pointers": [[p.height, p.index] for p in t.data_pointers]} for t in b.pending_tasks],
        "new_ciphertext_data": [{"task_id": d.task_id, "rows": len(d.labels)} for d in b.new_ciphertext_data],
        "transactions": [{"from": t.sender, "to": t.recipient, "amount": t.amount} for t in b.transactions],
        "test_data": None if b.test_data is None else {
            "task_id": b.test_data.task_id, "signer": b.test_data.signer, "timestamp": b.test_data.timestamp,
            "reason": b.test_data.reason, "rows": len(b.test_data.labels)},
        "ommers": [{"block_id": o.header.block_id, "winner_id": o.header.winner_id, "count": o.count}
                   for o in b.ommers],
    }


def cmd_inspect(args) -> int:
    blocks = read_chain(args.chain)
    problems = validate_chain(blocks)
    if not -len(blocks) <= args.height < len(blocks):
        print(f"chain has {len(blocks)} blocks", file=sys.stderr)
        return 2
    print(json.dumps(describe_block(blocks[args.height]), indent=2))
    for p in problems:
        print(f"warning: {p}", file=sys.stderr)
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pole", description="Proof-of-learning consensus simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sim: bool):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        if sim:
            p.add_argument("--config", default=None, help="INI file; defaults to the bundled one")
            p.add_argument("--blocks", type=int, default=None)
        else:
            p.add_argument("--dataset", choices=["iris", "mnist-subset"], default="iris")
            p.add_argument("--data", default=None, help="dataset file or directory")
            p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("exp1", help="PoLe vs PoW block-time dispersion")
    common(p, True)
    p.set_defaults(func=cmd_exp1)
    p = sub.add_parser("exp2", help="secure vs plaintext accuracy")
    common(p, False)
    p.set_defaults(func=cmd_exp2)
    p = sub.add_parser("exp3", help="accuracy with replaced SMLs")
    common(p, False)
    p.add_argument("--replacements", type=int, default=5)
    p.set_defaults(func=cmd_exp3)
    p = sub.add_parser("run", help="free-form simulation")
    common(p, True)
    p.add_argument("--dataset", choices=["iris", "mnist-subset"], default=None)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("inspect-block", help="dump one block of a chain file")
    p.add_argument("chain")
    p.add_argument("--height", type=int, default=-1)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
