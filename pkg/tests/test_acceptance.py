"""End-to-end acceptance checks, one test per criterion, each with its runtime budget."""
import hashlib
import random
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from pole.consensus import MinerState, TaskData, pole_mine, verify_block
from pole.datasets import load_mnist_subset
from pole.experiments import exp1_block_time, exp2_secure_accuracy, exp3_sml_replacement
from pole.fe import (decrypt_inner_product, derive_functional_key, encrypt, group_gen, inner_product_bound,
                     keygen)
from pole.ledger import AccountState, Block, Chain, DecodeError, apply_block, link_hash, ommer_reward
from pole.nn import ModelSpec, init_model, loss_and_grads
from pole.simnet import SimConfig, build_workload, load_config, release_test_set, run_simulation, serve_functional_keys
from pole.sml import generate_sml

pytestmark = pytest.mark.slow

CONFIG = __import__("pole.cli", fromlist=["CONFIG_DIR"]).CONFIG_DIR


def test_1_ipfe_correctness(criterion):
    t0 = time.perf_counter()
    rng = random.Random(2024)
    groups = [group_gen(32, seed=f"acceptance/{i}") for i in range(10)]
    exact = 0
    for trial in range(1000):
        group = groups[trial % len(groups)]
        dim, xmax = rng.randint(1, 16), rng.randint(1, 255)
        keys = keygen(group, dim, seed=rng.getrandbits(64))
        x = [rng.randint(0, xmax) for _ in range(dim)]
        z = [rng.randint(0, 7) for _ in range(dim)]
        ct = encrypt(keys, group, x, r_seed=rng.getrandbits(64))
        got = decrypt_inner_product(group, ct, z, derive_functional_key(keys, z), inner_product_bound(dim, 3, xmax))
        exact += got == sum(a * b for a, b in zip(x, z))
    elapsed = time.perf_counter() - t0
    ok = exact == 1000 and elapsed < 30
    assert criterion(1, ok, f"IPFE exact in {exact}/1000 trials, {elapsed:.1f} s (limit 30 s)")


def test_2_sml_determinism_and_sensitivity(criterion):
    t0 = time.perf_counter()
    rng = random.Random(7)
    hashes = [rng.randbytes(32) for _ in range(300)]
    same = sum(generate_sml(h, 196, 32, 3).to_bytes() == generate_sml(h, 196, 32, 3).to_bytes() for h in hashes[:100])
    pairs = list(zip(hashes[100:200], hashes[200:300]))
    differ = sum(not np.array_equal(generate_sml(a, 196, 32, 3).z, generate_sml(b, 196, 32, 3).z) for a, b in pairs)
    zero = not generate_sml(bytes(32), 196, 32, 3).z.any()
    elapsed = time.perf_counter() - t0
    ok = same == 100 and differ == 100 and zero and elapsed < 5
    assert criterion(2, ok, f"SML identical {same}/100, distinct {differ}/100, zero hash -> zero weights {zero}, "
                            f"{elapsed:.2f} s (limit 5 s)")


def _central_difference(params, x, y, eps=1e-6):
    out = []
    for w, b in params:
        grads = []
        for arr in (w, b):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                lp, _ = loss_and_grads(params, x, y)
                arr[idx] = old - eps
                lm, _ = loss_and_grads(params, x, y)
                arr[idx] = old
                g[idx] = (lp - lm) / (2 * eps)
            grads.append(g)
        out.append(grads)
    return out


def test_3_gradient_check(criterion):
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(20):
        n_layers = int(rng.integers(1, 4))
        sizes = tuple(int(s) for s in rng.integers(2, 65, size=n_layers + 1))
        params = init_model(ModelSpec(sizes, 0.5, 1.0), trial)
        x, y = rng.normal(size=(6, sizes[0])), rng.integers(0, sizes[-1], size=6)
        _, analytic = loss_and_grads(params, x, y)
        for (aw, ab), (nw, nb) in zip(analytic, _central_difference(params, x, y)):
            for a, n in ((aw, nw), (ab, nb)):
                rel = np.abs(a - n) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(n)))
                worst = max(worst, float(rel.max()))
    ok = worst < 1e-3
    assert criterion(3, ok, f"max relative gradient error {worst:.2e} over 20 MLPs (limit 1e-3)")


def test_4_iris_secure_accuracy(iris, criterion):
    rep = exp2_secure_accuracy(iris, seed=0, epochs=400)
    secure, original = rep.summary["secure"]["test_accuracy"], rep.summary["original"]["test_accuracy"]
    gap = abs(secure - original)
    ok = secure >= 0.95 and gap <= 0.05 and rep.elapsed < 300
    assert criterion(4, ok, f"IRIS secure {secure:.3f} original {original:.3f} gap {100 * gap:.1f} pp, "
                            f"{rep.elapsed:.1f} s (limit 300 s)")


def test_5_mnist_sml_replacement(criterion):
    ds = load_mnist_subset()
    rep = exp3_sml_replacement(ds, seed=0, n_replacements=5)
    original, replaced = rep.attack[0], rep.attack[1:]
    worst = max(r["test_accuracy"] for r in replaced)
    rejected = sum(not r["verified"] for r in replaced)
    ok = (original["test_accuracy"] >= 0.85 and original["verified"] and len(replaced) == 5 and worst <= 0.25
          and rejected == 5 and rep.elapsed < 900)
    assert criterion(5, ok, f"MNIST original {original['test_accuracy']:.3f}, replaced max {worst:.3f}, "
                            f"rejected {rejected}/5, {rep.elapsed:.1f} s (limit 900 s)")


def test_6_block_time_dispersion(criterion):
    cfg = load_config(CONFIG / "exp1.ini", seed=42)
    rep = exp1_block_time(cfg)
    s = rep.summary
    pow_err = abs(s["pow_long"]["mean"] - cfg.pow_expected_block_time) / cfg.pow_expected_block_time
    ok = (cfg.blocks == 30 and cfg.n_miners == 3 and s["pole"]["cov"] < 0.3 and s["pow"]["cov"] > 0.7
          and s["pow_long"]["n"] >= 200 and pow_err <= 0.15 and rep.consistent() and rep.elapsed < 600)
    assert criterion(6, ok, f"CoV PoLe {s['pole']['cov']:.3f} (mean {s['pole']['mean']:.2f} s), "
                            f"CoV PoW {s['pow']['cov']:.3f}, PoW mean over {s['pow_long']['n']} blocks "
                            f"{s['pow_long']['mean']:.2f} s ({100 * pow_err:.1f}% off), {rep.elapsed:.1f} s")


def _link_broken(record: bytes, child: Block) -> bool:
    try:
        b = Block.from_bytes(record)
    except (DecodeError, ValueError, OverflowError, KeyError, IndexError):
        return True
    return link_hash(b) != child.header.prev_hash


def test_7_protocol_safety(iris, criterion):
    t0 = time.perf_counter()
    # (a) every honest candidate verifies on every node, each deriving its own inputs from its own chain copy
    cfg = SimConfig(n_data_nodes=1, required_accuracy=0.8, time_limit=1000.0)
    genesis, states = build_workload(cfg, iris)
    dn, task, phs = states["dn0"], genesis.body.pending_tasks[0], genesis.hash
    keys = lambda t, h: serve_functional_keys(dn, t.task_id, h)
    blocks = [pole_mine(MinerState(f"m{i}"), [task], Chain([genesis]), phs, keys, seed=i).block for i in range(3)]
    test = release_test_set(dn, task.task_id, 1e9).test
    checks = [verify_block(b, phs, TaskData.from_chain(task, Chain([Block.from_bytes(genesis.to_bytes())])), test,
                           keys(task, phs)) for _ in range(4) for b in blocks]
    all_pairs = all(checks)
    # (b) a block stamped at or after the release is rejected, one stamped before is accepted
    late = []
    for b in blocks:
        ts = b.header.timestamp
        for at, expect in ((ts - 0.1, False), (ts, False), (ts + 0.1, True)):
            dn.released.clear()
            rel = release_test_set(dn, task.task_id, at).test
            late.append(verify_block(b, phs, TaskData.from_chain(task, Chain([genesis])), rel, keys(task, phs))
                        == expect)
    late_ok = all(late)
    # (c) 20 heights, 3 miners: every node's head is byte-identical
    sim = run_simulation(SimConfig(seed=7, blocks=20, n_miners=3, n_data_nodes=5, latency=0.1,
                                   required_accuracy=0.8, time_limit=1000.0), iris)
    heads = {n.chain.head.to_bytes() for n in sim.nodes.values()}
    agree = len(heads) == 1 and len(sim.chain) == 21
    # (d) byte mutations of historical blocks break the child's link: fixed-layout prefix exhaustively, then samples
    rng = random.Random(5)
    mutations = broken = 0
    for i, blk in enumerate(sim.chain[:-1]):
        record, child = blk.to_bytes(), sim.chain[i + 1]
        positions = sorted(set(range(min(256, len(record)))) | set(rng.sample(range(len(record)), 64)))
        for pos in positions:
            mutated = bytearray(record)
            mutated[pos] ^= 1 << rng.randrange(8)
            mutations += 1
            broken += _link_broken(bytes(mutated), child)
    elapsed = time.perf_counter() - t0
    ok = all_pairs and late_ok and agree and broken == mutations and elapsed < 300
    assert criterion(7, ok, f"all-pairs {sum(checks)}/{len(checks)}, late-block checks {sum(late)}/{len(late)}, "
                            f"{len(sim.nodes)} nodes agree on head {agree}, mutations detected {broken}/{mutations}, "
                            f"{elapsed:.1f} s (limit 300 s)")


def test_8_reward_accounting(iris, criterion):
    grid = mismatches = 0
    for rw in (1.0, 2.0, 3.5, 10.0):
        for hw in range(6, 15):
            for d in range(1, 6):
                for n in range(1, 5):
                    grid += 1
                    mismatches += ommer_reward(rw, hw, hw - d, n) != float(Fraction(rw) / ((hw - (hw - d)) * n))
    sim = run_simulation(SimConfig(seed=8, blocks=20, n_miners=3, n_data_nodes=5, latency=0.1,
                                   required_accuracy=0.8, time_limit=1000.0), iris)
    state, solvent, heights = AccountState.empty(), 0, 0
    for blk in sim.chain:
        state = apply_block(state, blk, sim.nodes["m0"].cfg.block_reward)
        heights += 1
        solvent += (abs(state.reservoir - sum(state.pending.values())) < 1e-9
                    and min(state.balances.values()) >= 0)
    ommers_paid = sum(len(b.body.ommers) for b in sim.chain)
    ok = mismatches == 0 and solvent == heights
    assert criterion(8, ok, f"ommer reward grid {grid - mismatches}/{grid} exact, reservoir solvent at "
                            f"{solvent}/{heights} heights, {ommers_paid} ommers paid")


def test_9_cli_determinism(tmp_path, criterion):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        subprocess.run([sys.executable, "-m", "pole.cli", "exp1", "--seed", "42", "--out", str(out)], check=True,
                       capture_output=True)
        outs.append(out)
    digests = [[hashlib.sha256((o / f).read_bytes()).hexdigest() for f in ("chain.bin", "events.ndjson")]
               for o in outs]
    ok = digests[0] == digests[1]
    assert criterion(9, ok, f"exp1 --seed 42 twice: chain {digests[0][0][:12]} vs {digests[1][0][:12]}, "
                            f"events {digests[0][1][:12]} vs {digests[1][1][:12]}")
