import hashlib
import struct
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from builders import block, genesis, header, task
from pole.ledger import (MAX_OMMER_DEPTH, MINT, RESERVOIR, REFERRAL_FRACTION, ZERO_HASH, AccountState, Block,
                         BlockBody, Chain, DataPointer, EncryptedData, InsufficientBalance, InvalidBlock, OmmerRef,
                         Task, Transaction, append_block, apply_block, chain_bytes_valid, decode_chain, hash_block,
                         merkle_root, ommer_reward, pop_most_valuable, read_chain, validate_chain, write_chain)
from pole.codec import Reader, Writer
from pole.fe import encrypt_batch, keygen


def sha(b):
    return hashlib.sha256(b).digest()


def oracle_merkle(leaves):
    """Recursive build over an explicitly padded list of leaf hashes."""
    def build(nodes):
        if len(nodes) == 1:
            return nodes[0]
        if len(nodes) % 2:
            nodes = nodes + [nodes[-1]]
        return build([sha(nodes[i] + nodes[i + 1]) for i in range(0, len(nodes), 2)])
    return build([sha(x) for x in leaves])


# -- merkle

def test_merkle_examples():
    assert merkle_root([b"a"]) == sha(b"a")
    hh = sha(b"x")
    assert merkle_root([b"x", b"x"]) == sha(hh + hh)
    a, b, c = sha(b"a"), sha(b"b"), sha(b"c")
    assert merkle_root([b"a", b"b", b"c"]) == sha(sha(a + b) + sha(c + c))
    with pytest.raises(ValueError):
        merkle_root([])


def test_merkle_against_oracle():
    for n in range(1, 20):
        leaves = [bytes([i]) * (i + 1) for i in range(n)]
        assert merkle_root(leaves) == oracle_merkle(leaves)


# -- header hashing

def test_genesis_header_canonical_bytes_and_pinned_hash():
    def s(b):
        return struct.pack(">I", len(b)) + b
    expected = (s(b"") + s(b"genesis") + s(b"") + s(bytes(32)) + b"\x00" + struct.pack(">dd", 0.0, 0.0)
                + struct.pack(">I", 0) + s(sha(b"E")) + struct.pack(">d", 0.0))
    h = header(0, ZERO_HASH)
    assert h.to_bytes() == expected
    assert hash_block(h).hex() == "bed521f89a472ae533d2d0c0751af06b1175dcfdb16f590bb2196c19c5d43705"


def test_hash_sensitivity():
    h = header(3, sha(b"p"), ts=1.5)
    assert hash_block(h) == hash_block(header(3, sha(b"p"), ts=1.5))
    flipped = struct.unpack(">d", (int.from_bytes(struct.pack(">d", 1.5), "big") ^ 1).to_bytes(8, "big"))[0]
    assert hash_block(replace(h, timestamp=flipped)) != hash_block(h)
    for change in ({"block_id": 4}, {"winner_id": "x"}, {"task_id": "t"}, {"prev_hash": sha(b"q")},
                   {"train_accuracy": 0.1}, {"test_accuracy": 0.1}, {"ommer_hashes": (sha(b"o"),)},
                   {"merkle_root": sha(b"m")}):
        assert hash_block(replace(h, **change)) != hash_block(h)


# -- ommer reward

@pytest.mark.parametrize("rw,hw,ho,n,expected", [(10, 5, 4, 1, 10), (10, 5, 3, 2, 2.5), (6, 7, 4, 3, 2 / 3)])
def test_ommer_reward_examples(rw, hw, ho, n, expected):
    assert ommer_reward(rw, hw, ho, n) == pytest.approx(expected)


def test_ommer_reward_grid_and_monotonicity():
    for rw in (1.0, 2.0, 10.0, 7.5):
        for hw in range(5, 12):
            for d in range(1, 6):
                for n in range(1, 5):
                    direct = Fraction(rw) / (d * n)
                    assert ommer_reward(rw, hw, hw - d, n) == pytest.approx(float(direct), rel=1e-15)
                    if d < 5:
                        assert ommer_reward(rw, hw, hw - d - 1, n) < ommer_reward(rw, hw, hw - d, n)
                    if n < 4:
                        assert ommer_reward(rw, hw, hw - d, n + 1) < ommer_reward(rw, hw, hw - d, n)


def test_ommer_reward_rejects_bad_arguments():
    with pytest.raises(ValueError):
        ommer_reward(2, 4, 4, 1)
    with pytest.raises(ValueError):
        ommer_reward(2, 5, 4, 0)


# -- tasks

def test_task_priority_and_pop():
    a, b, c = task("a", reward=10, time_limit=10), task("b", reward=30, time_limit=10), task("c", reward=3, time_limit=1)
    assert pop_most_valuable([a, b, c]).task_id == "b"
    assert pop_most_valuable([task("z", reward=3, time_limit=1), c]).task_id == "c"
    assert pop_most_valuable([]) is None
    with pytest.raises(ValueError):
        task("bad", reward=0)


def test_task_codec_roundtrip():
    t = task("t", pointers=[DataPointer(0, 1), DataPointer(3, 0)])
    w = Writer()
    t.encode(w)
    assert Task.decode(Reader(w.getvalue())) == t


# -- apply_block

def test_genesis_allocates_and_escrows():
    state = apply_block(AccountState.empty(), genesis(("t1", "t2")))
    assert state.balance("alice") == 90.0
    assert state.reservoir == 10.0
    assert state.pending == {"t1": 5.0, "t2": 5.0}


def test_winner_paid_reward_plus_block_reward():
    g = genesis()
    s0 = apply_block(AccountState.empty(), g)
    b1 = block(1, g.hash, winner="bob", task_id="t1")
    s1 = apply_block(s0, b1, block_reward=2.0)
    assert s1.balance("bob") == 7.0
    assert s1.reservoir == s0.reservoir - 5.0
    assert s1.total_supply == s0.total_supply + 2.0


def test_ommer_and_referral_rewards():
    g = genesis(("t1", "t2"))
    s0 = apply_block(AccountState.empty(), g)
    b1 = block(1, g.hash, BlockBody((task("t2"),)), winner="bob", task_id="t1")
    s1 = apply_block(s0, b1, 2.0)
    ommer = header(1, g.hash, winner="carol", task_id="t1", ts=0.5)
    b2 = block(2, b1.hash, winner="bob", task_id="t2", ommer_refs=[OmmerRef(ommer, 1)])
    s2 = apply_block(s1, b2, 2.0)
    assert s2.balance("carol") == 2.0
    assert s2.balance("bob") == pytest.approx(14.0 + 2.0 * REFERRAL_FRACTION)
    assert s2.total_supply == pytest.approx(s1.total_supply + 2.0 + 2.0 + 2.0 * REFERRAL_FRACTION)


def test_replay_rejected():
    g = genesis()
    s0 = apply_block(AccountState.empty(), g)
    b1 = block(1, g.hash, winner="bob", task_id="t1")
    s1 = apply_block(s0, b1)
    with pytest.raises(InvalidBlock):
        apply_block(s1, b1)


def test_pending_list_conservation_enforced():
    g = genesis(("t1", "t2"))
    s0 = apply_block(AccountState.empty(), g)
    # drops t2 without solving it
    with pytest.raises(InvalidBlock):
        apply_block(s0, block(1, g.hash, winner="bob", task_id="t1"))
    with pytest.raises(InvalidBlock):
        apply_block(s0, block(1, g.hash, BlockBody((task("t2"),)), winner="bob", task_id="nope"))


def test_insufficient_balance_and_mint_only_at_genesis():
    with pytest.raises(InsufficientBalance):
        apply_block(AccountState.empty(), genesis(balance=1.0))
    g = genesis()
    s0 = apply_block(AccountState.empty(), g)
    with pytest.raises(InvalidBlock):
        apply_block(s0, block(1, g.hash, BlockBody((), (), (Transaction(MINT, "bob", 1.0),)), "bob", "t1"))
    with pytest.raises(InsufficientBalance):
        apply_block(s0, block(1, g.hash, BlockBody((), (), (Transaction("bob", "alice", 100.0),)), "bob", "t1"))


def test_bad_ommer_references_rejected():
    g = genesis(("t1", "t2"))
    s0 = apply_block(AccountState.empty(), g)
    old = header(0, ZERO_HASH, winner="carol")
    refs = [OmmerRef(old, 1), OmmerRef(old, 1)]
    with pytest.raises(InvalidBlock):
        apply_block(s0, block(1, g.hash, BlockBody((task("t2"),)), "bob", "t1", ommer_refs=refs))
    good = block(1, g.hash, BlockBody((task("t2"),)), "bob", "t1", ommer_refs=[OmmerRef(old, 1)])
    mismatched = Block(replace(good.header, ommer_hashes=()), good.body)
    with pytest.raises(InvalidBlock):
        apply_block(s0, mismatched)
    assert MAX_OMMER_DEPTH == 5


# -- chain

def small_chain(n=4):
    g = genesis(tuple(f"t{i}" for i in range(1, n + 1)))
    blocks = [g]
    pending = list(g.body.pending_tasks)
    for h in range(1, n):
        solved = pending.pop(0)
        body = BlockBody(tuple(pending), (), (Transaction("alice", "bob", 1.0),))
        blocks.append(block(h, blocks[-1].hash, body, winner="bob", task_id=solved.task_id, ts=float(h)))
    return blocks


def test_chain_append_and_validate():
    blocks = small_chain()
    chain = Chain(blocks)
    assert len(chain) == 4 and chain.head_hash == blocks[-1].hash
    assert validate_chain(blocks) == []
    with pytest.raises(InvalidBlock):
        Chain(blocks[:2]).append(blocks[3])
    bad = Block(replace(blocks[1].header, merkle_root=sha(b"x")), blocks[1].body)
    with pytest.raises(InvalidBlock):
        Chain([blocks[0]]).append(bad)
    state = AccountState.empty()
    for b in blocks:
        state = apply_block(state, b)
        assert state.reservoir == pytest.approx(sum(state.pending.values()))


def test_chain_file_roundtrip(tmp_path):
    blocks = small_chain()
    write_chain(tmp_path / "c.bin", blocks[:2])
    for b in blocks[2:]:
        append_block(tmp_path / "c.bin", b)
    back = read_chain(tmp_path / "c.bin")
    assert [b.to_bytes() for b in back] == [b.to_bytes() for b in blocks]


def test_mutating_any_historical_byte_breaks_validation():
    blocks = small_chain(3)
    records = [b.to_bytes() for b in blocks]
    data = b"".join(struct.pack(">I", len(r)) + r for r in records)
    assert chain_bytes_valid(data)
    historical = 4 + len(records[0]) + 4 + len(records[1])
    for pos in range(historical):
        for bit in (0x01, 0x80):
            mutated = bytearray(data)
            mutated[pos] ^= bit
            assert not chain_bytes_valid(bytes(mutated)), (pos, bit)


def test_body_tamper_breaks_descendant_links():
    blocks = small_chain()
    tampered = list(blocks)
    b1 = blocks[1]
    tampered[1] = Block(b1.header, BlockBody(b1.body.pending_tasks, (), (Transaction("alice", "eve", 50.0),)))
    problems = validate_chain(tampered)
    assert any("block 1: merkle" in p for p in problems)
    assert any("block 2: prev_hash" in p for p in problems)


def test_collect_concatenates_pointer_batches(group16):
    keys = keygen(group16, 2, seed=1)
    d1 = EncryptedData("t", np.array([0, 1]), encrypt_batch(keys, group16, np.array([[1, 2], [3, 4]]), 1), group16.q)
    d2 = EncryptedData("t", np.array([2]), encrypt_batch(keys, group16, np.array([[5, 6]]), 2), group16.q)
    g = block(0, ZERO_HASH, BlockBody((), (d1, d2)))
    chain = Chain([g])
    cts, labels = chain.collect([DataPointer(0, 1), DataPointer(0, 0)])
    assert labels.tolist() == [2, 0, 1] and len(cts) == 3
    with pytest.raises(KeyError):
        chain.collect([DataPointer(5, 0)])
    # full block with ciphertext data round-trips through the codec
    assert Block.from_bytes(g.to_bytes()).to_bytes() == g.to_bytes()
    assert decode_chain(struct.pack(">I", len(g.to_bytes())) + g.to_bytes())[0].hash == g.hash


def test_corrupted_stored_merkle_root_breaks_child_link():
    blocks = small_chain()
    b1 = blocks[1]
    bad_root = bytes([b1.header.merkle_root[0] ^ 1]) + b1.header.merkle_root[1:]
    tampered = list(blocks)
    tampered[1] = Block(replace(b1.header, merkle_root=bad_root), b1.body)
    problems = validate_chain(tampered)
    assert any("block 1: merkle" in p for p in problems)
    assert any("block 2: prev_hash" in p for p in problems)
