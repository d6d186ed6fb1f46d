"""Blocks, the chain, account balances and reward accounting."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .codec import DecodeError, Reader, Writer
from .fe import CiphertextBatch, GroupParams
from .nn import ModelSolution, ModelSpec
from .sml import Discretization

RESERVOIR = "reservoir"
MINT = "@mint"
DEFAULT_BLOCK_REWARD = 2.0
# Bonus paid to a winner per ommer it references, as a fraction of the block reward.
REFERRAL_FRACTION = 1 / 32
# Oldest ommer a block may still reference, in heights below the block.
MAX_OMMER_DEPTH = 5
ZERO_HASH = bytes(32)


class InsufficientBalance(ValueError):
    pass


class InvalidBlock(ValueError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class DataPointer:
    height: int
    index: int


@dataclass(frozen=True)
class Task:
    task_id: str
    poster: str
    reward: float
    model_spec: ModelSpec
    disc: Discretization
    group: GroupParams
    dim: int
    sml_k: int
    dataset: str = ""
    posted_at: float = 0.0
    data_pointers: tuple[DataPointer, ...] = ()

    def __post_init__(self) -> None:
        if self.reward <= 0:
            raise ValueError("task reward must be positive")

    @property
    def priority(self) -> float:
        """Average reward per unit of allowed training time."""
        return self.reward / self.model_spec.time_limit if self.model_spec.time_limit > 0 else float("inf")

    @property
    def n_queries(self) -> int:
        return self.model_spec.n_inputs

    def encode(self, w: Writer) -> None:
        w.str(self.task_id).str(self.poster).float(self.reward)
        self.model_spec.encode(w)
        self.disc.encode(w)
        self.group.encode(w)
        w.int(self.dim).int(self.sml_k).str(self.dataset).float(self.posted_at)
        w.count(len(self.data_pointers))
        for ptr in self.data_pointers:
            w.int(ptr.height).int(ptr.index)

    @classmethod
    def decode(cls, r: Reader) -> Task:
        task_id, poster, reward = r.str(), r.str(), r.float()
        spec = ModelSpec.decode(r)
        disc = Discretization.decode(r)
        group = GroupParams.decode(r)
        dim, k, dataset, posted = r.int(), r.int(), r.str(), r.float()
        ptrs = tuple(DataPointer(r.int(), r.int()) for _ in range(r.count()))
        return cls(task_id, poster, reward, spec, disc, group, dim, k, dataset, posted, ptrs)


def pop_most_valuable(tasks: Iterable[Task]) -> Task | None:
    """Highest reward per unit time; ties go to the smaller task id."""
    best = None
    for t in tasks:
        if best is None or (-t.priority, t.task_id) < (-best.priority, best.task_id):
            best = t
    return best


@dataclass(eq=False)
class EncryptedData:
    task_id: str
    labels: np.ndarray
    ciphertexts: CiphertextBatch
    q: int

    def encode(self, w: Writer) -> None:
        w.str(self.task_id).int(self.q).ints(self.labels)
        self.ciphertexts.encode(w)

    @classmethod
    def decode(cls, r: Reader) -> EncryptedData:
        task_id, q = r.str(), r.int()
        labels = np.array(r.ints(), dtype=np.int64)
        return cls(task_id, labels, CiphertextBatch.decode(r, q), q)


@dataclass(frozen=True)
class Transaction:
    sender: str
    recipient: str
    amount: float

    def encode(self, w: Writer) -> None:
        w.str(self.sender).str(self.recipient).float(self.amount)

    @classmethod
    def decode(cls, r: Reader) -> Transaction:
        return cls(r.str(), r.str(), r.float())


@dataclass(eq=False)
class TestData:
    """A released, timestamped test set; the signer field is trusted by the simulator."""

    __test__ = False  # not a pytest class

    task_id: str
    signer: str
    timestamp: float
    labels: np.ndarray
    ciphertexts: CiphertextBatch
    q: int
    reason: str = "count"  # "count" or "timeout"

    def encode(self, w: Writer) -> None:
        w.str(self.task_id).str(self.signer).float(self.timestamp).str(self.reason)
        w.int(self.q).ints(self.labels)
        self.ciphertexts.encode(w)

    @classmethod
    def decode(cls, r: Reader) -> TestData:
        task_id, signer, ts, reason, q = r.str(), r.str(), r.float(), r.str(), r.int()
        labels = np.array(r.ints(), dtype=np.int64)
        return cls(task_id, signer, ts, labels, CiphertextBatch.decode(r, q), q, reason)


@dataclass(eq=False)
class BlockHeader:
    block_id: int
    winner_id: str
    task_id: str
    prev_hash: bytes
    model: ModelSolution | None
    train_accuracy: float
    test_accuracy: float
    ommer_hashes: tuple[bytes, ...]
    merkle_root: bytes
    timestamp: float

    def encode(self, w: Writer) -> None:
        w.int(self.block_id).str(self.winner_id).str(self.task_id).bytes(self.prev_hash)
        w.bool(self.model is not None)
        if self.model is not None:
            self.model.encode(w)
        w.float(self.train_accuracy).float(self.test_accuracy)
        w.count(len(self.ommer_hashes))
        for h in self.ommer_hashes:
            w.bytes(h)
        w.bytes(self.merkle_root).float(self.timestamp)

    @classmethod
    def decode(cls, r: Reader) -> BlockHeader:
        block_id, winner, task_id, prev = r.int(), r.str(), r.str(), r.bytes()
        model = ModelSolution.decode(r) if r.bool() else None
        train_acc, test_acc = r.float(), r.float()
        ommers = tuple(r.bytes() for _ in range(r.count()))
        return cls(block_id, winner, task_id, prev, model, train_acc, test_acc, ommers, r.bytes(), r.float())

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()


def hash_block(header: BlockHeader) -> bytes:
    return sha256(header.to_bytes())


@dataclass(eq=False)
class OmmerRef:
    header: BlockHeader
    count: int  # ommers that exist at header.block_id

    def encode(self, w: Writer) -> None:
        self.header.encode(w)
        w.int(self.count)

    @classmethod
    def decode(cls, r: Reader) -> OmmerRef:
        return cls(BlockHeader.decode(r), r.int())


@dataclass(eq=False)
class BlockBody:
    pending_tasks: tuple[Task, ...] = ()
    new_ciphertext_data: tuple[EncryptedData, ...] = ()
    transactions: tuple[Transaction, ...] = ()
    test_data: TestData | None = None
    ommers: tuple[OmmerRef, ...] = ()

    def _item_bytes(self, item) -> bytes:
        w = Writer()
        item.encode(w)
        return w.getvalue()

    def leaves(self) -> list[bytes]:
        out = [b"T" + self._item_bytes(t) for t in self.pending_tasks]
        out += [b"C" + self._item_bytes(d) for d in self.new_ciphertext_data]
        out += [b"X" + self._item_bytes(tx) for tx in self.transactions]
        if self.test_data is not None:
            out.append(b"D" + self._item_bytes(self.test_data))
        out += [b"O" + self._item_bytes(o) for o in self.ommers]
        return out or [b"E"]

    def encode(self, w: Writer) -> None:
        for items in (self.pending_tasks, self.new_ciphertext_data, self.transactions):
            w.count(len(items))
            for it in items:
                it.encode(w)
        w.bool(self.test_data is not None)
        if self.test_data is not None:
            self.test_data.encode(w)
        w.count(len(self.ommers))
        for o in self.ommers:
            o.encode(w)

    @classmethod
    def decode(cls, r: Reader) -> BlockBody:
        tasks = tuple(Task.decode(r) for _ in range(r.count()))
        data = tuple(EncryptedData.decode(r) for _ in range(r.count()))
        txs = tuple(Transaction.decode(r) for _ in range(r.count()))
        test = TestData.decode(r) if r.bool() else None
        ommers = tuple(OmmerRef.decode(r) for _ in range(r.count()))
        return cls(tasks, data, txs, test, ommers)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Pairwise SHA-256 reduction of the leaf hashes; odd levels repeat their last node."""
    if not leaves:
        raise ValueError("merkle tree needs at least one leaf")
    level = [sha256(leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


@dataclass(eq=False)
class Block:
    header: BlockHeader
    body: BlockBody = field(default_factory=BlockBody)

    @property
    def hash(self) -> bytes:
        return hash_block(self.header)

    @property
    def height(self) -> int:
        return self.header.block_id

    def to_bytes(self) -> bytes:
        w = Writer()
        self.header.encode(w)
        self.body.encode(w)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Block:
        r = Reader(data)
        block = cls(BlockHeader.decode(r), BlockBody.decode(r))
        r.expect_end()
        return block

    def sealed(self) -> Block:
        """The same block with its header's Merkle root recomputed from the body."""
        return Block(replace(self.header, merkle_root=merkle_root(self.body.leaves())), self.body)


def ommer_reward(block_reward: float, winner_height: int, ommer_height: int, n_ommers: int) -> float:
    """Reward for the producer of an ommer referenced at ``winner_height``."""
    if winner_height <= ommer_height:
        raise ValueError("the referencing block must be higher than the ommer")
    if n_ommers < 1:
        raise ValueError("there must be at least one ommer at the ommer's height")
    return block_reward / ((winner_height - ommer_height) * n_ommers)


@dataclass(frozen=True)
class AccountState:
    balances: dict[str, float]
    pending: dict[str, float]  # task id -> escrowed reward
    height: int = -1

    @classmethod
    def empty(cls) -> AccountState:
        return cls({RESERVOIR: 0.0}, {}, -1)

    def balance(self, account: str) -> float:
        return self.balances.get(account, 0.0)

    @property
    def reservoir(self) -> float:
        return self.balance(RESERVOIR)

    @property
    def total_supply(self) -> float:
        return sum(self.balances.values())


class _Ledger:
    """Mutable scratch copy of balances used while applying one block."""

    def __init__(self, balances: dict[str, float]) -> None:
        self.balances = dict(balances)

    def mint(self, account: str, amount: float) -> None:
        self.balances[account] = self.balances.get(account, 0.0) + amount

    def transfer(self, sender: str, recipient: str, amount: float) -> None:
        if amount < 0:
            raise InvalidBlock(f"negative transfer {sender} -> {recipient}")
        have = self.balances.get(sender, 0.0)
        # tolerate float dust from fractional rewards
        if have - amount < -1e-9:
            raise InsufficientBalance(f"{sender} holds {have}, cannot pay {amount}")
        self.balances[sender] = max(have - amount, 0.0)
        self.mint(recipient, amount)


def apply_block(state: AccountState, block: Block, block_reward: float = DEFAULT_BLOCK_REWARD) -> AccountState:
    """Apply payouts, escrow and transactions of a verified block; returns the new state."""
    h, body = block.header, block.body
    if h.block_id != state.height + 1:
        raise InvalidBlock(f"block height {h.block_id} does not follow {state.height}")
    led = _Ledger(state.balances)
    pending = dict(state.pending)
    genesis = h.block_id == 0

    if not genesis:
        if h.task_id not in pending:
            raise InvalidBlock(f"task {h.task_id!r} is not pending")
        led.transfer(RESERVOIR, h.winner_id, pending.pop(h.task_id))
        led.mint(h.winner_id, block_reward)

    # transactions settle before escrow so genesis allocations can fund the first tasks
    for tx in body.transactions:
        if tx.sender == MINT:
            if not genesis:
                raise InvalidBlock("only the genesis block may mint allocations")
            led.mint(tx.recipient, tx.amount)
        else:
            led.transfer(tx.sender, tx.recipient, tx.amount)

    new_tasks = [t for t in body.pending_tasks if t.task_id not in pending]
    expected = set(pending) | {t.task_id for t in new_tasks}
    if {t.task_id for t in body.pending_tasks} != expected or len(body.pending_tasks) != len(expected):
        raise InvalidBlock("pending task list is not parent list minus solved plus new")
    for t in new_tasks:
        led.transfer(t.poster, RESERVOIR, t.reward)
        pending[t.task_id] = t.reward

    seen_heights = set()
    for ref in body.ommers:
        ho = ref.header.block_id
        if ho in seen_heights or h.block_id - ho > MAX_OMMER_DEPTH:
            raise InvalidBlock(f"bad ommer reference at height {ho}")
        seen_heights.add(ho)
        led.mint(ref.header.winner_id, ommer_reward(block_reward, h.block_id, ho, ref.count))
        led.mint(h.winner_id, block_reward * REFERRAL_FRACTION)
    if tuple(hash_block(o.header) for o in body.ommers) != h.ommer_hashes:
        raise InvalidBlock("ommer hashes in header do not match body")

    return AccountState(led.balances, pending, h.block_id)


class Chain:
    """An in-memory chain with the lookups miners need."""

    def __init__(self, blocks: Iterable[Block] = ()) -> None:
        self.blocks: list[Block] = []
        for b in blocks:
            self.append(b)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __getitem__(self, i: int) -> Block:
        return self.blocks[i]

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def head_hash(self) -> bytes:
        return self.head.hash

    def append(self, block: Block) -> None:
        expected_prev = self.head_hash if self.blocks else ZERO_HASH
        if block.header.block_id != len(self.blocks):
            raise InvalidBlock(f"expected height {len(self.blocks)}, got {block.header.block_id}")
        if block.header.prev_hash != expected_prev:
            raise InvalidBlock(f"block {block.header.block_id} does not link to the head")
        if block.header.merkle_root != merkle_root(block.body.leaves()):
            raise InvalidBlock(f"block {block.header.block_id} merkle root does not match body")
        self.blocks.append(block)

    def collect(self, pointers: Sequence[DataPointer]) -> tuple[CiphertextBatch, np.ndarray]:
        """Concatenate the ciphertext batches the pointers refer to."""
        parts = []
        for ptr in pointers:
            if not 0 <= ptr.height < len(self.blocks):
                raise KeyError(f"data pointer {ptr} beyond the chain")
            parts.append(self.blocks[ptr.height].body.new_ciphertext_data[ptr.index])
        if not parts:
            raise KeyError("task has no data pointers")
        ct0 = np.concatenate([p.ciphertexts.ct0 for p in parts])
        ct = np.concatenate([p.ciphertexts.ct for p in parts])
        labels = np.concatenate([p.labels for p in parts])
        return CiphertextBatch(ct0, ct), labels


def validate_chain(blocks: Sequence[Block]) -> list[str]:
    """Problems found when relinking blocks from scratch; empty means valid.

    Links are checked with ``link_hash``, so a tampered body or header breaks
    the link of every descendant.
    """
    problems = []
    prev = ZERO_HASH
    for i, b in enumerate(blocks):
        if b.header.block_id != i:
            problems.append(f"block {i}: height field is {b.header.block_id}")
        if b.header.prev_hash != prev:
            problems.append(f"block {i}: prev_hash does not match parent")
        if merkle_root(b.body.leaves()) != b.header.merkle_root:
            problems.append(f"block {i}: merkle root does not match body")
        prev = link_hash(b)
    return problems


def link_hash(block: Block) -> bytes:
    """The hash a child must carry: the header hash, taken with the Merkle root its body actually yields.

    A corrupted stored root or a tampered body both change it, so either
    breaks the link of every descendant.
    """
    root = merkle_root(block.body.leaves())
    h = hash_block(replace(block.header, merkle_root=root))
    return h if root == block.header.merkle_root else sha256(b"unlinked" + h)


# --- chain file: append-only sequence of 4-byte-length-prefixed block records

def append_block(path: str | Path, block: Block) -> None:
    data = block.to_bytes()
    with open(path, "ab") as fh:
        fh.write(struct.pack(">I", len(data)) + data)


def write_chain(path: str | Path, blocks: Iterable[Block]) -> None:
    with open(path, "wb") as fh:
        for b in blocks:
            data = b.to_bytes()
            fh.write(struct.pack(">I", len(data)) + data)


def read_chain(path: str | Path) -> list[Block]:
    return decode_chain(Path(path).read_bytes())


def decode_chain(data: bytes) -> list[Block]:
    blocks, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise DecodeError("truncated record length")
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        if pos + 4 + n > len(data):
            raise DecodeError("truncated block record")
        blocks.append(Block.from_bytes(data[pos + 4:pos + 4 + n]))
        pos += 4 + n
    return blocks


def chain_bytes_valid(data: bytes) -> bool:
    try:
        return not validate_chain(decode_chain(data))
    except (DecodeError, ValueError, OverflowError, KeyError, IndexError, struct.error):
        return False
