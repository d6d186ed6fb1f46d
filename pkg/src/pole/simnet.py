"""Discrete-event network simulation of data nodes and miners.

Every node is a full node: it keeps its own chain and account state, and at
the end of each height runs the same winner selection on the candidates it
received. Data nodes additionally post tasks, hold the test sets, release
them, and answer functional-key requests for the tasks they posted.
"""
from __future__ import annotations

import configparser
import hashlib
import heapq
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .codec import Writer
from .consensus import (MinerState, NoTask, NoValidBlock, Phase, TaskData, begin_mining, choose_ommer_refs,
                        mining_check, mining_tick, receive_candidate, receive_test_release, seal_winner,
                        select_winner, task_sml)
from .datasets import Dataset, load_dataset
from .fe import CiphertextBatch, FunctionalKey, GroupParams, MasterKeys, derive_functional_key, discretize, \
    encrypt_batch, group_gen, keygen
from .ledger import (DEFAULT_BLOCK_REWARD, MAX_OMMER_DEPTH, MINT, ZERO_HASH, AccountState, Block, BlockBody,
                     BlockHeader, Chain, DataPointer, EncryptedData, Task, TestData, Transaction, apply_block,
                     merkle_root, pop_most_valuable)
from .nn import ModelSpec
from .sml import DEFAULT_K, DEFAULT_QUERIES, Discretization, SmlDecryptFailed

log = logging.getLogger(__name__)


class Deadlock(RuntimeError):
    pass


class AlreadyReleased(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration

_DATASET_SCALE = {"iris": 10.0, "mnist-subset": 255.0}


@dataclass
class SimConfig:
    seed: int = 0
    blocks: int = 20
    n_miners: int = 3
    n_data_nodes: int = 5
    latency: float = 0.1
    data_latency: float | None = None
    collect_window: float | None = None
    wait_count: int = 2
    seconds_per_step: float = 1.0
    wall_clock: bool = False
    wall_clock_scale: float = 1.0
    dataset: str = "iris"
    dataset_path: str | None = None
    hidden: tuple[int, ...] = (128,)
    required_accuracy: float = 0.9
    time_limit: float = 300.0
    lr: float = 0.05
    batch_size: int = 135
    reward: float = 5.0
    initial_balance: float = 1000.0
    block_reward: float = DEFAULT_BLOCK_REWARD
    n_queries: int = DEFAULT_QUERIES
    sml_k: int = DEFAULT_K
    lam: int = 32
    scale: float | None = None
    offset: int = 0
    xmax: int = 255
    pow_expected_block_time: float = 2.0
    pow_hash_rate: float = 50.0
    pow_blocks: int = 200

    @property
    def delta(self) -> float:
        return self.latency

    @property
    def release_delay(self) -> float:
        return self.latency if self.data_latency is None else self.data_latency

    @property
    def window(self) -> float:
        return 2 * self.latency if self.collect_window is None else self.collect_window

    @property
    def disc(self) -> Discretization:
        scale = self.scale if self.scale is not None else _DATASET_SCALE.get(self.dataset, 1.0)
        return Discretization(scale, self.offset, self.xmax)

    def model_spec(self, n_classes: int) -> ModelSpec:
        return ModelSpec((self.n_queries, *self.hidden, n_classes), self.required_accuracy,
                         self.time_limit, self.lr, self.batch_size)


_SECTION_PREFIX = {"simulation": "", "task": "", "pow": "pow_"}


def _coerce(kind: str, raw: str):
    raw = raw.strip()
    if "None" in kind and raw.lower() in ("", "none"):
        return None
    if kind.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if kind.startswith("bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def load_config(path: str | Path | None = None, **overrides) -> SimConfig:
    """Read an INI file with [simulation], [task] and [pow] sections; keyword overrides win."""
    types = {f.name: str(f.type) for f in fields(SimConfig)}
    values: dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(path):
            raise FileNotFoundError(path)
        for section in parser.sections():
            if section not in _SECTION_PREFIX:
                raise ValueError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                name = _SECTION_PREFIX[section] + key
                if name not in types:
                    raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
                values[name] = _coerce(types[name], raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig(**values)


# ---------------------------------------------------------------------------
# Messages and the event bus

@dataclass(frozen=True)
class TaskPost:
    task: Task
    data: EncryptedData


@dataclass(frozen=True)
class CandidateBlock:
    block: Block


@dataclass(frozen=True)
class TestRelease:
    __test__ = False

    test: TestData
    height: int
    attempt: int


@dataclass(frozen=True)
class KeyRequest:
    task_id: str
    phs: bytes
    requester: str


@dataclass(frozen=True)
class KeyResponse:
    task_id: str
    phs: bytes
    keys: tuple[FunctionalKey, ...]


@dataclass(frozen=True)
class Tick:
    kind: str  # "train", "check", "deadline", "release", "finalize"
    height: int
    attempt: int


def payload_digest(payload) -> str:
    w = Writer().str(type(payload).__name__)
    if isinstance(payload, TaskPost):
        payload.task.encode(w)
        payload.data.encode(w)
    elif isinstance(payload, CandidateBlock):
        w.bytes(payload.block.to_bytes())
    elif isinstance(payload, TestRelease):
        payload.test.encode(w)
        w.int(payload.height).int(payload.attempt)
    elif isinstance(payload, KeyRequest):
        w.str(payload.task_id).bytes(payload.phs).str(payload.requester)
    elif isinstance(payload, KeyResponse):
        w.str(payload.task_id).bytes(payload.phs).count(len(payload.keys))
        for k in payload.keys:
            k.encode(w)
    elif isinstance(payload, Tick):
        w.str(payload.kind).int(payload.height).int(payload.attempt)
    else:
        raise TypeError(f"unknown payload {payload!r}")
    return hashlib.sha256(w.getvalue()).hexdigest()


@dataclass(order=True)
class SimEvent:
    time: float
    recipient: str
    seq: int
    sender: str = field(compare=False)
    payload: Any = field(compare=False)
    digest: str = field(default="", compare=False)

    def record(self) -> dict:
        return {"time": self.time, "sender": self.sender, "recipient": self.recipient,
                "type": type(self.payload).__name__, "digest": self.digest or payload_digest(self.payload)}


class EventBus:
    """Priority queue of deliveries ordered by (time, recipient, sequence)."""

    def __init__(self, node_ids: list[str], latency: float) -> None:
        self.node_ids = sorted(node_ids)
        self.latency = latency
        self.now = 0.0
        self._heap: list[SimEvent] = []
        self._seq = 0

    def _push(self, at: float, sender: str, recipient: str, payload, digest: str = "") -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule into the past ({at} < {self.now})")
        heapq.heappush(self._heap, SimEvent(at, recipient, self._seq, sender, payload, digest))
        self._seq += 1

    def send(self, sender: str, recipient: str, payload, at: float | None = None, digest: str = "") -> None:
        self._push((self.now if at is None else at) + self.latency, sender, recipient, payload, digest)

    def broadcast(self, sender: str, payload, at: float | None = None) -> None:
        """Deliver to every node, the sender included, after one latency."""
        digest = payload_digest(payload)
        for node in self.node_ids:
            self.send(sender, node, payload, at, digest)

    def schedule(self, node: str, payload, at: float) -> None:
        self._push(at, node, node, payload)

    def pop(self) -> SimEvent | None:
        if not self._heap:
            return None
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def __len__(self) -> int:
        return len(self._heap)


# ---------------------------------------------------------------------------
# Data-node state and workload construction

@dataclass
class DataNodeState:
    node_id: str
    group: GroupParams
    wait_count: int
    posted_tasks: dict[str, Task] = field(default_factory=dict)
    master_keys: dict[str, MasterKeys] = field(default_factory=dict)
    test_sets: dict[str, tuple[np.ndarray, CiphertextBatch]] = field(default_factory=dict)
    released: set[tuple[str, int]] = field(default_factory=set)
    n_posted: int = 0


def post_task(dn: DataNodeState, cfg: SimConfig, ds: Dataset, now: float) -> tuple[Task, EncryptedData]:
    """Encrypt the dataset under fresh keys and produce the task plus its training ciphertexts."""
    n = dn.n_posted
    dn.n_posted += 1
    task_id = f"{n:04d}/{dn.node_id}"
    disc = cfg.disc
    keys = keygen(dn.group, ds.dim, seed=f"{cfg.seed}/keys/{task_id}")
    train_ct = encrypt_batch(keys, dn.group, discretize(ds.x_train, disc.scale, disc.offset, disc.xmax),
                             seed=f"{cfg.seed}/train/{task_id}")
    test_ct = encrypt_batch(keys, dn.group, discretize(ds.x_test, disc.scale, disc.offset, disc.xmax),
                            seed=f"{cfg.seed}/test/{task_id}")
    task = Task(task_id, dn.node_id, cfg.reward, cfg.model_spec(ds.n_classes), disc, dn.group,
                ds.dim, cfg.sml_k, ds.name, float(now))
    dn.posted_tasks[task_id] = task
    dn.master_keys[task_id] = keys
    dn.test_sets[task_id] = (ds.y_test.copy(), test_ct)
    return task, EncryptedData(task_id, ds.y_train.copy(), train_ct, dn.group.q)


def serve_functional_keys(dn: DataNodeState, task_id: str, phs: bytes) -> list[FunctionalKey]:
    """eta_i = <s, z_i> for every query vector the SML derived from ``phs`` contains."""
    task = dn.posted_tasks.get(task_id)
    if task is None:
        raise KeyError(f"{dn.node_id} did not post task {task_id!r}")
    keys = dn.master_keys[task_id]
    return [derive_functional_key(keys, row) for row in task_sml(task, phs).z]


def release_test_set(dn: DataNodeState, task_id: str, now: float, reason: str = "count",
                     height: int = 0, attempt: int = 0) -> TestRelease:
    if task_id not in dn.test_sets:
        raise KeyError(f"{dn.node_id} holds no test set for {task_id!r}")
    if (task_id, attempt) in dn.released:
        raise AlreadyReleased(f"test set of {task_id!r} already released")
    dn.released.add((task_id, attempt))
    labels, cts = dn.test_sets[task_id]
    test = TestData(task_id, dn.node_id, float(now), labels, cts, dn.group.q, reason)
    return TestRelease(test, height, attempt)


def data_node_ids(cfg: SimConfig) -> list[str]:
    return [f"dn{i}" for i in range(cfg.n_data_nodes)]


def miner_ids(cfg: SimConfig) -> list[str]:
    return [f"m{i}" for i in range(cfg.n_miners)]


def build_workload(cfg: SimConfig, ds: Dataset) -> tuple[Block, dict[str, DataNodeState]]:
    """Genesis block (allocations plus one task per data node) and the data nodes' private state."""
    states, tasks, data = {}, [], []
    wait = max(1, min(cfg.wait_count, cfg.n_miners))
    for i, node in enumerate(data_node_ids(cfg)):
        dn = DataNodeState(node, group_gen(cfg.lam, seed=f"{cfg.seed}/group/{node}"), wait)
        task, enc = post_task(dn, cfg, ds, 0.0)
        tasks.append(replace(task, data_pointers=(DataPointer(0, i),)))
        data.append(enc)
        states[node] = dn
    txs = tuple(Transaction(MINT, node, cfg.initial_balance) for node in states)
    body = BlockBody(tuple(tasks), tuple(data), txs)
    header = BlockHeader(0, "genesis", "", ZERO_HASH, None, 0.0, 0.0, (), merkle_root(body.leaves()), 0.0)
    return Block(header, body), states


# ---------------------------------------------------------------------------
# Nodes

@dataclass
class HeightStat:
    height: int
    winner: str
    task_id: str
    candidates: int
    ommers_referenced: int
    release_time: float
    release_reason: str
    appended_at: float
    block_time: float
    train_accuracy: float
    test_accuracy: float
    reservoir: float
    pending_rewards: float


class FullNode:
    def __init__(self, node_id: str, genesis: Block, cfg: SimConfig, bus: EventBus) -> None:
        self.node_id = node_id
        self.cfg = cfg
        self.bus = bus
        self.chain = Chain([genesis])
        self.accounts = apply_block(AccountState.empty(), genesis, cfg.block_reward)
        self.mempool: dict[str, TaskPost] = {}
        self.candidates: dict[bytes, dict[bytes, Block]] = {}
        self.keys: dict[tuple[str, bytes], tuple[FunctionalKey, ...]] = {}
        self.ommer_pool: dict[int, list[BlockHeader]] = {}
        self.referenced: set[int] = set()
        self.task: Task | None = None
        self.attempt = 0
        self.release: TestData | None = None
        self.finalize_scheduled = False
        self.stats: list[HeightStat] = []
        self._train_data: dict[str, TaskData] = {}

    @property
    def height(self) -> int:
        """Height currently being mined."""
        return len(self.chain)

    @property
    def phs(self) -> bytes:
        return self.chain.head_hash

    # -- height lifecycle

    def start_height(self, now: float) -> None:
        self.attempt = 0
        self.task = pop_most_valuable(self.chain.head.body.pending_tasks)
        self.start_attempt(now)

    def start_attempt(self, now: float) -> None:
        self.release = None
        self.finalize_scheduled = False
        if self.task is None:
            return
        if (self.task.task_id, self.phs) in self.keys:
            self.keys_ready(now)
        else:
            self.bus.send(self.node_id, self.task.poster, KeyRequest(self.task.task_id, self.phs, self.node_id))

    def keys_ready(self, now: float) -> None:
        pass

    def appended(self, now: float, block: Block) -> None:
        pass

    # -- dispatch

    def handle(self, ev: SimEvent) -> None:
        msg, now = ev.payload, ev.time
        if isinstance(msg, TaskPost):
            self.mempool.setdefault(msg.task.task_id, msg)
        elif isinstance(msg, CandidateBlock):
            self.on_candidate(now, msg.block)
        elif isinstance(msg, TestRelease):
            self.on_test_release(now, msg)
        elif isinstance(msg, KeyRequest):
            self.on_key_request(now, msg)
        elif isinstance(msg, KeyResponse):
            self.keys[(msg.task_id, msg.phs)] = msg.keys
            if self.task is not None and (msg.task_id, msg.phs) == (self.task.task_id, self.phs):
                self.keys_ready(now)
        elif isinstance(msg, Tick):
            if (msg.height, msg.attempt) == (self.height, self.attempt):
                self.on_tick(now, msg)

    def on_candidate(self, now: float, blk: Block) -> None:
        self.candidates.setdefault(blk.header.prev_hash, {}).setdefault(blk.hash, blk)

    def on_test_release(self, now: float, msg: TestRelease) -> None:
        if self.task is None or self.release is not None:
            return
        if (msg.height, msg.attempt, msg.test.task_id) != (self.height, self.attempt, self.task.task_id):
            return
        self.release = msg.test
        if not self.finalize_scheduled:
            self.finalize_scheduled = True
            self.bus.schedule(self.node_id, Tick("finalize", self.height, self.attempt), now + self.cfg.window)

    def on_key_request(self, now: float, msg: KeyRequest) -> None:
        log.warning("%s cannot serve keys for %s", self.node_id, msg.task_id)

    def on_tick(self, now: float, tick: Tick) -> None:
        if tick.kind == "finalize":
            self.finalize(now)

    # -- finalization

    def train_data(self, task: Task) -> TaskData:
        if task.task_id not in self._train_data:
            self._train_data[task.task_id] = TaskData.from_chain(task, self.chain)
        return self._train_data[task.task_id]

    def finalize(self, now: float) -> None:
        task, test, phs, head = self.task, self.release, self.phs, self.chain.head
        height = self.height
        fkeys = self.keys[(task.task_id, phs)]
        cands = list(self.candidates.get(phs, {}).values())
        try:
            winner, ommers = select_winner(cands, phs, self.train_data(task), test, fkeys)
        except NoValidBlock as exc:
            log.warning("%s: height %d attempt %d failed: %s", self.node_id, height, self.attempt, exc)
            self.candidates.pop(phs, None)
            self.attempt += 1
            self.start_attempt(now)
            return
        refs = choose_ommer_refs(height, self.ommer_pool, self.referenced)
        posted = [(p.task, p.data) for p in self.mempool.values() if p.task.posted_at <= test.timestamp]
        block = seal_winner(winner, head, task.task_id, posted, test, refs)
        self.chain.append(block)
        self.accounts = apply_block(self.accounts, block, self.cfg.block_reward)
        for t, _ in posted:
            del self.mempool[t.task_id]
        self.referenced |= {r.header.block_id for r in refs}
        if ommers:
            self.ommer_pool[height] = [o.header for o in ommers]
        for h in [h for h in self.ommer_pool if h <= height - MAX_OMMER_DEPTH]:
            del self.ommer_pool[h]
        self.candidates.pop(phs, None)
        self._train_data.pop(task.task_id, None)

        prev_at = self.stats[-1].appended_at if self.stats else 0.0
        self.stats.append(HeightStat(
            height, block.header.winner_id, task.task_id, len(cands), len(refs), test.timestamp, test.reason,
            now, now - prev_at, block.header.train_accuracy, block.header.test_accuracy,
            self.accounts.reservoir, sum(self.accounts.pending.values())))
        self.appended(now, block)
        self.start_height(now)


class DataNode(FullNode):
    def __init__(self, state: DataNodeState, genesis: Block, cfg: SimConfig, bus: EventBus, ds: Dataset) -> None:
        super().__init__(state.node_id, genesis, cfg, bus)
        self.state = state
        self.ds = ds
        self.counted: set[bytes] = set()
        self.release_pending = False
        self.reposted: set[str] = set()

    @property
    def is_poster(self) -> bool:
        return self.task is not None and self.task.poster == self.node_id

    def deadline_offset(self) -> float:
        # key round trip, the time limit, one last step, candidate delivery, margin
        return self.task.model_spec.time_limit + 4 * self.cfg.delta + self.cfg.seconds_per_step

    def start_attempt(self, now: float) -> None:
        self.counted = set()
        self.release_pending = False
        super().start_attempt(now)
        if self.is_poster:
            self.bus.schedule(self.node_id, Tick("deadline", self.height, self.attempt), now + self.deadline_offset())

    def on_key_request(self, now: float, msg: KeyRequest) -> None:
        try:
            keys = serve_functional_keys(self.state, msg.task_id, msg.phs)
        except KeyError as exc:
            log.warning("%s", exc)
            return
        self.bus.send(self.node_id, msg.requester, KeyResponse(msg.task_id, msg.phs, tuple(keys)))

    def on_candidate(self, now: float, blk: Block) -> None:
        super().on_candidate(now, blk)
        h = blk.header
        if not self.is_poster or self.release_pending:
            return
        if h.prev_hash != self.phs or h.task_id != self.task.task_id:
            return
        self.counted.add(blk.hash)
        if len(self.counted) >= self.state.wait_count:
            self.release_pending = True
            self.bus.schedule(self.node_id, Tick("release", self.height, self.attempt), now + self.cfg.release_delay)

    def on_tick(self, now: float, tick: Tick) -> None:
        if tick.kind == "release":
            self._release(now, "count")
        elif tick.kind == "deadline" and not self.release_pending:
            self.release_pending = True
            self._release(now, "timeout")
        else:
            super().on_tick(now, tick)

    def _release(self, now: float, reason: str) -> None:
        task_id = self.task.task_id
        msg = release_test_set(self.state, task_id, now, reason, self.height, self.attempt)
        self.bus.broadcast(self.node_id, msg)
        if task_id not in self.reposted:
            # the replacement rides in the block that solves this task, so the pending set never drains
            self.reposted.add(task_id)
            task, data = post_task(self.state, self.cfg, self.ds, now)
            self.bus.broadcast(self.node_id, TaskPost(task, data))


class Miner(FullNode):
    def __init__(self, node_id: str, index: int, genesis: Block, cfg: SimConfig, bus: EventBus) -> None:
        super().__init__(node_id, genesis, cfg, bus)
        self.index = index
        self.state = MinerState(node_id)
        self.steps: list[int] = []

    def start_attempt(self, now: float) -> None:
        self.state.reset(self.height, self.phs)
        super().start_attempt(now)

    def keys_ready(self, now: float) -> None:
        if self.state.phase is not Phase.IDLE or self.state.session is not None:
            return
        seed = [self.cfg.seed, self.index, self.height, self.attempt]
        keys = self.keys[(self.task.task_id, self.phs)]
        try:
            blk = begin_mining(self.state, [self.task], self.chain, self.phs, lambda t, p: keys, seed, now)
        except (NoTask, SmlDecryptFailed) as exc:
            log.warning("%s idles at height %d: %s", self.node_id, self.height, exc)
            return
        if blk is not None:
            self._broadcast(now, blk)
        else:
            self._next_step(now)

    def _next_step(self, now: float) -> None:
        kind = "check" if self.cfg.wall_clock else "train"
        if self.cfg.wall_clock:
            t0 = time.perf_counter()
            self.state.session.step()
            delay = (time.perf_counter() - t0) * self.cfg.wall_clock_scale
        else:
            delay = self.cfg.seconds_per_step
        self.bus.schedule(self.node_id, Tick(kind, self.height, self.attempt), now + delay)

    def _broadcast(self, now: float, blk: Block) -> None:
        self.steps.append(self.state.session.steps)
        self.bus.broadcast(self.node_id, CandidateBlock(blk))

    def on_tick(self, now: float, tick: Tick) -> None:
        if tick.kind in ("train", "check"):
            step = mining_tick if tick.kind == "train" else mining_check
            blk = step(self.state, now)
            if blk is not None:
                self._broadcast(now, blk)
            elif self.state.phase is Phase.TRAINING:
                self._next_step(now)
        else:
            super().on_tick(now, tick)

    def on_candidate(self, now: float, blk: Block) -> None:
        super().on_candidate(now, blk)
        if blk.header.winner_id != self.node_id:
            receive_candidate(self.state, blk)

    def on_test_release(self, now: float, msg: TestRelease) -> None:
        super().on_test_release(now, msg)
        if self.release is msg.test:
            receive_test_release(self.state, msg.test)


# ---------------------------------------------------------------------------
# Driver

@dataclass
class SimResult:
    chain: list[Block]
    heads: dict[str, bytes]
    stats: list[HeightStat]
    events: list[dict]
    accounts: AccountState
    nodes: dict[str, FullNode]

    @property
    def block_times(self) -> list[float]:
        return [s.block_time for s in self.stats]

    def chain_bytes(self) -> bytes:
        w = Writer()
        for b in self.chain:
            w.bytes(b.to_bytes())
        return w.getvalue()


def run_simulation(cfg: SimConfig, dataset: Dataset | None = None, max_events: int | None = None) -> SimResult:
    if cfg.n_miners < 1 or cfg.n_data_nodes < 1:
        raise ValueError("need at least one miner and one data node")
    if cfg.release_delay <= 0:
        # a release at the candidate's own instant would make every block late
        raise ValueError("test release delay must be positive; set data_latency when latency is 0")
    if cfg.window < cfg.delta:
        raise ValueError("collect window shorter than latency: nodes could seal different task sets")
    ds = dataset if dataset is not None else load_dataset(cfg.dataset, cfg.dataset_path, cfg.seed)
    genesis, dn_states = build_workload(cfg, ds)
    ids = list(dn_states) + miner_ids(cfg)
    bus = EventBus(ids, cfg.latency)
    nodes: dict[str, FullNode] = {node: DataNode(st, genesis, cfg, bus, ds) for node, st in dn_states.items()}
    for i, node in enumerate(miner_ids(cfg)):
        nodes[node] = Miner(node, i, genesis, cfg, bus)
    for node in sorted(nodes):
        nodes[node].start_height(0.0)

    events: list[dict] = []
    target = cfg.blocks + 1
    while min(len(n.chain) for n in nodes.values()) < target:
        ev = bus.pop()
        if ev is None:
            heights = {k: len(n.chain) - 1 for k, n in nodes.items()}
            raise Deadlock(f"no events left before height {cfg.blocks}; node heights {heights}")
        events.append(ev.record())
        nodes[ev.recipient].handle(ev)
        if max_events is not None and len(events) > max_events:
            raise Deadlock(f"more than {max_events} events without reaching height {cfg.blocks}")

    ref = nodes[miner_ids(cfg)[0]]
    heads = {k: n.chain[cfg.blocks].hash for k, n in nodes.items()}
    return SimResult(ref.chain.blocks[:target], heads, ref.stats[:cfg.blocks], events, ref.accounts, nodes)


def write_events(path: str | Path, events: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in events:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
