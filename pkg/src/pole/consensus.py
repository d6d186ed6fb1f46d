"""PoLe mining, block verification, winner selection, and a PoW baseline."""
from __future__ import annotations

import enum
import hashlib
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .fe import CiphertextBatch, FunctionalKey
from .ledger import (MAX_OMMER_DEPTH, ZERO_HASH, Block, BlockBody, BlockHeader, Chain, DataPointer,
                     EncryptedData, OmmerRef, Task, TestData, Transaction, hash_block, merkle_root,
                     pop_most_valuable)
from .nn import BatchSampler, ModelSolution, Standardizer, evaluate, init_model, train_step
from .sml import SmlDecryptFailed, SmlWeights, apply_sml, generate_sml

log = logging.getLogger(__name__)

KeySource = Callable[[Task, bytes], Sequence[FunctionalKey]]


class NoTask(LookupError):
    pass


class NoValidBlock(RuntimeError):
    pass


class Phase(enum.Enum):
    IDLE = "idle"
    TRAINING = "training"
    AWAIT_TEST = "await_test"
    VERIFYING = "verifying"


def task_sml(task: Task, phs: bytes) -> SmlWeights:
    return generate_sml(phs, task.dim, task.n_queries, task.sml_k)


class TaskData:
    """Encrypted examples of one task plus their labels, with decrypted features cached per SML."""

    def __init__(self, task: Task, ciphertexts: CiphertextBatch, labels: np.ndarray) -> None:
        self.task = task
        self.ciphertexts = ciphertexts
        self.labels = np.asarray(labels, dtype=np.int64)
        self._cache: dict[bytes, np.ndarray] = {}

    @classmethod
    def from_chain(cls, task: Task, chain: Chain) -> TaskData:
        cts, labels = chain.collect(task.data_pointers)
        return cls(task, cts, labels)

    @classmethod
    def from_test(cls, task: Task, test: TestData) -> TaskData:
        return cls(task, test.ciphertexts, test.labels)

    def features(self, sml: SmlWeights, fkeys: Sequence[FunctionalKey]) -> np.ndarray:
        key = hashlib.sha256(sml.to_bytes() + b"".join(f.eta.to_bytes(16, "big") for f in fkeys)).digest()
        if key not in self._cache:
            self._cache[key] = apply_sml(sml, self.ciphertexts, list(fkeys), self.task.disc, self.task.group)
        return self._cache[key]


class TrainingSession:
    """One miner training one task behind one SML, a step at a time."""

    def __init__(self, task: Task, sml: SmlWeights, features: np.ndarray, labels: np.ndarray, seed) -> None:
        spec = task.model_spec
        if features.shape[1] != spec.n_inputs:
            raise ValueError(f"SML yields {features.shape[1]} features, model expects {spec.n_inputs}")
        init_seed, batch_seed = np.random.SeedSequence(seed).spawn(2)
        self.task = task
        self.sml = sml
        self.norm = Standardizer.fit(features)
        self.x = self.norm(features)
        self.y = np.asarray(labels, dtype=np.int64)
        self.params = init_model(spec, init_seed)
        self.sampler = BatchSampler(len(self.y), spec.batch_size, batch_seed)
        self.steps = 0
        self.loss = float("nan")
        self.train_accuracy = evaluate(self.params, self.x, self.y)
        self.best_params, self.best_accuracy = self.params, self.train_accuracy

    def step(self) -> float:
        idx = self.sampler.next()
        self.params, self.loss = train_step(self.params, self.x[idx], self.y[idx], self.task.model_spec.lr)
        self.steps += 1
        self.train_accuracy = evaluate(self.params, self.x, self.y)
        if self.train_accuracy > self.best_accuracy:
            self.best_params, self.best_accuracy = self.params, self.train_accuracy
        return self.loss

    @property
    def reached(self) -> bool:
        return self.train_accuracy >= self.task.model_spec.required_accuracy

    def solution(self, best: bool = False) -> ModelSolution:
        params, acc = (self.best_params, self.best_accuracy) if best else (self.params, self.train_accuracy)
        return ModelSolution(self.task.task_id, self.sml, params, self.norm, acc)


def create_block(miner_id: str, task: Task, model: ModelSolution, height: int,
                 prev_hash: bytes, timestamp: float) -> Block:
    """A candidate block: the header a miner broadcasts, with an empty body."""
    body = BlockBody()
    header = BlockHeader(height, miner_id, task.task_id, prev_hash, model, model.train_accuracy,
                         0.0, (), merkle_root(body.leaves()), float(timestamp))
    return Block(header, body)


@dataclass
class MinerState:
    miner_id: str
    phase: Phase = Phase.IDLE
    current_task: Task | None = None
    session: TrainingSession | None = None
    received_blks: list[Block] = field(default_factory=list)
    clock: float = 0.0
    height: int = 0
    prev_hash: bytes = ZERO_HASH
    started_at: float = 0.0
    own_block: Block | None = None
    flagged: set[str] = field(default_factory=set)

    def reset(self, height: int, prev_hash: bytes) -> None:
        self.phase = Phase.IDLE
        self.current_task = None
        self.session = None
        self.received_blks = []
        self.own_block = None
        self.height = height
        self.prev_hash = prev_hash


def begin_mining(state: MinerState, task_list: Iterable[Task], chain: Chain, phs: bytes,
                 key_source: KeySource, seed, now: float) -> Block | None:
    """Lines 1-5 of the mining loop: pick the task, collect data, build the SML, init the model.

    Returns a candidate immediately when the task allows no training time.
    """
    task = pop_most_valuable(t for t in task_list if t.task_id not in state.flagged)
    if task is None:
        state.phase = Phase.IDLE
        raise NoTask("task list is empty")
    data = TaskData.from_chain(task, chain)
    sml = task_sml(task, phs)
    try:
        features = data.features(sml, key_source(task, phs))
    except SmlDecryptFailed:
        state.flagged.add(task.task_id)
        state.phase = Phase.IDLE
        raise
    state.current_task = task
    state.session = TrainingSession(task, sml, features, data.labels, seed)
    state.phase = Phase.TRAINING
    state.started_at = state.clock = now
    if task.model_spec.time_limit <= 0:
        return _emit(state, now, best=True)
    return None


def _emit(state: MinerState, now: float, best: bool) -> Block:
    blk = create_block(state.miner_id, state.current_task, state.session.solution(best=best),
                       state.height, state.prev_hash, now)
    state.own_block = blk
    state.received_blks.append(blk)
    state.phase = Phase.AWAIT_TEST
    return blk


def mining_tick(state: MinerState, now: float) -> Block | None:
    """One pass of the training loop, finishing at ``now``.

    Returns the block to broadcast when the required accuracy is met or the
    time limit has run out (then carrying the best model seen so far).
    """
    if state.phase is not Phase.TRAINING:
        return None
    state.session.step()
    return mining_check(state, now)


def mining_check(state: MinerState, now: float) -> Block | None:
    """Decide, after a step completed at ``now``, whether to broadcast."""
    if state.phase is not Phase.TRAINING:
        return None
    state.clock = now
    if state.session.reached:
        return _emit(state, now, best=False)
    if now - state.started_at >= state.current_task.model_spec.time_limit:
        return _emit(state, now, best=True)
    return None


def receive_candidate(state: MinerState, blk: Block) -> bool:
    """Buffer a competitor's block for this height; training carries on."""
    if blk.header.prev_hash != state.prev_hash or blk.header.block_id != state.height:
        return False
    if state.phase is Phase.VERIFYING:
        return False
    h = blk.hash
    if any(b.hash == h for b in state.received_blks):
        return False
    state.received_blks.append(blk)
    return True


def receive_test_release(state: MinerState, test: TestData) -> None:
    state.phase = Phase.VERIFYING


@dataclass
class MineResult:
    block: Block | None
    steps: int
    timed_out: bool
    stopped_by_test: bool = False
    elapsed: float = 0.0


def pole_mine(state: MinerState, task_list: Iterable[Task], chain: Chain, phs: bytes,
              key_source: KeySource, *, seed=0, now: float = 0.0, seconds_per_step: float = 1.0,
              test_release_at: float | None = None,
              incoming: Sequence[tuple[float, Block]] = ()) -> MineResult:
    """Run one miner's session to completion without a network.

    ``incoming`` lists competitor blocks with their arrival times; they are
    buffered in ``state.received_blks``. Training stops at the first of:
    required accuracy reached, time limit, or ``test_release_at``.
    """
    state.reset(len(chain), phs)
    blk = begin_mining(state, task_list, chain, phs, key_source, seed, now)
    if blk is not None:
        return MineResult(blk, 0, timed_out=True)
    queue = sorted(incoming, key=lambda item: item[0])
    t = now
    while True:
        t += seconds_per_step
        if test_release_at is not None and t > test_release_at:
            receive_test_release(state, None)
            return MineResult(None, state.session.steps, False, True, test_release_at - now)
        while queue and queue[0][0] <= t:
            receive_candidate(state, queue.pop(0)[1])
        blk = mining_tick(state, t)
        if blk is not None:
            timed_out = not state.session.reached
            return MineResult(blk, state.session.steps, timed_out, elapsed=t - now)


# ---------------------------------------------------------------------------
# Verification and winner selection

def test_accuracy(blk: Block, phs: bytes, test_data: TaskData, fkeys: Sequence[FunctionalKey]) -> float:
    """Accuracy on the released test set, using the SML regenerated from ``phs``."""
    model = blk.header.model
    if model is None:
        return 0.0
    sml = task_sml(test_data.task, phs)
    try:
        features = test_data.features(sml, fkeys)
    except SmlDecryptFailed:
        return 0.0
    if features.shape[1] != model.params[0][0].shape[1]:
        return 0.0
    return model.with_sml(sml).accuracy(features, test_data.labels)


def verify_block(blk: Block, phs: bytes, train_data: TaskData, test_blk: TestData,
                 fkeys: Sequence[FunctionalKey], *, require_accuracy: bool = True) -> bool:
    """Check a candidate against the SML regenerated from ``phs`` and the test release time."""
    h, task = blk.header, train_data.task
    model = h.model
    tag = f"block by {h.winner_id} at height {h.block_id}"
    if model is None or h.task_id != task.task_id or h.prev_hash != phs:
        log.info("reject %s: not a solution to %s on this parent", tag, task.task_id)
        return False
    sml = task_sml(task, phs)
    if model.sml.to_bytes() != sml.to_bytes():
        log.info("reject %s: SML does not derive from the parent hash", tag)
        return False
    try:
        features = train_data.features(sml, fkeys)
    except SmlDecryptFailed as exc:
        log.info("reject %s: %s", tag, exc)
        return False
    if features.shape[1] != model.params[0][0].shape[1]:
        log.info("reject %s: model input size does not match the SML", tag)
        return False
    acc = model.accuracy(features, train_data.labels)
    if require_accuracy and acc < task.model_spec.required_accuracy:
        log.info("reject %s: train accuracy %.4f below %.4f", tag, acc, task.model_spec.required_accuracy)
        return False
    if not h.timestamp < test_blk.timestamp:
        log.info("reject %s: timestamp %.3f not before test release %.3f", tag, h.timestamp, test_blk.timestamp)
        return False
    return True


def select_winner(received_blks: Sequence[Block], phs: bytes, train_data: TaskData, test_blk: TestData,
                  fkeys: Sequence[FunctionalKey], *, best_effort: bool = True) -> tuple[Block, list[Block]]:
    """Rank candidates by test accuracy and return (winner, ommers).

    Returned blocks carry their test accuracy in the header. When no block
    meets the accuracy requirement and ``best_effort`` is set (the time-limit
    case), the most accurate block that passes the remaining checks wins and
    there are no ommers.
    """
    if not received_blks:
        raise NoValidBlock("no candidate blocks")
    unique: dict[bytes, Block] = {}
    for b in received_blks:
        unique.setdefault(b.hash, b)
    test_data = TaskData.from_test(train_data.task, test_blk)
    scored = [(test_accuracy(b, phs, test_data, fkeys), b.header.timestamp, h, b) for h, b in unique.items()]
    scored.sort(key=lambda s: (-s[0], s[1], s[2]))
    ranked = [replace(b.header, test_accuracy=acc) for acc, _, _, b in scored]
    blocks = [Block(hdr, b.body) for hdr, (_, _, _, b) in zip(ranked, scored)]

    valid = [b for b, (_, _, _, orig) in zip(blocks, scored)
             if verify_block(orig, phs, train_data, test_blk, fkeys)]
    if valid:
        return valid[0], valid[1:]
    if best_effort:
        for b, (_, _, _, orig) in zip(blocks, scored):
            if verify_block(orig, phs, train_data, test_blk, fkeys, require_accuracy=False):
                return b, []
    raise NoValidBlock(f"none of {len(unique)} candidates verified")


def choose_ommer_refs(height: int, ommer_pool: dict[int, list[BlockHeader]],
                      referenced: set[int]) -> list[OmmerRef]:
    """Best unreferenced ommer (highest test accuracy, then lowest hash) per recent height."""
    refs = []
    for ho in range(max(0, height - MAX_OMMER_DEPTH), height):
        pool = ommer_pool.get(ho)
        if not pool or ho in referenced:
            continue
        best = min(pool, key=lambda hdr: (-hdr.test_accuracy, hash_block(hdr)))
        refs.append(OmmerRef(best, len(pool)))
    return refs


def seal_winner(winner: Block, parent: Block, solved_task_id: str, new_tasks: Sequence[tuple[Task, EncryptedData]],
                test_data: TestData, ommers: Sequence[OmmerRef] = (),
                transactions: Sequence[Transaction] = ()) -> Block:
    """The block appended to the chain: the winning header plus the body for this height."""
    height = winner.header.block_id
    carried = [t for t in parent.body.pending_tasks if t.task_id != solved_task_id]
    posted = sorted(new_tasks, key=lambda item: (item[0].posted_at, item[0].task_id))
    added = [replace(task, data_pointers=(DataPointer(height, i),)) for i, (task, _) in enumerate(posted)]
    body = BlockBody(tuple(carried + added), tuple(d for _, d in posted), tuple(transactions),
                     test_data, tuple(ommers))
    header = replace(winner.header, ommer_hashes=tuple(hash_block(o.header) for o in ommers),
                     merkle_root=merkle_root(body.leaves()))
    return Block(header, body)


# ---------------------------------------------------------------------------
# Proof-of-work baseline

HASH_SPACE = 1 << 256


@dataclass(frozen=True)
class PowParams:
    difficulty_target: int
    expected_block_time: float
    hash_rate: float = 10.0  # trials per simulated second per miner

    def __post_init__(self) -> None:
        if not 0 < self.difficulty_target <= HASH_SPACE - 1:
            raise ValueError("difficulty target must lie in (0, 2^256)")
        if self.hash_rate <= 0:
            raise ValueError("hash rate must be positive")

    @classmethod
    def for_block_time(cls, expected_block_time: float, hash_rate: float = 10.0, miners: int = 1) -> PowParams:
        trials = expected_block_time * hash_rate * miners
        target = HASH_SPACE - 1 if trials <= 1 else int(HASH_SPACE // trials)
        return cls(target, expected_block_time, hash_rate)

    @property
    def success_probability(self) -> float:
        return self.difficulty_target / HASH_SPACE


@dataclass(frozen=True)
class PowBlock:
    height: int
    miner: int
    nonce: int
    trials: int
    timestamp: float
    prev_hash: bytes
    hash: bytes


def pow_hash(nonce: int, phs: bytes) -> bytes:
    return hashlib.sha256(nonce.to_bytes(8, "big") + phs).digest()


def pow_mine(params: PowParams, phs: bytes, rng: random.Random, *, miners: int = 1,
             start_time: float = 0.0, height: int = 0) -> PowBlock:
    """Miners hash in lock-step rounds at ``hash_rate``; the first hash below target wins."""
    nonces = [rng.getrandbits(64) for _ in range(miners)]
    rounds = 0
    while True:
        rounds += 1
        for m in range(miners):
            nonce = (nonces[m] + rounds - 1) % (1 << 64)
            digest = pow_hash(nonce, phs)
            if int.from_bytes(digest, "big") < params.difficulty_target:
                trials = (rounds - 1) * miners + m + 1
                return PowBlock(height, m, nonce, trials, start_time + rounds / params.hash_rate, phs, digest)


def run_pow_chain(params: PowParams, n_blocks: int, seed, miners: int = 3) -> list[PowBlock]:
    rng = random.Random(seed)
    prev, t = hashlib.sha256(b"pow-genesis").digest(), 0.0
    chain = []
    for height in range(1, n_blocks + 1):
        blk = pow_mine(params, prev, rng, miners=miners, start_time=t, height=height)
        chain.append(blk)
        prev = hashlib.sha256(blk.prev_hash + blk.nonce.to_bytes(8, "big") + blk.hash).digest()
        t = blk.timestamp
    return chain
