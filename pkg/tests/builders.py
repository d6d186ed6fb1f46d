"""Small hand-built tasks and blocks shared by the ledger and consensus tests."""
import numpy as np

from pole.fe import GroupParams
from pole.ledger import (MINT, ZERO_HASH, Block, BlockBody, BlockHeader, DataPointer, OmmerRef, Task, Transaction,
                         hash_block, merkle_root)
from pole.nn import ModelSpec
from pole.sml import Discretization

GROUP = GroupParams(p=1019, q=2039, g=4, lam=10)
SPEC = ModelSpec((4, 3), 0.5, 10.0)
DISC = Discretization(1.0, 0, 255)


def task(task_id, poster="alice", reward=5.0, time_limit=10.0, pointers=()):
    spec = ModelSpec((4, 3), 0.5, time_limit)
    return Task(task_id, poster, reward, spec, DISC, GROUP, 4, 3, "toy", 0.0, tuple(pointers))


def header(height, prev, winner="genesis", task_id="", ommers=(), root=None, ts=0.0, test_acc=0.0):
    return BlockHeader(height, winner, task_id, prev, None, 0.0, test_acc, tuple(ommers),
                       root or merkle_root([b"E"]), ts)


def block(height, prev, body=None, winner="genesis", task_id="", ommer_refs=(), ts=0.0):
    body = body or BlockBody()
    if ommer_refs:
        body = BlockBody(body.pending_tasks, body.new_ciphertext_data, body.transactions, body.test_data,
                         tuple(ommer_refs))
    h = header(height, prev, winner, task_id, [hash_block(o.header) for o in body.ommers],
               merkle_root(body.leaves()), ts)
    return Block(h, body)


def genesis(tasks=("t1",), balance=100.0, reward=5.0):
    ts = tuple(task(t, reward=reward) for t in tasks)
    body = BlockBody(ts, (), (Transaction(MINT, "alice", balance),))
    return block(0, ZERO_HASH, body)
