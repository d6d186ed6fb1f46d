"""The three desk-scale experiments: block-time dispersion, secure vs plain accuracy, SML replacement."""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consensus import PowParams, TaskData, create_block, run_pow_chain, verify_block
from .datasets import Dataset
from .fe import derive_functional_key, discretize, encrypt_batch, group_gen, keygen
from .ledger import Task, TestData
from .nn import BatchSampler, ModelSolution, ModelSpec, Standardizer, evaluate, init_model, train_step
from .simnet import SimConfig, SimResult, run_simulation
from .sml import DEFAULT_K, DEFAULT_QUERIES, Discretization, generate_sml


def summarize(series) -> dict[str, float]:
    """Mean, max, min, sample variance and coefficient of variation."""
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two observations")
    mean, var = float(x.mean()), float(x.var(ddof=1))
    return {"n": len(x), "mean": mean, "max": float(x.max()), "min": float(x.min()),
            "variance": var, "cov": float(np.sqrt(var) / mean) if mean else float("nan")}


@dataclass
class ExperimentReport:
    name: str
    block_times: dict[str, list[float]] = field(default_factory=dict)
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    curves: list[dict] = field(default_factory=list)   # one row per (model, epoch)
    attack: list[dict] = field(default_factory=list)   # one row per SML evaluated
    elapsed: float = 0.0
    sim: SimResult | None = None

    def consistent(self) -> bool:
        """Block-time summaries agree with statistics recomputed from the raw series."""
        for proto, series in self.block_times.items():
            fresh = summarize(series)
            if any(not np.isclose(fresh[k], self.summary[proto][k]) for k in fresh):
                return False
        return True

    def write_csv(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        if self.block_times:
            path = out / f"{self.name}_block_times.csv"
            _write_rows(path, [{"protocol": p, "block": i + 1, "seconds": t}
                               for p, ts in self.block_times.items() for i, t in enumerate(ts)])
            written.append(path)
        if self.summary:
            path = out / f"{self.name}_summary.csv"
            _write_rows(path, [{"row": key, **vals} for key, vals in self.summary.items()])
            written.append(path)
        for label, rows in (("curves", self.curves), ("attack", self.attack)):
            if rows:
                path = out / f"{self.name}_{label}.csv"
                _write_rows(path, rows)
                written.append(path)
        return written


def _write_rows(path: Path, rows: list[dict]) -> None:
    names = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Experiment 1

def pow_block_times(params: PowParams, n_blocks: int, seed, miners: int) -> list[float]:
    chain = run_pow_chain(params, n_blocks, seed, miners)
    stamps = [0.0] + [b.timestamp for b in chain]
    return list(np.diff(stamps))


def exp1_block_time(cfg: SimConfig) -> ExperimentReport:
    """PoLe and PoW block intervals over ``cfg.blocks`` blocks, plus a long PoW run for its mean."""
    t0 = time.perf_counter()
    sim = run_simulation(cfg)
    pow_params = PowParams.for_block_time(cfg.pow_expected_block_time, cfg.pow_hash_rate, cfg.n_miners)
    pow_times = pow_block_times(pow_params, cfg.blocks, f"{cfg.seed}/pow", cfg.n_miners)
    long_run = pow_block_times(pow_params, cfg.pow_blocks, f"{cfg.seed}/pow-long", cfg.n_miners)
    report = ExperimentReport("exp1", {"pole": sim.block_times, "pow": pow_times})
    report.summary = {p: summarize(ts) for p, ts in report.block_times.items()}
    report.summary["pow_long"] = {**summarize(long_run), "target": cfg.pow_expected_block_time}
    report.sim = sim
    report.elapsed = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# Experiments 2 and 3

@dataclass(frozen=True)
class TrainSettings:
    hidden: tuple[int, ...] = (128,)
    lr: float = 0.05
    batch_size: int = 16
    epochs: int = 200
    n_queries: int = DEFAULT_QUERIES
    sml_k: int = DEFAULT_K
    disc: Discretization = Discretization(10.0, 0, 255)
    lam: int = 32
    required_accuracy: float = 0.8

    def spec(self, n_inputs: int, n_classes: int) -> ModelSpec:
        return ModelSpec((n_inputs, *self.hidden, n_classes), self.required_accuracy, float("inf"),
                         self.lr, self.batch_size)


DEFAULT_SETTINGS = {
    "iris": TrainSettings(),
    "mnist-subset": TrainSettings(lr=0.1, batch_size=32, epochs=400, disc=Discretization(255.0, 0, 255)),
}


def block_hash_for(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


@dataclass
class SecureSetup:
    """A data owner's encrypted dataset plus the key authority answering for any block hash."""

    ds: Dataset
    settings: TrainSettings
    task: Task
    train: TaskData
    test: TestData
    keys: object

    def fkeys(self, phs: bytes):
        return [derive_functional_key(self.keys, row) for row in self.sml(phs).z]

    def sml(self, phs: bytes):
        return generate_sml(phs, self.ds.dim, self.settings.n_queries, self.settings.sml_k)

    def features(self, phs: bytes) -> tuple[np.ndarray, np.ndarray]:
        sml, fk = self.sml(phs), self.fkeys(phs)
        test = TaskData.from_test(self.task, self.test)
        return self.train.features(sml, fk), test.features(sml, fk)


def secure_setup(ds: Dataset, settings: TrainSettings, seed: int = 0) -> SecureSetup:
    d = settings.disc
    group = group_gen(settings.lam, seed=f"{seed}/group")
    keys = keygen(group, ds.dim, seed=f"{seed}/keys")
    train_ct = encrypt_batch(keys, group, discretize(ds.x_train, d.scale, d.offset, d.xmax), seed=f"{seed}/train")
    test_ct = encrypt_batch(keys, group, discretize(ds.x_test, d.scale, d.offset, d.xmax), seed=f"{seed}/test")
    spec = settings.spec(settings.n_queries, ds.n_classes)
    task = Task(f"{ds.name}/{seed}", "owner", 1.0, spec, d, group, ds.dim, settings.sml_k, ds.name)
    test = TestData(task.task_id, "owner", float("inf"), ds.y_test, test_ct, group.q)
    return SecureSetup(ds, settings, task, TaskData(task, train_ct, ds.y_train), test, keys)


def train_curve(x_train, y_train, x_test, y_test, spec: ModelSpec, epochs: int, seed, label: str):
    """Train from scratch; returns (params, standardizer, per-epoch rows)."""
    norm = Standardizer.fit(x_train)
    xs, xt = norm(x_train), norm(x_test)
    init_seed, batch_seed = np.random.SeedSequence(seed).spawn(2)
    params = init_model(spec, init_seed)
    sampler = BatchSampler(len(y_train), spec.batch_size, batch_seed)
    rows = []
    for epoch in range(1, epochs + 1):
        for _ in range(sampler.steps_per_epoch):
            idx = sampler.next()
            params, _ = train_step(params, xs[idx], y_train[idx], spec.lr)
        rows.append({"model": label, "epoch": epoch, "train_accuracy": evaluate(params, xs, y_train),
                     "test_accuracy": evaluate(params, xt, y_test)})
    return params, norm, rows


def train_secure(setup: SecureSetup, phs: bytes, seed: int = 0, epochs: int | None = None):
    """Model trained behind the SML of ``phs``; returns (solution, curve rows)."""
    s = setup.settings
    x_train, x_test = setup.features(phs)
    spec = setup.task.model_spec
    params, norm, rows = train_curve(x_train, setup.ds.y_train, x_test, setup.ds.y_test, spec,
                                     epochs or s.epochs, seed, "secure")
    model = ModelSolution(setup.task.task_id, setup.sml(phs), params, norm, rows[-1]["train_accuracy"])
    return model, rows


def _final(rows: list[dict]) -> dict[str, float]:
    return {"train_accuracy": rows[-1]["train_accuracy"], "test_accuracy": rows[-1]["test_accuracy"],
            "epochs": rows[-1]["epoch"]}


def exp2_secure_accuracy(ds: Dataset, settings: TrainSettings | None = None, seed: int = 0,
                         epochs: int | None = None) -> ExperimentReport:
    """Same network trained behind the encrypted SML path and on plaintext features, same seed."""
    t0 = time.perf_counter()
    settings = settings or DEFAULT_SETTINGS[ds.name]
    epochs = epochs or settings.epochs
    setup = secure_setup(ds, settings, seed)
    _, secure_rows = train_secure(setup, block_hash_for(f"exp2/{seed}"), seed, epochs)
    plain_spec = settings.spec(ds.dim, ds.n_classes)
    _, _, plain_rows = train_curve(ds.x_train, ds.y_train, ds.x_test, ds.y_test, plain_spec, epochs, seed, "original")
    for r in plain_rows:
        r["model"] = "original"
    report = ExperimentReport("exp2", curves=secure_rows + plain_rows)
    report.summary = {"secure": _final(secure_rows), "original": _final(plain_rows)}
    report.elapsed = time.perf_counter() - t0
    return report


def exp3_sml_replacement(ds: Dataset, settings: TrainSettings | None = None, seed: int = 0,
                         n_replacements: int = 5, epochs: int | None = None,
                         replacements: list[bytes] | None = None) -> ExperimentReport:
    """Accuracy of a trained secure model when its SML is regenerated from other block hashes.

    Every replaced-SML model is also wrapped in a candidate block and run
    through block verification against the original parent hash.
    """
    t0 = time.perf_counter()
    settings = settings or DEFAULT_SETTINGS[ds.name]
    setup = secure_setup(ds, settings, seed)
    phs = block_hash_for(f"exp3/{seed}")
    model, _ = train_secure(setup, phs, seed, epochs)
    if replacements is None:
        replacements = [block_hash_for(f"exp3/{seed}/replacement/{i}") for i in range(n_replacements)]
    fkeys = setup.fkeys(phs)
    rows = []
    for label, h in [("original", phs)] + [(f"replaced-{i}", h) for i, h in enumerate(replacements)]:
        _, x_test = setup.features(h)
        swapped = model.with_sml(setup.sml(h))
        blk = create_block("attacker" if h != phs else "honest", setup.task, swapped, 1, phs, 0.0)
        rows.append({"sml": label, "source_hash": h.hex(), "test_accuracy": swapped.accuracy(x_test, ds.y_test),
                     "verified": verify_block(blk, phs, setup.train, setup.test, fkeys)})
    report = ExperimentReport("exp3", attack=rows)
    replaced = [r["test_accuracy"] for r in rows[1:]]
    report.summary = {"original": {"test_accuracy": rows[0]["test_accuracy"]},
                      "replaced": {"max_test_accuracy": max(replaced, default=float("nan")),
                                   "mean_test_accuracy": float(np.mean(replaced)) if replaced else float("nan"),
                                   "chance": 1.0 / ds.n_classes}}
    report.elapsed = time.perf_counter() - t0
    return report
