"""Latent-space architecture search and its random-search baseline.

One coordinator owns the candidate store and the autoencoder. Each iteration
retrains the autoencoder on everything evaluated so far, encodes the current
elite programs, and climbs the value-estimator surface from each of them;
whenever a climbed point decodes to a valid, never-evaluated program it is
queued for evaluation. Exhausted climbs restart from uniform random latent
points. Proposals are fully generated before any evaluation is dispatched,
so a worker pool returns results identical to a serial run.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import network as N
from . import poseenv as E
from . import snap as S
from .autoencoder import AEHyper, ArchAutoencoder
from .poseenv import CandidateResult, Dataset, EnvConfig, TrainConfig, hash_seed

TRACE_HEADER = "id,snap,value,regmse,source,wall_time_s"


class AttemptCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    n_initial: int = 100
    n_per_iteration: int = 100
    budget_total: int = 1500
    ascent_step: float = 0.05
    ascent_limit: int = 50
    elite_batch: int = 16
    seed: int = 0
    worker_count: int = 1
    ae_epochs: int = 50
    record_timing: bool = False
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ae: AEHyper = field(default_factory=AEHyper)

    def __post_init__(self):
        if self.n_initial > self.budget_total:
            raise ValueError("n_initial must not exceed budget_total")
        if self.ascent_limit < 1:
            raise ValueError("ascent_limit must be >= 1")


@dataclass(frozen=True)
class StoreRecord:
    id: int
    snap: str
    regmse: float
    value: float
    source: str  # initial | ascent | resample | random_baseline
    wall_time: float
    train_seed: int
    failed: bool

    def trace_row(self, record_timing: bool) -> str:
        wt = f"{self.wall_time:.3f}" if record_timing else "0.000"
        return f"{self.id},{self.snap},{self.value!r},{self.regmse!r},{self.source},{wt}"


class CandidateStore:
    """Exact-text keyed store of every evaluated program, insertion ordered."""

    def __init__(self):
        self._by_text: dict[str, StoreRecord] = {}
        self._log: list[StoreRecord] = []

    def __len__(self) -> int:
        return len(self._log)

    def __contains__(self, text: str) -> bool:
        return text in self._by_text

    @property
    def records(self) -> list[StoreRecord]:
        return list(self._log)

    def insert(self, rec: StoreRecord):
        if rec.snap in self._by_text:
            raise ValueError(f"duplicate snap {rec.snap!r}")
        if rec.id != len(self._log):
            raise ValueError(f"non-contiguous id {rec.id} (expected {len(self._log)})")
        self._by_text[rec.snap] = rec
        self._log.append(rec)

    def best_k(self, k: int) -> list[StoreRecord]:
        """Top records by value, ties broken by earlier insertion."""
        return sorted(self._log, key=lambda r: (-r.value, r.id))[:k]

    def best(self) -> StoreRecord:
        return self.best_k(1)[0]

    def value_targets(self) -> list[tuple[str, float]]:
        return [(r.snap, r.value) for r in self._log]

    def best_so_far_curve(self) -> list[float]:
        out = []
        cur = -np.inf
        for r in self._log:
            cur = max(cur, r.value)
            out.append(cur)
        return out

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(asdict(r), sort_keys=True) for r in self._log) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "CandidateStore":
        store = CandidateStore()
        for line in text.splitlines():
            if line.strip():
                store.insert(StoreRecord(**json.loads(line)))
        return store


# ---------------------------------------------------------------------------
# evaluation pool


_POOL_DATASET: Dataset | None = None
_POOL_TRAIN: TrainConfig | None = None


def _pool_init(dataset: Dataset, train_cfg: TrainConfig):
    global _POOL_DATASET, _POOL_TRAIN
    _POOL_DATASET = dataset
    _POOL_TRAIN = train_cfg


def _pool_eval(job: tuple[int, str, int]) -> tuple[int, dict]:
    dispatch_id, text, train_seed = job
    seq = S.parse_snap(text)
    cfg = TrainConfig(
        epochs=_POOL_TRAIN.epochs, batch=_POOL_TRAIN.batch, lr=_POOL_TRAIN.lr,
        seed=train_seed, dtype=_POOL_TRAIN.dtype, value_seeds=_POOL_TRAIN.value_seeds,
    )
    return dispatch_id, E.evaluate_candidate(seq, _POOL_DATASET, cfg).to_json()


class EvalPool:
    """Evaluates (dispatch_id, snap) jobs; results merge in dispatch order.

    worker_count=1 runs inline; more workers use spawned processes that each
    pin BLAS to one thread, matching the serial path bit for bit.
    """

    def __init__(self, dataset: Dataset, train_cfg: TrainConfig, worker_count: int):
        self.dataset = dataset
        self.train_cfg = train_cfg
        self.worker_count = worker_count
        self._pool = None
        if worker_count > 1:
            slim = Dataset(dataset.cfg, dataset.train_x, dataset.train_y,
                           dataset.val_x, dataset.val_y,
                           np.empty(0), np.empty(0), [])
            ctx = mp.get_context("spawn")
            self._pool = ctx.Pool(worker_count, initializer=_pool_init, initargs=(slim, train_cfg))

    def evaluate(self, jobs: list[tuple[int, str, int]]) -> list[tuple[int, CandidateResult]]:
        if self._pool is None:
            _pool_init(self.dataset, self.train_cfg)
            raw = [_pool_eval(j) for j in jobs]
        else:
            raw = list(self._pool.imap_unordered(_pool_eval, jobs))
        raw.sort(key=lambda t: t[0])
        return [(i, CandidateResult.from_json(d)) for i, d in raw]

    def close(self):
        if self._pool is not None:
            self._pool.terminate()
            self._pool.join()
            self._pool = None


# ---------------------------------------------------------------------------
# latent-space ascent


@dataclass(frozen=True)
class AscentOutcome:
    seq: S.SnapSequence | None  # None when exhausted
    steps: int = 0

    @property
    def found(self) -> bool:
        return self.seq is not None


def ascend(z0: np.ndarray, ae: ArchAutoencoder, known, cfg: SearchConfig,
           pending: set[str] | None = None) -> AscentOutcome:
    """Climb the value surface from z0 until an unknown valid program decodes.

    The value head is linear, so its gradient is constant and the clamped
    iterates can be laid out in one shot: clip(z0 + t * step * grad) equals t
    clamped single steps because every component moves monotonically. All
    iterates (including step 0) are decoded in one batch.
    """
    pending = pending or set()
    w = ae.value_gradient()
    steps = np.arange(0, cfg.ascent_limit + 1, dtype=np.float64)
    traj = np.clip(z0[None, :] + steps[:, None] * cfg.ascent_step * w[None, :], -1.0, 1.0)
    for t, (seq, res) in enumerate(ae.hard_decode(traj)):
        if seq is None or not res.valid:
            continue  # invalid decodes are skipped, ascent continues
        text = seq.render()
        if text not in known and text not in pending:
            return AscentOutcome(seq, steps=t)
    return AscentOutcome(None, steps=cfg.ascent_limit)


def propose_batch(ae: ArchAutoencoder, store: CandidateStore, n_needed: int,
                  cfg: SearchConfig, iteration: int) -> tuple[list[tuple[str, str]], int]:
    """Collect up to n_needed novel programs: elite climbs, then resampled ones.

    Returns ([(snap text, source)...], attempts used). Hits the hard attempt
    cap (50x n_needed) rather than looping forever.
    """
    elites = store.best_k(cfg.elite_batch)
    elite_z = ae.encode_sequences([S.parse_snap(r.snap) for r in elites])
    rng = np.random.default_rng(hash_seed(cfg.seed, "resample", iteration))
    proposals: list[tuple[str, str]] = []
    pending: set[str] = set()
    attempts = 0
    cap = 50 * n_needed
    queue = list(elite_z)
    while len(proposals) < n_needed and attempts < cap:
        if queue:
            z0 = queue.pop(0)
            source = "ascent"
        else:
            z0 = rng.uniform(-1.0, 1.0, size=16)
            source = "resample"
        attempts += 1
        out = ascend(np.asarray(z0, dtype=np.float64), ae, store, cfg, pending)
        if out.found:
            text = out.seq.render()
            pending.add(text)
            proposals.append((text, source))
    return proposals, attempts


# ---------------------------------------------------------------------------
# run loops


@dataclass
class RunState:
    cfg: SearchConfig
    store: CandidateStore
    ae: ArchAutoencoder | None
    iteration: int = 0
    mode: str = "search"


def _evaluate_and_insert(state: RunState, pool: EvalPool, proposals: list[tuple[str, str]]):
    start = len(state.store)
    jobs = [
        (start + k, text, hash_seed(state.cfg.seed, "train", start + k))
        for k, (text, _src) in enumerate(proposals)
    ]
    results = pool.evaluate(jobs)
    for (did, res), (_text, src) in zip(results, proposals):
        state.store.insert(StoreRecord(
            id=did, snap=res.snap, regmse=res.regmse, value=res.value,
            source=src, wall_time=res.wall_time, train_seed=res.train_seed,
            failed=res.failed,
        ))


def init_population(state: RunState, pool: EvalPool):
    """Evaluate n_initial distinct uniformly random programs."""
    cfg = state.cfg
    rng = np.random.default_rng(hash_seed(cfg.seed, "init"))
    texts: list[str] = []
    seen: set[str] = set()
    while len(texts) < cfg.n_initial:
        text = S.random_snap(rng).render()
        if text not in seen and text not in state.store:
            seen.add(text)
            texts.append(text)
    _evaluate_and_insert(state, pool, [(t, "initial") for t in texts])


def search_iteration(state: RunState, pool: EvalPool, log=print):
    """Retrain, climb, evaluate: one full cycle of the iterative search."""
    cfg = state.cfg
    state.ae.retrain(state.store.value_targets(), seed=hash_seed(cfg.seed, "ae", state.iteration),
                     epochs=cfg.ae_epochs)
    n_needed = min(cfg.n_per_iteration, cfg.budget_total - len(state.store))
    proposals, attempts = propose_batch(state.ae, state.store, n_needed, cfg, state.iteration)
    if len(proposals) < n_needed:
        log(f"iteration {state.iteration}: attempt cap hit, {len(proposals)}/{n_needed} proposals")
        if not proposals:
            # liveness fallback: the decoder yielded nothing usable, so fill
            # the shortfall with fresh uniformly random programs
            rng = np.random.default_rng(hash_seed(cfg.seed, "fallback", state.iteration))
            fill: list[tuple[str, str]] = []
            seen = set()
            while len(fill) < n_needed:
                text = S.random_snap(rng).render()
                if text not in seen and text not in state.store:
                    seen.add(text)
                    fill.append((text, "resample"))
            proposals = fill
    _evaluate_and_insert(state, pool, proposals)
    state.iteration += 1


def run_search(cfg: SearchConfig, out_dir: str | None = None, log=print,
               resume: RunState | None = None) -> RunState:
    """Full guided search to the evaluation budget; checkpoints per iteration."""
    dataset = E.build_dataset(cfg.env)
    pool = EvalPool(dataset, cfg.train, cfg.worker_count)
    try:
        if resume is not None:
            state = resume
        else:
            state = RunState(cfg, CandidateStore(), ArchAutoencoder(cfg.ae, seed=hash_seed(cfg.seed, "ae-init"),
                                                                    dtype=np.float32), mode="search")
        t0 = time.perf_counter()
        if len(state.store) == 0:
            init_population(state, pool)
            log(f"initial population: {len(state.store)} evaluated, best {state.store.best().value:.3f}")
            _checkpoint(state, out_dir, t0)
        while len(state.store) < cfg.budget_total:
            search_iteration(state, pool, log=log)
            log(f"iteration {state.iteration}: store {len(state.store)}, best {state.store.best().value:.3f}")
            _checkpoint(state, out_dir, t0)
        return state
    finally:
        pool.close()


def random_search(cfg: SearchConfig, out_dir: str | None = None, log=print,
                  resume: RunState | None = None) -> RunState:
    """Matched-budget baseline: uniform random programs, same evaluation path."""
    dataset = E.build_dataset(cfg.env)
    pool = EvalPool(dataset, cfg.train, cfg.worker_count)
    try:
        state = resume if resume is not None else RunState(cfg, CandidateStore(), None, mode="baseline")
        # the proposal stream regenerates deterministically; on resume the
        # store filters out everything already evaluated
        rng = np.random.default_rng(hash_seed(cfg.seed, "baseline"))
        texts: list[str] = []
        seen: set[str] = set(r.snap for r in state.store.records)
        while len(texts) + len(state.store) < cfg.budget_total:
            text = S.random_snap(rng).render()
            if text not in seen:
                seen.add(text)
                texts.append(text)
        t0 = time.perf_counter()
        chunk = max(1, cfg.n_per_iteration)
        consumed = 0
        while consumed < len(texts):
            batch = texts[consumed:consumed + chunk]
            _evaluate_and_insert(state, pool, [(t, "random_baseline") for t in batch])
            consumed += len(batch)
            log(f"baseline: store {len(state.store)}, best {state.store.best().value:.3f}")
            _checkpoint(state, out_dir, t0)
        return state
    finally:
        pool.close()


# ---------------------------------------------------------------------------
# artifacts


def trace_csv(store: CandidateStore, record_timing: bool) -> str:
    rows = [TRACE_HEADER] + [r.trace_row(record_timing) for r in store.records]
    return "\n".join(rows) + "\n"


def _checkpoint(state: RunState, out_dir: str | None, t0: float):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    cfg = state.cfg
    with open(os.path.join(out_dir, "trace.csv"), "w") as f:
        f.write(trace_csv(state.store, cfg.record_timing))
    with open(os.path.join(out_dir, "store.jsonl"), "w") as f:
        f.write(state.store.to_jsonl())
    if state.ae is not None:
        state.ae.save(os.path.join(out_dir, "autoencoder"))
    best = state.store.best()
    arch = N.export_architecture(best.snap, N.SEARCH_CONFIG)
    with open(os.path.join(out_dir, "best_architecture.json"), "w") as f:
        json.dump(arch, f, indent=1, sort_keys=True)
    manifest = {
        "mode": state.mode,
        "iteration": state.iteration,
        "evaluations": len(state.store),
        "best_snap": best.snap,
        "best_value": best.value,
        "config": config_dict(cfg),
        "elapsed_s": round(time.perf_counter() - t0, 3),
        "artifacts": ["trace.csv", "store.jsonl", "best_architecture.json"]
        + (["autoencoder.bin", "autoencoder.json"] if state.ae is not None else []),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def config_dict(cfg: SearchConfig) -> dict:
    out = asdict(cfg)
    return out


def config_from_dict(obj: dict) -> SearchConfig:
    obj = dict(obj)
    env = EnvConfig(**obj.pop("env"))
    train = TrainConfig(**obj.pop("train"))
    ae = AEHyper(**obj.pop("ae"))
    return SearchConfig(env=env, train=train, ae=ae, **obj)


def load_run(out_dir: str) -> RunState:
    """Rehydrate a checkpointed run for `search resume`."""
    with open(os.path.join(out_dir, "manifest.json")) as f:
        manifest = json.load(f)
    cfg = config_from_dict(manifest["config"])
    with open(os.path.join(out_dir, "store.jsonl")) as f:
        store = CandidateStore.from_jsonl(f.read())
    ae = None
    if manifest["mode"] == "search":
        ae = ArchAutoencoder(cfg.ae, seed=hash_seed(cfg.seed, "ae-init"), dtype=np.float32)
        ae.load(os.path.join(out_dir, "autoencoder"))
    state = RunState(cfg, store, ae, iteration=int(manifest["iteration"]), mode=manifest["mode"])
    return state


def resume_run(out_dir: str, log=print) -> RunState:
    state = load_run(out_dir)
    if state.mode == "baseline":
        return random_search(state.cfg, out_dir=out_dir, log=log, resume=state)
    return run_search(state.cfg, out_dir=out_dir, log=log, resume=state)
