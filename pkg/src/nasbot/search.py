"""Search loop: GP-guided proposals, simulated asynchronous workers, baselines.

Three proposal methods share one loop:

* ``nasbot``: fit the GP on everything evaluated (pending jobs hallucinated),
  and maximise averaged EI with the EA;
* ``random``: the same EA, fed Unif(0, 1) draws instead of EI;
* ``ea``: plain evolution on observed values, generations of ``ea_n_mut``.

Workers are simulated by an event queue ordered by completion time, so a run
is reproducible for any worker count.
"""

import csv
import heapq
import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import archgraph as ag
from . import evo, gp
from . import objectives as obj
from .otmann import DEFAULT_NU_GRID, DistanceParams, DistanceStore
from .pools import initial_pool

log = logging.getLogger(__name__)

METHODS = ("nasbot", "ea", "random")
HALLUCINATIONS = ("kriging", "constant_liar")
HISTORY_HEADER = ("step", "arch", "value", "best", "elapsed_s")
DUPLICATE_RETRIES = 5


@dataclass
class SearchConfig:
    method: str = "nasbot"
    net_class: str = ag.CNN
    objective: str = "f1"
    budget: int = 150
    time_budget: Optional[float] = None
    workers: int = 1
    seed: int = 0
    nu_grid: tuple = DEFAULT_NU_GRID
    step_probabilities: tuple = evo.DEFAULT_STEP_PROBABILITIES
    max_attempts: int = 20
    modifiers: str = "all"
    alpha_range: tuple = (0.05, 5.0)
    beta_range: tuple = (0.01, 100.0)
    noise_range: tuple = (1e-6, 1.0)
    n_hyper_samples: int = 4
    mh_burn_in: int = 200
    mh_thin: int = 10
    mh_step: float = 0.3
    c1: int = 20
    cap: int = 500
    n_mut_floor: int = 5
    ea_n_mut: int = 10
    hallucination: str = "kriging"
    timeout: Optional[float] = None
    input_size: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.net_class not in ag.NET_CLASSES:
            raise ValueError(f"class must be one of {ag.NET_CLASSES}")
        if self.budget < 1:
            raise ValueError("budget must be positive")
        if self.time_budget is not None and self.time_budget <= 0:
            raise ValueError("time budget must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.hallucination not in HALLUCINATIONS:
            raise ValueError(f"hallucination must be one of {HALLUCINATIONS}")
        if self.modifiers not in evo.MODIFIER_SUBSETS:
            raise ValueError(f"modifiers must be one of {sorted(evo.MODIFIER_SUBSETS)}")
        for name in ("nu_grid", "step_probabilities", "alpha_range", "beta_range", "noise_range"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        self.mutation_config()

    def mutation_config(self) -> evo.MutationConfig:
        return evo.MutationConfig(
            step_probabilities=self.step_probabilities,
            max_attempts=self.max_attempts,
            kinds=evo.MODIFIER_SUBSETS[self.modifiers],
            input_size=self.input_size,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields {sorted(extra)}")
        return cls(**d)


def schedule(t: int, c1: int = 20, cap: int = 500, n_mut_floor: int = 5):
    """``(n_ea, n_mut)`` for BO step ``t``: EA effort grows like sqrt(t)."""
    if t < 1:
        raise ValueError("t starts at 1")
    n_ea = min(cap, c1 * math.ceil(math.sqrt(t)))
    return n_ea, max(n_mut_floor, math.ceil(math.sqrt(n_ea)))


@dataclass
class EvalRecord:
    hash: str
    arch: ag.Architecture
    value: float
    timestamp: float
    worker: int
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class Pending:
    arch: ag.Architecture
    hallucinated: Optional[float] = None


@dataclass
class SearchState:
    evaluated: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    t: int = 0
    best: float = -math.inf
    best_arch: Optional[ag.Architecture] = None

    def hashes(self) -> set:
        return {r.hash for r in self.evaluated} | {p.arch.structural_hash for p in self.pending}

    def observations(self):
        ok = [r for r in self.evaluated if r.ok]
        return [r.arch for r in ok], np.array([r.value for r in ok], dtype=float)

    def record(self, rec: EvalRecord) -> None:
        self.evaluated.append(rec)
        self.pending = [p for p in self.pending if p.arch.structural_hash != rec.hash]
        if rec.ok and rec.value > self.best:
            self.best, self.best_arch = rec.value, rec.arch


def hallucinate(model: gp.GPModel, d_pending, d_bar_pending) -> np.ndarray:
    """Kriging believer: pending outcomes are the posterior mean."""
    mean, _ = model.predict(d_pending, d_bar_pending)
    return mean


class Searcher:
    """Proposal machinery for one run; owns the distance store and RNG."""

    def __init__(self, config: SearchConfig, rng=None):
        self.config = config
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.mutation = config.mutation_config()
        self.pool = initial_pool(config.net_class)
        self.params = DistanceParams(config.net_class, config.nu_grid)
        self.store = DistanceStore(self.params)
        self._last_hyper = None
        self._ea_queue = []
        self.gp_failures = 0

    # -- distances --------------------------------------------------------

    def _distances(self, cands, targets):
        """``(m, n, g)`` tensors from each candidate to each target."""
        g = len(self.config.nu_grid)
        d = np.empty((len(cands), len(targets), g))
        db = np.empty_like(d)
        t_idx = [self.store.add(a) for a in targets]
        full_d, full_db = self.store.tensors()
        t_feats = [self.store.features(a) for a in targets]
        for i, a in enumerate(cands):
            j = self.store.index.get(a.structural_hash)
            if j is not None:
                d[i] = full_d[j, t_idx]
                db[i] = full_db[j, t_idx]
            else:
                d[i], db[i] = self.store.distances_from(a, t_feats)
        return d, db

    # -- proposals --------------------------------------------------------

    def next_point(self, state: SearchState) -> ag.Architecture:
        taken = state.hashes()
        for a in self.pool:
            if a.structural_hash not in taken:
                return a
        state.t += 1
        method = self.config.method
        if method == "ea":
            arch = self._next_ea(state, taken)
        else:
            arch = self._next_acquisition(state, taken)
        if arch is None or arch.structural_hash in taken:
            arch = self._fresh_mutation(state, taken)
        return arch

    def _seeds(self, state):
        seen, out = set(), []
        for a in self.pool + [r.arch for r in state.evaluated] + [p.arch for p in state.pending]:
            if a.structural_hash not in seen:
                seen.add(a.structural_hash)
                out.append(a)
        return out

    def _next_acquisition(self, state, taken):
        cfg = self.config
        n_ea, n_mut = schedule(state.t, cfg.c1, cfg.cap, cfg.n_mut_floor)
        seeds = self._seeds(state)
        if cfg.method == "random":
            def g(archs):
                return self.rng.uniform(size=len(archs))
        else:
            try:
                g = self._acquisition(state)
            except gp.GPError as err:
                self.gp_failures += 1
                log.warning("GP fit failed (%s); falling back to a random mutation", err)
                return None
        res = evo.ea_maximize(g, seeds, len(seeds) + n_ea, n_mut, self.mutation, self.rng,
                              batched=True, exclude=taken)
        return res.best_arch

    def _acquisition(self, state) -> Callable:
        """Averaged EI over hyperparameter samples, as a batched function."""
        cfg = self.config
        xs, y = state.observations()
        if y.size == 0:
            return lambda archs: self.rng.uniform(size=len(archs))
        pend = [p.arch for p in state.pending]
        d, db = self._distances(xs, xs)
        box = gp.default_prior_box(d, db, y, cfg.alpha_range, cfg.beta_range, cfg.noise_range)
        targets = xs + pend
        feasible_on = None
        if pend:
            d_all, db_all = self._distances(targets, targets)
            d_p, db_p = d_all[len(xs):, :len(xs)], db_all[len(xs):, :len(xs)]
            feasible_on = (d_all, db_all)
        hypers = gp.sample_hypers(d, db, y, box, self.rng, cfg.n_hyper_samples,
                                  burn_in=cfg.mh_burn_in, thin=cfg.mh_thin, step=cfg.mh_step,
                                  init=self._last_hyper, feasible_on=feasible_on)
        if hypers:
            self._last_hyper = hypers[-1]
        models = []
        for h in hypers:
            # the distance kernel need not be PSD; samples that cannot be
            # factorised on the (augmented) training set are dropped
            try:
                if not pend:
                    models.append(gp.GPModel(d, db, y, h))
                    continue
                if cfg.hallucination == "kriging":
                    y_p = hallucinate(gp.GPModel(d, db, y, h), d_p, db_p)
                else:
                    y_p = np.full(len(pend), y.mean())
                models.append(gp.GPModel(d_all, db_all, np.concatenate([y, y_p]), h))
            except gp.GPError:
                log.debug("dropping hyperparameter sample %s", h)
        if not models:
            raise gp.GPError("no hyperparameter sample gives a usable kernel matrix")
        incumbent = float(y.max())

        def g(archs):
            dq, dbq = self._distances(archs, targets)
            total = np.zeros(len(archs))
            for m in models:
                mu, var = m.predict(dq, dbq)
                total += gp.ei_closed_form(mu, np.sqrt(var), incumbent)
            return total / len(models)

        return g

    def _next_ea(self, state, taken):
        """EA baseline: generations of ``ea_n_mut`` children of fitness-selected parents."""
        while self._ea_queue:
            arch = self._ea_queue.pop(0)
            if arch.structural_hash not in taken:
                return arch
        done = [(r.arch, r.value) for r in state.evaluated if r.ok]
        if not done:
            return None
        seen = set(taken)
        for parent in evo.select_candidates(done, self.config.ea_n_mut, self.rng):
            child = evo.mutate(parent, self.mutation, self.rng)
            if child.structural_hash not in seen:
                seen.add(child.structural_hash)
                self._ea_queue.append(child)
        return self._ea_queue.pop(0) if self._ea_queue else None

    def _fresh_mutation(self, state, taken):
        """Duplicate or failed proposal: mutate the incumbent until something new appears."""
        base = state.best_arch or self.pool[0]
        for _ in range(DUPLICATE_RETRIES):
            arch = evo.mutate(base, self.mutation, self.rng)
            if arch.structural_hash not in taken:
                return arch
        # forced: keep compounding single steps until the hash is new
        arch = base
        for _ in range(1000):
            arch = evo.mutate(arch, self.mutation, self.rng, steps=1)
            if arch.structural_hash not in taken:
                return arch
        raise RuntimeError("could not produce an unevaluated architecture")


def next_point(state: SearchState, config: SearchConfig, rng=None) -> ag.Architecture:
    """One proposal from a throwaway :class:`Searcher` (convenience wrapper)."""
    return Searcher(config, rng).next_point(state)


@dataclass
class RunResult:
    state: SearchState
    history: list
    n_failures: int
    out_dir: Optional[str] = None

    @property
    def best(self) -> float:
        return self.state.best

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (int, float, np.floating)) else str(x)


def history_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for r in rows:
        w.writerow([r["step"], r["arch"], _fmt(r["value"]), _fmt(r["best"]), _fmt(r["elapsed_s"])])
    return buf.getvalue()


def run(config: SearchConfig, out_dir=None, objective: Optional[Callable] = None) -> RunResult:
    """Run a search to its budget; optionally write the run directory.

    Synthetic objectives take one simulated time unit per evaluation; other
    objectives are charged their measured wall-clock duration.  Failed
    evaluations are recorded with value ``nan`` and an error sentinel.
    """
    synthetic = objective is None and not config.objective.startswith("external:")
    if objective is None:
        objective = obj.resolve(config.objective, config.net_class, config.timeout)
    searcher = Searcher(config)
    state = SearchState()
    history = []
    events = []
    free = list(range(config.workers))
    clock = 0.0
    dispatched = 0
    failures = 0
    seq = 0

    def can_dispatch():
        if dispatched >= config.budget:
            return False
        return config.time_budget is None or clock < config.time_budget

    while True:
        while free and can_dispatch():
            worker = free.pop(0)
            arch = searcher.next_point(state)
            state.pending.append(Pending(arch))
            started = time.perf_counter()
            try:
                value, error = float(objective(arch)), None
                if not math.isfinite(value):
                    value, error = math.nan, "nonfinite"
            except obj.ObjectiveError as err:
                value, error = math.nan, err.sentinel
            duration = 1.0 if synthetic else time.perf_counter() - started
            heapq.heappush(events, (clock + duration, seq, worker, arch, value, error))
            seq += 1
            dispatched += 1
        if not events:
            break
        clock, _, worker, arch, value, error = heapq.heappop(events)
        rec = EvalRecord(arch.structural_hash, arch, value, clock, worker, error)
        state.record(rec)
        failures += error is not None
        free.append(worker)
        free.sort()
        history.append({
            "step": len(history) + 1,
            "arch": rec.hash[:16],
            "value": value if error is None else f"nan:{error}",
            "best": state.best,
            "elapsed_s": clock,
        })

    result = RunResult(state, history, failures)
    if out_dir is not None:
        write_run_dir(result, config, searcher.pool, out_dir)
        result.out_dir = str(out_dir)
    return result


def write_run_dir(result: RunResult, config: SearchConfig, pool, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "pool"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "archs"), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(config.to_json() + "\n")
    for i, a in enumerate(pool):
        ag.save(a, os.path.join(out_dir, "pool", f"{i:02d}.json"))
    for r in result.state.evaluated:
        ag.save(r.arch, os.path.join(out_dir, "archs", f"{r.hash[:16]}.json"))
    with open(os.path.join(out_dir, "history.csv"), "w") as fh:
        fh.write(result.history_csv())
    if result.state.best_arch is not None:
        ag.save(result.state.best_arch, os.path.join(out_dir, "best.json"))
