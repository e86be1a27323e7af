"""Block-wise evolutionary search over quantization scales.

For every pass and every attention block a fresh population is built from the
block's current scale vector, then ``cycles`` rounds of
select-parent / mutate / evaluate / cull run, and the fittest member is
installed back into the block.

Randomness: each (pass, block, cycle) draws from its own generator seeded
with ``SeedSequence([seed, 0x5EA, pass, block, cycle + 1])``; entropy word 0
is the population-initialization stream.
"""
from __future__ import annotations

import contextlib
import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from .losses import Fitness, LossKind
from .model import ScaleVector, ViT

MIN_SCALE = np.float32(1e-8)
TRACE_COLUMNS = ("pass", "block", "cycle", "candidate_id", "fitness", "wall_ms")


def default_gamma(bits_weights: int) -> float:
    return 1e-3 if bits_weights >= 8 else 1e-4


@dataclass(frozen=True)
class SearchConfig:
    passes: int = 10
    cycles: int = 3
    population: int = 15
    samples: int = 10
    gamma: float = 1e-3
    seed: int = 0
    loss: LossKind = LossKind()
    batch_size: int = 32
    init_jitter: bool = False
    relative: bool = False
    search_activations: bool = True

    def __post_init__(self):
        for name in ("population", "samples", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # 0 passes / cycles are allowed and mean "no search".
        if self.passes < 0 or self.cycles < 0:
            raise ValueError("passes and cycles must be >= 0")
        if not self.gamma > 0:
            raise ValueError(f"mutation range gamma must be positive, got {self.gamma}")

    def to_dict(self) -> dict:
        return {
            "passes": self.passes, "cycles": self.cycles, "population": self.population,
            "samples": self.samples, "gamma": self.gamma, "seed": self.seed,
            "loss": self.loss.tag, "tau": self.loss.tau, "normalize": self.loss.normalize,
            "batch_size": self.batch_size, "init_jitter": self.init_jitter,
            "relative": self.relative, "search_activations": self.search_activations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        loss = LossKind(d.pop("loss"), d.pop("tau"), d.pop("normalize"))
        return cls(loss=loss, **d)


@dataclass(eq=False)
class Candidate:
    scales: ScaleVector
    fitness: float
    birth_cycle: int
    cid: int


class Population:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.members: list[Candidate] = []
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.members)

    def insert(self, scales: ScaleVector, fitness: float, birth_cycle: int) -> Candidate:
        c = Candidate(scales, float(fitness), birth_cycle, self._next_id)
        self._next_id += 1
        self.members.append(c)
        return c

    def best(self) -> Candidate:
        return best_of(self.members)

    def delete_dead(self) -> Candidate:
        """Drop the least fit member; ties remove the oldest first."""
        worst = min(self.members, key=lambda c: (c.fitness, c.birth_cycle, c.cid))
        self.members.remove(worst)
        return worst


def best_of(cands) -> Candidate:
    """Highest fitness; ties go to the earliest birth cycle, then insertion order."""
    return max(cands, key=lambda c: (c.fitness, -c.birth_cycle, -c.cid))


def sample_and_select(pop: Population, samples: int, rng: np.random.Generator) -> Candidate:
    """Tournament: ``samples`` uniform draws with replacement, keep the fittest."""
    if not len(pop):
        raise ValueError("cannot sample from an empty population")
    idx = rng.integers(0, len(pop), size=samples)
    return best_of(pop.members[i] for i in idx)


def mutate(parent: ScaleVector, gamma: float, rng: np.random.Generator, relative: bool = False) -> ScaleVector:
    """Add independent U(-gamma, gamma) noise to every scale.

    The float32 result is kept within ``gamma`` (``gamma * parent`` in relative
    mode) of the parent and floored at ``MIN_SCALE``.
    """
    base = parent.values.astype(np.float64)
    u = rng.uniform(-gamma, gamma, size=base.shape)
    bound = gamma * np.abs(base) if relative else np.full(base.shape, gamma)
    child64 = base * (1.0 + u) if relative else base + u
    child = child64.astype(np.float32)
    over = np.abs(child.astype(np.float64) - base) > bound
    if over.any():
        child[over] = np.nextafter(child[over], parent.values[over])
    return parent.replace_values(np.maximum(child, MIN_SCALE))


def rng_for(seed: int, pass_idx: int, block: int, cycle: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5EA, pass_idx, block, cycle + 1]))


class SearchTarget:
    """What the search manipulates: per-block scale vectors and a global score."""

    num_blocks: int = 0

    def get_scales(self, b: int) -> ScaleVector:
        raise NotImplementedError

    def set_scales(self, b: int, sv: ScaleVector) -> None:
        raise NotImplementedError

    def evaluate(self) -> float:
        raise NotImplementedError

    def scope(self, b: int):
        """Context active while block ``b`` is searched."""
        return contextlib.nullcontext()


class ModelTarget(SearchTarget):
    """A fake-quant model scored by a :class:`Fitness` evaluator."""

    def __init__(self, model: ViT, fitness: Fitness, search_activations: bool = True):
        self.model = model
        self.fitness = fitness
        self.search_activations = search_activations
        self.num_blocks = model.config.num_blocks

    def get_scales(self, b: int) -> ScaleVector:
        return self.model.get_scales(b, include_activations=self.search_activations)

    def set_scales(self, b: int, sv: ScaleVector) -> None:
        self.model.set_scales(b, sv)

    def evaluate(self) -> float:
        return self.fitness()

    @contextlib.contextmanager
    def scope(self, b: int) -> Iterator[None]:
        # Blocks before b are fixed while b is searched: reuse their output.
        self.fitness.cache_prefix(b)
        try:
            yield
        finally:
            self.fitness.cache_prefix(None)


@dataclass(frozen=True)
class TraceRow:
    pass_idx: int
    block: int
    cycle: int
    candidate_id: int
    fitness: float
    wall_ms: float = 0.0


@dataclass
class SearchTrace:
    rows: list[TraceRow] = field(default_factory=list)
    initial_fitness: float | None = None
    final_fitness: float | None = None
    # (pass, block, fitness of the installed scales at block start, at block end)
    blocks: list[tuple[int, int, float, float]] = field(default_factory=list)

    def to_csv(self, timing: bool = False, header_comment: str | None = None) -> str:
        out = io.StringIO()
        if header_comment:
            out.write(f"# {header_comment}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.pass_idx, r.block, r.cycle, r.candidate_id,
                        repr(float(r.fitness)), f"{r.wall_ms:.3f}" if timing else "0"])
        return out.getvalue()


Observer = Callable[[int, int, int, Population], None]


def init_population(initial: ScaleVector, size: int, evaluate: Callable[[ScaleVector], float],
                    gamma: float, rng: np.random.Generator, jitter: bool = False,
                    relative: bool = False) -> Population:
    """Literal mode: ``size`` copies of ``initial`` sharing its fitness.

    The model is deterministic, so the copies are scored once. In jitter mode
    the copies after the first are mutated and scored individually.
    """
    pop = Population(size)
    base_fit = evaluate(initial)
    pop.insert(initial, base_fit, 0)
    while len(pop) < size:
        if jitter:
            sv = mutate(initial, gamma, rng, relative)
            pop.insert(sv, evaluate(sv), 0)
        else:
            pop.insert(initial, base_fit, 0)
    return pop


def search_block(target: SearchTarget, b: int, cfg: SearchConfig, pass_idx: int = 0,
                 trace: SearchTrace | None = None, observer: Observer | None = None,
                 timing: bool = False) -> Candidate:
    """Evolve block ``b``'s scales for ``cfg.cycles`` cycles; install and return the best."""
    clock = time.perf_counter
    initial = target.get_scales(b)
    with target.scope(b):
        def evaluate(sv: ScaleVector, cycle: int, cid: int) -> float:
            t0 = clock()
            target.set_scales(b, sv)
            fit = target.evaluate()
            if trace is not None:
                ms = (clock() - t0) * 1000.0 if timing else 0.0
                trace.rows.append(TraceRow(pass_idx, b, cycle, cid, fit, ms))
            return fit

        init_rng = rng_for(cfg.seed, pass_idx, b, -1)
        counter = iter(range(cfg.population))
        pop = init_population(initial, cfg.population, lambda sv: evaluate(sv, -1, next(counter)),
                              cfg.gamma, init_rng, cfg.init_jitter, cfg.relative)
        start_fit = pop.members[0].fitness
        if observer is not None:
            observer(pass_idx, b, -1, pop)
        for cycle in range(cfg.cycles):
            rng = rng_for(cfg.seed, pass_idx, b, cycle)
            parent = sample_and_select(pop, cfg.samples, rng)
            child = mutate(parent.scales, cfg.gamma, rng, cfg.relative)
            fit = evaluate(child, cycle, pop._next_id)
            pop.insert(child, fit, cycle + 1)
            pop.delete_dead()
            if observer is not None:
                observer(pass_idx, b, cycle, pop)
        best = pop.best()
        target.set_scales(b, best.scales)
    if trace is not None:
        trace.blocks.append((pass_idx, b, start_fit, best.fitness))
    return best


def run_search(target: SearchTarget, cfg: SearchConfig, observer: Observer | None = None,
               timing: bool = False) -> SearchTrace:
    """``cfg.passes`` sweeps of :func:`search_block` over blocks 0..N-1 in order."""
    trace = SearchTrace()
    trace.initial_fitness = target.evaluate()
    final = trace.initial_fitness
    for k in range(cfg.passes):
        for b in range(target.num_blocks):
            final = search_block(target, b, cfg, k, trace, observer, timing).fitness
    trace.final_fitness = final
    return trace


def build_target(model_q: ViT, calib, cfg: SearchConfig, threads: int | None = None) -> ModelTarget:
    """Wrap a calibrated model copy for searching against its own FP view."""
    model = model_q.copy()
    model_f = model.full_precision()
    ds = calib.batched(cfg.batch_size, cfg.seed)
    fit = Fitness(model, model_f, ds, cfg.loss, threads)
    return ModelTarget(model, fit, cfg.search_activations)


def run(model_q: ViT, calib, cfg: SearchConfig, threads: int | None = None,
        observer: Observer | None = None, timing: bool = False) -> tuple[ViT, SearchTrace]:
    """Search a copy of ``model_q`` on ``calib``; the input model is left untouched.

    The batch partition of ``calib`` is drawn from ``cfg.seed``.
    """
    target = build_target(model_q, calib, cfg, threads)
    trace = run_search(target, cfg, observer, timing)
    return target.model, trace


def with_gamma_for(cfg: SearchConfig, bits_weights: int) -> SearchConfig:
    return replace(cfg, gamma=default_gamma(bits_weights))
