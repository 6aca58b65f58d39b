"""Search over ternary phase assignments: a genetic algorithm and a brute-force oracle.

An individual is a tuple of phase letters, one per unit, in a fixed unit order.
"""

from __future__ import annotations

import csv
import itertools
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from derphase.errors import ValidationError
from derphase.netmodel import PHASES

logger = logging.getLogger(__name__)

Individual = tuple[str, ...]
FitnessFn = Callable[[Individual], float]

EXHAUSTIVE_CAP = 3 ** 12


@dataclass(frozen=True)
class GaConfig:
    population: int = 50
    generations: int = 200
    crossover_rate: float = 0.8
    mutation_rate: float | None = None  # None -> 1 / n_units per gene
    elite_count: int = 2
    seed: int = 0
    stall_generations: int = 30
    tournament_size: int = 3

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValidationError("population must be >= 2")
        if not 0 <= self.elite_count < self.population:
            raise ValidationError("elite_count must be in [0, population)")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if rate is not None and not 0 <= rate <= 1:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.generations < 0 or self.stall_generations < 1 or self.tournament_size < 1:
            raise ValidationError("generations, stall_generations and tournament_size out of range")


def _initial_population(seed: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    # Each gene column of the random part cycles through the two other phases
    # first, so every phase value is present for every gene when size >= 3.
    n = seed.size
    pop = np.empty((size, n), dtype=np.int8)
    pop[0] = seed
    k = size - 1
    if k:
        offsets = (np.arange(k)[:, None] + 1) % 3
        cols = (seed[None, :] + offsets) % 3
        for g in range(n):
            rng.shuffle(cols[:, g])
        pop[1:] = cols
    return pop


def ga_minimize(n_units: int, fitness: FitnessFn, config: GaConfig, seed_individual: Sequence[str],
                trace: list[tuple[int, float, float]] | None = None) -> tuple[Individual, float]:
    """Minimize ``fitness`` over ``{a,b,c}^n_units`` with a generational GA.

    Tournament selection, uniform crossover, per-gene mutation and elitism. The
    population is seeded with ``seed_individual``; the best individual ever
    evaluated is returned, so the result is never worse than the seed. Fitness
    values are cached per individual.
    """
    if n_units < 1:
        raise ValidationError("n_units must be >= 1")
    if len(seed_individual) != n_units or any(p not in PHASES for p in seed_individual):
        raise ValidationError("seed_individual must assign a phase to every unit")
    rng = np.random.default_rng(config.seed)
    mutation = config.mutation_rate if config.mutation_rate is not None else 1.0 / n_units
    cache: dict[bytes, float] = {}

    def evaluate(pop: np.ndarray) -> np.ndarray:
        out = np.empty(len(pop))
        for i, ind in enumerate(pop):
            key = ind.tobytes()
            if key not in cache:
                cache[key] = float(fitness(tuple(PHASES[g] for g in ind)))
            out[i] = cache[key]
        return out

    seed = np.array([PHASES.index(p) for p in seed_individual], dtype=np.int8)
    pop = _initial_population(seed, config.population, rng)
    scores = evaluate(pop)
    best_i = int(np.argmin(scores))
    best, best_cost = pop[best_i].copy(), float(scores[best_i])
    if trace is not None:
        trace.append((0, best_cost, float(scores.mean())))
    stall = 0
    for gen in range(1, config.generations + 1):
        ranking = np.argsort(scores, kind="stable")
        children = [pop[i].copy() for i in ranking[: config.elite_count]]
        while len(children) < config.population:
            a = _tournament(scores, config.tournament_size, rng)
            b = _tournament(scores, config.tournament_size, rng)
            child = pop[a].copy()
            if rng.random() < config.crossover_rate:
                take = rng.random(n_units) < 0.5
                child[take] = pop[b][take]
            flip = rng.random(n_units) < mutation
            if flip.any():
                child[flip] = (child[flip] + rng.integers(1, 3, size=int(flip.sum()))) % 3
            children.append(child)
        pop = np.array(children, dtype=np.int8)
        scores = evaluate(pop)
        i = int(np.argmin(scores))
        if scores[i] < best_cost:
            best, best_cost = pop[i].copy(), float(scores[i])
            stall = 0
        else:
            stall += 1
        if trace is not None:
            trace.append((gen, best_cost, float(scores.mean())))
        if stall >= config.stall_generations:
            logger.debug("GA stalled after %d generations", gen)
            break
    logger.debug("GA evaluated %d distinct individuals", len(cache))
    return tuple(PHASES[g] for g in best), best_cost


def _tournament(scores: np.ndarray, size: int, rng: np.random.Generator) -> int:
    entrants = rng.integers(0, scores.size, size=size)
    return int(entrants[np.argmin(scores[entrants])])


def exhaustive_minimize(n_units: int, fitness: FitnessFn, cap: int = EXHAUSTIVE_CAP) -> tuple[Individual, float]:
    """Evaluate every assignment in lexicographic order; first minimum wins ties."""
    if n_units < 1:
        raise ValidationError("n_units must be >= 1")
    if 3 ** n_units > cap:
        raise ValidationError(f"3^{n_units} assignments exceed the exhaustive cap of {cap}")
    best: Individual | None = None
    best_cost = float("inf")
    for ind in itertools.product(PHASES, repeat=n_units):
        cost = float(fitness(ind))
        if best is None or cost < best_cost:
            best, best_cost = ind, cost
    return best, best_cost


def write_trace(trace: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_cost", "mean_cost"])
        for gen, best, mean in trace:
            w.writerow([gen, repr(best), repr(mean)])
