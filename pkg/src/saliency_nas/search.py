"""Population sampling and budget-constrained architecture search."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cost import cost_report
from .data import SaliencyDataset
from .rng import stream
from .space import ArchConfig, SearchSpace, mutate, sample_subnet
from .store import ParameterStore

Evaluator = Callable[[ArchConfig], float]


class BudgetError(ValueError):
    """Budget cannot admit even the smallest subnet."""


@dataclass(frozen=True)
class Budget:
    max_flops: float = math.inf
    max_params: float = math.inf

    def admits(self, flops: int, params: int) -> bool:
        return flops <= self.max_flops and params <= self.max_params


@dataclass(frozen=True)
class Candidate:
    index: int
    config: ArchConfig
    flops: int
    params: int
    score: float | None = None

    def to_record(self) -> dict:
        return {"index": self.index, "flops": self.flops, "params": self.params, "score": self.score,
                "config": self.config.to_dict()}


def _costs(config: ArchConfig, space: SearchSpace, scope: str) -> tuple[int, int]:
    r = cost_report(config, scope=scope, space=space)
    return r.flops, r.params


def _fix_resolution(config: ArchConfig, resolution) -> ArchConfig:
    return config if resolution is None else replace(config, resolution=tuple(resolution))


# ------------------------------------------------------------------ population
def sample_population(space: SearchSpace, n: int, seed: int = 0, resolution=None, scope: str = "full",
                      evaluator: Evaluator | None = None, force: str | None = None) -> list[Candidate]:
    """``n`` uniform-random subnets with costs (and scores if ``evaluator``).

    ``resolution=None`` keeps each subnet's sampled resolution; a fixed
    (H, W) overrides it. ``force="min"``/``"max"`` makes the first row that
    extreme config.
    """
    if n < 1:
        raise ValueError(f"population size must be >= 1, got {n}")
    rng = stream(seed, "population")
    rows = []
    for i in range(n):
        mode = force if (i == 0 and force) else "uniform-random"
        c = _fix_resolution(sample_subnet(space, mode, rng), resolution)
        flops, params = _costs(c, space, scope)
        rows.append(Candidate(i, c, flops, params, evaluator(c) if evaluator else None))
    return rows


def population_csv(rows: list[Candidate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("flops", "params", "score"))
    for r in rows:
        w.writerow((r.flops, r.params, "" if r.score is None else repr(r.score)))
    return buf.getvalue()


# ------------------------------------------------------------------ search
@dataclass
class SearchResult:
    best: Candidate
    trace: list[Candidate]
    rejected: int = 0
    method: str = "random"

    def trace_lines(self) -> str:
        return "".join(json.dumps(c.to_record()) + "\n" for c in self.trace)


def constrained_search(space: SearchSpace, budget: Budget, evaluator: Evaluator, n_trials: int = 100,
                       seed: int = 0, method: str = "random", scope: str = "full", resolution=None,
                       population: int = 32, tournament: int = 4,
                       max_attempts: int | None = None) -> SearchResult:
    """Best-scoring subnet whose cost fits ``budget``.

    Over-budget candidates are discarded before evaluation. The min and max
    configs are always proposed first; ``method="random"`` then samples
    uniformly, ``method="evolution"`` runs tournament selection with
    one-dimension mutations. Score ties go to the lowest trace index.
    """
    if method not in ("random", "evolution"):
        raise ValueError(f"unknown search method {method!r}")
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    lo = _fix_resolution(sample_subnet(space, "min"), resolution)
    lo_flops, lo_params = _costs(lo, space, scope)
    if not budget.admits(lo_flops, lo_params):
        raise BudgetError(f"budget (flops<={budget.max_flops}, params<={budget.max_params}) is below the "
                          f"min-config cost (flops={lo_flops}, params={lo_params})")
    rng = stream(seed, f"search/{method}")
    max_attempts = max_attempts or 100 * n_trials
    trace: list[Candidate] = []
    seen: set[str] = set()
    rejected = 0
    attempts = 0

    def consider(c: ArchConfig) -> Candidate | None:
        nonlocal rejected
        flops, params = _costs(c, space, scope)
        if not budget.admits(flops, params):
            rejected += 1
            return None
        key = c.key()
        if key in seen:
            return None
        seen.add(key)
        cand = Candidate(len(trace), c, flops, params, float(evaluator(c)))
        trace.append(cand)
        return cand

    for mode in ("min", "max"):
        if len(trace) < n_trials:
            consider(_fix_resolution(sample_subnet(space, mode), resolution))
    pool = list(trace)
    while len(trace) < n_trials and attempts < max_attempts:
        attempts += 1
        if method == "evolution" and len(pool) >= population:
            picks = rng.choice(len(pool), size=min(tournament, len(pool)), replace=False)
            parent = max((pool[i] for i in sorted(picks)), key=lambda x: (x.score, -x.index))
            c = _fix_resolution(mutate(space, parent.config, rng), resolution)
        else:
            c = _fix_resolution(sample_subnet(space, "uniform-random", rng), resolution)
        cand = consider(c)
        if cand is not None and method == "evolution":
            pool.append(cand)
            if len(pool) > population:
                worst = min(range(len(pool)), key=lambda i: (pool[i].score, -pool[i].index))
                pool.pop(worst)
    best = max(trace, key=lambda x: (x.score, -x.index))
    return SearchResult(best, trace, rejected, method)


# ------------------------------------------------------------------ evaluator
@dataclass
class FinetuneEvaluator:
    """Validation CC of a subnet after a few SGD steps on a private store copy."""

    store: ParameterStore
    train: SaliencyDataset
    val: SaliencyDataset
    steps: int = 4
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    calls: int = field(default=0, init=False)

    def __call__(self, config: ArchConfig) -> float:
        from .network import build_network
        from .tensor import backward
        from . import losses, trainer

        config = replace(config, resolution=tuple(self.train.resolution))
        local = self.store.copy()
        net = build_network(config, local).train()
        velocity: dict[str, np.ndarray] = {}
        rng = stream(self.seed, f"finetune/{config.key()}")
        done = 0
        while done < self.steps:
            for x, g, f in trainer.train_batches(self.train, self.batch_size, rng):
                local.zero_grad()
                backward(losses.combined_loss(net.forward(x), g, f))
                trainer.sgd_momentum_step(local.params, velocity, self.lr, self.momentum)
                done += 1
                if done >= self.steps:
                    break
        trainer.recalibrate_bn(net, self.train, self.batch_size)
        _, cc = trainer.evaluate_loss(net, self.val, self.batch_size)
        self.calls += 1
        return float(cc) if np.isfinite(cc) else -1.0
