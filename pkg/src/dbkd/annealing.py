"""Simulated annealing over a trigger search space, maximizing cASR.

The schedule T(k) = eps * (1/(k+eps) - 1/(s+eps)) decays from a high
exploratory temperature to exactly zero at the final step. A worsening move
is accepted with probability exp(delta/T); an improving move is always
accepted. The incumbent best trigger, not the final one, is returned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ConfigInvalid, DbkdError
from .objective import ObjectiveConfig, TargetLabelFn, casr
from .oracle import ModelOracle
from .tensors import RandomSource, ValidationBatch
from .triggers import SearchSpaceConfig, Trigger, random_neighbor_with_move, random_trigger


@dataclass(frozen=True)
class AnnealConfig:
    steps: int = 10_000
    epsilon: float = 10.0  # schedule shape; smaller decays faster
    seed: int = 0
    # Recompute the incumbent's cASR every step instead of caching it.
    # The oracle is pure, so caching is semantically identical and halves
    # the query cost; the flag restores the literal two-query loop.
    recompute_current: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigInvalid("steps must be >= 1")
        if self.epsilon <= 0:
            raise ConfigInvalid("epsilon must be > 0")


@dataclass(frozen=True)
class AnnealStep:
    k: int
    temperature: float
    casr_current: float  # incumbent value after this step's accept decision
    casr_new: float      # the evaluated neighbor's value
    accepted: bool
    move: str


@dataclass
class AnnealTrace:
    initial_casr: float
    steps: list[AnnealStep] = field(default_factory=list)

    def current_values(self) -> list[float]:
        return [self.initial_casr] + [s.casr_current for s in self.steps]


class AnnealingAborted(DbkdError):
    """An oracle error stopped the run; carries the partial trace."""

    def __init__(self, cause: Exception, trace: AnnealTrace):
        super().__init__(f"annealing aborted: {cause}")
        self.cause = cause
        self.trace = trace


def temperature(k: int, s: int, eps: float) -> float:
    """Schedule value at step k of s; exactly zero at k = s."""
    return eps * (1.0 / (k + eps) - 1.0 / (s + eps))


def accept(delta_c: float, t: float, rng: RandomSource) -> bool:
    """Metropolis-style acceptance: improvements always, otherwise e^(d/T)."""
    if delta_c > 0:
        return True
    if t <= 0.0:
        return False
    p = math.exp(delta_c / t)
    return p >= rng.random()


def run_annealing(oracle: ModelOracle, batch: ValidationBatch,
                  space: SearchSpaceConfig, fn: TargetLabelFn,
                  obj: ObjectiveConfig, cfg: AnnealConfig,
                  ) -> tuple[Trigger, float, AnnealTrace]:
    """Search the space for cfg.steps iterations; returns the best-ever trigger.

    Queries the oracle once per step (plus one initial evaluation) unless
    cfg.recompute_current is set. Oracle failures raise AnnealingAborted
    with the partial trace attached.
    """
    space = space.for_shape(batch.image_shape)
    rng = RandomSource(cfg.seed)
    current = random_trigger(space, rng)
    try:
        c_current = casr(oracle, batch, current, fn, obj)
    except DbkdError as exc:
        raise AnnealingAborted(exc, AnnealTrace(initial_casr=math.nan)) from exc
    trace = AnnealTrace(initial_casr=c_current)
    best, best_c = current, c_current
    for k in range(1, cfg.steps + 1):
        t = temperature(k, cfg.steps, cfg.epsilon)
        neighbor, move = random_neighbor_with_move(current, space, rng)
        try:
            if cfg.recompute_current:
                c_current = casr(oracle, batch, current, fn, obj)
            c_new = casr(oracle, batch, neighbor, fn, obj)
        except DbkdError as exc:
            raise AnnealingAborted(exc, trace) from exc
        took = accept(c_new - c_current, t, rng)
        if took:
            current, c_current = neighbor, c_new
        if c_current > best_c:
            best, best_c = current, c_current
        trace.steps.append(AnnealStep(k, t, c_current, c_new, took, move))
    return best, best_c, trace


def write_trace_jsonl(path, trace: AnnealTrace) -> None:
    """One JSON record per step: k, T, cASR_current, cASR_new, accepted, move."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"k": 0, "T": None, "cASR_current": trace.initial_casr,
                             "cASR_new": None, "accepted": None, "move": "init"}) + "\n")
        for s in trace.steps:
            fh.write(json.dumps({"k": s.k, "T": s.temperature,
                                 "cASR_current": s.casr_current,
                                 "cASR_new": s.casr_new,
                                 "accepted": s.accepted, "move": s.move}) + "\n")
