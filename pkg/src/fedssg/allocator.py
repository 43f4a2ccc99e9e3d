"""Per-client synthetic-sample budgets from local class counts.

A client with counts ``n_c`` gets deficit weights
``w_c = max(n) - n_c + eps`` and a real-valued share
``S * w_c / sum(w)`` of its domain's budget ``S``. The integer plan
keeps the total at ``round(S)`` by floor + largest remainder.

This module only ever sees aggregate counts: its entry point accepts an
:class:`AllocationInput` and nothing else.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigError


@dataclass(frozen=True)
class AllocatorConfig:
    epsilon: float = 1.0
    domain_scales: tuple = (20.0, 50.0, 80.0)
    allow_scale_override: bool = False

    def __post_init__(self):
        object.__setattr__(self, "domain_scales", tuple(float(s) for s in self.domain_scales))
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if any(s < 0 for s in self.domain_scales):
            raise ConfigError("domain scales must be non-negative")


@dataclass(frozen=True)
class AllocationInput:
    per_class_counts: tuple
    domain_id: int
    epsilon: float = 1.0
    domain_scale: float = 0.0

    def __post_init__(self):
        counts = tuple(int(c) for c in self.per_class_counts)
        if not counts:
            raise ConfigError("per_class_counts must be non-empty")
        if min(counts) < 0:
            raise ConfigError("class counts must be non-negative")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.domain_scale < 0:
            raise ConfigError(f"domain scale must be non-negative, got {self.domain_scale}")
        object.__setattr__(self, "per_class_counts", counts)


@dataclass(frozen=True)
class AllocationPlan:
    per_class_synthetic: tuple
    real_valued_budget: tuple
    weights: tuple
    lam: float

    @property
    def total(self) -> int:
        return sum(self.per_class_synthetic)

    def to_dict(self) -> dict:
        return {
            "budgets": list(self.per_class_synthetic),
            "real_valued_budget": [float(x) for x in self.real_valued_budget],
            "weights": [float(x) for x in self.weights],
            "lambda": float(self.lam),
        }


def imbalance_weights(counts, epsilon: float) -> np.ndarray:
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    n = np.asarray(counts, dtype=np.float64)
    return n.max() - n + epsilon


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def largest_remainder(real: np.ndarray, total: int) -> np.ndarray:
    """Integerize ``real`` to sum exactly ``total``; ties go to the lower index."""
    base = np.floor(real).astype(np.int64)
    short = int(total - base.sum())
    if short < 0 or short > len(real):
        raise ConfigError(f"cannot integerize {real} to total {total}")
    frac = real - base
    # stable sort on -frac keeps lower indices first among equal remainders
    order = np.argsort(-frac, kind="stable")
    base[order[:short]] += 1
    return base


def synthetic_budget(inp: AllocationInput) -> AllocationPlan:
    if not isinstance(inp, AllocationInput):
        raise TypeError(f"synthetic_budget only accepts AllocationInput, got {type(inp).__name__}")
    w = imbalance_weights(inp.per_class_counts, inp.epsilon)
    total_w = float(w.sum())
    S = float(inp.domain_scale)
    # lam * w rather than S * w / sum(w): lam == 1 then returns w bit-exactly
    lam = S / total_w
    real = lam * w
    ints = largest_remainder(real, round_half_up(S))
    return AllocationPlan(tuple(int(v) for v in ints), tuple(real.tolist()), tuple(w.tolist()), lam)


def validate_domain_scales(domain_sizes, scales) -> list[tuple[int, int]]:
    """Pairs ``(i, j)`` with ``N_i > N_j`` but not ``S_i < S_j``; empty means ok."""
    sizes = list(domain_sizes)
    scales = list(scales)
    if len(sizes) != len(scales):
        raise ConfigError("domain_sizes and scales differ in length")
    violations = []
    for i in range(len(sizes)):
        for j in range(len(sizes)):
            if sizes[i] > sizes[j] and not scales[i] < scales[j]:
                violations.append((i, j))
    return violations


def plan_dump(client_id: int, inp: AllocationInput, plan: AllocationPlan) -> str:
    rec = {"client": client_id, "domain": inp.domain_id, "counts": list(inp.per_class_counts),
           "epsilon": inp.epsilon, "scale": inp.domain_scale}
    rec.update(plan.to_dict())
    return json.dumps(rec, sort_keys=True)
