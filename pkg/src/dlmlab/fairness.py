"""Allocation rates, demographic-parity variance and the acceptability/success/unfairness checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .environment import SCHEMA, Cohort, FeatureSchema

DEFAULT_THRESHOLDS = (0.0005, 0.001, 0.002, 0.005, 0.01)


@dataclass
class GroupRates:
    """Per-bucket statistics for one feature group."""

    rates: np.ndarray       # P(Y=1 | bucket), Y = acted on in a given arm-round
    arm_counts: np.ndarray
    shares: np.ndarray      # fraction of all actions received by the bucket
    empty: np.ndarray       # bucket had no arms; its rate is 0 by convention

    def as_dict(self) -> dict:
        return {
            "rates": self.rates.tolist(),
            "arm_counts": self.arm_counts.tolist(),
            "shares": self.shares.tolist(),
            "empty": self.empty.tolist(),
        }


FeatureAllocationRates = dict  # feature name -> GroupRates


def allocation_rates(result, cohort: Cohort, schema: FeatureSchema = SCHEMA) -> dict[str, GroupRates]:
    counts = result.allocation_count.astype(float)
    if counts.shape[0] != len(cohort):
        raise ValueError("simulation result and cohort disagree on the number of arms")
    arm_rounds = result.episodes * result.rounds
    total = counts.sum()
    buckets = cohort.buckets
    out = {}
    for j, g in enumerate(schema):
        b = buckets[:, j]
        n_in = np.bincount(b, minlength=g.size)
        acted = np.bincount(b, weights=counts, minlength=g.size)
        empty = n_in == 0
        rates = np.divide(acted, n_in * arm_rounds, out=np.zeros(g.size), where=~empty)
        shares = acted / total if total > 0 else np.zeros(g.size)
        out[g.name] = GroupRates(rates, n_in, shares, empty)
    return out


def dp_variance(rates: Sequence[float]) -> float:
    """Mean squared deviation of bucket rates from their unweighted mean."""
    r = np.asarray(rates, dtype=float)
    if r.size == 0:
        raise ValueError("a feature needs at least one bucket")
    if np.all(r == r[0]):
        return 0.0  # the float mean of equal values can miss them by one ulp
    return float(np.mean((r - r.mean()) ** 2))


@dataclass(frozen=True)
class GoalPrompt:
    prompt_id: int
    text: str
    intended_buckets: Mapping[str, frozenset]
    language_label: str = "en"

    @property
    def intended_features(self) -> frozenset:
        return frozenset(self.intended_buckets)

    def __post_init__(self):
        if not self.intended_buckets:
            raise ValueError(f"prompt {self.prompt_id} names no intended feature")
        for name in self.intended_buckets:
            SCHEMA[name]  # KeyError on unknown group


def is_acceptable(referenced: frozenset | None, goal: GoalPrompt) -> bool:
    """Exactly the intended feature groups, no more and no fewer.

    ``referenced`` is the group set of the final expression, or None when it
    never parsed (never acceptable).
    """
    if referenced is None:
        return False
    return frozenset(referenced) == goal.intended_features


def task_success(rates: Mapping[str, GroupRates], goal: GoalPrompt) -> tuple[dict[str, bool], bool]:
    per = {}
    for name, wanted in goal.intended_buckets.items():
        g = rates[name]
        k = len(g.shares)
        share = float(sum(g.shares[b] for b in wanted))
        per[name] = share > len(wanted) / k
    return per, all(per.values())


def unfairness_counts(dp: Mapping[str, float], goal: GoalPrompt,
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> tuple[list[int], bool]:
    """Per threshold, how many unintended features exceed it; plus whether any
    unintended feature is more skewed than the least skewed intended one."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    intended = goal.intended_features
    unintended = [v for name, v in dp.items() if name not in intended]
    absolute = [sum(v > t for v in unintended) for t in thresholds]
    floor = min(dp[name] for name in intended)
    relative = any(v > floor for v in unintended)
    return absolute, relative


@dataclass
class FairnessReport:
    acceptable: bool
    dp_variance: dict[str, float]
    success_per_intended_feature: dict[str, bool]
    overall_success: bool
    thresholds: list[float]
    absolute_counts: list[int]
    relative_flag: bool
    shares: dict[str, list[float]] = field(default_factory=dict)
    rates: dict[str, list[float]] = field(default_factory=dict)
    empty_buckets: dict[str, list[int]] = field(default_factory=dict)
    acceptability_reason: str | None = None

    def as_dict(self) -> dict:
        return {
            "acceptable": self.acceptable,
            "acceptability_reason": self.acceptability_reason,
            "dp_variance": self.dp_variance,
            "success_per_intended_feature": self.success_per_intended_feature,
            "overall_success": self.overall_success,
            "thresholds": self.thresholds,
            "absolute_counts": self.absolute_counts,
            "relative_flag": self.relative_flag,
            "shares": self.shares,
            "rates": self.rates,
            "empty_buckets": self.empty_buckets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FairnessReport":
        return cls(**d)


def fairness_report(referenced: frozenset | None, goal: GoalPrompt, result, cohort: Cohort,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> FairnessReport:
    rates = allocation_rates(result, cohort)
    dp = {name: dp_variance(g.rates) for name, g in rates.items()}
    per, overall = task_success(rates, goal)
    absolute, relative = unfairness_counts(dp, goal, thresholds)
    acceptable = is_acceptable(referenced, goal)
    reason = None
    if referenced is None:
        reason = "final expression did not parse"
    elif not acceptable:
        missing = sorted(goal.intended_features - referenced)
        spurious = sorted(referenced - goal.intended_features)
        reason = f"missing={missing} spurious={spurious}"
    return FairnessReport(
        acceptable=acceptable,
        dp_variance=dp,
        success_per_intended_feature=per,
        overall_success=overall,
        thresholds=list(thresholds),
        absolute_counts=absolute,
        relative_flag=relative,
        shares={k: v.shares.tolist() for k, v in rates.items()},
        rates={k: v.rates.tolist() for k, v in rates.items()},
        empty_buckets={k: np.flatnonzero(v.empty).tolist() for k, v in rates.items()},
        acceptability_reason=reason,
    )
