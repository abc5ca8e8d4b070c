"""Synthetic beneficiary cohorts.

Continuous latent scores are drawn from a small structural causal model,
projected onto discrete feature buckets, one-hot encoded into the 34-slot
vector the reward expressions index, and turned into two-state transition
models whose active/passive gap depends on a weighted sum of the buckets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1


class InvalidParameter(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    labels: tuple[str, ...]
    start: int

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def slots(self) -> range:
        return range(self.start, self.start + self.size)


class FeatureSchema:
    """Ordered feature groups laid out contiguously over the slot vector."""

    def __init__(self, groups: Sequence[tuple[str, Sequence[str]]]):
        out = []
        start = 0
        for name, labels in groups:
            out.append(FeatureGroup(name, tuple(labels), start))
            start += len(labels)
        self.groups: tuple[FeatureGroup, ...] = tuple(out)
        self.n_slots = start
        self._by_name = {g.name: g for g in self.groups}
        self._slot_group = np.empty(start, dtype=np.int64)
        for i, g in enumerate(self.groups):
            self._slot_group[g.start:g.start + g.size] = i

    def __getitem__(self, name: str) -> FeatureGroup:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.groups)

    def group_of_slot(self, slot: int) -> str:
        if not 0 <= slot < self.n_slots:
            raise EncodingError(f"slot {slot} outside 0..{self.n_slots - 1}")
        return self.groups[self._slot_group[slot]].name

    def slot_labels(self) -> list[str]:
        return [label for g in self.groups for label in g.labels]


# Slot order and labels follow the feature list given to the LLM.
SCHEMA = FeatureSchema([
    ("Age", ["Ages 10-20", "Ages 21-30", "Ages 31-40", "Ages 41-50", "Ages 51-60"]),
    ("Language_Spoken", ["Speaks Hindi", "Speaks Marathi", "Speaks Gujarati",
                         "Speaks Kannada", "Speaks Tamil"]),
    ("Education_Level", ["Education level 1/7 -- Illiterate",
                         "Education level 2/7 -- 1-5th Grade Completed",
                         "Education level 3/7 -- 6-9th Grade Completed",
                         "Education level 4/7 -- 10th Grade Passed",
                         "Education level 5/7 -- 12th Grade Passed",
                         "Education level 6/7 -- Graduate",
                         "Education level 7/7 -- Post Graduate"]),
    ("Phone_Ownership", ["Phone owner 0 (e.g., woman)", "Phone owner 1 (e.g., husband)",
                         "Phone owner 2 (e.g., family)"]),
    ("Times_To_Be_Called", ["To be called from 8:30 am - 10:30 am",
                            "To be called from 10:30 am - 12:30 pm",
                            "To be called from 12:30 pm - 3:30 pm",
                            "To be called from 3:30 pm - 5:30 pm",
                            "To be called from 5:30 pm - 7:30 pm",
                            "To be called from 7:30 pm - 9:30 pm"]),
    ("Income", ["Income bracket 1 (no income)", "Income bracket 2 (e.g., 1-5000)",
                "Income bracket 3 (e.g., 5001-10000)", "Income bracket 4 (e.g., 10001-15000)",
                "Income bracket 5 (e.g., 15001-20000)", "Income bracket 6 (e.g., 20001-25000)",
                "Income bracket 7 (e.g., 25001-30000)", "Income bracket 8 (e.g., 30000-999999)"]),
])

# field name on ContinuousProfile for each schema group
PROFILE_FIELD = {
    "Age": "age",
    "Language_Spoken": "language",
    "Education_Level": "education",
    "Phone_Ownership": "phone_ownership",
    "Times_To_Be_Called": "times_to_be_called",
    "Income": "income",
}

DEFAULT_WEIGHTS = {
    "Age": 0.8,
    "Income": 1.5,
    "Language_Spoken": -0.3,
    "Education_Level": 1.5,
    "Phone_Ownership": -1.5,
    "Times_To_Be_Called": 0.3,
}


@dataclass(frozen=True)
class ContinuousProfile:
    age: float
    education: float
    language: float
    income: float
    phone_ownership: float
    times_to_be_called: float

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in PROFILE_FIELD.values()}


@dataclass(frozen=True)
class TransitionModel:
    """p_good[s][a] is the probability of landing in state 1 from state s under action a."""

    p_good: tuple[tuple[float, float], tuple[float, float]]
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array(self.p_good, dtype=float)


@dataclass(frozen=True)
class TransitionConfig:
    delta_max: float = 0.3
    epsilon: float = 0.05
    bad_range: tuple[float, float] = (0.05, 0.35)
    good_range: tuple[float, float] = (0.45, 0.90)
    max_redraws: int = 1000

    def check(self):
        if not 0 <= self.delta_max < 1:
            raise ConfigurationError(f"delta_max must be in [0, 1), got {self.delta_max}")
        if not 0 <= self.epsilon < 0.5:
            raise ConfigurationError(f"epsilon must be in [0, 0.5), got {self.epsilon}")
        for name in ("bad_range", "good_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ConfigurationError(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        # p_good(1,0) >= p_good(0,0) must be reachable
        if self.good_range[1] < self.bad_range[0]:
            raise ConfigurationError("good_range lies entirely below bad_range")


@dataclass(frozen=True)
class ArmProfile:
    arm_id: int
    continuous: ContinuousProfile
    buckets: tuple[int, ...]
    feature_vector: tuple[int, ...]
    transitions: TransitionModel

    @property
    def features(self) -> np.ndarray:
        return np.array(self.feature_vector, dtype=float)

    def as_dict(self) -> dict:
        return {
            "arm_id": self.arm_id,
            "continuous": self.continuous.as_dict(),
            "buckets": list(self.buckets),
            "feature_vector": list(self.feature_vector),
            "p_good": [list(row) for row in self.transitions.p_good],
            "delta": self.transitions.delta,
        }


def _clip(x):
    return np.clip(x, 0.0, 1.0)


def sample_continuous_profiles(rng: np.random.Generator, alpha: float, n: int) -> dict[str, np.ndarray]:
    """Draw ``n`` profiles at once; returns one array per profile field.

    Each row consumes six uniforms in the order age, education, language,
    income noise, phone noise, times noise, so a single-row draw matches
    row 0 of a batch from the same generator state.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameter(f"alpha must be in [0, 1], got {alpha}")
    u = rng.random((n, 6))
    age, education, language = u[:, 0], u[:, 1], u[:, 2]
    income = _clip(alpha * (age + education) / 2 + (1 - alpha) * u[:, 3])
    phone = _clip(alpha * (1 - income) + (1 - alpha) * u[:, 4])
    times = _clip(alpha * phone + (1 - alpha) * u[:, 5])
    return {
        "age": age,
        "education": education,
        "language": language,
        "income": income,
        "phone_ownership": phone,
        "times_to_be_called": times,
    }


def sample_continuous_profile(rng: np.random.Generator, alpha: float) -> ContinuousProfile:
    cols = sample_continuous_profiles(rng, alpha, 1)
    return ContinuousProfile(**{k: float(v[0]) for k, v in cols.items()})


def bucket_index(u: float, n: int) -> int:
    return min(int(math.floor(u * n)), n - 1)


def bucketize(profile: ContinuousProfile, schema: FeatureSchema = SCHEMA) -> tuple[int, ...]:
    return tuple(bucket_index(getattr(profile, PROFILE_FIELD[g.name]), g.size) for g in schema)


def encode_features(buckets: Sequence[int], schema: FeatureSchema = SCHEMA) -> tuple[int, ...]:
    if len(buckets) != len(schema):
        raise EncodingError(f"expected {len(schema)} bucket indices, got {len(buckets)}")
    vec = [0] * schema.n_slots
    for g, b in zip(schema, buckets):
        if not 0 <= b < g.size:
            raise EncodingError(f"bucket {b} out of range for {g.name} ({g.size} buckets)")
        vec[g.start + b] = 1
    return tuple(vec)


def _weights_in_schema_order(weights: Mapping[str, float], schema: FeatureSchema) -> np.ndarray:
    missing = [g.name for g in schema if g.name not in weights]
    if missing:
        raise InvalidParameter(f"weights missing for {missing}")
    return np.array([weights[g.name] for g in schema], dtype=float)


def compute_delta(buckets: Sequence[int], weights: Mapping[str, float] = DEFAULT_WEIGHTS,
                  delta_max: float = 0.3, schema: FeatureSchema = SCHEMA) -> float:
    """Active-minus-passive gap: ``delta_max * sigmoid(sum_j w_j * (v_j - 0.5))``.

    ``v_j`` is the bucket position rescaled to [0, 1], so a negative weight
    favours the low buckets of that group.
    """
    w = _weights_in_schema_order(weights, schema)
    v = np.array([b / (g.size - 1) for g, b in zip(schema, buckets)], dtype=float)
    z = float(np.dot(w, v - 0.5))
    return delta_max / (1.0 + math.exp(-z))


def active_probability(p_passive: float, delta: float, epsilon: float) -> float:
    return min(p_passive + delta, 1.0 - epsilon)


def build_transition_model(buckets: Sequence[int], weights: Mapping[str, float],
                           rng: np.random.Generator, config: TransitionConfig = TransitionConfig(),
                           schema: FeatureSchema = SCHEMA) -> TransitionModel:
    config.check()
    delta = compute_delta(buckets, weights, config.delta_max, schema)
    eps = config.epsilon
    for _ in range(config.max_redraws):
        p00 = rng.uniform(*config.bad_range)
        p10 = rng.uniform(*config.good_range)
        if p10 >= p00:
            break
    else:
        raise ConfigurationError(f"could not draw p_good(1,0) >= p_good(0,0) in {config.max_redraws} tries")
    p00 = float(np.clip(p00, eps, 1 - eps))
    p10 = float(np.clip(p10, eps, 1 - eps))
    p01 = float(np.clip(active_probability(p00, delta, eps), eps, 1 - eps))
    p11 = float(np.clip(active_probability(p10, delta, eps), eps, 1 - eps))
    return TransitionModel(((p00, p01), (p10, p11)), delta)


@dataclass(frozen=True)
class Cohort:
    arms: tuple[ArmProfile, ...]
    alpha: float
    seed: int
    weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    config: TransitionConfig = TransitionConfig()

    def __len__(self):
        return len(self.arms)

    def __iter__(self):
        return iter(self.arms)

    def __getitem__(self, i):
        return self.arms[i]

    @property
    def features(self) -> np.ndarray:
        """(n, 34) float matrix of feature vectors."""
        return np.array([a.feature_vector for a in self.arms], dtype=float)

    @property
    def buckets(self) -> np.ndarray:
        """(n, 6) integer matrix of bucket indices in schema order."""
        return np.array([a.buckets for a in self.arms], dtype=np.int64)

    @property
    def p_good(self) -> np.ndarray:
        """(n, 2, 2) array indexed [arm, state, action]."""
        return np.array([a.transitions.p_good for a in self.arms], dtype=float)

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "alpha": self.alpha,
            "seed": self.seed,
            "weights": dict(self.weights),
            "transition_config": {
                "delta_max": self.config.delta_max,
                "epsilon": self.config.epsilon,
                "bad_range": list(self.config.bad_range),
                "good_range": list(self.config.good_range),
            },
            "feature_groups": [{"name": g.name, "start": g.start, "size": g.size} for g in SCHEMA],
            "arms": [a.as_dict() for a in self.arms],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Cohort":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported cohort schema version {doc.get('schema_version')}")
        tc = doc["transition_config"]
        config = TransitionConfig(tc["delta_max"], tc["epsilon"], tuple(tc["bad_range"]), tuple(tc["good_range"]))
        arms = []
        for a in doc["arms"]:
            p = a["p_good"]
            arms.append(ArmProfile(
                arm_id=a["arm_id"],
                continuous=ContinuousProfile(**a["continuous"]),
                buckets=tuple(a["buckets"]),
                feature_vector=tuple(a["feature_vector"]),
                transitions=TransitionModel(((p[0][0], p[0][1]), (p[1][0], p[1][1])), a["delta"]),
            ))
        return cls(tuple(arms), doc["alpha"], doc["seed"], doc["weights"], config)


def generate_cohort(n: int, alpha: float, seed: int, config: TransitionConfig = TransitionConfig(),
                    weights: Mapping[str, float] = DEFAULT_WEIGHTS) -> Cohort:
    if n < 1:
        raise InvalidParameter(f"cohort size must be >= 1, got {n}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameter(f"alpha must be in [0, 1], got {alpha}")
    config.check()
    profile_rng, transition_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    cols = sample_continuous_profiles(profile_rng, alpha, n)
    arms = []
    for i in range(n):
        profile = ContinuousProfile(**{k: float(v[i]) for k, v in cols.items()})
        buckets = bucketize(profile)
        arms.append(ArmProfile(
            arm_id=i,
            continuous=profile,
            buckets=buckets,
            feature_vector=encode_features(buckets),
            transitions=build_transition_model(buckets, weights, transition_rng, config),
        ))
    return Cohort(tuple(arms), alpha, seed, dict(weights), config)
