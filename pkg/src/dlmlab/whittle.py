"""Whittle indices for two-state arms and the top-budget allocation simulator.

The index of state ``s`` is the passive subsidy at which the optimal action
in ``s`` switches from active to passive.  It is found by bisection on the
subsidy, solving the subsidised MDP by value iteration at every probe.  All
routines work on batches: ``p_good`` has shape (n, 2, 2) indexed
[arm, state, action] and ``rewards`` has shape (n, 2) indexed
[arm, resultant state].
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .environment import SCHEMA, Cohort, TransitionModel
from .reward_dsl import EvaluationError, Node, reward_table

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.9
DEFAULT_VI_TOL = 1e-6
DEFAULT_INDEX_TOL = 1e-4


class ConvergenceError(RuntimeError):
    pass


class SimulationAborted(RuntimeError):
    """The reward expression could not be evaluated for some arm; the candidate is invalid."""


@dataclass(frozen=True)
class ArmMdp:
    transitions: TransitionModel
    r0: float
    r1: float
    beta: float = DEFAULT_BETA

    @property
    def p_good(self) -> np.ndarray:
        return self.transitions.as_array()


def expected_next_reward(mdp: ArmMdp, s: int, a: int) -> float:
    p = mdp.transitions.p_good[s][a]
    return p * mdp.r1 + (1 - p) * mdp.r0


def _q_values(p_good, rewards, beta, lam, V):
    # p_good (k,2,2), rewards (k,2), lam (k,), V (k,2) -> Q (k,2,2) [batch, state, action]
    r0 = rewards[:, None, None, 0]
    r1 = rewards[:, None, None, 1]
    cont = p_good * (r1 + beta * V[:, None, None, 1]) + (1 - p_good) * (r0 + beta * V[:, None, None, 0])
    Q = cont.copy()
    Q[:, :, 0] += lam[:, None]
    return Q


def batch_value_iteration(p_good, rewards, beta, lam, tol=DEFAULT_VI_TOL, max_iter=100_000):
    """Solve k subsidised two-state MDPs at once; returns (V, Q)."""
    if not 0 <= beta < 1:
        raise ValueError(f"discount must be in [0, 1), got {beta}")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    p_good = np.asarray(p_good, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    lam = np.asarray(lam, dtype=float)
    V = np.zeros((p_good.shape[0], 2))
    threshold = tol * (1 - beta)
    for it in range(max_iter):
        Q = _q_values(p_good, rewards, beta, lam, V)
        V_new = Q.max(axis=2)
        change = np.abs(V_new - V).max(initial=0.0)
        V = V_new
        if change < threshold:
            return V, _q_values(p_good, rewards, beta, lam, V)
    raise ConvergenceError(
        f"value iteration did not converge in {max_iter} sweeps "
        f"(last change {change:.3g}, threshold {threshold:.3g}, beta {beta})")


def greedy_actions(Q) -> np.ndarray:
    # ties go to the passive action
    return (Q[..., 1] > Q[..., 0]).astype(np.int8)


def subsidized_value(mdp: ArmMdp, lam: float, tol: float = DEFAULT_VI_TOL):
    """Value function of the arm when the passive action earns ``lam``; returns (V, greedy action per state)."""
    V, Q = batch_value_iteration(mdp.p_good[None], np.array([[mdp.r0, mdp.r1]]), mdp.beta,
                                 np.array([lam]), tol)
    return V[0], greedy_actions(Q[0])


def index_bracket(rewards, beta):
    top = 1.0 + np.max(rewards, axis=-1) / (1.0 - beta)
    return -top, top


def whittle_indices(p_good, rewards, beta=DEFAULT_BETA, tol=DEFAULT_INDEX_TOL, vi_tol=DEFAULT_VI_TOL):
    """Indices for every (arm, state); returns (indices (n, 2), clamped (n, 2) bool).

    ``clamped`` marks entries whose bracket showed no switch, in which case
    the nearer endpoint is returned.
    """
    p_good = np.asarray(p_good, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    n = p_good.shape[0]
    # flatten to k = 2n problems: arm i, query state s
    P = np.repeat(p_good, 2, axis=0)
    R = np.repeat(rewards, 2, axis=0)
    s = np.tile([0, 1], n)
    rows = np.arange(2 * n)

    def active_at(lam):
        _, Q = batch_value_iteration(P, R, beta, lam, vi_tol)
        return greedy_actions(Q)[rows, s] == 1

    lo, hi = index_bracket(R, beta)
    lo_active = active_at(lo)
    hi_active = active_at(hi)
    clamped = ~lo_active | hi_active
    result = np.empty(2 * n)
    result[~lo_active] = lo[~lo_active]
    result[hi_active] = hi[hi_active]
    live = ~clamped
    if live.any():
        a, b = lo[live].copy(), hi[live].copy()
        Pl, Rl, sl = P[live], R[live], s[live]
        rl = np.arange(live.sum())
        while (b - a).max() >= tol:
            mid = 0.5 * (a + b)
            _, Q = batch_value_iteration(Pl, Rl, beta, mid, vi_tol)
            act = greedy_actions(Q)[rl, sl] == 1
            a = np.where(act, mid, a)
            b = np.where(act, b, mid)
        result[live] = 0.5 * (a + b)
    if clamped.any():
        log.warning("no index switch inside the bracket for %d (arm, state) pairs", int(clamped.sum()))
    return result.reshape(n, 2), clamped.reshape(n, 2)


@lru_cache(maxsize=65536)
def _cached_index(p_good: tuple, r0: float, r1: float, beta: float, tol: float, vi_tol: float):
    idx, clamped = whittle_indices(np.array(p_good)[None], np.array([[r0, r1]]), beta, tol, vi_tol)
    return tuple(idx[0]), tuple(clamped[0])


def whittle_index(mdp: ArmMdp, s: int, tol: float = DEFAULT_INDEX_TOL, vi_tol: float = DEFAULT_VI_TOL) -> float:
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    idx, _ = _cached_index(mdp.transitions.p_good, float(mdp.r0), float(mdp.r1), mdp.beta, tol, vi_tol)
    return idx[s]


# -- simulation --------------------------------------------------------------

@dataclass
class SimulationResult:
    actions: np.ndarray  # (E, T, n) bool, acted on in round t
    states: np.ndarray   # (E, T+1, n) int8, state at the start of round t; [:, T] is final
    budget: int
    policy: str
    seed: int
    indices: np.ndarray | None = None  # (n, 2) Whittle table when the policy used one
    clamped: np.ndarray | None = field(default=None, repr=False)

    @property
    def episodes(self) -> int:
        return self.actions.shape[0]

    @property
    def rounds(self) -> int:
        return self.actions.shape[1]

    @property
    def n_arms(self) -> int:
        return self.actions.shape[2]

    @property
    def allocation_count(self) -> np.ndarray:
        return self.actions.sum(axis=(0, 1))

    @property
    def total_engagement(self) -> int:
        """Arms in state 1 after each round's transition, summed over rounds and episodes."""
        return int(self.states[:, 1:].sum())

    def action_sets(self, episode: int = 0) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.actions[episode]]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "budget": self.budget,
            "rounds": self.rounds,
            "episodes": self.episodes,
            "n_arms": self.n_arms,
            "total_engagement": self.total_engagement,
            "allocation_count": self.allocation_count.tolist(),
            "action_log": [self.action_sets(e) for e in range(self.episodes)],
            "state_log": self.states.tolist(),
            "indices": None if self.indices is None else self.indices.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationResult":
        E, T, n = d["episodes"], d["rounds"], d["n_arms"]
        actions = np.zeros((E, T, n), dtype=bool)
        for e, ep in enumerate(d["action_log"]):
            for t, acted in enumerate(ep):
                actions[e, t, acted] = True
        indices = None if d.get("indices") is None else np.array(d["indices"])
        return cls(actions, np.array(d["state_log"], dtype=np.int8), d["budget"], d["policy"], d["seed"], indices)

    def to_csv(self, cohort: Cohort) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm_id", *SCHEMA.names, "allocation_count", "final_state_0", "final_state_1"])
        final = self.states[:, -1, :]
        counts = self.allocation_count
        for arm in cohort:
            i = arm.arm_id
            ones = int(final[:, i].sum())
            w.writerow([i, *arm.buckets, int(counts[i]), self.episodes - ones, ones])
        return buf.getvalue()


def top_budget(indices: np.ndarray, budget: int) -> np.ndarray:
    """Arm ids of the ``budget`` largest indices, ties by ascending arm id."""
    order = np.lexsort((np.arange(len(indices)), -indices))
    return order[:budget]


def simulate_policy(cohort: Cohort, reward_ast: Node | None, budget: int, horizon: int, episodes: int,
                    beta: float = DEFAULT_BETA, seed: int = 0, policy: str = "whittle",
                    index_tol: float = DEFAULT_INDEX_TOL, vi_tol: float = DEFAULT_VI_TOL,
                    p_init: float = 0.5) -> SimulationResult:
    """Roll out ``episodes`` episodes of ``horizon`` rounds, acting on ``budget`` arms per round.

    Episode ``e`` draws from child ``e`` of ``SeedSequence(seed)``; inside it,
    the state dynamics and the random policy use separate streams, so two
    policies run with the same seed see the same uniforms for transitions.
    """
    if budget < 1 or horizon < 1 or episodes < 1:
        raise ValueError("budget, horizon and episodes must all be >= 1")
    if policy not in ("whittle", "random"):
        raise ValueError(f"unknown policy {policy!r}")
    n = len(cohort)
    k = min(budget, n)
    P = cohort.p_good
    indices = clamped = None
    if policy == "whittle":
        if reward_ast is None:
            raise ValueError("the Whittle policy needs a reward expression")
        try:
            R = reward_table(reward_ast, cohort.features)
        except EvaluationError as exc:
            raise SimulationAborted(str(exc)) from exc
        indices, clamped = whittle_indices(P, R, beta, index_tol, vi_tol)

    arms = np.arange(n)
    actions = np.zeros((episodes, horizon, n), dtype=bool)
    states = np.zeros((episodes, horizon + 1, n), dtype=np.int8)
    for e, child in enumerate(np.random.SeedSequence(seed).spawn(episodes)):
        dyn_ss, pol_ss = child.spawn(2)
        dyn = np.random.default_rng(dyn_ss)
        pol = np.random.default_rng(pol_ss)
        s = (dyn.random(n) < p_init).astype(np.int8)
        states[e, 0] = s
        for t in range(horizon):
            if policy == "whittle":
                chosen = top_budget(indices[arms, s], k)
            else:
                chosen = pol.choice(n, size=k, replace=False)
            a = np.zeros(n, dtype=np.int8)
            a[chosen] = 1
            p = P[arms, s, a]
            s = (dyn.random(n) < p).astype(np.int8)
            actions[e, t] = a.astype(bool)
            states[e, t + 1] = s
    return SimulationResult(actions, states, budget, policy, seed, indices, clamped)


@dataclass(frozen=True)
class SimConfig:
    budget: int = 20
    horizon: int = 12
    episodes: int = 10
    beta: float = DEFAULT_BETA
    vi_tol: float = DEFAULT_VI_TOL
    index_tol: float = DEFAULT_INDEX_TOL
    p_init: float = 0.5

    def run(self, cohort: Cohort, reward_ast: Node | None, seed: int, policy: str = "whittle") -> SimulationResult:
        return simulate_policy(cohort, reward_ast, self.budget, self.horizon, self.episodes, self.beta, seed,
                               policy, self.index_tol, self.vi_tol, self.p_init)
