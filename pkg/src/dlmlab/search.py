"""Evolutionary reward search: propose with an LLM, simulate, reflect, repeat."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import yaml

from .environment import SCHEMA, Cohort
from .fairness import GoalPrompt, allocation_rates
from .llm_gateway import CompletionRequest, Gateway
from .reward_dsl import (DslError, Node, ValidationReport, check_expression, extract_candidate,
                         probe_vectors, to_text)
from .whittle import SimConfig, SimulationAborted, SimulationResult

log = logging.getLogger(__name__)

EMPTY_HISTORY = "(none)"

_FEATURE_LIST = "\n".join(f"{i}. {label}" for i, label in enumerate(SCHEMA.slot_labels()))

GENERATION_TEMPLATE = (
    "Create a Python reward function for RL in a resource allocation problem for agents, with the "
    "objective of prioritizing higher states and {goal_prompt}.The function should use state (value is "
    "either 0 or 1) and features agent_feats (length 34 array) to direct the RL agent. Here is a "
    "description of the features you may use along with their index in the agent_feats array:\n"
    "\n"
    "Feature Descriptions:\n"
    + _FEATURE_LIST + "\n"
    "\n"
    "Your task: Write a simple, single-line Python reward function. Exclude the word return and "
    "non-standard libraries. Format your code with triple $ symbols: $$$[YOUR FUNCTION]$$$. Note that "
    "HIGHER states are always preferred, so ensure the reward increases as the state value increases. "
    "Make sure the reward is always positive and increasing with state.\n"
    "\n"
    "Example Prompt: Prioritize agents that have low Age and speak Marathi.\n"
    "Let's think about this step by step. We want to give reward only for agents that are lower by age, "
    "which corresponds to feature 0 and to a lesser degree feature 1, and speaking Marathi which "
    "corresponds to feature 6. This corresponds to a condition of "
    "((agent_feats[0] or agent_feats[1]) and agent_feats[6]). Since feature 0 corresponds better to "
    "lower age than feature 1, the weight assigned to feature 0 should be higher than that assigned to "
    "feature 1. In addition, we always only want to give reward when the state is 1, since the agent "
    "gets reward only when it is in a listening state. Therefore, our reward function should be: "
    "state * ((5*agent_feats[0]+agent_feats[1]) and agent_feats[6])\n"
    "Example Response:\n"
    "$$$ state + state * ((agent_feats[0] or agent_feats[1]) and agent_feats[6]) $$$ or "
    "$$$ state * (agent_feats[0] or 3*agent_feats[6]) $$$ or "
    "$$$ state + 2*state * ((5*agent_feats[0]+agent_feats[1]) and agent_feats[6]) $$$.\n"
    "In these example, agent_feats[0] and agent_feats[1] represent agents with low values for age, "
    "agent_feats[6] represents agents who speak Marathi.\n"
    "It is upto you to decide which features will represent a preference\n"
    "Come up with a unique new reward for the specified goal: {goal_prompt}. "
    "Here are your best previous attempts: {reward_history}."
)


class SearchFailed(RuntimeError):
    def __init__(self, message, outcome: "SearchOutcome"):
        super().__init__(message)
        self.outcome = outcome


# -- prompt catalog ----------------------------------------------------------

def _goal_from_entry(pid: int, entry: Mapping, language: str = "en", text: str | None = None) -> GoalPrompt:
    intended = {name: frozenset(int(b) for b in bs) for name, bs in entry["intended"].items()}
    return GoalPrompt(int(pid), text if text is not None else entry["text"], intended, language)


def load_catalog(path=None) -> dict[int, Mapping]:
    """Raw catalog entries keyed by prompt id; the packaged default when ``path`` is None."""
    if path is None:
        raw = resources.files("dlmlab").joinpath("data/catalog.yaml").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    doc = yaml.safe_load(raw)
    return {int(k): v for k, v in doc["prompts"].items()}


def default_goals(language: str = "en") -> dict[int, GoalPrompt]:
    return {pid: _goal_from_entry(pid, e, language) for pid, e in load_catalog().items()}


# -- candidates --------------------------------------------------------------

@dataclass
class Candidate:
    raw_llm_text: str
    expression_text: str | None
    ast: Node | None
    validation: ValidationReport
    simulation: SimulationResult | None = None
    allocation_summary: dict[str, list[float]] | None = None

    @property
    def valid(self) -> bool:
        return self.ast is not None and self.validation.ok

    @property
    def simulated(self) -> bool:
        return self.simulation is not None

    @property
    def canonical(self) -> str | None:
        return to_text(self.ast) if self.ast is not None else self.expression_text

    def as_dict(self) -> dict:
        sim = None
        if self.simulation is not None:
            sim = {
                "seed": self.simulation.seed,
                "total_engagement": self.simulation.total_engagement,
                "allocation_count": self.simulation.allocation_count.tolist(),
            }
        return {
            "raw_llm_text": self.raw_llm_text,
            "expression_text": self.expression_text,
            "canonical": self.canonical,
            "validation": self.validation.as_dict(),
            "simulation": sim,
            "allocation_summary": self.allocation_summary,
        }


def make_candidate(raw: str, probes: np.ndarray) -> Candidate:
    try:
        text = extract_candidate(raw)
    except DslError as exc:
        log.info("candidate discarded: %s", exc)
        return Candidate(raw, None, None, ValidationReport(False, failure_reason=str(exc)))
    ast, report = check_expression(text, probes)
    return Candidate(raw, text, ast, report)


def propose_candidates(gateway: Gateway, prompt_text: str, m: int, probes: np.ndarray,
                       tag: str = "generation", temperature: float = 1.0,
                       max_output_tokens: int = 512) -> list[Candidate]:
    if m < 1:
        raise ValueError("need at least one candidate per generation")
    out = []
    for j in range(m):
        req = CompletionRequest(prompt_text, temperature, max_output_tokens, f"{tag}/c{j}")
        out.append(make_candidate(gateway.complete(req).text, probes))
    return out


def evaluate_candidates(candidates: Sequence[Candidate], cohort: Cohort, sim: SimConfig, seed: int) -> list[Candidate]:
    """Simulate every valid candidate under the same seed; aborted simulations invalidate the candidate."""
    if len(cohort) == 0:
        raise ValueError("empty cohort")
    for c in candidates:
        if not c.valid:
            continue
        try:
            c.simulation = sim.run(cohort, c.ast, seed)
        except SimulationAborted as exc:
            c.validation.failure_reason = f"simulation-aborted: {exc}"
            continue
        c.allocation_summary = {k: v.shares.tolist() for k, v in allocation_rates(c.simulation, cohort).items()}
    return list(candidates)


# -- reflection --------------------------------------------------------------

def render_generation_prompt(goal: GoalPrompt, history: Sequence[str]) -> str:
    hist = "\n".join(history) if history else EMPTY_HISTORY
    return GENERATION_TEMPLATE.replace("{goal_prompt}", goal.text).replace("{reward_history}", hist)


def render_reflection_prompt(goal: GoalPrompt, candidates: Sequence[Candidate]) -> str:
    lines = [
        "You are choosing a reward function for a resource allocation problem.",
        f"Goal: {goal.text}",
        "",
        "Each candidate below was simulated. For every feature, the numbers are the share of all "
        "allocations received by each feature value, in this order:",
    ]
    for g in SCHEMA:
        lines.append(f"  {g.name}: " + "; ".join(g.labels))
    lines.append("")
    for k, c in enumerate(candidates, start=1):
        lines.append(f"Candidate {k}: {c.canonical}")
        for name, shares in (c.allocation_summary or {}).items():
            lines.append(f"  {name}: " + ", ".join(f"{s:.3f}" for s in shares))
    lines.append("")
    lines.append("Which candidate best achieves the goal? Reply with the candidate number "
                 "on its own line in the form ANSWER: <k>")
    return "\n".join(lines)


_ANSWER_RE = re.compile(r"ANSWER:\s*(\d+)", re.IGNORECASE)


def intended_share(c: Candidate, goal: GoalPrompt) -> float:
    summary = c.allocation_summary or {}
    return float(sum(summary[name][b] for name, bs in goal.intended_buckets.items() for b in bs))


def fallback_choice(candidates: Sequence[Candidate], goal: GoalPrompt) -> int:
    scores = [intended_share(c, goal) for c in candidates]
    return int(np.argmax(scores))  # argmax returns the first maximum


@dataclass
class Selection:
    index: int  # 0-based position in the list that was shown
    raw_text: str | None
    fallback: bool = False
    shortcut: bool = False


def select_candidate(gateway: Gateway, reflection_prompt: str, candidates: Sequence[Candidate],
                     goal: GoalPrompt, tag: str = "reflection", temperature: float = 0.0,
                     max_output_tokens: int = 64) -> Selection:
    """Ask the reflection model for ``ANSWER: k`` (1-based), falling back to the best intended share."""
    if not candidates:
        raise ValueError("nothing to select from")
    if len(candidates) == 1:
        log.info("single valid candidate, reflection skipped")
        return Selection(0, None, shortcut=True)
    raw = gateway.complete(CompletionRequest(reflection_prompt, temperature, max_output_tokens, tag)).text
    m = _ANSWER_RE.search(raw)
    if m is not None and 1 <= int(m.group(1)) <= len(candidates):
        return Selection(int(m.group(1)) - 1, raw)
    log.info("unparseable reflection answer, using intended-share fallback")
    return Selection(fallback_choice(candidates, goal), raw, fallback=True)


# -- search loop -------------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    candidates: int = 3
    generations: int = 5
    generation_temperature: float = 1.0
    reflection_temperature: float = 0.0
    max_output_tokens: int = 512
    probe_cap: int = 200
    sim: SimConfig = SimConfig()


@dataclass
class Generation:
    candidates: list[Candidate]
    chosen_index: int | None
    reflection_raw_text: str | None = None
    fallback: bool = False
    shortcut: bool = False
    prompt_text: str = ""

    @property
    def chosen(self) -> Candidate | None:
        return None if self.chosen_index is None else self.candidates[self.chosen_index]

    def as_dict(self) -> dict:
        return {
            "candidates": [c.as_dict() for c in self.candidates],
            "chosen_index": self.chosen_index,
            "reflection_raw_text": self.reflection_raw_text,
            "fallback": self.fallback,
            "shortcut": self.shortcut,
        }


@dataclass
class SearchOutcome:
    generations: list[Generation] = field(default_factory=list)
    reward_history: list[str] = field(default_factory=list)

    @property
    def final_candidate(self) -> Candidate | None:
        for g in reversed(self.generations):
            if g.chosen is not None:
                return g.chosen
        return None

    def as_dict(self) -> dict:
        final = self.final_candidate
        return {
            "generations": [g.as_dict() for g in self.generations],
            "reward_history": list(self.reward_history),
            "final_expression": None if final is None else final.canonical,
        }


def run_search(goal: GoalPrompt, cohort: Cohort, gateway: Gateway, config: SearchConfig = SearchConfig(),
               seed: int = 0, run_id: str = "run") -> SearchOutcome:
    if config.generations < 1:
        raise ValueError("need at least one generation")
    probes = probe_vectors(cohort.features, config.probe_cap)
    outcome = SearchOutcome()
    transcript = gateway.transcript
    for gen in range(1, config.generations + 1):
        prompt = render_generation_prompt(goal, outcome.reward_history)
        cands = propose_candidates(gateway, prompt, config.candidates, probes, f"generation/{run_id}/g{gen}",
                                   config.generation_temperature, config.max_output_tokens)
        evaluate_candidates(cands, cohort, config.sim, seed)
        transcript.write({"event": "candidates", "run": run_id, "generation": gen,
                          "candidates": [c.as_dict() for c in cands]})
        shown = [i for i, c in enumerate(cands) if c.simulated]
        not_monotone = sum(c.validation.failure_reason == "not-monotone-in-state" for c in cands)
        log.info("generation %d of %s: %d of %d candidates discarded (%d not monotone in state)",
                 gen, run_id, len(cands) - len(shown), len(cands), not_monotone)
        record = Generation(cands, None, prompt_text=prompt)
        if shown:
            visible = [cands[i] for i in shown]
            refl = render_reflection_prompt(goal, visible)
            sel = select_candidate(gateway, refl, visible, goal, f"reflection/{run_id}/g{gen}",
                                   config.reflection_temperature)
            record.chosen_index = shown[sel.index]
            record.reflection_raw_text = sel.raw_text
            record.fallback = sel.fallback
            record.shortcut = sel.shortcut
            outcome.reward_history.append(record.chosen.canonical)
        else:
            log.info("generation %d of %s produced no valid candidate", gen, run_id)
        transcript.write({"event": "selection", "run": run_id, "generation": gen,
                          "chosen_index": record.chosen_index, "fallback": record.fallback,
                          "shortcut": record.shortcut})
        outcome.generations.append(record)
    if outcome.final_candidate is None:
        raise SearchFailed(f"no valid candidate in {config.generations} generations", outcome)
    return outcome
