"""Desk-scale laboratory for LLM-designed reward functions in restless bandits."""
from .environment import SCHEMA, DEFAULT_WEIGHTS, Cohort, generate_cohort
from .fairness import GoalPrompt, dp_variance, fairness_report
from .reward_dsl import evaluate, extract_candidate, parse, to_text
from .search import SearchConfig, default_goals, run_search
from .whittle import SimConfig, simulate_policy, whittle_index

__all__ = [
    "SCHEMA", "DEFAULT_WEIGHTS", "Cohort", "generate_cohort",
    "GoalPrompt", "dp_variance", "fairness_report",
    "evaluate", "extract_candidate", "parse", "to_text",
    "SearchConfig", "default_goals", "run_search",
    "SimConfig", "simulate_policy", "whittle_index",
]
