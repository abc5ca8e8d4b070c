"""Two generations of reward search against a scripted model, printing the transcript."""
import json
import tempfile
from pathlib import Path

from dlmlab.environment import generate_cohort
from dlmlab.llm_gateway import Gateway, ScriptedProvider, Transcript
from dlmlab.search import SearchConfig, default_goals, run_search
from dlmlab.whittle import SimConfig

script = [
    ("generation", "$$$ state * agent_feats[0] $$$"),
    ("generation", "I would weight the young: $$$ state * (2 * agent_feats[0] + agent_feats[1]) $$$"),
    ("reflection", "The second spreads attention over both young buckets.\nANSWER: 2"),
    ("generation", "$$$ state * (3 * agent_feats[0] + agent_feats[1] + 1) $$$"),
    ("generation", "no code this time"),
]
goal = default_goals()[1]
cohort = generate_cohort(100, 0.2, seed=5)
with tempfile.TemporaryDirectory() as tmp:
    log = Path(tmp) / "transcript.jsonl"
    gateway = Gateway(ScriptedProvider(script), Transcript(log))
    config = SearchConfig(candidates=2, generations=2, sim=SimConfig(budget=20, horizon=12, episodes=4))
    outcome = run_search(goal, cohort, gateway, config, seed=9, run_id="demo")
    print("goal:", goal.text)
    for number, g in enumerate(outcome.generations, 1):
        print(f"generation {number}: chosen {g.chosen_index} fallback={g.fallback} shortcut={g.shortcut}")
        for c in g.candidates:
            age = c.allocation_summary["Age"] if c.allocation_summary else None
            print("   ", c.canonical or repr(c.raw_llm_text), "|", c.validation.failure_reason or f"Age shares {[round(s, 2) for s in age]}")
    print("history:", outcome.reward_history)
    print("transcript events:", [json.loads(l)["event"] for l in log.read_text().splitlines()])
