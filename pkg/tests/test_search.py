import dataclasses
import json
import logging

import numpy as np
import pytest

from dlmlab.environment import TransitionModel, generate_cohort
from dlmlab.fairness import allocation_rates
from dlmlab.llm_gateway import Gateway, ScriptedProvider, Transcript
from dlmlab.reward_dsl import parse, probe_vectors
from dlmlab.search import (EMPTY_HISTORY, Candidate, SearchConfig, SearchFailed, default_goals,
                           evaluate_candidates, fallback_choice, make_candidate, propose_candidates,
                           render_generation_prompt, render_reflection_prompt, run_search, select_candidate)
from dlmlab.whittle import SimConfig

GOALS = default_goals()
P1 = GOALS[1]
SIM = SimConfig(budget=10, horizon=6, episodes=3)
COHORT = generate_cohort(60, 0.2, 17)
PROBES = probe_vectors(COHORT.features)


def gateway(entries, path=None):
    return Gateway(ScriptedProvider(entries), Transcript(path))


# -- rendering ---------------------------------------------------------------

def test_generation_prompt_empty_history():
    text = render_generation_prompt(P1, [])
    assert text.endswith(f"Here are your best previous attempts: {EMPTY_HISTORY}.")
    assert "{goal_prompt}" not in text and "{reward_history}" not in text


def test_generation_prompt_goal_slots():
    text = render_generation_prompt(P1, [])
    assert "slightly prioritize those who have a low value of age" in P1.text
    # the template carries two goal slots, one in the objective and one in the closing request
    assert text.count(P1.text) == 2
    assert f"prioritizing higher states and {P1.text}." in text
    assert f"for the specified goal: {P1.text}." in text


def test_generation_prompt_fixed_parts():
    text = render_generation_prompt(GOALS[5], ["state", "state * agent_feats[0]"])
    assert "Format your code with triple $ symbols: $$$[YOUR FUNCTION]$$$." in text
    assert "Example Prompt: Prioritize agents that have low Age and speak Marathi." in text
    assert "0. Ages 10-20" in text and "33. Income bracket 8 (e.g., 30000-999999)" in text
    assert "attempts: state\nstate * agent_feats[0]." in text


def test_reflection_prompt_numbering_and_purity():
    cands = [make_candidate(f"$$$ {e} $$$", PROBES) for e in ("state", "state * agent_feats[0]", "2 * state")]
    evaluate_candidates(cands, COHORT, SIM, 5)
    text = render_reflection_prompt(P1, cands)
    assert [l.split(":")[0] for l in text.splitlines() if l.startswith("Candidate ")] == \
        ["Candidate 1", "Candidate 2", "Candidate 3"]
    assert "Candidate 2: state * agent_feats[0]" in text
    assert P1.text in text and "ANSWER: <k>" in text
    shares = cands[0].allocation_summary["Age"]
    assert "  Age: " + ", ".join(f"{s:.3f}" for s in shares) in text
    assert render_reflection_prompt(P1, cands) == text
    assert "Candidate 1" in render_reflection_prompt(P1, cands[:1])


# -- proposal ----------------------------------------------------------------

def test_propose_marks_extraction_failure():
    gw = gateway([("generation", "$$$ state*agent_feats[0] $$$"), ("generation", "no code here"),
                  ("generation", "$$$ state $$$")])
    cands = propose_candidates(gw, "prompt", 3, PROBES, "generation/r/g1")
    assert [c.valid for c in cands] == [True, False, True]
    assert cands[1].validation.failure_reason.startswith("extraction-failed")
    assert [e["tag"] for e in gw.transcript.entries] == ["generation/r/g1/c0", "generation/r/g1/c1",
                                                       "generation/r/g1/c2"]


def test_propose_all_invalid_and_single():
    gw = gateway([("gen", "nothing"), ("gen", "$$$ agent_feats[40] $$$")])
    assert not any(c.valid for c in propose_candidates(gw, "p", 2, PROBES))
    gw = gateway([("gen", "$$$ state $$$")])
    assert len(propose_candidates(gw, "p", 1, PROBES)) == 1
    with pytest.raises(ValueError):
        propose_candidates(gw, "p", 0, PROBES)


def test_invalid_candidates_keep_reasons():
    c = make_candidate("$$$ 1 - state $$$", PROBES)
    assert not c.valid and c.validation.failure_reason == "not-monotone-in-state"
    evaluate_candidates([c], COHORT, SIM, 1)
    assert c.simulation is None


# -- evaluation --------------------------------------------------------------

def test_identical_expressions_identical_summary():
    a, b = (make_candidate("$$$ state + agent_feats[3] * state $$$", PROBES) for _ in range(2))
    evaluate_candidates([a, b], COHORT, SIM, 9)
    assert a.allocation_summary == b.allocation_summary
    assert a.simulation.to_json() == b.simulation.to_json()


def test_weighted_slot_zero_raises_age_bucket_zero_share():
    base, heavy = (make_candidate(t, PROBES) for t in ("$$$ state $$$", "$$$ state * (1 + 10 * agent_feats[0]) $$$"))
    evaluate_candidates([base, heavy], COHORT, SIM, 4)
    assert heavy.allocation_summary["Age"][0] > base.allocation_summary["Age"][0]


def _symmetric(cohort):
    tm = TransitionModel(((0.2, 0.4), (0.6, 0.8)), 0.2)
    return dataclasses.replace(cohort, arms=tuple(dataclasses.replace(a, transitions=tm) for a in cohort.arms))


def test_feature_blind_reward_ignores_features():
    # with identical arms the rollout must not depend on who has which features
    a = _symmetric(generate_cohort(80, 0.2, 1))
    b = _symmetric(generate_cohort(80, 0.8, 2))
    ra = SIM.run(a, parse("state"), 3)
    rb = SIM.run(b, parse("state"), 3)
    np.testing.assert_array_equal(ra.actions, rb.actions)


def test_feature_blind_reward_uniform_on_average():
    sim = SimConfig(budget=20, horizon=25, episodes=10)  # 5,000 arm-selections per cohort
    shares = {"Age": [], "Language_Spoken": []}
    for seed in range(12):
        cohort = _symmetric(generate_cohort(100, 0.2, 100 + seed))
        rates = allocation_rates(sim.run(cohort, parse("state"), seed), cohort)
        for name in shares:
            shares[name].append(rates[name].shares)
    for name, rows in shares.items():
        assert np.all(np.abs(np.mean(rows, axis=0) - 0.2) <= 0.05), name


def test_simulation_abort_marks_invalid():
    # a single probe with slot 7 set passes validation; arms without it divide by zero
    c = make_candidate("$$$ state / agent_feats[7] $$$", np.array([[1 if i == 7 else 0 for i in range(34)]]))
    assert c.valid
    evaluate_candidates([c], COHORT, SIM, 1)
    assert c.simulation is None
    assert c.validation.failure_reason.startswith("simulation-aborted")
    assert not c.simulated
    with pytest.raises(ValueError):
        evaluate_candidates([c], dataclasses.replace(COHORT, arms=()), SIM, 1)


# -- selection ---------------------------------------------------------------

def _three():
    cands = [make_candidate(t, PROBES) for t in
             ("$$$ state $$$", "$$$ state * (1 + 10 * agent_feats[0]) $$$", "$$$ state * (1 + 10 * agent_feats[0]) $$$")]
    return evaluate_candidates(cands, COHORT, SIM, 4)


def test_answer_parsed_one_based():
    gw = gateway([("reflection", "After thought,\nANSWER: 2")])
    sel = select_candidate(gw, "r", _three(), P1)
    assert sel.index == 1 and not sel.fallback


def test_unparseable_answer_falls_back(caplog):
    cands = _three()
    for raw in ("I like the first one", "ANSWER: 7"):
        gw = gateway([("reflection", raw)])
        with caplog.at_level(logging.INFO):
            sel = select_candidate(gw, "r", cands, P1)
        assert sel.fallback and sel.raw_text == raw
        # candidates 2 and 3 tie on intended share; the lower index wins
        assert sel.index == 1
    assert "fallback" in caplog.text


def test_fallback_rule_direct():
    cands = [Candidate("", "x", None, None, allocation_summary={"Age": s}) for s in
             ([0.1, 0.1, 0.3, 0.3, 0.2], [0.3, 0.2, 0.2, 0.2, 0.1], [0.25, 0.25, 0.2, 0.2, 0.1])]
    assert fallback_choice(cands, P1) == 1


def test_single_candidate_skips_gateway():
    gw = gateway([])
    sel = select_candidate(gw, "r", _three()[:1], P1)
    assert sel.index == 0 and sel.shortcut
    assert gw.transcript.entries == []
    with pytest.raises(ValueError):
        select_candidate(gw, "r", [], P1)


# -- loop --------------------------------------------------------------------

CFG = SearchConfig(candidates=2, generations=2, sim=SIM)


def test_history_threading():
    gw = gateway([
        ("generation/r1/g1", "$$$ state*agent_feats[0] $$$"),
        ("generation/r1/g1", "$$$ state $$$"),
        ("reflection/r1/g1", "ANSWER: 1"),
        ("generation/r1/g2", "$$$ state * (agent_feats[0] + agent_feats[1]) $$$"),
        ("generation/r1/g2", "junk"),
    ])
    out = run_search(P1, COHORT, gw, CFG, seed=3, run_id="r1")
    assert out.reward_history == ["state * agent_feats[0]", "state * (agent_feats[0] + agent_feats[1])"]
    assert "attempts: state * agent_feats[0]." in out.generations[1].prompt_text
    assert EMPTY_HISTORY in out.generations[0].prompt_text
    assert out.generations[1].shortcut
    assert out.final_candidate.canonical == "state * (agent_feats[0] + agent_feats[1])"


def test_empty_generation_records_and_keeps_earlier_choice():
    gw = gateway([("generation/r/g1", "$$$ state $$$"), ("generation/r/g1", "x"),
                  ("generation/r/g2", "x"), ("generation/r/g2", "$$$ 1/0 $$$")])
    out = run_search(P1, COHORT, gw, CFG, seed=1, run_id="r")
    assert out.generations[1].chosen_index is None
    assert out.reward_history == ["state"]
    assert out.final_candidate.canonical == "state"


def test_discard_rate_logged(caplog):
    gw = gateway([("generation", "$$$ 1 - state $$$"), ("generation", "$$$ state $$$")])
    with caplog.at_level(logging.INFO, logger="dlmlab.search"):
        run_search(P1, COHORT, gw, SearchConfig(candidates=2, generations=1, sim=SIM), run_id="m")
    assert "generation 1 of m: 1 of 2 candidates discarded (1 not monotone in state)" in caplog.text


def test_all_invalid_raises_search_failed():
    gw = gateway([("generation", "no block")] * 6)
    with pytest.raises(SearchFailed) as info:
        run_search(P1, COHORT, gw, SearchConfig(candidates=2, generations=3, sim=SIM), run_id="bad")
    assert len(info.value.outcome.generations) == 3
    assert info.value.outcome.reward_history == []
    with pytest.raises(ValueError):
        run_search(P1, COHORT, gw, SearchConfig(generations=0))


SCRIPT = [
    ("generation", "$$$ state * (agent_feats[0] + agent_feats[1]) $$$"),
    ("generation", "Sure! $$$ state + state * agent_feats[0] $$$"),
    ("reflection", "ANSWER: 2"),
    ("generation", "$$$ state * (3 * agent_feats[0] + agent_feats[1]) $$$"),
    ("generation", "$$$ state $$$"),
    ("reflection", "hmm"),
]


def test_search_deterministic_and_transcript_complete(tmp_path):
    outs = []
    for name in ("a", "b"):
        gw = gateway(SCRIPT, tmp_path / f"{name}.jsonl")
        outs.append(json.dumps(run_search(P1, COHORT, gw, CFG, seed=11, run_id="x").as_dict(), sort_keys=True))
    assert outs[0] == outs[1]
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    events = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    tags = [e["tag"] for e in events if e["event"] == "completion"]
    assert tags == ["generation/x/g1/c0", "generation/x/g1/c1", "reflection/x/g1",
                    "generation/x/g2/c0", "generation/x/g2/c1", "reflection/x/g2"]
    assert len(tags) == len(set(tags))
    assert [e["event"] for e in events].count("selection") == 2
    doc = json.loads(outs[0])
    assert doc["generations"][0]["chosen_index"] == 1
    assert doc["generations"][1]["fallback"] is True
    assert len(doc["reward_history"]) == 2
