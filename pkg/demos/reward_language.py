"""Parse, print, evaluate and validate reward expressions, including rejected ones."""
from dlmlab.environment import generate_cohort
from dlmlab.reward_dsl import (DslError, check_expression, evaluate, extract_candidate, parse, probe_vectors,
                               referenced_features, to_text)

reply = "Here is my function: $$$ state * ((agent_feats[0] or agent_feats[1]) and agent_feats[6]) $$$"
ast = parse(extract_candidate(reply))
print("canonical:", to_text(ast))
print("features:", sorted(referenced_features(ast)))
feats = [0] * 34
feats[1] = feats[6] = 1
print("value at state 1:", evaluate(ast, 1, feats), "at state 0:", evaluate(ast, 0, feats))

probes = probe_vectors(generate_cohort(50, 0.2, 3).features)
for text in ("state + 2 * agent_feats[4]", "1 - state", "state / agent_feats[0]"):
    _, report = check_expression(text, probes)
    print(f"{text!r}: ok={report.ok} reason={report.failure_reason}")

for text in ("__import__('os')", "state > 0", "agent_feats[40]", "state *"):
    try:
        parse(text)
    except DslError as err:
        print(f"{text!r} rejected: {err.reason}")
