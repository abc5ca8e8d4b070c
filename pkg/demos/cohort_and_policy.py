"""Generate a cohort, inspect one arm, and compare the index policy against random choice."""
import numpy as np

from dlmlab.environment import SCHEMA, generate_cohort
from dlmlab.fairness import allocation_rates, dp_variance
from dlmlab.reward_dsl import parse
from dlmlab.whittle import ArmMdp, SimConfig, whittle_index

cohort = generate_cohort(100, alpha=0.8, seed=7)
arm = cohort.arms[0]
print("arm 0 buckets:", dict(zip(SCHEMA.names, arm.buckets)))
print("arm 0 one-hot slots set:", [i for i, v in enumerate(arm.features) if v])
print("arm 0 transitions p(good | s, a):", arm.transitions.p_good, "delta", round(arm.transitions.delta, 4))

reward = parse("state")
mdp = ArmMdp(arm.transitions, 0.0, 1.0)
print("Whittle index by state:", [round(float(whittle_index(mdp, s)), 4) for s in (0, 1)])

sim = SimConfig(budget=20, horizon=12, episodes=10)
for policy in ("whittle", "random"):
    result = sim.run(cohort, reward, seed=1, policy=policy)
    rates = allocation_rates(result, cohort)
    dp = {name: round(dp_variance(g.rates), 5) for name, g in rates.items()}
    print(f"{policy:8s} engagement {result.total_engagement:7.1f}  dp {dp}")

print("Age shares under the index policy:", np.round(allocation_rates(sim.run(cohort, reward, 1), cohort)["Age"].shares, 3))
