"""Survival of a walk on a q-ary tree with perfect traps: Monte Carlo tail
against the Chernoff-type bound, and the killed walk on Z."""
from sandsink.randomwalk import (LatticeWalkSpec, TreeWalkSpec, chernoff_rate, hitting_time,
                                 mean_survival_time, survival_tail)

spec = TreeWalkSpec(2, 0.3)
t, c = chernoff_rate(2, 0.3, 0.2)
print(f"Chernoff tilt {t:.4f}, rate {c:.5f}")
est = survival_tail(spec, list(range(5, 41, 5)), 100_000, 0)
for n, p, b in zip(est.grid, est.survival_prob, est.bound):
    print(f"  n={n:>2}  P(T>n)={p:.5f}  bound={b:.5f}")
print(f"fitted log-tail slope {est.fit.slope:.4f} +- {est.fit.slope_stderr:.4f}")

for name, pat in [("all", {"kind": "all"}), ("even", {"kind": "sublattice", "period": [2]})]:
    m = mean_survival_time(LatticeWalkSpec(1, pat), 2000, 100_000, 1)
    print(f"killed walk on Z, D={name}: E(T) = {m.mean:.3f} +- {m.stderr:.3f}")
h = hitting_time((0,), {"kind": "explicit", "sites": [[-3], [3]]}, 50_000, 5000, 2)
print(f"hitting time of {{-3, 3}} from 0: {h.mean:.2f} +- {h.stderr:.2f} (gap bound {h.gap_bound})")
