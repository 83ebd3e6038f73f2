"""Exact Green's functions: row sums across growing boxes decide whether a
dissipation pattern keeps avalanches bounded."""
from sandsink.green import covering_radius, lines_gap_bound, row_sum_sequence

cases = [("all", {"kind": "all"}), ("even", {"kind": "sublattice", "period": [2, 2]}),
         ("axis", {"kind": "axis", "axis": 0}), ("lines r_k=k^2", {"kind": "lines", "r_poly": [0, 0, 1]}),
         ("empty", {"kind": "empty"})]
for name, pat in cases:
    rep = row_sum_sequence(2, pat, (0, 1), [4, 8, 16, 32])
    cr = covering_radius(pat, 8, 2)
    sums = ", ".join(f"{v:.3f}" for v in rep.row_sums[:, 0])
    print(f"{name:<14} {rep.verdict:<16} covering radius {cr.radius}  row sums {sums}")

for name, r in [("k^2", lambda k: (k + 1) ** 2), ("2^k", lambda k: 2 ** k)]:
    print(f"gap series for r_k = {name}: {lines_gap_bound(r, 2).verdict}")
