"""Build the graphs used everywhere else: a box in Z^2 with a dissipation
pattern, a q-ary tree with traps, and the binomial tree left after pruning."""
import numpy as np

from sandsink.topology import (build_box, build_qary_tree, build_site_classes, prune_to_galton_watson,
                               sample_trap_field)

lat = build_box(2, 6)
for spec in ({"kind": "sublattice", "period": [2, 2]}, {"kind": "axis", "axis": 0},
             {"kind": "lines", "r": [1, 3, 6]}):
    cls = build_site_classes(lat, spec)
    grid = np.zeros(lat.shape, dtype=int)
    grid.flat[cls.dissipative] = 1
    print(spec)
    print("\n".join("".join("#" if v else "." for v in row) for row in grid), "\n")

tree = build_qary_tree(2, 12)
field = sample_trap_field(tree, 0.3, seed=1)
gw = prune_to_galton_watson(tree, field)
print(f"q=2 tree of depth 12: {tree.n_sites} sites, {field.omega.sum()} traps")
print(f"pruned tree: {gw.n_sites} sites, depth {gw.level.max()}")
