"""Drive a sandpile on a 17x17 box, check recurrence of the stationary state
and look at the avalanche size tail."""
import numpy as np

from sandsink.sandpile import (assemble_toppling_matrix, avalanche_statistics, burning_test,
                               sample_stationary)
from sandsink.topology import build_box, build_site_classes

lat = build_box(2, 8)
for spec in ({"kind": "empty"}, {"kind": "sublattice", "period": [2, 2]}):
    m = assemble_toppling_matrix(lat, build_site_classes(lat, spec))
    center = lat.index_of((0, 0))
    samples = list(sample_stationary(m, 20_000, 20_000, seed=0, probe_sites=[center]))
    print(spec["kind"], "recurrent:", burning_test(m, samples[-1].heights).recurrent)
    st = avalanche_statistics(samples, center)
    print(f"  mean size {st.sizes.mean():.2f}, max size {st.sizes.max()}")
    for s in (1, 10, 100):
        print(f"  P(size > {s:>3}) = {np.mean(st.sizes > s):.4f}")
