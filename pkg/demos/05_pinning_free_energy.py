"""Free energy of the pinned walk and the total mass of the continuous model
with one source."""
import math

from sandsink.pinning import gamma_scan, pinned_mass, proposal_rate, stable_free_energy
from sandsink.randomwalk import feynman_kac_mass

est = stable_free_energy(1, [0.5, 1.0, 2.0], 8, 256, 10_000, 0)
for m, f, s, t in zip(est.m_grid, est.F_hat, est.stderr, est.t):
    print(f"d=1 m={m:.2f}: F_hat={f:.4f} +- {s:.4f} at t={t:g}  (closed form {math.sqrt(4 + m * m) - 2:.4f})")

scan = gamma_scan(1, 1.0, 1.0, [1.0, 2.0, 4.0, 8.0], 8, 10_000, 1, t_max=256)
for g, v, s, flag in zip(scan.gamma, scan.value, scan.stderr, scan.flags):
    print(f"gamma={g:g}: gamma*F = {v:.4f} +- {s:.4f}  [{flag}]")

t = [0.5, 1.0, 2.0, 3.0]
fk = feynman_kac_mass((0,), {"kind": "finite_source", "sites": [[0]]}, 1.0, 1.0, 1.0, t, 50_000, 2)
pm = pinned_mass(1.0, 1.0, 1.0, t, 1, 50_000, 3)
for ti, a, sa, b, sb in zip(t, fk.mass, fk.stderr, pm.mass, pm.stderr):
    print(f"t={ti}: Feynman-Kac {a:.4f} +- {sa:.4f}  factorized {b:.4f} +- {sb:.4f}")

# in d=2 the free energy is positive for every m > 0 but tiny for small m;
# the root of m G_F(0, 0) = 1 is the reference, and the doubling check flags
# the m whose rate is far below 1/t as not yet relaxed
est2 = stable_free_energy(2, [0.5, 1.0, 2.0], 16, 256, 6000, 4)
for m, f, s, t, ok in zip(est2.m_grid, est2.F_hat, est2.stderr, est2.t, est2.stable):
    print(f"d=2 m={m:.2f}: F_hat={f:.3g} +- {s:.2g} at t={t:g} stable={bool(ok)}  "
          f"(resolvent root {proposal_rate(2, m):.3g})")
