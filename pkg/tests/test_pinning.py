import csv
import math

import numpy as np
import pytest
from scipy import integrate, optimize
from scipy.linalg import expm

from sandsink.pinning import (Proposal, _log_weights, free_energy, gamma_scan, origin_occupation,
                              origin_paths, origin_resolvent, pinned_mass, proposal_rate,
                              stable_free_energy)
from sandsink.stats import batch_means

L = 60


def generator(gamma=1.0, pot=None):
    """Rate-gamma-per-neighbour walk on [-L, L] plus a diagonal potential."""
    n = 2 * L + 1
    A = gamma * (np.eye(n, k=1) + np.eye(n, k=-1) - 2 * np.eye(n))
    if pot is not None:
        A += np.diag(pot)
    return A


def exact_moment(m, t, d=1, half=L):
    """E_0 exp(m l_t(0)) for the rate-2d walk on Z^d truncated to [-half, half]^d."""
    n = 2 * half + 1
    T = np.eye(n, k=1) + np.eye(n, k=-1)
    A = -2.0 * d * np.eye(n ** d)
    for i in range(d):
        A += np.kron(np.kron(np.eye(n ** i), T), np.eye(n ** (d - i - 1)))
    o = (n ** d) // 2
    A[o, o] += m
    return expm(t * A)[o].sum()


def exact_free_energy_d1(m):
    return math.sqrt(4 + m * m) - 2


def resolvent_d2(lam):
    """G_lam(0, 0) on Z^2 for the rate-1-per-neighbour walk, one angle integrated out."""
    f = lambda a: 1 / np.sqrt((lam + 4 - 2 * np.cos(a)) ** 2 - 4)
    return integrate.quad(f, 0, np.pi, limit=200)[0] / np.pi


def exact_free_energy_d2(m):
    # the moment grows at the rate F with m G_F(0, 0) = 1
    return optimize.brentq(lambda lam: m * resolvent_d2(lam) - 1, 1e-6, 10, xtol=1e-14)


def test_resolvent_reproduces_d1_form():
    # same root condition in d=1, where G_lam = (lam^2 + 4 lam)^(-1/2)
    lam = optimize.brentq(lambda x: 1.5 / math.sqrt(x * x + 4 * x) - 1, 1e-9, 10, xtol=1e-14)
    assert lam == pytest.approx(exact_free_energy_d1(1.5))


def test_occupation_bounds():
    t = np.array([0.5, 2.0, 8.0])
    occ = origin_occupation(2, t, 2000, 0)
    assert np.all(occ <= t + 1e-12) and np.all(occ > 0)
    assert np.all(np.diff(occ, axis=1) >= -1e-12)


@pytest.mark.parametrize("d,proposal", [(1, Proposal.plain(1)), (1, Proposal.product(1, 0.5)),
                                        (1, "auto"), (2, Proposal.plain(2)), (2, "auto")])
def test_moment_unbiased_under_every_proposal(d, proposal):
    m, t = 1.5, 2.5
    exact = exact_moment(m, t, d, half=L if d == 1 else 14)
    prop = Proposal.resolvent(d, proposal_rate(d, m)) if proposal == "auto" else proposal
    w = np.exp(_log_weights(origin_paths(prop, [t], 40_000, 7), m)[:, 0])
    mean, se = batch_means(w)
    assert abs(mean - exact) <= 3 * se


def test_resolvent_closed_forms():
    for lam in (1e-6, 0.01, 0.5, 3.0):
        assert origin_resolvent(1, lam) == pytest.approx(1 / math.sqrt(lam * lam + 4 * lam), rel=1e-7)
        assert origin_resolvent(2, lam) == pytest.approx(resolvent_d2(lam), rel=1e-7)
    # return-probability constant of the cubic lattice: G_0(0, 0) = 0.252731 / (rate-per-neighbour 1)
    assert origin_resolvent(3, 0.0) == pytest.approx(0.2527310, abs=1e-6)
    assert math.isinf(origin_resolvent(2, 0.0))


def test_proposal_rate():
    for m in (0.1, 1.0, 2.0):
        assert proposal_rate(1, m) == pytest.approx(exact_free_energy_d1(m), rel=1e-7)
    assert proposal_rate(2, 2.0) == pytest.approx(exact_free_energy_d2(2.0), rel=1e-6)
    # below the threshold 1 / G_0(0, 0) the rate is zero in d = 3
    assert proposal_rate(3, 1.0) == 0.0
    assert proposal_rate(3, 4.0) > 0


def test_resolvent_proposal_collapses_variance():
    est = free_energy(1, [1.0], 16, 3000, 0)
    plain = free_energy(1, [1.0], 16, 3000, 0, proposal=None)
    assert est.stderr[0] < plain.stderr[0] / 5
    assert est.proposal_rate[0] == pytest.approx(exact_free_energy_d1(1.0))


def test_zero_m_is_exact():
    est = free_energy(3, [0.0], 4, 300, 0)
    assert est.F_hat[0] == 0 and est.stderr[0] == 0


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        free_energy(1, [-1.0], 4, 300, 0)
    with pytest.raises(ValueError):
        free_energy(1, [1.0], 4, 300, 0, n_batches=10)


@pytest.mark.parametrize("m", [1.0, 2.0])
def test_free_energy_d1_matches_exact(m):
    est = stable_free_energy(1, [m], 8, 64, 6000, 3)
    assert est.stable[0]
    assert abs(est.F_hat[0] - exact_free_energy_d1(m)) <= 3 * est.stderr[0] + 2e-3


def test_free_energy_d2_matches_resolvent():
    exact = exact_free_energy_d2(2.0)
    assert exact == pytest.approx(0.05753, abs=1e-4)
    est = free_energy(2, [2.0], 128, 6000, 3)
    assert est.stable[0]
    assert abs(est.F_hat[0] - exact) <= 3 * est.stderr[0]
    est = stable_free_energy(2, [2.0], 32, 256, 6000, 3)
    assert abs(est.F_hat[0] - exact) <= 3 * est.stderr[0]


def test_slow_relaxation_is_flagged():
    # in d=2 with m=1 the rate is ~1e-4, far below 1/t: doubling keeps moving the estimate
    est = free_energy(2, [1.0], 32, 3000, 0)
    assert not est.stable[0]
    assert est.F_hat[0] < est.F_prev[0]


def test_free_energy_d5_vanishes():
    est = free_energy(5, [0.5], 16, 3000, 1)
    assert abs(est.F_hat[0]) <= 3 * est.stderr[0] + 1e-6


def test_gamma_scan_inflation_and_csv(tmp_path):
    one = gamma_scan(3, 1.0, 0.0, [2.0, 4.0], 4, 600, 0)
    two = gamma_scan(3, 1.0, 0.0, [2.0, 4.0], 4, 600, 0, n_sources=2)
    assert np.allclose(two.m, 2 * one.m)
    assert np.allclose(one.m, [0.5, 0.25])
    one.write_csv(tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["gamma", "value", "stderr", "flag"] and len(rows) == 3
    with pytest.raises(ValueError):
        gamma_scan(3, 0.0, 0.0, [1.0], 4, 600, 0)
    with pytest.raises(ValueError):
        gamma_scan(3, 1.0, 0.0, [2.0, 1.0], 4, 600, 0)


def test_free_energy_csv(tmp_path):
    est = free_energy(2, [0.0, 0.5], 4, 600, 0)
    est.write_csv(tmp_path / "f.csv")
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0] == "m,F_hat,stderr,t,n_walks" and len(rows) == 3


@pytest.mark.parametrize("alpha,beta,gamma", [(1.0, 0.0, 1.0), (1.0, 1.0, 2.0)])
def test_pinned_mass_matches_generator(alpha, beta, gamma):
    t = [0.5, 1.0, 2.0]
    pot = np.full(2 * L + 1, -alpha)
    pot[L] = beta
    A = generator(gamma, pot)
    exact = [expm(s * A)[L].sum() for s in t]
    mc = pinned_mass(alpha, beta, gamma, t, 1, 40_000, 2)
    assert np.all(np.abs(mc.mass - exact) <= 3 * mc.stderr + 1e-12)
    if beta == 0:
        assert np.all(mc.mass <= 1) and np.all(np.diff(mc.mass) < 0)


def test_gamma_scan_d1_matches_closed_form():
    scan = gamma_scan(1, 1.0, 1.0, [1.0, 2.0, 4.0, 8.0], 8, 20_000, 11, t_max=1024)
    exact = scan.gamma * np.array([exact_free_energy_d1(m) for m in scan.m])
    assert np.all(np.abs(scan.value - exact) <= 3 * scan.stderr)
