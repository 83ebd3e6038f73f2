"""Homogeneous pinning free energy of the continuous-time walk and the γ-scan
controlling integrability of the total mass with one or a few source sites."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla
from numba import njit
from scipy import integrate, optimize, special

from .randomwalk import MassCurve, ctrw_integrals, integrate_mass, walk_seeds

RELIABLE_REL_ERR = 0.25


def origin_occupation(d, t_grid, n_walks, seed, rate=None):
    """Occupation time of the origin at each grid time, one row per walk.

    The walk jumps at total rate ``2d`` unless ``rate`` is given.
    """
    rate = 2 * d if rate is None else rate

    def at_origin(pos):
        return np.all(pos == 0, axis=1).astype(float)

    return ctrw_integrals(at_origin, d, rate, np.zeros(d, dtype=np.int64), t_grid, n_walks, seed)


def origin_resolvent(d, lam, split=200.0):
    """``G_lam(0, 0) = ∫ e^{-lam s} p_s(0, 0) ds`` for the rate-2d walk on Z^d.

    ``p_s(0, 0) = (e^{-2s} I_0(2s))^d``; beyond ``split`` the heat-kernel
    asymptotics ``(4 pi s)^{-d/2} (1 + 1/(16 s))^d`` are integrated instead.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if lam == 0 and d <= 2:
        return math.inf
    head = integrate.quad(lambda s: math.exp(-lam * s) * special.ive(0, 2 * s) ** d, 0, split,
                          limit=400, epsabs=0, epsrel=1e-11)[0]

    def tail(u):
        s = split * math.exp(u)
        return s * math.exp(-lam * s) * (4 * math.pi * s) ** (-d / 2) * (1 + 1 / (16 * s)) ** d

    top = math.log(max(2.0, 50 / (lam * split))) if lam > 0 else 80.0 / max(d / 2 - 1, 0.5)
    return head + integrate.quad(tail, 0, top, limit=400, epsabs=0, epsrel=1e-11)[0]


def proposal_rate(d, m):
    """Root ``lam`` of ``m G_lam(0, 0) = 1``, or 0 when ``m G_0(0, 0) <= 1``.

    It is the growth rate of ``E e^{m l_t(o)}``, and ``G_lam(., 0)`` is the
    matching eigenfunction, which makes it the natural importance function.
    """
    if m <= 0 or (d >= 3 and m * origin_resolvent(d, 0.0) <= 1):
        return 0.0
    u = optimize.brentq(lambda u: m * origin_resolvent(d, math.exp(u)) - 1, -690.0,
                        math.log(4 * d + 2 * m), xtol=1e-10)
    return math.exp(u)


PROPOSAL_SITES = 120_000


@dataclass(frozen=True)
class Proposal:
    """Positive function ``h`` on Z^d: a table on the box ``[-R, R]^d`` and
    geometric decay by ``rho_out`` per unit of l1 distance outside it."""

    d: int
    radius: int
    log_table: np.ndarray = field(repr=False)
    log_rho_out: float
    lam: float = math.nan

    @classmethod
    def plain(cls, d):
        return cls(d, 0, np.zeros(1), 0.0)

    @classmethod
    def product(cls, d, rho, radius=64):
        """``h(x) = rho^{|x|_1}``."""
        ax = np.abs(np.arange(-radius, radius + 1))
        dist = sum(np.meshgrid(*([ax] * d), indexing="ij")) if d > 1 else ax
        return cls(d, radius, (dist * math.log(rho)).ravel().astype(float), math.log(rho))

    @classmethod
    def resolvent(cls, d, lam, max_sites=PROPOSAL_SITES):
        """``h = G_lam(., 0)`` solved on a Dirichlet box a dozen decay lengths wide."""
        cap = int((max_sites ** (1 / d) - 1) // 2)
        want = 12 / math.sqrt(lam) if lam > 0 else cap
        R = int(max(4, min(cap, math.ceil(want))))
        n = 2 * R + 1
        T = sparse.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1])
        adj = sparse.csr_matrix((n ** d, n ** d))
        for i in range(d):
            adj = adj + sparse.kron(sparse.kron(sparse.identity(n ** i), T), sparse.identity(n ** (d - i - 1)))
        A = (sparse.identity(n ** d) * (lam + 2 * d) - adj).tocsc()
        b = np.zeros(n ** d)
        b[(n ** d) // 2] = 1.0
        g = spla.splu(A).solve(b) if d <= 2 else spla.cg(A, b, rtol=1e-12, maxiter=20 * n ** 2)[0]
        # decay of the one-dimensional eigenfunction, rho + 1/rho - 2 = lam
        rho = 1 + lam / 2 - math.sqrt(lam + lam * lam / 4) if lam > 0 else 1 - 1 / R
        return cls(d, R, np.log(np.maximum(g, 1e-300)), math.log(rho), lam)


@njit(cache=True)
def _log_h(pos, R, log_table, log_rho_out):
    n = 2 * R + 1
    idx = 0
    extra = 0
    for i in range(len(pos)):
        x = pos[i]
        if x > R:
            extra += x - R
            x = R
        elif x < -R:
            extra += -R - x
            x = -R
        idx = idx * n + x + R
    return log_table[idx] + extra * log_rho_out


@njit(cache=True)
def _doob_kernel(d, R, log_table, log_rho_out, t_grid, seeds, out):
    G = len(t_grid)
    pos = np.zeros(d, dtype=np.int64)
    rates = np.empty(2 * d)
    lh0 = _log_h(pos, R, log_table, log_rho_out)
    for w in range(len(seeds)):
        np.random.seed(seeds[w])
        pos[:] = 0
        cur = 0.0
        occ = 0.0
        comp = 0.0
        ptr = 0
        while ptr < G:
            lhx = _log_h(pos, R, log_table, log_rho_out)
            total = 0.0
            at_o = 1.0
            for i in range(d):
                if pos[i] != 0:
                    at_o = 0.0
                pos[i] += 1
                rates[2 * i] = math.exp(_log_h(pos, R, log_table, log_rho_out) - lhx)
                pos[i] -= 2
                rates[2 * i + 1] = math.exp(_log_h(pos, R, log_table, log_rho_out) - lhx)
                pos[i] += 1
                total += rates[2 * i] + rates[2 * i + 1]
            excess = total - 2.0 * d
            nxt = cur + np.random.exponential(1.0) / total
            while ptr < G and t_grid[ptr] <= nxt:
                dt = t_grid[ptr] - cur
                out[w, ptr, 0] = occ + at_o * dt
                out[w, ptr, 1] = lh0 - lhx
                out[w, ptr, 2] = comp + excess * dt
                ptr += 1
            occ += at_o * (nxt - cur)
            comp += excess * (nxt - cur)
            cur = nxt
            u = np.random.random() * total
            k = 0
            while k < 2 * d - 1 and u >= rates[k]:
                u -= rates[k]
                k += 1
            pos[k // 2] += 1 if k % 2 == 0 else -1


def origin_paths(proposal, t_grid, n_walks, seed):
    """Continuous-time walks under the Doob transform by ``h = proposal``.

    The walk jumps from x to a neighbour y at rate ``h(y)/h(x)``.  For each
    walk and grid time the returned array holds
    ``(l_t(o), log h(0) - log h(X_t), ∫_0^t (r(X_s) - 2d) ds)`` with ``r``
    the total jump rate, so that ``m l_t + (sum of the last two)`` is the
    log of ``e^{m l_t}`` times the likelihood ratio against the rate-2d walk.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    out = np.empty((n_walks, len(t_grid), 3))
    p = proposal
    _doob_kernel(p.d, p.radius, p.log_table, p.log_rho_out, t_grid, walk_seeds(seed, n_walks), out)
    return out


def _log_weights(paths, m):
    return m * paths[..., 0] + paths[..., 1] + paths[..., 2]


@lru_cache(maxsize=64)
def _resolvent_proposal(d, m):
    lam = proposal_rate(d, m)
    # no growth to tilt toward: below the transience threshold l_inf has finite exponential moments
    return Proposal.resolvent(d, lam) if lam > 0 else Proposal.plain(d)


def _log_mean(lw):
    top = lw.max()
    return top + math.log(np.exp(lw - top).mean())


@dataclass(frozen=True)
class FreeEnergyEstimate:
    """Per-m free energy estimates at horizon ``t``.

    ``t`` is a scalar or one horizon per m.  With ``L(s) = log Ê e^{m l_s}``,
    ``F_hat`` is the increment ``(L(4t) - L(2t)) / 2t`` and ``F_prev`` the
    increment ``(L(2t) - L(t)) / t`` one doubling earlier, kept for the
    stability check.  ``F_raw`` is ``L(t) / t``, which carries an O(1/t)
    prefactor bias.
    """

    m_grid: np.ndarray
    F_hat: np.ndarray
    stderr: np.ndarray
    t: float
    n_walks: int
    F_prev: np.ndarray = field(repr=False)
    stderr_prev: np.ndarray = field(repr=False)
    F_raw: np.ndarray = field(repr=False)
    rel_err: np.ndarray = field(repr=False)
    proposal_rate: np.ndarray = field(repr=False)

    @property
    def doubling_shift(self):
        return self.F_hat - self.F_prev

    @property
    def stable(self):
        """Per-m flag: doubling t moves the estimate by at most 3 combined σ."""
        comb = np.sqrt(self.stderr ** 2 + self.stderr_prev ** 2)
        return np.abs(self.doubling_shift) <= 3 * comb

    @property
    def reliable(self):
        return self.rel_err < RELIABLE_REL_ERR

    @property
    def largest_reliable_m(self):
        ok = self.m_grid[self.reliable]
        return float(ok.max()) if len(ok) else None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "F_hat", "stderr", "t", "n_walks"])
            t = np.broadcast_to(self.t, self.m_grid.shape)
            for m, f, s, ti in zip(self.m_grid, self.F_hat, self.stderr, t):
                w.writerow([repr(float(m)), repr(float(f)), repr(float(s)), repr(float(ti)), self.n_walks])


def free_energy(d, m_grid, t, n_walks, seed, n_batches=30, proposal="auto"):
    """Free energy of the homogeneous pinning model, ``lim (1/t) log E e^{m l_t(o)}``,
    for the rate-2d walk on Z^d started at the origin.

    Each m is estimated by importance sampling from its own walks run to
    ``4t``; errors come from ``n_batches`` contiguous batches of walks.
    ``proposal`` is ``"auto"`` (the resolvent ``G_lam(., 0)`` with
    ``m G_lam(0, 0) = 1``, or plain sampling when no such lam > 0 exists), a :class:`Proposal`, a float rho for the product
    tilt ``rho^{|x|_1}``, or ``None`` for plain sampling.  Every choice is
    unbiased for ``E e^{m l_t}``; they differ only in variance.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    if n_batches < 30:
        raise ValueError("use at least 30 batches")
    if np.any(m_grid < 0):
        raise ValueError("m must be non-negative")
    k = len(m_grid)
    F, S, F2, S2, Fr, R = (np.zeros(k) for _ in range(6))
    lams = np.full(k, math.nan)
    seqs = np.random.SeedSequence(seed).spawn(k)
    size = n_walks // n_batches
    for i, m in enumerate(m_grid):
        if m == 0:
            continue
        if isinstance(proposal, Proposal):
            prop = proposal
        elif proposal == "auto":
            prop = _resolvent_proposal(d, float(m))
        elif proposal is None:
            prop = Proposal.plain(d)
        else:
            prop = Proposal.product(d, float(proposal))
        lams[i] = prop.lam
        lw = _log_weights(origin_paths(prop, [t, 2 * t, 4 * t], n_walks, seqs[i]), m)
        L = np.array([_log_mean(lw[:, j]) for j in range(3)])
        Fr[i] = L[0] / t
        F2[i] = (L[1] - L[0]) / t
        F[i] = (L[2] - L[1]) / (2 * t)
        Lb = np.array([[_log_mean(lw[b * size:(b + 1) * size, j]) for j in range(3)]
                       for b in range(n_batches)])
        S2[i] = ((Lb[:, 1] - Lb[:, 0]) / t).std(ddof=1) / math.sqrt(n_batches)
        S[i] = ((Lb[:, 2] - Lb[:, 1]) / (2 * t)).std(ddof=1) / math.sqrt(n_batches)
        R[i] = np.exp(Lb - L[None, :]).std(axis=0, ddof=1).max() / math.sqrt(n_batches)
    return FreeEnergyEstimate(m_grid, F, S, float(t), n_walks, F2, S2, Fr, R, lams)


def stable_free_energy(d, m_grid, t0, t_max, n_walks, seed, n_batches=30):
    """Per-m doubling of t from ``t0`` until the doubling check passes (or ``t_max``).

    Small m relax slowly and end at larger t; the returned ``t`` is per m.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    parts = []
    for i, m in enumerate(m_grid):
        t = t0
        while True:
            est = free_energy(d, [m], t, n_walks, [seed, i], n_batches)
            if est.stable[0] or 2 * t > t_max:
                break
            t *= 2
        parts.append(est)

    def cat(name):
        return np.concatenate([getattr(e, name) for e in parts])

    return FreeEnergyEstimate(m_grid, cat("F_hat"), cat("stderr"), np.array([e.t for e in parts]),
                              n_walks, cat("F_prev"), cat("stderr_prev"), cat("F_raw"),
                              cat("rel_err"), cat("proposal_rate"))


@dataclass(frozen=True)
class GammaScan:
    gamma: np.ndarray
    m: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    alpha: float
    estimate: FreeEnergyEstimate = field(repr=False)

    @property
    def integrable(self):
        """γ·F_hat below α: the net exponent of the total mass is negative."""
        return self.value < self.alpha

    @property
    def first_integrable_gamma(self):
        ok = self.gamma[self.integrable]
        return float(ok.min()) if len(ok) else None

    @property
    def flags(self):
        est = self.estimate
        out = []
        for i in range(len(self.gamma)):
            tags = []
            if not est.stable[i]:
                tags.append("unstable_t")
            if not est.reliable[i]:
                tags.append("variance")
            if self.integrable[i]:
                tags.append("integrable")
            out.append("|".join(tags) or "ok")
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "value", "stderr", "flag"])
            for g, v, s, f in zip(self.gamma, self.value, self.stderr, self.flags):
                w.writerow([repr(float(g)), repr(float(v)), repr(float(s)), f])


def gamma_scan(d, alpha, beta, gamma_grid, t, n_walks, seed, n_sources=1, n_batches=30, t_max=None):
    """``γ F_hat(2^{n-1}(α+β)/γ)`` for each γ (n = number of sources).

    With several sources the argument is inflated by 2^{n-1}, the factor
    obtained from repeated Cauchy-Schwarz.  Given ``t_max``, each γ doubles
    its own horizon from ``t`` until stable.
    """
    if alpha <= 0 or beta < 0:
        raise ValueError("need alpha > 0 and beta >= 0")
    gamma = np.asarray(gamma_grid, dtype=float)
    if np.any(np.diff(gamma) <= 0):
        raise ValueError("gamma_grid must be increasing")
    m = 2 ** (n_sources - 1) * (alpha + beta) / gamma
    if t_max is None:
        est = free_energy(d, m, t, n_walks, seed, n_batches)
    else:
        est = stable_free_energy(d, m, t, t_max, n_walks, seed, n_batches)
    return GammaScan(gamma, m, gamma * est.F_hat, gamma * est.stderr, alpha, est)


def pinned_mass(alpha, beta, gamma, t_grid, d, n_walks, seed):
    """Total mass for one source at the origin and every other site dissipative,
    via ``e^{-αt} Ê[exp(((α+β)/γ) l_{tγ}(o))]`` under the rate-2d walk."""
    t_grid = np.asarray(t_grid, dtype=float)
    occ = origin_occupation(d, t_grid * gamma, n_walks, seed)
    w = np.exp(-alpha * t_grid[None, :] + (alpha + beta) / gamma * occ)
    mean = w.mean(axis=0)
    se = w.std(axis=0, ddof=1) / math.sqrt(n_walks)
    integral, rate = integrate_mass(t_grid, mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mean > 0, se / mean, np.inf)
    return MassCurve(t_grid, mean, se, n_walks, integral, rate,
                     inconclusive=not math.isfinite(integral), variance_flag=bool(np.any(rel > 0.5)))
