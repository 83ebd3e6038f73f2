"""Monte Carlo walks: trapped tree walks, killed lattice walks, continuous-time
walks with a potential, and the local-time functionals built from them.

Randomness: every estimator takes a master ``seed``.  Walks that run one at a
time (tree walks) get their own stream, ``SeedSequence(seed)`` state word
``i`` for walk ``i``.  Vectorized lattice walks are simulated in blocks of
:data:`BLOCK` walks, block ``b`` drawing from ``SeedSequence(seed).spawn``
child ``b``.  Either way results do not depend on how work is split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .stats import LogLinearFit, binomial_se, loglinear_fit
from .topology import LinesD, pattern_from_spec

BLOCK = 4096


class InsufficientWalks(ValueError):
    pass


def _seed_sequence(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def walk_seeds(seed, n):
    """Per-walk 32-bit seeds derived from the master seed."""
    return _seed_sequence(seed).generate_state(n, dtype=np.uint32).astype(np.int64)


def block_rngs(seed, n_walks, block=BLOCK):
    n_blocks = -(-n_walks // block)
    children = _seed_sequence(seed).spawn(n_blocks)
    for b, ss in enumerate(children):
        start = b * block
        yield start, min(start + block, n_walks), np.random.default_rng(ss)


@dataclass
class WalkTrace:
    positions: np.ndarray = field(repr=False)
    survival_time: int | None
    killed: bool
    seed: int | None = None
    depths: np.ndarray | None = field(default=None, repr=False)
    escaped: bool = False

    @property
    def censored(self):
        return not self.killed


# --------------------------------------------------------------------------
# Trees
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeWalkSpec:
    """Annealed walk on the infinite q-ary tree with fresh traps per walk."""

    q: int
    trap_prob: float
    kill_prob: float = 1.0


@njit(cache=True)
def _lazy_tree_walk(q, trap_p, kill_p, horizon, seed, pos_out, depth_out):
    """One walk on a q-ary tree revealed on the fly.

    Vertices get ids in order of discovery; each new vertex is a trap with
    probability ``trap_p``.  Returns the survival time, or -1 if the walk is
    alive at ``horizon``.  ``pos_out``/``depth_out`` (length horizon+1) get
    the trajectory up to the returned time.
    """
    np.random.seed(seed)
    maxv = horizon + 2
    parent = np.full(maxv, -1, dtype=np.int64)
    child = np.full((maxv, q), -1, dtype=np.int64)
    depth = np.zeros(maxv, dtype=np.int64)
    trap = np.zeros(maxv, dtype=np.bool_)
    nv = 1
    v = 0
    pos_out[0] = 0
    depth_out[0] = 0
    for n in range(1, horizon + 1):
        if v == 0:
            k = np.random.randint(0, q)
        else:
            k = np.random.randint(0, q + 1)
        if k == q:
            v = parent[v]
        else:
            w = child[v, k]
            if w < 0:
                w = nv
                nv += 1
                child[v, k] = w
                parent[w] = v
                depth[w] = depth[v] + 1
                trap[w] = np.random.random() < trap_p
            v = w
        pos_out[n] = v
        depth_out[n] = depth[v]
        if trap[v] and (kill_p >= 1.0 or np.random.random() < kill_p):
            return n
    return -1


@njit(cache=True)
def _lazy_tree_survival(q, trap_p, kill_p, horizon, seeds):
    out = np.empty(len(seeds), dtype=np.int64)
    pos = np.empty(horizon + 1, dtype=np.int64)
    dep = np.empty(horizon + 1, dtype=np.int64)
    for i in range(len(seeds)):
        out[i] = _lazy_tree_walk(q, trap_p, kill_p, horizon, seeds[i], pos, dep)
    return out


@njit(cache=True)
def _lazy_tree_depths(q, horizon, seeds):
    """Depth sequences of trap-free walks, one row per walk."""
    out = np.empty((len(seeds), horizon + 1), dtype=np.int64)
    pos = np.empty(horizon + 1, dtype=np.int64)
    for i in range(len(seeds)):
        _lazy_tree_walk(q, 0.0, 1.0, horizon, seeds[i], pos, out[i])
    return out


def run_annealed_tree_walk(spec, horizon, seed):
    """Single walk on the lazily revealed q-ary tree (fresh trap field)."""
    s = int(walk_seeds(seed, 1)[0])
    pos = np.empty(horizon + 1, dtype=np.int64)
    dep = np.empty(horizon + 1, dtype=np.int64)
    t = _lazy_tree_walk(spec.q, spec.trap_prob, spec.kill_prob, horizon, s, pos, dep)
    end = horizon if t < 0 else t
    return WalkTrace(pos[:end + 1].copy(), None if t < 0 else int(t), t >= 0, seed, dep[:end + 1].copy())


def run_trapped_tree_walk(tree, field_, horizon, seed=None):
    """Walk on an explicit tree with a fixed trap field.

    Steps go to a uniform neighbour among the q+1 slots (q children at the
    root).  Stepping into a missing child slot (beyond the depth cap or a
    pruned branch) ends the trace as censored with ``escaped=True``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if field_.omega[0]:
        raise ValueError("root must be trapless")
    rng = np.random.default_rng(seed)
    q = tree.q
    v = 0
    pos = [0]
    for n in range(1, horizon + 1):
        k = rng.integers(q) if v == 0 else rng.integers(q + 1)
        if k == q:
            v = int(tree.parent[v])
        else:
            w = int(tree.children[v, k])
            if w < 0:
                return WalkTrace(np.array(pos), None, False, seed, tree.level[pos], escaped=True)
            v = w
        pos.append(v)
        if field_.omega[v] and (field_.kill_prob >= 1 or rng.random() < field_.kill_prob):
            return WalkTrace(np.array(pos), n, True, seed, tree.level[pos])
    return WalkTrace(np.array(pos), None, False, seed, tree.level[pos])


def range_and_depth(trace):
    """Range R_n (distinct sites among times 0..n) and depth X_n along a tree trace."""
    pos = np.asarray(trace.positions)
    seen = set()
    rng_ = np.empty(len(pos), dtype=np.int64)
    for i, v in enumerate(pos.tolist()):
        seen.add(v)
        rng_[i] = len(seen)
    if trace.depths is None:
        raise ValueError("trace carries no depth information")
    return rng_, np.asarray(trace.depths)


def reflected_depth_mean(q, n):
    """Exact E[X_n] of the distance-to-root chain (+1 w.p. q/(q+1), -1 otherwise,
    forced up at the root), by propagating the law of X."""
    p = np.zeros(n + 2)
    p[0] = 1.0
    up, down = q / (q + 1), 1 / (q + 1)
    for _ in range(n):
        new = np.zeros_like(p)
        new[1] += p[0]
        new[2:] += up * p[1:-1]
        new[:-2] += down * p[1:-1]
        p = new
    return float((np.arange(len(p)) * p).sum())


def chernoff_rate(q, p, eps):
    """Tilt parameter t and decay rate c of the Chernoff bound
    ``P(X_n < eps n) <= exp(-c n)`` for the depth process with drift (q-1)/(q+1).

    ``t = ½ log(2q/(1+eps) - q)`` and ``c = -[eps t + log((q e^{-t} + e^{t})/(q+1))]``.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if q < 2:
        raise ValueError("q must be >= 2")
    arg = 2 * q / (1 + eps) - q
    if eps <= 0 or arg <= 1:
        raise ValueError(f"eps={eps} inadmissible: need 0 < eps < (q-1)/(q+1)")
    t = 0.5 * math.log(arg)
    c = -(eps * t + math.log((q * math.exp(-t) + math.exp(t)) / (q + 1)))
    if c <= 0:
        raise ValueError(f"eps={eps} gives a non-positive rate")
    return t, c


def survival_bound(q, p, eps, n):
    """``(1-p)^{eps n} + exp(-c n)`` with c from :func:`chernoff_rate`."""
    _, c = chernoff_rate(q, p, eps)
    n = np.asarray(n, dtype=float)
    return (1 - p) ** (eps * n) + np.exp(-c * n)


# --------------------------------------------------------------------------
# Lattice walks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeWalkSpec:
    """Discrete-time walk on Z^d killed w.p. 1/(2d+1) per step spent on D."""

    d: int
    pattern: object
    x0: tuple = None

    def start(self):
        return np.zeros(self.d, dtype=np.int64) if self.x0 is None else np.asarray(self.x0, dtype=np.int64)


def _unit_steps(d):
    e = np.eye(d, dtype=np.int64)
    return np.concatenate([e, -e])


def _killed_block(pattern, x0, horizon, n, rng, d):
    """Survival times of ``n`` killed walks (horizon + 1 marks censoring)."""
    steps = _unit_steps(d)
    pos = np.tile(x0, (n, 1))
    T = np.full(n, horizon + 1, dtype=np.int64)
    alive = np.arange(n)
    kill_p = 1.0 / (2 * d + 1)
    for j in range(horizon):
        if len(alive) == 0:
            break
        p = pos[alive]
        on_d = pattern.dissipative(p)
        u = rng.random(len(alive))
        killed = on_d & (u < kill_p)
        T[alive[killed]] = j + 1
        alive = alive[~killed]
        p = p[~killed]
        pos[alive] = p + steps[rng.integers(2 * d, size=len(alive))]
    return T


def killed_survival_times(spec, horizon, n_walks, seed):
    """Survival times of independent killed walks; ``horizon + 1`` means censored."""
    pattern = pattern_from_spec(spec.pattern)
    out = np.empty(n_walks, dtype=np.int64)
    x0 = spec.start()
    for a, b, rng in block_rngs(seed, n_walks):
        out[a:b] = _killed_block(pattern, x0, horizon, b - a, rng, spec.d)
    return out


def run_killed_lattice_walk(pattern, x0, horizon, seed=None):
    """Single killed walk with its trajectory.

    The walk is never killed at time 0; the kill draw at time j (when X_j is
    dissipative) ends the walk with survival time j + 1.
    """
    pattern = pattern_from_spec(pattern)
    x = np.asarray(x0, dtype=np.int64)
    d = len(x)
    steps = _unit_steps(d)
    rng = np.random.default_rng(seed)
    pos = [x.copy()]
    for j in range(horizon):
        if pattern.dissipative(x[None, :])[0] and rng.random() < 1.0 / (2 * d + 1):
            return WalkTrace(np.array(pos), j + 1, True, seed)
        x = x + steps[rng.integers(2 * d)]
        pos.append(x.copy())
    return WalkTrace(np.array(pos), None, False, seed)


def local_time_ledger(trace, k):
    """Visit counts at times 0..k-1 (sums to k)."""
    pos = np.asarray(trace.positions)[:k]
    if len(pos) < k:
        raise ValueError("trace shorter than requested horizon")
    ledger = {}
    for p in map(tuple, np.atleast_2d(pos.reshape(len(pos), -1)).tolist()):
        key = p[0] if len(p) == 1 else p
        ledger[key] = ledger.get(key, 0) + 1
    return ledger


@dataclass(frozen=True)
class TailEstimate:
    grid: np.ndarray
    survival_prob: np.ndarray
    stderr: np.ndarray
    n_walks: int
    fit: LogLinearFit | None = None
    bound: np.ndarray | None = None
    survival_times: np.ndarray | None = field(default=None, repr=False)
    horizon: int = 0

    def rows(self):
        return [(int(n), float(p), float(s), self.n_walks)
                for n, p, s in zip(self.grid, self.survival_prob, self.stderr)]

    def write_csv(self, path):
        write_curve_csv(path, self.rows())


def write_curve_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_or_t", "estimate", "stderr", "n_samples"])
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def survival_times(spec, horizon, n_walks, seed):
    """Survival times under ``spec``; censored walks are reported as ``horizon + 1``."""
    if isinstance(spec, TreeWalkSpec):
        if not 0 <= spec.trap_prob <= 1:
            raise ValueError("trap_prob must lie in [0, 1]")
        T = _lazy_tree_survival(spec.q, float(spec.trap_prob), float(spec.kill_prob),
                                int(horizon), walk_seeds(seed, n_walks))
        return np.where(T < 0, horizon + 1, T)
    if isinstance(spec, LatticeWalkSpec):
        return killed_survival_times(spec, horizon, n_walks, seed)
    raise TypeError(f"unknown walk spec {spec!r}")


def survival_tail(spec, n_grid, n_walks, seed, eps=0.2, fit=True):
    """Monte Carlo estimate of P(T > n) on ``n_grid`` with binomial errors.

    For tree walks the estimate also carries the analytic bound
    ``(1-p)^{eps n} + e^{-cn}``.
    """
    grid = np.asarray(n_grid, dtype=np.int64)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("n_grid must be increasing")
    horizon = int(grid[-1]) + 1
    T = survival_times(spec, horizon, n_walks, seed)
    surv = (T[None, :] > grid[:, None]).mean(axis=1)
    se = binomial_se(surv, n_walks)
    tail_fit = None
    if fit:
        if surv[-1] == 0:
            raise InsufficientWalks(f"no walk survived past n={grid[-1]}; increase n_walks")
        tail_fit = loglinear_fit(grid, surv)
    bound = None
    if isinstance(spec, TreeWalkSpec) and 0 < spec.trap_prob < 1 and spec.kill_prob == 1:
        bound = survival_bound(spec.q, spec.trap_prob, eps, grid)
    return TailEstimate(grid, surv, se, n_walks, tail_fit, bound, T, horizon)


@dataclass(frozen=True)
class MeanEstimate:
    mean: float
    stderr: float
    n_samples: int
    censored_fraction: float = 0.0
    flagged: bool = False


def mean_survival_time(spec, horizon, n_walks, seed):
    """Mean survival time; censored walks count as ``horizon`` (a lower bound)."""
    T = survival_times(spec, horizon, n_walks, seed)
    cens = T > horizon
    T = np.minimum(T, horizon)
    return MeanEstimate(float(T.mean()), float(T.std(ddof=1) / math.sqrt(n_walks)), n_walks,
                        float(cens.mean()), bool(cens.mean() > 0.01))


@dataclass(frozen=True)
class LocalTimeFunctional:
    k: np.ndarray
    partial_sums: np.ndarray
    stderr: np.ndarray
    increments: np.ndarray
    converged: bool


def local_time_functional(x0, pattern, k_max, n_walks, seed, tol=1e-4):
    """Partial sums over k <= K of E_x[prod_{z in D} (2d/(2d+1))^{l_k(z)}].

    ``l_k(z)`` counts visits at times 0..k-1, so the k = 0 term is 1.  The
    estimate is flagged converged when the last increment drops below
    ``tol`` times the partial sum.
    """
    pattern = pattern_from_spec(pattern)
    x0 = np.asarray(x0, dtype=np.int64)
    d = len(x0)
    steps = _unit_steps(d)
    factor = 2 * d / (2 * d + 1)
    per_walk = np.empty((n_walks, k_max + 1))
    for a, b, rng in block_rngs(seed, n_walks):
        n = b - a
        pos = np.tile(x0, (n, 1))
        w = np.ones(n)
        per_walk[a:b, 0] = 1.0
        for k in range(1, k_max + 1):
            w = w * np.where(pattern.dissipative(pos), factor, 1.0)
            per_walk[a:b, k] = w
            pos = pos + steps[rng.integers(2 * d, size=n)]
    cums = np.cumsum(per_walk, axis=1)
    sums = cums.mean(axis=0)
    se = cums.std(axis=0, ddof=1) / math.sqrt(n_walks)
    inc = per_walk.mean(axis=0)
    return LocalTimeFunctional(np.arange(k_max + 1), sums, se, inc, bool(inc[-1] < tol * sums[-1]))


@dataclass(frozen=True)
class HittingEstimate(MeanEstimate):
    gap_bound: float | None = None


def _gap_around(pattern, x0, limit):
    """Nearest dissipative coordinates a < x0_axis < b along the gap axis, or None."""
    x0 = np.asarray(x0, dtype=np.int64)
    d = len(x0)
    if d == 1:
        axis = 0
    elif isinstance(pattern, LinesD):
        axis = pattern.axis % d
    else:
        return None
    offs = np.arange(1, limit + 1)
    probes = np.tile(x0, (len(offs), 1))

    def first(sign):
        pts = probes.copy()
        pts[:, axis] += sign * offs
        hit = np.nonzero(pattern.dissipative(pts))[0]
        return None if len(hit) == 0 else int(pts[hit[0], axis])

    a, b = first(-1), first(+1)
    if a is None or b is None:
        return None
    return (b - a) ** 2 / 4


def hitting_time(x0, pattern, n_walks, horizon, seed):
    """E τ_x(D) with τ = inf{k >= 1 : X_k in D} for simple random walk.

    Censored walks contribute ``horizon`` (lower bound); more than 1%
    censoring flags the estimate.
    """
    pattern = pattern_from_spec(pattern)
    x0 = np.asarray(x0, dtype=np.int64)
    d = len(x0)
    steps = _unit_steps(d)
    tau = np.full(n_walks, horizon, dtype=np.int64)
    hit = np.zeros(n_walks, dtype=bool)
    for a, b, rng in block_rngs(seed, n_walks):
        idx = np.arange(a, b)
        pos = np.tile(x0, (len(idx), 1))
        for k in range(1, horizon + 1):
            pos = pos + steps[rng.integers(2 * d, size=len(idx))]
            h = pattern.dissipative(pos)
            tau[idx[h]] = k
            hit[idx[h]] = True
            idx, pos = idx[~h], pos[~h]
            if len(idx) == 0:
                break
    cens = float((~hit).mean())
    return HittingEstimate(float(tau.mean()), float(tau.std(ddof=1) / math.sqrt(n_walks)), n_walks,
                           cens, cens > 0.01, _gap_around(pattern, x0, max(horizon, 64)))


def max_local_time_tail(d, k_grid, delta, n_walks, seed):
    """Empirical P(max_x l_k(x) > k^{1/2+delta}) for simple random walk from 0."""
    k_grid = np.asarray(k_grid, dtype=np.int64)
    k_max = int(k_grid[-1])
    steps = _unit_steps(d)
    exceed = np.zeros(len(k_grid))
    for a, b, rng in block_rngs(seed, n_walks):
        n = b - a
        path = np.zeros((n, k_max, d), dtype=np.int64)
        path[:, 1:] = np.cumsum(steps[rng.integers(2 * d, size=(n, k_max - 1))], axis=1)
        for g, k in enumerate(k_grid):
            for i in range(n):
                _, counts = np.unique(path[i, :k], axis=0, return_counts=True)
                exceed[g] += counts.max() > k ** (0.5 + delta)
    return exceed / n_walks


# --------------------------------------------------------------------------
# Continuous-time walks
# --------------------------------------------------------------------------

def ctrw_integrals(f, d, rate, x0, t_grid, n_walks, seed, reduce=None):
    """Exact ``∫_0^t f(X_s) ds`` at each grid time for continuous-time walks.

    ``f`` maps an (m, d) coordinate array to per-site values; jumps happen at
    total rate ``rate`` to a uniform neighbour.  Returns an
    ``(n_walks, len(t_grid))`` array, or, if ``reduce`` is given, the list
    of ``reduce(block_values)`` per block.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be non-negative and sorted")
    x0 = np.asarray(x0, dtype=np.int64)
    steps = _unit_steps(d)
    G = len(t_grid)
    out = None if reduce is not None else np.empty((n_walks, G))
    reduced = []
    for a, b, rng in block_rngs(seed, n_walks):
        n = b - a
        vals = np.empty((n, G))
        pos = np.tile(x0, (n, 1))
        cur = np.zeros(n)
        acc = np.zeros(n)
        ptr = np.zeros(n, dtype=np.int64)
        idx = np.arange(n)
        while len(idx):
            fv = f(pos)
            nxt = cur + rng.exponential(1.0 / rate, size=len(idx))
            while True:
                live = ptr < G
                tg = np.where(live, t_grid[np.minimum(ptr, G - 1)], np.inf)
                rec = tg <= nxt
                if not rec.any():
                    break
                r = np.nonzero(rec)[0]
                vals[idx[r], ptr[r]] = acc[r] + fv[r] * (tg[r] - cur[r])
                ptr[r] += 1
            acc = acc + fv * (nxt - cur)
            cur = nxt
            pos = pos + steps[rng.integers(2 * d, size=len(idx))]
            keep = ptr < G
            if not keep.all():
                idx, pos, cur, acc, ptr = idx[keep], pos[keep], cur[keep], acc[keep], ptr[keep]
        if reduce is not None:
            reduced.append(reduce(vals))
        else:
            out[a:b] = vals
    return reduced if reduce is not None else out


def potential(pattern, alpha, beta):
    """V = +alpha on D, -beta on S, 0 elsewhere, as a vectorized function."""
    pattern = pattern_from_spec(pattern)

    def V(coords):
        return alpha * pattern.dissipative(coords) - beta * pattern.source(coords)

    return V


@dataclass(frozen=True)
class MassCurve:
    t: np.ndarray
    mass: np.ndarray
    stderr: np.ndarray
    n_walks: int
    integral: float
    tail_rate: float | None
    inconclusive: bool
    variance_flag: bool

    def rows(self):
        return [(float(t), float(m), float(s), self.n_walks) for t, m, s in zip(self.t, self.mass, self.stderr)]

    def write_csv(self, path):
        write_curve_csv(path, self.rows())


def integrate_mass(t, mass, tail_points=4):
    """Trapezoid over the grid (from t = 0 with mass 1) plus an exponential tail.

    Returns ``(integral, tail_rate)``; the integral is ``inf`` when the last
    grid points do not decay.
    """
    t = np.asarray(t, dtype=float)
    m = np.asarray(mass, dtype=float)
    if t[0] > 0:
        t = np.concatenate([[0.0], t])
        m = np.concatenate([[1.0], m])
    body = float(np.sum(0.5 * (m[1:] + m[:-1]) * np.diff(t)))
    tail_t, tail_m = t[-tail_points:], m[-tail_points:]
    if len(tail_t) < 2 or np.any(tail_m <= 0):
        return math.inf, None
    slope = np.polyfit(tail_t, np.log(tail_m), 1)[0]
    if slope >= -1e-12:
        return math.inf, float(slope)
    return body + float(tail_m[-1] / -slope), float(slope)


def feynman_kac_mass(x0, pattern, alpha, beta, gamma, t_grid, n_walks, seed, time_change=False):
    """Total mass E_x[exp(-∫_0^t V(X_s) ds)] for the rate-2dγ walk.

    With ``time_change=True`` the same quantity is computed through the
    rate-2d walk run to time tγ with the potential scaled by 1/γ.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    d = len(x0)
    V = potential(pattern, alpha, beta)
    t_grid = np.asarray(t_grid, dtype=float)
    if time_change:
        def reduce(vals):
            w = np.exp(-vals / gamma)
            return w.sum(axis=0), (w ** 2).sum(axis=0)
        parts = ctrw_integrals(V, d, 2 * d, x0, t_grid * gamma, n_walks, seed, reduce)
    else:
        def reduce(vals):
            w = np.exp(-vals)
            return w.sum(axis=0), (w ** 2).sum(axis=0)
        parts = ctrw_integrals(V, d, 2 * d * gamma, x0, t_grid, n_walks, seed, reduce)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / n_walks
    var = np.maximum(s2 / n_walks - mean ** 2, 0) * n_walks / (n_walks - 1)
    se = np.sqrt(var / n_walks)
    integral, rate = integrate_mass(t_grid, mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(mean > 0, se / mean, np.inf)
    return MassCurve(t_grid, mean, se, n_walks, integral, rate,
                     inconclusive=not math.isfinite(integral), variance_flag=bool(np.any(rel > 0.5)))
