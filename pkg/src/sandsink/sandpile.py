"""Toppling engine: matrices, stabilization, burning, stationary sampling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp
from numba import njit

from .stats import LogLinearFit, loglinear_fit
from .topology import BoxLattice, DISSIPATIVE, QaryTree, SOURCE, SiteClassMap

INTEGER = "integer"
CONTINUOUS = "continuous"

DEFAULT_BUDGET = 10**6
ENUMERATION_CAP = 10**7


class NonStabilizable(RuntimeError):
    """Some site exceeded its toppling budget; the configuration did not settle.

    ``odometer`` holds the counts reached at the moment the budget ran out.
    """

    def __init__(self, site, odometer, budget):
        self.site = int(site)
        self.odometer = odometer
        self.budget = budget
        super().__init__(f"site {self.site} exceeded the toppling budget of {budget}")


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TopplingMatrix:
    """Symmetric toppling matrix stored as a diagonal plus off-diagonal transfers.

    ``weights[k]`` is the mass sent along the k-th CSR entry, i.e. ``-Δ[x, y]``.
    """

    graph: object = field(repr=False)
    diag: np.ndarray = field(repr=False)
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    mode: str = INTEGER
    params: dict = field(default_factory=dict)
    _dist_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_sites(self):
        return len(self.diag)

    def to_sparse(self):
        n = self.n_sites
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        off = sp.csr_matrix((-self.weights.astype(float), (rows, self.indices)), shape=(n, n))
        return (off + sp.diags(self.diag.astype(float))).tocsr()

    def to_dense(self):
        return self.to_sparse().toarray()

    def distances_from(self, x):
        if x not in self._dist_cache:
            self._dist_cache[x] = self.graph.distances_from(x)
        return self._dist_cache[x]

    def zeros(self):
        return np.zeros(self.n_sites, dtype=self.diag.dtype)

    def max_stable(self):
        """Configuration at the top of the stable band (integer mode)."""
        if self.mode != INTEGER:
            raise ValueError("max_stable is defined for integer mode only")
        return self.diag - 1

    def write_coo(self, path):
        """Coordinate text export, one ``i j value`` triple per line."""
        m = self.to_sparse().tocoo()
        with open(path, "w") as fh:
            for i, j, v in zip(m.row, m.col, m.data):
                fh.write(f"{i} {j} {v!r}\n")


def assemble_toppling_matrix(graph, classes=None, gamma=1.0, alpha=1.0, beta=0.0, mode=None):
    """Toppling matrix of a tree (diagonal q+1) or of a lattice box with site classes.

    On a box, ordinary sites get ``2dγ``, dissipative ``2dγ + α`` and source
    ``2dγ - β``; neighbours exchange ``γ``.  Integer mode requires
    ``γ = α = 1`` and no sources; ``mode=None`` picks integer mode when
    those hold.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if isinstance(graph, QaryTree):
        if classes is not None:
            raise ValueError("trees carry their own dissipation; no class map")
        if mode == CONTINUOUS:
            raise ValueError("tree matrices are integer-mode only")
        diag = np.full(graph.n_sites, graph.q + 1, dtype=np.int64)
        weights = np.ones(len(graph.indices), dtype=np.int64)
        return TopplingMatrix(graph, _ro(diag), graph.indptr, graph.indices, _ro(weights),
                              INTEGER, {"q": graph.q})

    if not isinstance(graph, BoxLattice):
        raise TypeError(f"unsupported graph type {type(graph).__name__}")
    if classes is None:
        d_mask = np.zeros(graph.n_sites, dtype=bool)
        s_mask = d_mask
    else:
        if not isinstance(classes, SiteClassMap) or classes.lattice is not graph:
            raise ValueError("class map must be built on the same lattice")
        d_mask = classes.classes == DISSIPATIVE
        s_mask = classes.classes == SOURCE
    d = graph.d
    if d_mask.any() and alpha <= 0:
        raise ValueError("alpha must be positive when dissipative sites are present")
    if s_mask.any() and not 0 < beta < 2 * d * gamma:
        raise ValueError("beta must lie in (0, 2dγ) when source sites are present")

    integer_ok = gamma == 1 and (alpha == 1 or not d_mask.any()) and not s_mask.any()
    if mode is None:
        mode = INTEGER if integer_ok else CONTINUOUS
    if mode == INTEGER and not integer_ok:
        raise ValueError("integer mode requires gamma = alpha = 1 and no source sites")
    if mode not in (INTEGER, CONTINUOUS):
        raise ValueError(f"unknown mode {mode!r}")

    if mode == INTEGER:
        diag = np.full(graph.n_sites, 2 * d, dtype=np.int64) + d_mask.astype(np.int64)
        weights = np.ones(len(graph.indices), dtype=np.int64)
    else:
        diag = np.full(graph.n_sites, 2 * d * gamma, dtype=float)
        diag[d_mask] += alpha
        diag[s_mask] -= beta
        weights = np.full(len(graph.indices), float(gamma))
    params = {"gamma": gamma, "alpha": alpha, "beta": beta, "d": d}
    return TopplingMatrix(graph, _ro(diag), graph.indptr, graph.indices, _ro(weights), mode, params)


def _ro(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@njit(cache=True)
def _stabilize_kernel(h, diag, indptr, indices, weights, budget, odometer):
    """FIFO stabilization in place.  Returns -1 on success or the offending site."""
    n = h.shape[0]
    queue = np.empty(n, dtype=np.int64)
    queued = np.zeros(n, dtype=np.bool_)
    head = 0
    count = 0
    for x in range(n):
        if h[x] >= diag[x]:
            queue[(head + count) % n] = x
            queued[x] = True
            count += 1
    while count > 0:
        x = queue[head]
        head = (head + 1) % n
        count -= 1
        queued[x] = False
        k = h[x] // diag[x]
        if k <= 0:
            continue
        kk = np.int64(k)
        if odometer[x] + kk > budget:
            return x
        odometer[x] += kk
        h[x] -= k * diag[x]
        for j in range(indptr[x], indptr[x + 1]):
            y = indices[j]
            h[y] += k * weights[j]
            if not queued[y] and h[y] >= diag[y]:
                queue[(head + count) % n] = y
                queued[y] = True
                count += 1
        # continuous heights may leave a tiny residue above threshold
        if h[x] >= diag[x] and not queued[x]:
            queue[(head + count) % n] = x
            queued[x] = True
            count += 1
    return -1


def _as_heights(matrix, eta):
    raw = np.asarray(eta)
    eta = np.array(raw, dtype=matrix.diag.dtype, copy=True)
    if matrix.mode == INTEGER and np.any(eta != raw):
        raise ValueError("integer-mode heights must be whole numbers")
    if eta.shape != (matrix.n_sites,):
        raise ValueError(f"height configuration must have shape ({matrix.n_sites},)")
    if np.any(eta < 0):
        raise ValueError("heights must be non-negative")
    return eta


def stabilize(matrix, eta, budget=DEFAULT_BUDGET):
    """Stabilize ``eta``; returns ``(heights, odometer)``.

    Raises :class:`NonStabilizable` if some site would topple more than
    ``budget`` times.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    h = _as_heights(matrix, eta)
    odo = np.zeros(matrix.n_sites, dtype=np.int64)
    bad = _stabilize_kernel(h, matrix.diag, matrix.indptr, matrix.indices, matrix.weights,
                            np.int64(budget), odo)
    if bad >= 0:
        raise NonStabilizable(bad, odo, budget)
    return h, odo


def stabilize_random_order(matrix, eta, rng, budget=DEFAULT_BUDGET):
    """Reference stabilizer toppling one uniformly chosen unstable site at a time.

    Slow; used to check that results do not depend on the toppling order.
    """
    h = _as_heights(matrix, eta)
    odo = np.zeros(matrix.n_sites, dtype=np.int64)
    diag, indptr, indices, w = matrix.diag, matrix.indptr, matrix.indices, matrix.weights
    unstable = set(np.nonzero(h >= diag)[0].tolist())
    while unstable:
        x = sorted(unstable)[rng.integers(len(unstable))]
        odo[x] += 1
        if odo[x] > budget:
            raise NonStabilizable(x, odo, budget)
        h[x] -= diag[x]
        if h[x] < diag[x]:
            unstable.discard(x)
        for j in range(indptr[x], indptr[x + 1]):
            y = indices[j]
            h[y] += w[j]
            if h[y] >= diag[y]:
                unstable.add(int(y))
    return h, odo


def conservation_residual(matrix, eta_before, eta_after, odometer, site=None):
    """``eta' - (eta + δ_site - Δ N)``; identically zero for a valid stabilization."""
    lhs = np.asarray(eta_before, dtype=float).copy()
    if site is not None:
        lhs[site] += 1
    lhs -= matrix.to_sparse().T @ np.asarray(odometer, dtype=float)
    return np.asarray(eta_after, dtype=float) - lhs


@dataclass(frozen=True)
class AvalancheRecord:
    site: int
    toppled: np.ndarray = field(repr=False)
    size: int
    diameter: int


def avalanche_record(matrix, x, odometer):
    toppled = np.nonzero(odometer > 0)[0]
    if len(toppled) == 0:
        return AvalancheRecord(int(x), toppled, 0, 0)
    dist = matrix.distances_from(int(x))
    return AvalancheRecord(int(x), toppled, len(toppled), int(dist[toppled].max()))


def add_and_stabilize(matrix, eta, x, budget=DEFAULT_BUDGET):
    """Add one grain at ``x`` and stabilize; returns ``(heights, odometer, record)``."""
    h = _as_heights(matrix, eta)
    h[x] += 1
    h, odo = stabilize(matrix, h, budget)
    return h, odo, avalanche_record(matrix, x, odo)


class BurnResult(NamedTuple):
    recurrent: bool
    order: list


def burning_test(matrix, eta):
    """Burning algorithm: repeatedly burn sites whose height covers the
    transfer weight towards still-unburnt neighbours."""
    eta = np.asarray(eta)
    n = matrix.n_sites
    indptr, indices, w = matrix.indptr, matrix.indices, matrix.weights
    # weight each site still owes to its unburnt neighbours
    owed = np.zeros(n, dtype=float)
    np.add.at(owed, np.repeat(np.arange(n), np.diff(indptr)), w)
    burnt = np.zeros(n, dtype=bool)
    order = []
    frontier = [x for x in range(n) if eta[x] >= owed[x] - 1e-12]
    while frontier:
        nxt = []
        for x in frontier:
            if burnt[x]:
                continue
            burnt[x] = True
            order.append(x)
            for j in range(indptr[x], indptr[x + 1]):
                y = indices[j]
                if not burnt[y]:
                    owed[y] -= w[j]
                    if eta[y] >= owed[y] - 1e-12:
                        nxt.append(y)
        frontier = nxt
    return BurnResult(bool(burnt.all()), order)


def enumerate_recurrent(matrix, cap=ENUMERATION_CAP, chunk=1 << 16):
    """All recurrent configurations (integer mode), one per row.

    Brute force over the stable band with a vectorized burning pass.
    """
    if matrix.mode != INTEGER:
        raise ValueError("enumeration is defined for integer mode only")
    radix = matrix.diag.astype(np.int64)
    total = int(np.prod(radix.astype(object)))
    if total > cap:
        raise ValueError(f"{total} stable configurations exceed the enumeration cap {cap}")
    n = matrix.n_sites
    W = np.zeros((n, n))
    rows = np.repeat(np.arange(n), np.diff(matrix.indptr))
    W[rows, matrix.indices] = matrix.weights
    # mixed-radix digits, site 0 most significant
    place = np.ones(n, dtype=np.int64)
    for i in range(n - 2, -1, -1):
        place[i] = place[i + 1] * radix[i + 1]
    found = []
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.int64)
        eta = (codes[:, None] // place[None, :]) % radix[None, :]
        burnt = np.zeros(eta.shape, dtype=bool)
        while True:
            owed = (~burnt).astype(float) @ W
            new = ~burnt & (eta >= owed)
            if not new.any():
                break
            burnt |= new
        found.append(eta[burnt.all(axis=1)])
    return np.concatenate(found) if found else np.zeros((0, n), dtype=np.int64)


@dataclass
class StationarySample:
    step: int
    heights: np.ndarray = field(repr=False)
    record: AvalancheRecord
    odometer: np.ndarray = field(repr=False)
    probes: dict = field(default_factory=dict, repr=False)


def sample_stationary(matrix, burn_in, n_samples, thinning=1, seed=None,
                      budget=DEFAULT_BUDGET, start=None, probe_sites=()) -> Iterator[StationarySample]:
    """Run the addition chain (uniform random site, then stabilize).

    After ``burn_in`` steps every ``thinning``-th state is yielded with the
    avalanche of the step that produced it.  For each site in
    ``probe_sites`` the yielded state is also hit with a hypothetical grain
    at that site (the chain is not advanced); ``probes[x]`` holds
    ``(odometer, record)`` for it.
    """
    if matrix.mode != INTEGER:
        raise ValueError("stationary sampling is implemented for integer mode only")
    if thinning < 1:
        raise ValueError("thinning must be >= 1")
    rng = np.random.default_rng(seed)
    n = matrix.n_sites
    h = matrix.max_stable().copy() if start is None else _as_heights(matrix, start)
    args = (matrix.diag, matrix.indptr, matrix.indices, matrix.weights, np.int64(budget))
    total = burn_in + n_samples * thinning
    block = 4096
    sites = np.empty(0, dtype=np.int64)
    emitted = 0
    for step in range(total):
        if step % block == 0:
            sites = rng.integers(n, size=block)
        x = int(sites[step % block])
        h[x] += 1
        odo = np.zeros(n, dtype=np.int64)
        bad = _stabilize_kernel(h, *args, odo)
        if bad >= 0:
            raise NonStabilizable(bad, odo, budget)
        if step < burn_in or (step - burn_in) % thinning != thinning - 1:
            continue
        probes = {}
        for p in probe_sites:
            hp = h.copy()
            hp[p] += 1
            po = np.zeros(n, dtype=np.int64)
            bad = _stabilize_kernel(hp, *args, po)
            if bad >= 0:
                raise NonStabilizable(bad, po, budget)
            probes[int(p)] = (po, avalanche_record(matrix, p, po))
        yield StationarySample(step, h.copy(), avalanche_record(matrix, x, odo), odo, probes)
        emitted += 1
    assert emitted == n_samples


@dataclass(frozen=True)
class AvalancheStatistics:
    site: int
    n_samples: int
    sizes: np.ndarray = field(repr=False)
    diameters: np.ndarray = field(repr=False)
    size_grid: np.ndarray = field(repr=False)
    size_tail: np.ndarray = field(repr=False)
    diam_grid: np.ndarray = field(repr=False)
    diam_tail: np.ndarray = field(repr=False)
    size_fit: LogLinearFit | None = None
    diam_fit: LogLinearFit | None = None

    @property
    def mean_size(self):
        return float(self.sizes.mean())


def avalanche_statistics(stream: Iterable, x, size_grid=None, diam_grid=None, fit=True):
    """Empirical tails P(size > k), P(diameter > n) of avalanches started at ``x``.

    ``stream`` yields :class:`StationarySample` objects carrying a probe at
    ``x`` (or whose own addition happened at ``x``), or bare
    :class:`AvalancheRecord` objects.
    """
    sizes, diams = [], []
    for item in stream:
        if isinstance(item, AvalancheRecord):
            rec = item
        elif x in item.probes:
            rec = item.probes[x][1]
        elif item.record.site == x:
            rec = item.record
        else:
            continue
        sizes.append(rec.size)
        diams.append(rec.diameter)
    if not sizes:
        raise InsufficientSamples(f"no avalanches started at site {x}")
    sizes = np.asarray(sizes)
    diams = np.asarray(diams)
    size_grid = np.arange(sizes.max() + 1) if size_grid is None else np.asarray(size_grid)
    diam_grid = np.arange(diams.max() + 1) if diam_grid is None else np.asarray(diam_grid)
    size_tail = (sizes[None, :] > size_grid[:, None]).mean(axis=1)
    diam_tail = (diams[None, :] > diam_grid[:, None]).mean(axis=1)
    size_fit = diam_fit = None
    if fit:
        try:
            size_fit = loglinear_fit(size_grid, size_tail)
            diam_fit = loglinear_fit(diam_grid, diam_tail)
        except ValueError as exc:
            raise InsufficientSamples(str(exc)) from None
    return AvalancheStatistics(int(x), len(sizes), sizes, diams, size_grid, size_tail,
                               diam_grid, diam_tail, size_fit, diam_fit)


def write_heights_jsonl(samples, path, seed):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"seed": seed, "step": s.step, "heights": s.heights.tolist()}) + "\n")


def write_avalanche_csv(samples, path, seed):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "step", "site", "size", "diameter"])
        for s in samples:
            r = s.record
            w.writerow([seed, s.step, r.site, r.size, r.diameter])
