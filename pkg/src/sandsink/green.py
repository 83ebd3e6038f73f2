"""Exact finite-volume Green's functions and structural criticality checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy import ndimage

from .sandpile import INTEGER, assemble_toppling_matrix
from .stats import LogLinearFit, loglinear_fit
from .topology import (build_box, build_qary_tree, build_site_classes, pattern_from_spec,
                       prune_to_galton_watson, sample_trap_field)

DIRECT_LIMIT = 100_000
DENSE_EIG_LIMIT = 2000
EXACT_DET_LIMIT = 400

BOUNDED = "BoundedEvidence"
GROWING = "GrowingEvidence"
INCONCLUSIVE = "Inconclusive"


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, min_eig):
        self.min_eig = float(min_eig)
        super().__init__(f"toppling matrix is not positive definite (smallest eigenvalue {min_eig:.3g})")


class ResidualError(np.linalg.LinAlgError):
    pass


def smallest_eigenvalue(matrix):
    A = matrix.to_sparse()
    if A.shape[0] <= DENSE_EIG_LIMIT:
        return float(np.linalg.eigvalsh(A.toarray())[0])
    return float(spla.eigsh(A, k=1, which="SA", return_eigenvectors=False, tol=1e-8)[0])


def _has_sources(matrix):
    off = np.zeros(matrix.n_sites)
    np.add.at(off, np.repeat(np.arange(matrix.n_sites), np.diff(matrix.indptr)), matrix.weights)
    return bool(np.any(matrix.diag < off - 1e-12))


class GreenSolver:
    """Factorized toppling matrix; ``solve(b)`` returns Δ⁻¹ b with a residual check."""

    def __init__(self, matrix, rtol=1e-10):
        self.matrix = matrix
        self.A = matrix.to_sparse().tocsc()
        self.rtol = rtol
        if _has_sources(matrix):
            lam = smallest_eigenvalue(matrix)
            if lam <= 0:
                raise NotPositiveDefinite(lam)
        n = self.A.shape[0]
        self._lu = spla.splu(self.A) if n <= DIRECT_LIMIT else None

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._lu is not None:
            x = self._lu.solve(b)
        else:
            x, info = spla.cg(self.A, b, rtol=1e-13, maxiter=10 * self.A.shape[0])
            if info != 0:
                raise ResidualError(f"conjugate gradients did not converge (info={info})")
        res = np.abs(self.A @ x - b).max()
        if res > self.rtol * max(np.abs(x).max(), 1e-300):
            raise ResidualError(f"residual {res:.3g} exceeds {self.rtol} * |x|")
        return x


def solve_green_row(matrix, x, solver=None):
    """Row ``G(x, ·)`` of the inverse toppling matrix."""
    solver = solver or GreenSolver(matrix)
    e = np.zeros(matrix.n_sites)
    e[x] = 1.0
    return solver.solve(e)


def row_sums(matrix, solver=None):
    """``Σ_y G(x, y)`` for every x at once (Δ u = 1, using symmetry)."""
    solver = solver or GreenSolver(matrix)
    return solver.solve(np.ones(matrix.n_sites))


def determinant(matrix, exact_limit=EXACT_DET_LIMIT):
    """det Δ; exact integer (fraction-free elimination) for small integer-mode matrices."""
    n = matrix.n_sites
    if matrix.mode == INTEGER and n <= exact_limit:
        return _bareiss(matrix.to_dense().round().astype(np.int64).tolist())
    lu = spla.splu(matrix.to_sparse().tocsc())
    diag_u = lu.U.diagonal()
    sign = np.prod(np.sign(diag_u)) * _perm_sign(lu.perm_r) * _perm_sign(lu.perm_c)
    return float(sign * math.exp(np.log(np.abs(diag_u)).sum()))


def _perm_sign(perm):
    perm = list(perm)
    sign, seen = 1, [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def _bareiss(M):
    M = [list(map(int, row)) for row in M]
    n = len(M)
    if n == 0:
        return 1
    sign, prev = 1, 1
    for k in range(n - 1):
        if M[k][k] == 0:
            swap = next((i for i in range(k + 1, n) if M[i][k] != 0), None)
            if swap is None:
                return 0
            M[k], M[swap] = M[swap], M[k]
            sign = -sign
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                M[i][j] = (M[i][j] * M[k][k] - M[i][k] * M[k][j]) // prev
        prev = M[k][k]
    return sign * M[n - 1][n - 1]


# --------------------------------------------------------------------------
# Volume sequences
# --------------------------------------------------------------------------

@dataclass
class GreenReport:
    volumes: list
    sites: list
    row_sums: np.ndarray = field(repr=False)
    site_index: np.ndarray = field(repr=False)
    verdict: str
    verdicts: list
    growth_diag: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "x_index", "row_sum"])
            for i, n in enumerate(self.volumes):
                for j in range(len(self.sites)):
                    w.writerow([n, int(self.site_index[i, j]), repr(float(self.row_sums[i, j]))])

    def verdict_json(self):
        return json.dumps({"verdict": self.verdict, "per_site": self.verdicts,
                           "sites": [list(s) for s in self.sites], "growth": self.growth_diag})


def classify_growth(seq, ratio=0.9, window=3, rtol=1e-10):
    """Verdict on a row-sum sequence from its last ``window`` increments.

    Bounded when each increment is below ``ratio`` times the previous one (or
    already at round-off level); growing when the increments never shrink.
    """
    s = np.asarray(seq, dtype=float)
    inc = np.diff(s)
    diag = {"increments": inc.tolist()}
    if len(inc) < 2:
        return INCONCLUSIVE, diag
    w = inc[-window:]
    tiny = np.abs(w) <= rtol * max(abs(s[-1]), 1.0)
    ratios = []
    decaying = True
    for a, b, tb in zip(w[:-1], w[1:], tiny[1:]):
        r = b / a if a != 0 else (0.0 if tb else math.inf)
        ratios.append(float(r))
        if not (tb or (a > 0 and r < ratio)):
            decaying = False
    diag["ratios"] = ratios
    diag["last_ratio"] = ratios[-1] if ratios else None
    if decaying:
        return BOUNDED, diag
    if np.all(np.diff(w) >= 0) and w[-1] > 0 and not tiny[-1]:
        return GROWING, diag
    return INCONCLUSIVE, diag


def row_sum_sequence(d, pattern, x, volumes, gamma=1.0, alpha=1.0, beta=0.0, ratio=0.9, window=3):
    """Row sums ``Σ_y G_n(x, y)`` across boxes ``Λ_n`` with a growth verdict.

    ``x`` is one site (tuple) or a list of sites.
    """
    volumes = [int(n) for n in volumes]
    if any(b <= a for a, b in zip(volumes, volumes[1:])):
        raise ValueError("volumes must be increasing")
    sites = [tuple(x)] if np.ndim(x) == 1 else [tuple(s) for s in x]
    pattern = pattern_from_spec(pattern)
    sums = np.empty((len(volumes), len(sites)))
    idx = np.empty((len(volumes), len(sites)), dtype=np.int64)
    for i, n in enumerate(volumes):
        lat = build_box(d, n)
        classes = build_site_classes(lat, pattern)
        m = assemble_toppling_matrix(lat, classes, gamma=gamma, alpha=alpha, beta=beta)
        u = row_sums(m)
        for j, s in enumerate(sites):
            idx[i, j] = lat.index_of(s)
            sums[i, j] = u[idx[i, j]]
    verdicts, diags = [], []
    for j in range(len(sites)):
        v, g = classify_growth(sums[:, j], ratio, window)
        verdicts.append(v)
        diags.append(g)
    if all(v == BOUNDED for v in verdicts):
        overall = BOUNDED
    elif any(v == GROWING for v in verdicts):
        overall = GROWING
    else:
        overall = INCONCLUSIVE
    return GreenReport(volumes, sites, sums, idx, overall, verdicts,
                       {"per_site": diags, "ratio": ratio, "window": window})


def interior_row_sums(d, pattern, n, frac=0.5, **params):
    """Row sums at the sites of the central box ``Λ_{floor(frac n)}``."""
    lat = build_box(d, n)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, pattern), **params)
    u = row_sums(m)
    inner = np.all(np.abs(lat.coords) <= int(frac * n), axis=1)
    return u[inner]


# --------------------------------------------------------------------------
# Structural conditions on D
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CoveringRadius:
    radius: int | None
    unbounded: bool
    sup_probe: int | None
    sup_doubled: int | None


def _sup_distance(pattern, d, n):
    """Max over Λ_n of the l1 distance to D, computed on Λ_{2n}; also whether
    the max is attained only on the boundary of Λ_n."""
    ext = build_box(d, 2 * n)
    mask = pattern.dissipative(ext.coords).reshape(ext.shape)
    if not mask.any():
        return None, True
    dist = ndimage.distance_transform_cdt(~mask, metric="taxicab")
    core = dist[tuple(slice(n, 3 * n + 1) for _ in range(d))]
    sup = int(core.max())
    if n >= 1:
        inner = core[tuple(slice(1, -1) for _ in range(d))]
        boundary_only = inner.size == 0 or int(inner.max()) < sup
    else:
        boundary_only = False
    return sup, boundary_only


def covering_radius(pattern, probe, d):
    """``sup_x min_{y in D} |x - y|`` over the probe box, or unbounded evidence.

    Unbounded is reported when the sup is attained only on the probe boundary
    or grows when the probe radius doubles.
    """
    pattern = pattern_from_spec(pattern)
    s1, edge1 = _sup_distance(pattern, d, probe)
    s2, _ = _sup_distance(pattern, d, 2 * probe)
    if s1 is None or s2 is None:
        return CoveringRadius(None, True, s1, s2)
    unbounded = edge1 or s2 > s1
    return CoveringRadius(None if unbounded else s1, unbounded, s1, s2)


def finite_complement_check(pattern, probe, d):
    """``(satisfied, |D^c ∩ Λ_probe|)``: satisfied when the count of
    non-dissipative sites stops changing over two probe doublings."""
    pattern = pattern_from_spec(pattern)
    counts = []
    for n in (probe, 2 * probe, 4 * probe):
        lat = build_box(d, n)
        counts.append(int((~pattern.dissipative(lat.coords)).sum()))
    return counts[0] == counts[1] == counts[2], counts[0]


CONVERGES = "ConvergesCertified"
DIVERGES = "DivergesCertified"


@dataclass(frozen=True)
class GapSeriesVerdict:
    verdict: str
    partial_sums: np.ndarray = field(repr=False)
    tail_bound: float | None = None
    ratio_sup: float | None = None


def lines_gap_bound(r, d, k_max=200, margin=1e-3):
    """Convergence of ``Σ_k (d/(d+1))^k (r_{k+1} - r_k)^2`` by a ratio test on
    the second half of the first ``k_max`` terms.

    ``r`` is a callable ``k -> r_k`` (k >= 0) or an explicit list.
    """
    vals = [float(r(k)) for k in range(k_max + 1)] if callable(r) else [float(v) for v in r]
    vals = np.asarray(vals)
    if len(vals) < 4:
        raise ValueError("need at least four terms of r")
    if np.any(np.diff(vals) <= 0):
        raise ValueError("r must be strictly increasing")
    k = np.arange(len(vals) - 1)
    log_terms = k * math.log(d / (d + 1)) + 2 * np.log(np.diff(vals))
    partial = np.cumsum(np.exp(np.minimum(log_terms, 700)))
    log_ratio = np.diff(log_terms)
    tail = log_ratio[len(log_ratio) // 2:]
    sup_r = float(np.exp(tail.max()))
    if sup_r < 1 - margin:
        bound = float(np.exp(log_terms[-1]) * sup_r / (1 - sup_r))
        return GapSeriesVerdict(CONVERGES, partial, bound, sup_r)
    if float(np.exp(tail.min())) >= 1:
        return GapSeriesVerdict(DIVERGES, partial, None, sup_r)
    return GapSeriesVerdict(INCONCLUSIVE, partial, None, sup_r)


# --------------------------------------------------------------------------
# Random trees
# --------------------------------------------------------------------------

def tree_tail_sums(tree, n_grid):
    """``Σ_{d(o,x) > n} G(o, x)`` for each n, with G from the tree toppling matrix."""
    m = assemble_toppling_matrix(tree)
    g = solve_green_row(m, 0)
    lev = tree.level
    return np.array([g[lev > n].sum() for n in n_grid])


@dataclass(frozen=True)
class TreeTailReport:
    n_grid: np.ndarray
    mean_tail: np.ndarray
    stderr: np.ndarray
    n_trees: int
    fit: LogLinearFit
    mean_row_sum: float
    tree_sizes: np.ndarray = field(repr=False)


def annealed_tree_tail(q, survive_prob, depth, n_trees, n_grid, seed):
    """Average of exact tail sums over Galton-Watson trees (Bin(q, survive_prob)
    offspring) obtained by pruning a trapped q-ary tree."""
    base = build_qary_tree(q, depth)
    n_grid = np.asarray(n_grid)
    tails = np.empty((n_trees, len(n_grid)))
    totals = np.empty(n_trees)
    sizes = np.empty(n_trees, dtype=np.int64)
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n_trees)):
        field_ = sample_trap_field(base, 1 - survive_prob, seed=ss)
        tree = prune_to_galton_watson(base, field_)
        m = assemble_toppling_matrix(tree)
        g = solve_green_row(m, 0)
        tails[i] = [g[tree.level > n].sum() for n in n_grid]
        totals[i] = g.sum()
        sizes[i] = tree.n_sites
    mean = tails.mean(axis=0)
    se = tails.std(axis=0, ddof=1) / math.sqrt(n_trees)
    return TreeTailReport(n_grid, mean, se, n_trees, loglinear_fit(n_grid, mean),
                          float(totals.mean()), sizes)
