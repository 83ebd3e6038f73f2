"""Finite site graphs: lattice boxes, q-ary trees, trap fields and site classes.

Every graph exposes the same small surface (``n_sites``, ``edges``,
``indptr``/``indices`` adjacency in CSR form, ``distances_from``) so that the
toppling engine and the solvers never care which geometry they run on.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

# Largest graph any builder will allocate.
MAX_SITES = 4_000_000

ORDINARY, DISSIPATIVE, SOURCE, BOUNDARY = 0, 1, 2, 3
CLASS_NAMES = {ORDINARY: "ordinary", DISSIPATIVE: "dissipative", SOURCE: "source", BOUNDARY: "boundary"}


class CapacityError(ValueError):
    """Raised when a requested graph exceeds :data:`MAX_SITES`."""


class PatternError(ValueError):
    """Malformed site-class pattern specification."""


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _csr_from_edges(n, edges):
    if len(edges) == 0:
        return _frozen(np.zeros(n + 1, dtype=np.int64)), _frozen(np.zeros(0, dtype=np.int64))
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return _frozen(np.cumsum(indptr)), _frozen(dst.astype(np.int64))


class SiteGraph:
    """Shared adjacency helpers; subclasses fill ``n_sites``, ``edges``, ``indptr``, ``indices``."""

    n_sites: int
    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self):
        return np.diff(self.indptr)

    def distances_from(self, source):
        """Graph distance from ``source`` to every site (BFS); -1 if unreachable."""
        dist = np.full(self.n_sites, -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        indptr, indices = self.indptr, self.indices
        while queue:
            u = queue.popleft()
            du = dist[u] + 1
            for v in indices[indptr[u]:indptr[u + 1]]:
                if dist[v] < 0:
                    dist[v] = du
                    queue.append(v)
        return dist

    def write_edge_list(self, path):
        """Write ``u v`` pairs, one per line, 0-based."""
        with open(path, "w") as fh:
            for u, v in self.edges:
                fh.write(f"{u} {v}\n")


@dataclass(frozen=True, eq=False)
class BoxLattice(SiteGraph):
    """Axis-aligned box of Z^d with nearest-neighbour adjacency.

    ``lo`` and ``hi`` are inclusive per-axis bounds.  Sites are ordered
    lexicographically in their coordinates.
    """

    lo: tuple
    hi: tuple
    coords: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @property
    def d(self):
        return len(self.lo)

    @property
    def shape(self):
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def n(self):
        """Box radius for symmetric boxes ``[-n, n]^d``; None otherwise."""
        if all(l == -self.hi[0] for l in self.lo) and len(set(self.hi)) == 1:
            return self.hi[0]
        return None

    @property
    def n_sites(self):
        return len(self.coords)

    def index_of(self, site):
        """Linear index of an integer coordinate tuple."""
        site = tuple(int(c) for c in site)
        if len(site) != self.d:
            raise ValueError(f"site {site} has wrong dimension for d={self.d}")
        idx = 0
        for c, l, h in zip(site, self.lo, self.hi):
            if not l <= c <= h:
                raise KeyError(f"site {site} outside box")
            idx = idx * (h - l + 1) + (c - l)
        return idx

    def on_boundary(self):
        """Mask of sites with fewer than 2d in-box neighbours."""
        return self.degree() < 2 * self.d


def _make_box(lo, hi):
    lo, hi = tuple(int(v) for v in lo), tuple(int(v) for v in hi)
    shape = tuple(h - l + 1 for l, h in zip(lo, hi))
    if any(s <= 0 for s in shape):
        raise ValueError(f"empty box lo={lo} hi={hi}")
    total = int(np.prod(shape, dtype=object))
    if total > MAX_SITES:
        raise CapacityError(f"box with {total} sites exceeds budget {MAX_SITES}")
    grids = np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    index = np.arange(total).reshape(shape)
    pairs = []
    for ax in range(len(shape)):
        a = np.take(index, np.arange(shape[ax] - 1), axis=ax).ravel()
        b = np.take(index, np.arange(1, shape[ax]), axis=ax).ravel()
        pairs.append(np.stack([a, b], axis=1))
    edges = np.concatenate(pairs).astype(np.int64) if pairs else np.zeros((0, 2), np.int64)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    indptr, indices = _csr_from_edges(total, edges)
    return BoxLattice(lo, hi, _frozen(coords), _frozen(edges), indptr, indices)


def build_box(d, n):
    """The box ``[-n, n]^d`` of Z^d."""
    if d < 1 or n < 0:
        raise ValueError("need d >= 1 and n >= 0")
    return _make_box((-n,) * d, (n,) * d)


def build_rectangle(shape):
    """Box with the given side lengths, anchored at the origin (e.g. ``(2, 3)``)."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"bad shape {shape}")
    return _make_box((0,) * len(shape), tuple(s - 1 for s in shape))


@dataclass(frozen=True, eq=False)
class QaryTree(SiteGraph):
    """Rooted tree with at most ``q`` children per vertex, in breadth-first order.

    ``children[v, k]`` is the k-th child slot of v (-1 when absent), so a
    complete tree and any of its pruned subtrees share one representation.
    Vertex 0 is the root.
    """

    q: int
    depth: int
    parent: np.ndarray = field(repr=False)
    level: np.ndarray = field(repr=False)
    children: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @property
    def n_sites(self):
        return len(self.parent)

    def n_children(self):
        return (self.children >= 0).sum(axis=1)


def _tree_from_children(q, depth, children, parent, level):
    child_ids = np.nonzero(parent >= 0)[0]
    edges = np.stack([parent[child_ids], child_ids], axis=1).astype(np.int64)
    indptr, indices = _csr_from_edges(len(parent), edges)
    return QaryTree(q, depth, _frozen(parent), _frozen(level), _frozen(children),
                    _frozen(edges.reshape(-1, 2)), indptr, indices)


def build_qary_tree(q, depth):
    """Complete q-ary tree with generations 0..depth."""
    if q < 2 or depth < 0:
        raise ValueError("need q >= 2 and depth >= 0")
    total = (q ** (depth + 1) - 1) // (q - 1)
    if total > MAX_SITES:
        raise CapacityError(f"tree with {total} vertices exceeds budget {MAX_SITES}")
    ids = np.arange(total, dtype=np.int64)
    parent = np.where(ids > 0, (ids - 1) // q, -1)
    n_internal = (q ** depth - 1) // (q - 1)
    children = np.full((total, q), -1, dtype=np.int64)
    if n_internal:
        children[:n_internal] = ids[:n_internal, None] * q + 1 + np.arange(q)[None, :]
    level = np.zeros(total, dtype=np.int64)
    start = 1
    for g in range(1, depth + 1):
        level[start:start + q ** g] = g
        start += q ** g
    return _tree_from_children(q, depth, children, parent, level)


@dataclass(frozen=True, eq=False)
class TrapField:
    """Trap indicators on a tree; ``kill_prob`` is the chance a visit to a trap kills."""

    omega: np.ndarray = field(repr=False)
    trap_prob: np.ndarray = field(repr=False)
    kill_prob: float = 1.0

    @property
    def n_traps(self):
        return int(self.omega.sum())


def sample_trap_field(tree, trap_prob, kill_prob=1.0, seed=None):
    """Independent Bernoulli traps on every non-root vertex; the root is never a trap."""
    p = np.broadcast_to(np.asarray(trap_prob, dtype=float), (tree.n_sites,)).copy()
    nonroot = p[1:]
    if np.any(nonroot <= 0) or np.any(nonroot > 1) or np.any(~np.isfinite(nonroot)):
        raise ValueError("trap probabilities must lie in (0, 1]")
    if not 0 < kill_prob <= 1:
        raise ValueError("kill_prob must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    omega = rng.random(tree.n_sites) < p
    omega[0] = False
    p[0] = 0.0
    return TrapField(_frozen(omega), _frozen(p), float(kill_prob))


def prune_to_galton_watson(tree, field_):
    """Delete every trap together with its descendants (perfect traps only).

    With homogeneous trap probability p the surviving tree has the law of a
    Galton-Watson tree with Bin(q, 1-p) offspring, truncated at ``tree.depth``.
    """
    if field_.kill_prob != 1.0:
        raise ValueError("pruning needs perfect traps (kill_prob == 1)")
    if len(field_.omega) != tree.n_sites:
        raise ValueError("trap field does not match tree")
    keep = np.zeros(tree.n_sites, dtype=bool)
    keep[0] = True
    # BFS order puts parents before children
    par = tree.parent
    for v in range(1, tree.n_sites):
        keep[v] = keep[par[v]] and not field_.omega[v]
    old = np.nonzero(keep)[0]
    new_id = np.full(tree.n_sites, -1, dtype=np.int64)
    new_id[old] = np.arange(len(old))
    children = tree.children[old]
    children = np.where(children >= 0, new_id[np.maximum(children, 0)], -1)
    parent = np.where(par[old] >= 0, new_id[np.maximum(par[old], 0)], -1)
    return _tree_from_children(tree.q, tree.depth, children, parent, tree.level[old].copy())


# --------------------------------------------------------------------------
# Site-class patterns on Z^d.  Each pattern answers membership queries for
# arbitrary integer coordinate arrays, so walks can use them without a box.
# --------------------------------------------------------------------------

class Pattern:
    kind = "abstract"

    def dissipative(self, coords):
        raise NotImplementedError

    def source(self, coords):
        return np.zeros(len(np.atleast_2d(coords)), dtype=bool)

    def spec(self):
        return {"kind": self.kind}


class EmptyD(Pattern):
    kind = "empty"

    def dissipative(self, coords):
        return np.zeros(len(np.atleast_2d(coords)), dtype=bool)


class AllD(Pattern):
    kind = "all"

    def dissipative(self, coords):
        return np.ones(len(np.atleast_2d(coords)), dtype=bool)


class AxisD(Pattern):
    """All sites on one coordinate axis (every other coordinate zero)."""

    kind = "axis"

    def __init__(self, axis=0):
        self.axis = int(axis)

    def dissipative(self, coords):
        c = np.atleast_2d(coords)
        others = np.delete(c, self.axis, axis=1)
        return np.all(others == 0, axis=1)

    def spec(self):
        return {"kind": self.kind, "axis": self.axis}


class SublatticeD(Pattern):
    """Sites with ``x_i % period_i == 0`` on every axis."""

    kind = "sublattice"

    def __init__(self, period):
        self.period = tuple(int(p) for p in np.atleast_1d(period))
        if any(p < 1 for p in self.period):
            raise PatternError("period: entries must be >= 1")

    def dissipative(self, coords):
        c = np.atleast_2d(coords)
        period = np.broadcast_to(np.array(self.period), (c.shape[1],))
        return np.all(c % period == 0, axis=1)

    def spec(self):
        return {"kind": self.kind, "period": list(self.period)}


def polynomial_sequence(coeffs):
    """k -> sum_j coeffs[j] * k**j."""
    coeffs = [float(c) for c in coeffs]
    return lambda k: int(round(sum(c * k ** j for j, c in enumerate(coeffs))))


def geometric_sequence(base, scale=1):
    return lambda k: int(scale * base ** k)


class LinesD(Pattern):
    """Hyperplanes ``x_axis in {0, ±r_1, ±r_2, ...}`` (horizontal lines in d = 2).

    ``r`` is either a finite increasing list ``(r_1, r_2, ...)`` or a callable
    ``k -> r_k`` for k >= 1 producing an increasing sequence.
    """

    kind = "lines"

    def __init__(self, r, axis=-1):
        self.axis = int(axis)
        self._gen = None
        if callable(r):
            self._gen = r
            self._values = []
        else:
            vals = [int(v) for v in r]
            if any(b <= a for a, b in zip(vals, vals[1:])) or any(v <= 0 for v in vals):
                raise PatternError("r: must be a strictly increasing list of positive integers")
            self._values = vals
        self._r_spec = None if callable(r) else list(self._values)

    def _extend(self, limit):
        if self._gen is None:
            return
        k = len(self._values) + 1
        while not self._values or self._values[-1] <= limit:
            v = int(self._gen(k))
            if self._values and v <= self._values[-1]:
                raise PatternError("r: generator must be strictly increasing")
            self._values.append(v)
            k += 1

    def rows(self, limit):
        """Sorted non-negative line offsets up to ``limit``."""
        self._extend(limit)
        return [0] + [v for v in self._values if v <= limit]

    def dissipative(self, coords):
        c = np.atleast_2d(coords)
        y = np.abs(c[:, self.axis])
        lim = int(y.max()) if len(y) else 0
        return np.isin(y, self.rows(lim))

    def spec(self):
        out = {"kind": self.kind, "axis": self.axis}
        if self._r_spec is not None:
            out["r"] = self._r_spec
        return out


class _SiteSet(Pattern):
    def __init__(self, sites):
        sites = [tuple(int(c) for c in s) for s in sites]
        if sites and len({len(s) for s in sites}) != 1:
            raise PatternError("sites: mixed dimensions")
        self.sites = sites
        self._set = set(sites)

    def _member(self, coords):
        c = np.atleast_2d(coords)
        return np.fromiter((tuple(row) in self._set for row in c.tolist()), dtype=bool, count=len(c))

    def spec(self):
        return {"kind": self.kind, "sites": [list(s) for s in self.sites]}


class ExplicitD(_SiteSet):
    kind = "explicit"

    def dissipative(self, coords):
        return self._member(coords)


class FiniteComplementD(_SiteSet):
    """Everything dissipative except a finite list of sites."""

    kind = "finite_complement"

    def dissipative(self, coords):
        return ~self._member(coords)


class FiniteSourceD(_SiteSet):
    """Finitely many source sites; every other site dissipative."""

    kind = "finite_source"

    def dissipative(self, coords):
        return ~self._member(coords)

    def source(self, coords):
        return self._member(coords)


_PATTERNS = {
    "empty": lambda s: EmptyD(),
    "all": lambda s: AllD(),
    "axis": lambda s: AxisD(s.get("axis", 0)),
    "sublattice": lambda s: SublatticeD(s["period"]),
    "lines": lambda s: LinesD(_lines_r(s), s.get("axis", -1)),
    "explicit": lambda s: ExplicitD(s["sites"]),
    "finite_complement": lambda s: FiniteComplementD(s["sites"]),
    "finite_source": lambda s: FiniteSourceD(s["sites"]),
}


def _lines_r(s):
    if "r" in s:
        return s["r"]
    if "r_poly" in s:
        return polynomial_sequence(s["r_poly"])
    if "r_geometric" in s:
        return geometric_sequence(s["r_geometric"])
    raise KeyError("r")


def pattern_from_spec(spec):
    """Build a pattern from a plain dict such as ``{"kind": "lines", "r": [1, 3, 6]}``."""
    if isinstance(spec, Pattern):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise PatternError("pattern: expected a mapping with a 'kind' field")
    kind = spec["kind"]
    if kind not in _PATTERNS:
        raise PatternError(f"pattern.kind: unknown pattern {kind!r}")
    try:
        return _PATTERNS[kind](spec)
    except KeyError as exc:
        raise PatternError(f"pattern.{exc.args[0]}: required for kind {kind!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, PatternError):
            raise
        raise PatternError(f"pattern: {exc}") from None


@dataclass(frozen=True, eq=False)
class SiteClassMap:
    """Per-site class codes for a box; D and S take precedence over Boundary."""

    lattice: BoxLattice
    classes: np.ndarray = field(repr=False)

    @property
    def dissipative(self):
        return np.nonzero(self.classes == DISSIPATIVE)[0]

    @property
    def sources(self):
        return np.nonzero(self.classes == SOURCE)[0]

    def count(self, code):
        return int((self.classes == code).sum())


def build_site_classes(lattice, pattern):
    pattern = pattern_from_spec(pattern)
    coords = lattice.coords
    d_mask = pattern.dissipative(coords)
    s_mask = pattern.source(coords)
    if np.any(d_mask & s_mask):
        raise PatternError("pattern: a site cannot be both dissipative and source")
    classes = np.full(lattice.n_sites, ORDINARY, dtype=np.int8)
    classes[lattice.on_boundary()] = BOUNDARY
    classes[d_mask] = DISSIPATIVE
    classes[s_mask] = SOURCE
    return SiteClassMap(lattice, _frozen(classes))

