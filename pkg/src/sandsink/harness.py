"""Named experiments, YAML configs, seeding and report bundles.

A run writes its CSV/JSON outputs, ``summary.txt`` (one line per check) and
``manifest.json`` (config echo, version, wall time, sha256 of every output)
into one directory under ``$SANDSINK_OUTPUT`` (default ``./runs``).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .green import (BOUNDED, GROWING, annealed_tree_tail, determinant, interior_row_sums,
                    row_sum_sequence, row_sums, solve_green_row)
from .pinning import gamma_scan, pinned_mass, stable_free_energy
from .randomwalk import (LatticeWalkSpec, TreeWalkSpec, feynman_kac_mass, local_time_ledger,
                         mean_survival_time, run_killed_lattice_walk, survival_tail,
                         write_curve_csv)
from .sandpile import (NonStabilizable, add_and_stabilize, assemble_toppling_matrix,
                       avalanche_statistics, conservation_residual, enumerate_recurrent,
                       sample_stationary, stabilize, stabilize_random_order)
from .stats import batch_means
from .topology import (PatternError, build_box, build_qary_tree, build_rectangle,
                       build_site_classes, pattern_from_spec, prune_to_galton_watson,
                       sample_trap_field)

OUTPUT_ENV = "SANDSINK_OUTPUT"
PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field path."""


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    anchor: str
    description: str


CATALOG = (
    CatalogEntry("E1", "exponential survival tail of the trapped tree walk",
                 "annealed q-ary tree walk with perfect traps: log-tail slope, Chernoff bound, E(T)"),
    CatalogEntry("E2", "Dhar's formula",
                 "stationary mean odometer against the exact Green's function on a path and a box"),
    CatalogEntry("E3", "recurrent configurations counted by det",
                 "exhaustive burning-test enumeration against det of the toppling matrix"),
    CatalogEntry("E4", "non-criticality from dissipation density",
                 "row-sum growth verdicts for all, sublattice, empty and axis dissipation"),
    CatalogEntry("E5", "annealed exponential bound on the avalanche diameter on trees",
                 "Green row tails averaged over binomial trees, plus MC diameter tail at the root"),
    CatalogEntry("E6", "Green row sums bounded by the killed walk lifetime",
                 "exact row sums against (1/2d) E(T) of the killed walk in d=1"),
    CatalogEntry("E7", "pinning free energy controls the source mass",
                 "gamma-scan of gamma F((alpha+beta)/gamma) and two total-mass estimators"),
)

AUXILIARY = {
    "E-trivial": "one-site volume; every identity holds exactly",
    "E-all": "E1..E7 followed by the property suites",
    "properties": "Abelianness, conservation, solver residual, symmetry, ledger sums, determinism",
}


def list_experiments():
    return list(CATALOG)


def lookup(exp_id):
    for e in CATALOG:
        if e.id == exp_id:
            return e
    raise KeyError(f"unknown experiment {exp_id!r}")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

DEFAULTS = {
    "E-trivial": {},
    "E1": {"q": 2, "trap_prob": 0.3, "kill_prob": 1.0, "n_walks": 100_000,
           "n_grid": list(range(5, 41)), "eps": 0.2, "horizon": 80},
    "E2": {"volumes": [[5], [5, 5]], "burn_in": 10_000, "n_samples": 100_000,
           "pairs": None, "n_batches": 30},
    "E3": {"volumes": [[k] for k in range(2, 9)] + [[2, 2], [2, 3], [3, 3]]},
    "E4": {"volumes": [4, 8, 16, 32], "ratio": 0.9, "window": 3, "interior_band": [0.9, 1.0],
           "cases": [
               {"name": "all_d1", "d": 1, "pattern": {"kind": "all"}, "x": [0], "expect": BOUNDED},
               {"name": "all_d2", "d": 2, "pattern": {"kind": "all"}, "x": [0, 0], "expect": BOUNDED},
               {"name": "even_d1", "d": 1, "pattern": {"kind": "sublattice", "period": [2]},
                "x": [0], "expect": BOUNDED},
               {"name": "even_d2", "d": 2, "pattern": {"kind": "sublattice", "period": [2, 2]},
                "x": [0, 0], "expect": BOUNDED},
               {"name": "empty_d2", "d": 2, "pattern": {"kind": "empty"}, "x": [0, 0],
                "expect": GROWING},
               {"name": "axis_d2", "d": 2, "pattern": {"kind": "axis", "axis": 0}, "x": [0, 1],
                "expect": GROWING},
           ]},
    "E5": {"q": 2, "survive_prob": 0.7, "depth": 14, "n_trees": 200, "n_grid": list(range(2, 11)),
           "mc_trees": 20, "burn_in": 500, "n_samples": 2000},
    "E6": {"n": 32, "n_walks": 100_000, "horizon": 2000,
           "cases": [{"name": "all", "pattern": {"kind": "all"}},
                     {"name": "even", "pattern": {"kind": "sublattice", "period": [2]}}]},
    "E7": {"alpha": 1.0, "beta": 1.0, "gamma": [1.0, 2.0, 4.0, 8.0], "t0": 8.0, "t_max": 1024.0,
           "n_walks": 20_000, "m_grid": [0.0, 0.25, 0.5, 1.0, 2.0],
           "mass_gamma": 1.0, "mass_t": [0.5, 1.0, 1.5, 2.0, 3.0], "mass_walks": 100_000},
    "properties": {"n_pairs": 1000, "shape": [4, 4], "n_symmetry": 20, "ledger_walks": 50,
                   "ledger_k": 200},
}
DEFAULTS["E-all"] = {k: {} for k in ["E1", "E2", "E3", "E4", "E5", "E6", "E7", "properties"]}


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str | None = None
    workers: int = 1

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a mapping at top level")
        unknown = set(raw) - {"experiment", "params", "seed", "output_dir", "workers"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown top-level key")
        if "experiment" not in raw:
            raise ConfigError("experiment: required")
        cfg = cls(raw["experiment"], raw.get("params") or {}, raw.get("seed", 0),
                  raw.get("output_dir"), raw.get("workers", 1))
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"config: not valid YAML ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self):
        return {"experiment": self.experiment, "params": self.params, "seed": self.seed,
                "output_dir": self.output_dir, "workers": self.workers}

    def resolved(self):
        """Params with defaults filled in."""
        return _merge(DEFAULTS[self.experiment], self.params, self.experiment)


def _merge(defaults, params, path):
    if not isinstance(params, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for k in params:
        if k not in defaults:
            raise ConfigError(f"{path}.{k}: unknown parameter")
    if path == "E-all":
        return {k: _merge(DEFAULTS[k], params.get(k) or {}, k) for k in defaults}
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(params))
    return out


def _need(cond, where, msg):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _check_pattern(spec, where):
    try:
        pattern_from_spec(spec)
    except PatternError as exc:
        raise ConfigError(f"{where}.{exc}") from None


def _positive_int(p, key, where):
    _need(isinstance(p[key], int) and p[key] > 0, f"{where}.{key}", "must be a positive integer")


def _check_params(exp, p):
    w = exp
    if exp == "E1":
        _need(p["q"] >= 2, f"{w}.q", "must be >= 2")
        _need(0 < p["trap_prob"] < 1, f"{w}.trap_prob", "must lie in (0, 1)")
        _need(0 < p["kill_prob"] <= 1, f"{w}.kill_prob", "must lie in (0, 1]")
        _positive_int(p, "n_walks", w)
        _positive_int(p, "horizon", w)
        _need(len(p["n_grid"]) >= 3 and all(b > a for a, b in zip(p["n_grid"], p["n_grid"][1:])),
              f"{w}.n_grid", "need at least 3 increasing values")
    elif exp == "E2":
        for i, v in enumerate(p["volumes"]):
            _need(isinstance(v, list) and all(isinstance(s, int) and s > 0 for s in v),
                  f"{w}.volumes[{i}]", "expected a list of positive side lengths")
        _positive_int(p, "n_samples", w)
        _need(p["n_samples"] >= 2 * p["n_batches"], f"{w}.n_samples", "fewer samples than batches")
    elif exp == "E3":
        for i, v in enumerate(p["volumes"]):
            _need(isinstance(v, list) and all(isinstance(s, int) and s > 0 for s in v),
                  f"{w}.volumes[{i}]", "expected a list of positive side lengths")
    elif exp == "E4":
        _need(all(b > a for a, b in zip(p["volumes"], p["volumes"][1:])), f"{w}.volumes",
              "must be increasing")
        for i, c in enumerate(p["cases"]):
            _need(len(c["x"]) == c["d"], f"{w}.cases[{i}].x", "dimension does not match d")
            _check_pattern(c["pattern"], f"{w}.cases[{i}]")
    elif exp == "E5":
        _need(0 < p["survive_prob"] < 1, f"{w}.survive_prob", "must lie in (0, 1)")
        _positive_int(p, "n_trees", w)
    elif exp == "E6":
        _positive_int(p, "n_walks", w)
        for i, c in enumerate(p["cases"]):
            _check_pattern(c["pattern"], f"{w}.cases[{i}]")
    elif exp == "E7":
        _need(p["alpha"] > 0, f"{w}.alpha", "must be positive")
        _need(p["beta"] >= 0, f"{w}.beta", "must be non-negative")
        g = p["gamma"]
        _need(all(x > 0 for x in g) and all(b > a for a, b in zip(g, g[1:])), f"{w}.gamma",
              "must be positive and increasing")
        _need(p["n_walks"] >= 30, f"{w}.n_walks", "need at least 30 walks")
    elif exp == "properties":
        _positive_int(p, "n_pairs", w)


def validate(cfg):
    """Raise :class:`ConfigError` naming the first offending field."""
    if cfg.experiment not in DEFAULTS:
        raise ConfigError(f"experiment: unknown id {cfg.experiment!r}")
    _need(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    _need(isinstance(cfg.workers, int) and cfg.workers >= 1, "workers", "must be >= 1")
    p = cfg.resolved()
    if cfg.experiment == "E-all":
        for k, sub in p.items():
            _check_params(k, sub)
    else:
        _check_params(cfg.experiment, p)
    return p


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def task_seed(master, *path):
    """Integer seed for a task, from the master seed and the hashed task path."""
    key = int.from_bytes(hashlib.blake2b("/".join(map(str, path)).encode(), digest_size=8).digest(),
                         "little")
    state = np.random.SeedSequence(master, spawn_key=(key,)).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    status: str
    detail: str = ""


@dataclass
class ExperimentResult:
    id: str
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    error: str | None = None

    def check(self, name, ok, detail="", inconclusive=False):
        status = INCONCLUSIVE if inconclusive else (PASS if ok else FAIL)
        self.checks.append(Check(name, status, detail))

    @property
    def status(self):
        if self.error or any(c.status == FAIL for c in self.checks):
            return FAIL
        if any(c.status == INCONCLUSIVE for c in self.checks):
            return INCONCLUSIVE
        return PASS


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _fan_out(fn, items, width):
    if width <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=width) as ex:
        return list(ex.map(fn, *zip(*items)))


def _within(a, b, sa, sb, k=3.0):
    return abs(a - b) <= k * math.sqrt(sa ** 2 + sb ** 2)


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------

def _trivial(p, seed, out, width):
    res = ExperimentResult("E-trivial")
    lat = build_rectangle((1,))
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "empty"}))
    rec = enumerate_recurrent(m)
    det = determinant(m)
    g = solve_green_row(m, 0)
    rng = np.random.default_rng(seed)
    odo = []
    for eta in rec:
        eta = eta.copy()
        eta[0] += 1
        odo.append(stabilize_random_order(m, eta, rng)[1][0])
    mean_odo = float(np.mean(odo))
    _write_rows(out / "identities.csv", ["quantity", "lhs", "rhs"],
                [("recurrent_count_vs_det", len(rec), det), ("mean_odometer_vs_green", mean_odo, g[0])])
    res.files.append("identities.csv")
    res.check("recurrent count equals det", len(rec) == det, f"{len(rec)} vs {det}")
    res.check("exact stationary odometer equals G", abs(mean_odo - g[0]) < 1e-12, f"{mean_odo} vs {g[0]}")
    return res


def _write_fits(path, fits):
    with open(path, "w") as fh:
        json.dump({k: f.as_dict() for k, f in fits.items()}, fh, indent=1, sort_keys=True)


def _e1(p, seed, out, width):
    res = ExperimentResult("E1")
    spec = TreeWalkSpec(p["q"], p["trap_prob"], p["kill_prob"])
    tail = survival_tail(spec, p["n_grid"], p["n_walks"], task_seed(seed, "E1", "tail"), eps=p["eps"])
    tail.write_csv(out / "survival_tail.csv")
    res.files.append("survival_tail.csv")
    fit = tail.fit
    _write_fits(out / "fit.json", {"survival_tail": fit})
    res.files.append("fit.json")
    res.check("log-tail slope negative and significant", fit.significant,
              f"slope {fit.slope:.5f} +- {fit.slope_stderr:.5f}")
    if tail.bound is not None:
        excess = tail.survival_prob - tail.bound - 3 * tail.stderr
        res.check("tail below analytic bound within 3 sigma", bool(np.all(excess <= 0)),
                  f"max excess {excess.max():.3g}")
        _write_rows(out / "tail_bound.csv", ["n", "estimate", "bound"],
                    zip(tail.grid.tolist(), tail.survival_prob, tail.bound))
        res.files.append("tail_bound.csv")
    s = task_seed(seed, "E1", "mean")
    h = p["horizon"]
    m1 = mean_survival_time(spec, h, p["n_walks"], s)
    m2 = mean_survival_time(spec, 2 * h, p["n_walks"], s)
    write_curve_csv(out / "mean_survival.csv", [(h, m1.mean, m1.stderr, m1.n_samples),
                                                (2 * h, m2.mean, m2.stderr, m2.n_samples)])
    res.files.append("mean_survival.csv")
    res.check("E(T) stable under horizon doubling", _within(m1.mean, m2.mean, m1.stderr, m2.stderr),
              f"{m1.mean:.4f} -> {m2.mean:.4f} (se {m2.stderr:.4f})")
    return res


def default_pairs(n):
    """Probe pairs for the odometer check: all pairs for tiny volumes, else five."""
    if n <= 3:
        return [(x, y) for x in range(n) for y in range(x, n)]
    c = n // 2
    return [(c, c), (c, c + 1), (0, 0), (0, c), (c, n - 1)]


def _dhar_volume(shape, p, seed):
    lat = build_rectangle(tuple(shape))
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "empty"}))
    pairs = [tuple(x) for x in p["pairs"]] if p["pairs"] else default_pairs(lat.n_sites)
    probes = sorted({x for x, _ in pairs})
    vals = np.empty((p["n_samples"], len(pairs)))
    stream = sample_stationary(m, p["burn_in"], p["n_samples"], seed=seed, probe_sites=probes)
    for k, s in enumerate(stream):
        vals[k] = [s.probes[x][0][y] for x, y in pairs]
    mean, se = batch_means(vals, p["n_batches"])
    rows = []
    for j, (x, y) in enumerate(pairs):
        g = solve_green_row(m, x)[y]
        rows.append((x, y, float(g), float(mean[j]), float(se[j])))
    return rows


def _e2(p, seed, out, width):
    res = ExperimentResult("E2")
    items = [(v, p, task_seed(seed, "E2", "x".join(map(str, v)))) for v in p["volumes"]]
    for v, rows in zip(p["volumes"], _fan_out(_dhar_volume, items, width)):
        tag = "x".join(map(str, v))
        name = f"dhar_{tag}.csv"
        _write_rows(out / name, ["x", "y", "green", "mean_odometer", "stderr"], rows)
        res.files.append(name)
        bad = [r for r in rows if abs(r[3] - r[2]) > 3 * r[4]]
        table = [f"volume {tag}: exact G vs MC mean odometer",
                 f"  {'x':>4} {'y':>4} {'exact':>10} {'mc':>10} {'stderr':>9}"]
        table += [f"  {x:>4} {y:>4} {g:>10.5f} {mc:>10.5f} {s:>9.5f}" for x, y, g, mc, s in rows]
        res.tables.append("\n".join(table))
        res.check(f"Dhar formula on {tag} within 3 sigma", not bad, f"{len(rows)} pairs, {len(bad)} outside")
    return res


def _recurrent_volume(shape):
    lat = build_rectangle(tuple(shape))
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "empty"}))
    return lat.n_sites, len(enumerate_recurrent(m)), determinant(m)


def _e3(p, seed, out, width):
    res = ExperimentResult("E3")
    rows = []
    for v, (n, count, det) in zip(p["volumes"], _fan_out(_recurrent_volume, [(v,) for v in p["volumes"]], width)):
        tag = "x".join(map(str, v))
        rows.append((tag, n, count, det))
        res.check(f"recurrent count equals det on {tag}", count == det, f"{count} vs {det}")
    _write_rows(out / "recurrent_counts.csv", ["volume", "n_sites", "recurrent", "det"], rows)
    res.files.append("recurrent_counts.csv")
    return res


def _growth_case(case, p):
    rep = row_sum_sequence(case["d"], case["pattern"], case["x"], p["volumes"],
                           ratio=p["ratio"], window=p["window"])
    inner = None
    if case["pattern"].get("kind") == "all":
        inner = interior_row_sums(case["d"], case["pattern"], p["volumes"][-1])
    return rep, inner


def _e4(p, seed, out, width):
    res = ExperimentResult("E4")
    verdicts = {}
    lo, hi = p["interior_band"]
    for case, (rep, inner) in zip(p["cases"], _fan_out(_growth_case, [(c, p) for c in p["cases"]], width)):
        name = case["name"]
        rep.write_csv(out / f"row_sums_{name}.csv")
        res.files.append(f"row_sums_{name}.csv")
        verdicts[name] = json.loads(rep.verdict_json())
        seq = ", ".join(f"{v:.4g}" for v in rep.row_sums[:, 0])
        res.check(f"{name} verdict {case['expect']}", rep.verdict == case["expect"],
                  f"got {rep.verdict}; row sums {seq}")
        if inner is not None:
            ok = inner.min() >= lo and inner.max() <= hi + 1e-12
            res.check(f"{name} interior row sums in [{lo}, {hi}]", ok,
                      f"range [{inner.min():.8f}, {inner.max():.8f}]")
    with open(out / "verdicts.json", "w") as fh:
        json.dump(verdicts, fh, indent=1, sort_keys=True)
    res.files.append("verdicts.json")
    return res


def _tree_diameters(q, survive, depth, burn_in, n_samples, seed):
    base = build_qary_tree(q, depth)
    tree_ss, chain_ss = np.random.SeedSequence(seed).spawn(2)
    tree = prune_to_galton_watson(base, sample_trap_field(base, 1 - survive, seed=tree_ss))
    m = assemble_toppling_matrix(tree)
    stream = sample_stationary(m, burn_in, n_samples, seed=chain_ss, probe_sites=[0])
    return [s.probes[0][1] for s in stream]


def _e5(p, seed, out, width):
    res = ExperimentResult("E5")
    rep = annealed_tree_tail(p["q"], p["survive_prob"], p["depth"], p["n_trees"], p["n_grid"],
                             task_seed(seed, "E5", "green"))
    _write_rows(out / "tree_tail.csv", ["n", "mean_tail", "stderr", "n_trees"],
                [(int(n), m, s, rep.n_trees) for n, m, s in zip(rep.n_grid, rep.mean_tail, rep.stderr)])
    res.files.append("tree_tail.csv")
    res.check("annealed Green tail slope negative and significant", rep.fit.significant,
              f"slope {rep.fit.slope:.4f} +- {rep.fit.slope_stderr:.4f}")
    items = [(p["q"], p["survive_prob"], p["depth"], p["burn_in"], p["n_samples"],
              task_seed(seed, "E5", "mc", i)) for i in range(p["mc_trees"])]
    records = [r for part in _fan_out(_tree_diameters, items, width) for r in part]
    stats = avalanche_statistics(records, 0, fit=False)
    keep = stats.diam_tail > 0
    write_curve_csv(out / "diameter_tail.csv",
                    [(int(n), float(t), float(math.sqrt(t * (1 - t) / stats.n_samples)), stats.n_samples)
                     for n, t in zip(stats.diam_grid, stats.diam_tail)])
    res.files.append("diameter_tail.csv")
    fits = {"green_tail": rep.fit}
    if keep.sum() < 3:
        res.check("MC root diameter tail slope negative", False, "fewer than 3 positive tail points",
                  inconclusive=True)
    else:
        fit = avalanche_statistics(records, 0).diam_fit
        fits["diameter_tail"] = fit
        res.check("MC root diameter tail slope negative", fit.significant,
                  f"slope {fit.slope:.4f} +- {fit.slope_stderr:.4f}")
    _write_fits(out / "fit.json", fits)
    res.files.append("fit.json")
    return res


def _e6(p, seed, out, width):
    res = ExperimentResult("E6")
    d = 1
    rows = []
    for case in p["cases"]:
        lat = build_box(d, p["n"])
        m = assemble_toppling_matrix(lat, build_site_classes(lat, case["pattern"]))
        u = float(row_sums(m)[lat.index_of((0,))])
        est = mean_survival_time(LatticeWalkSpec(d, case["pattern"], (0,)), p["horizon"], p["n_walks"],
                                 task_seed(seed, "E6", case["name"]))
        rows.append((case["name"], u, est.mean, est.stderr, est.censored_fraction))
        res.check(f"{case['name']}: row sum <= E(T)/2d + 3 sigma",
                  u <= (est.mean + 3 * est.stderr) / (2 * d),
                  f"{u:.5f} vs {est.mean / (2 * d):.5f}", inconclusive=est.flagged)
        if case["pattern"].get("kind") == "all":
            res.check("all-D: E(T) = 3 within 3 sigma", abs(est.mean - 3) <= 3 * est.stderr,
                      f"{est.mean:.4f} +- {est.stderr:.4f}")
    _write_rows(out / "walk_green.csv", ["case", "row_sum", "mean_T", "stderr", "censored"], rows)
    res.files.append("walk_green.csv")
    return res


def _e7(p, seed, out, width):
    res = ExperimentResult("E7")
    scan = gamma_scan(1, p["alpha"], p["beta"], p["gamma"], p["t0"], p["n_walks"],
                      task_seed(seed, "E7", "scan"), t_max=p["t_max"])
    scan.write_csv(out / "gamma_scan.csv")
    res.files.append("gamma_scan.csv")
    v, s = scan.value, scan.stderr
    decreasing = bool(np.all(np.diff(v) < 0))
    res.check("gamma F strictly decreasing", decreasing,
              ", ".join(f"{a:.4f}+-{b:.4f}" for a, b in zip(v, s)),
              inconclusive=decreasing and not scan.estimate.stable.all())
    est = stable_free_energy(1, p["m_grid"], p["t0"], p["t_max"], p["n_walks"], task_seed(seed, "E7", "m"))
    est.write_csv(out / "free_energy.csv")
    res.files.append("free_energy.csv")
    zero = est.m_grid == 0
    res.check("F_hat(0) = 0 exactly", bool(np.all(est.F_hat[zero] == 0)), "")
    order = np.argsort(est.m_grid)
    F, S = est.F_hat[order], est.stderr[order]
    mono = all(F[i + 1] >= F[i] - 3 * math.hypot(S[i], S[i + 1]) for i in range(len(F) - 1))
    res.check("F_hat monotone in m within 3 sigma", mono, ", ".join(f"{x:.4f}" for x in F))
    g = p["mass_gamma"]
    fk = feynman_kac_mass((0,), {"kind": "finite_source", "sites": [[0]]}, p["alpha"], p["beta"], g,
                          p["mass_t"], p["mass_walks"], task_seed(seed, "E7", "fk"))
    pm = pinned_mass(p["alpha"], p["beta"], g, p["mass_t"], 1, p["mass_walks"],
                     task_seed(seed, "E7", "pinned"))
    _write_rows(out / "mass.csv", ["t", "feynman_kac", "fk_stderr", "factorized", "fact_stderr"],
                zip(fk.t, fk.mass, fk.stderr, pm.mass, pm.stderr))
    res.files.append("mass.csv")
    agree = [_within(a, b, sa, sb) for a, b, sa, sb in zip(fk.mass, pm.mass, fk.stderr, pm.stderr)]
    res.check("factorized mass agrees with Feynman-Kac", all(agree),
              f"{sum(agree)}/{len(agree)} times within 3 sigma",
              inconclusive=fk.variance_flag or pm.variance_flag)
    return res


def _properties(p, seed, out, width):
    res = ExperimentResult("properties")
    rng = np.random.default_rng(task_seed(seed, "properties", "abelian"))
    lat = build_rectangle(tuple(p["shape"]))
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "empty"}))
    n = lat.n_sites
    mismatched = residual = 0
    for _ in range(p["n_pairs"]):
        eta = rng.integers(0, 2 * m.diag, size=n)
        h1, o1 = stabilize(m, eta)
        h2, o2 = stabilize_random_order(m, eta, rng)
        mismatched += not (np.array_equal(h1, h2) and np.array_equal(o1, o2))
        residual = max(residual, int(np.abs(conservation_residual(m, eta, h1, o1)).max()))
        x = int(rng.integers(n))
        h3, o3, _ = add_and_stabilize(m, h1, x)
        residual = max(residual, int(np.abs(conservation_residual(m, h1, h3, o3, x)).max()))
    res.check("Abelianness: FIFO and random order agree exactly", mismatched == 0,
              f"{p['n_pairs']} pairs, {mismatched} mismatches")
    res.check("conservation identity exact", residual == 0, f"max residual {residual}")

    rows = np.stack([solve_green_row(m, x) for x in range(n)])
    dense = m.to_dense()
    resid = float(np.abs(dense @ rows.T - np.eye(n)).max())
    res.check("solver residual <= 1e-10", resid <= 1e-10, f"{resid:.2e}")
    xs = rng.integers(n, size=(p["n_symmetry"], 2))
    asym = max(abs(rows[a, b] - rows[b, a]) for a, b in xs)
    res.check("Green symmetry", asym <= 1e-12, f"max |G(x,y)-G(y,x)| {asym:.2e}")

    bad = 0
    for i in range(p["ledger_walks"]):
        tr = run_killed_lattice_walk({"kind": "empty"}, (0, 0), p["ledger_k"],
                                     task_seed(seed, "properties", "ledger", i))
        bad += sum(local_time_ledger(tr, p["ledger_k"]).values()) != p["ledger_k"]
    res.check("local-time ledger sums to k", bad == 0, f"{p['ledger_walks']} walks")

    paths = [out / f"determinism_{k}.csv" for k in (0, 1)]
    for path in paths:
        tail = survival_tail(TreeWalkSpec(2, 0.3), [5, 10, 15], 5000, task_seed(seed, "properties", "det"))
        tail.write_csv(path)
    same = paths[0].read_bytes() == paths[1].read_bytes()
    res.files += [x.name for x in paths]
    res.check("seeded runs byte-identical", same, "")
    return res


RUNNERS = {"E-trivial": _trivial, "E1": _e1, "E2": _e2, "E3": _e3, "E4": _e4, "E5": _e5,
           "E6": _e6, "E7": _e7, "properties": _properties}


def run_experiment(exp_id, params=None, seed=0, out=None, width=1):
    """Run one experiment in ``out`` (a directory) and return its result."""
    p = _merge(DEFAULTS[exp_id], params or {}, exp_id)
    _check_params(exp_id, p)
    out = Path(out) if out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[exp_id](p, seed, out, width)


# --------------------------------------------------------------------------
# Report bundle
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    config: ExperimentConfig
    out_dir: Path
    results: list
    wall_time: float

    @property
    def status(self):
        st = [r.status for r in self.results]
        if FAIL in st:
            return FAIL
        return INCONCLUSIVE if INCONCLUSIVE in st else PASS

    @property
    def exit_code(self):
        return {PASS: 0, INCONCLUSIVE: 2, FAIL: 1}[self.status]


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def summary_text(results):
    lines = []
    for r in results:
        lines.append(f"[{r.id}] {r.status.upper()}")
        if r.error:
            lines.append(f"  error: {r.error}")
        for c in r.checks:
            lines.append(f"  {c.status.upper():<12} {c.name}" + (f"  ({c.detail})" if c.detail else ""))
        for t in r.tables:
            lines.append(t)
    return "\n".join(lines) + "\n"


def run(config):
    """Validate, run and write the report bundle; returns a :class:`RunReport`."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    params = validate(config)
    out = output_root() / (config.output_dir or config.experiment)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if config.experiment == "E-all":
        jobs = [(k, params[k]) for k in params]
    else:
        jobs = [(config.experiment, params)]
    results = []
    for exp_id, p in jobs:
        sub = out / exp_id if config.experiment == "E-all" else out
        sub.mkdir(parents=True, exist_ok=True)
        try:
            r = RUNNERS[exp_id](p, config.seed, sub, config.workers)
        except (NonStabilizable, ValueError, np.linalg.LinAlgError) as exc:
            r = ExperimentResult(exp_id, error=f"{type(exc).__name__}: {exc}")
        if sub != out:
            r.files = [f"{exp_id}/{f}" for f in r.files]
        results.append(r)
    wall = time.perf_counter() - t0
    (out / "summary.txt").write_text(summary_text(results))
    files = [f for r in results for f in r.files] + ["summary.txt"]
    report = RunReport(config, out, results, wall)
    manifest = {
        "artifact": "sandsink",
        "version": __version__,
        "config": config.to_dict(),
        "resolved_params": params,
        "wall_time_s": round(wall, 3),
        "status": report.status,
        "partial": report.status != PASS,
        "inconclusive": [r.id for r in results if r.status == INCONCLUSIVE],
        "failed": [r.id for r in results if r.status == FAIL],
        "files": [{"path": f, "sha256": _sha256(out / f)} for f in files],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=float)
    return report


def export_matrix(config):
    """Write edge lists and COO toppling matrices for the volumes of a config."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    p = validate(config)
    out = output_root() / (config.output_dir or config.experiment) / "matrices"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(tag, graph, classes):
        m = assemble_toppling_matrix(graph, classes)
        graph.write_edge_list(out / f"{tag}.edges")
        m.write_coo(out / f"{tag}.coo")
        written.extend([out / f"{tag}.edges", out / f"{tag}.coo"])

    exp = config.experiment
    if exp in ("E2", "E3"):
        for v in p["volumes"]:
            lat = build_rectangle(tuple(v))
            emit("box_" + "x".join(map(str, v)), lat, build_site_classes(lat, {"kind": "empty"}))
    elif exp == "E4":
        for c in p["cases"]:
            lat = build_box(c["d"], p["volumes"][0])
            emit(f"{c['name']}_n{p['volumes'][0]}", lat, build_site_classes(lat, c["pattern"]))
    elif exp == "E6":
        for c in p["cases"]:
            lat = build_box(1, p["n"])
            emit(f"{c['name']}_n{p['n']}", lat, build_site_classes(lat, c["pattern"]))
    elif exp == "E5":
        emit(f"tree_q{p['q']}_depth{p['depth']}", build_qary_tree(p["q"], p["depth"]), None)
    elif exp == "E-trivial":
        lat = build_rectangle((1,))
        emit("box_1", lat, build_site_classes(lat, {"kind": "empty"}))
    else:
        raise ConfigError(f"experiment: {exp} has no finite matrix to export")
    return written
