import itertools

import numpy as np
import pytest

from sandsink.green import solve_green_row
from sandsink.sandpile import (CONTINUOUS, INTEGER, InsufficientSamples, NonStabilizable,
                               add_and_stabilize, assemble_toppling_matrix, avalanche_statistics,
                               burning_test, conservation_residual, enumerate_recurrent,
                               sample_stationary, stabilize, stabilize_random_order,
                               write_avalanche_csv, write_heights_jsonl)
from sandsink.randomwalk import run_trapped_tree_walk
from sandsink.stats import batch_means
from sandsink.topology import (build_box, build_qary_tree, build_rectangle, build_site_classes,
                               prune_to_galton_watson, sample_trap_field)


def path(n, pattern=None):
    lat = build_rectangle((n,))
    return assemble_toppling_matrix(lat, build_site_classes(lat, pattern or {"kind": "empty"}))


def box(shape):
    lat = build_rectangle(shape)
    return assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "empty"}))


def burnable(D, eta):
    """Independent dense burning rule."""
    n = len(eta)
    unburnt = set(range(n))
    changed = True
    while changed:
        changed = False
        for x in sorted(unburnt):
            if eta[x] >= sum(-D[x, y] for y in unburnt if y != x):
                unburnt.discard(x)
                changed = True
    return not unburnt


def test_three_site_path_matrix():
    m = path(3)
    assert m.mode == INTEGER
    assert np.array_equal(m.to_dense(), [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])


def test_single_dissipative_site():
    lat = build_box(1, 0)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}))
    assert m.to_dense().tolist() == [[3.0]]


def test_source_diagonal():
    lat = build_box(2, 1)
    cls = build_site_classes(lat, {"kind": "finite_source", "sites": [[0, 0]]})
    m = assemble_toppling_matrix(lat, cls, gamma=1.0, alpha=0.5, beta=0.25)
    assert m.mode == CONTINUOUS
    assert m.to_dense()[lat.index_of((0, 0)), lat.index_of((0, 0))] == 3.75


@pytest.mark.parametrize("kw", [{"gamma": 0}, {"alpha": 0}, {"beta": 4.5}, {"beta": 0}])
def test_parameter_domain(kw):
    lat = build_box(2, 1)
    cls = build_site_classes(lat, {"kind": "finite_source", "sites": [[0, 0]]})
    with pytest.raises(ValueError):
        assemble_toppling_matrix(lat, cls, **{"beta": 1.0, **kw})


def test_integer_mode_requires_unit_params():
    lat = build_box(1, 1)
    with pytest.raises(ValueError):
        assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}), alpha=2.0, mode=INTEGER)


def test_matrix_symmetric_and_diagonally_dominant():
    lat = build_box(2, 3)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "sublattice", "period": [2, 2]}))
    A = m.to_dense()
    assert np.array_equal(A, A.T)
    off = np.abs(A).sum(axis=1) - np.diag(A)
    assert np.all(np.diag(A) >= off)
    assert np.any(np.diag(A) > off)


def test_stabilize_two_site_example():
    m = path(2)
    h, odo, rec = add_and_stabilize(m, [1, 1], 0)
    assert h.tolist() == [1, 0]
    assert odo.tolist() == [1, 1]
    assert rec.size == 2 and rec.diameter == 1
    assert set(rec.toppled.tolist()) == {0, 1}


def test_stable_is_identity():
    m = path(4)
    h, odo = stabilize(m, [1, 0, 1, 1])
    assert h.tolist() == [1, 0, 1, 1]
    assert not odo.any()


def test_zero_heights_no_avalanche():
    m = box((3, 3))
    for x in range(9):
        _, odo, rec = add_and_stabilize(m, m.zeros(), x)
        assert rec.size == 0 and not odo.any()


def test_five_site_full_avalanche():
    m = path(5)
    h, odo, rec = add_and_stabilize(m, [1] * 5, 2)
    assert rec.size == 5
    assert not conservation_residual(m, [1] * 5, h, odo, 2).any()


def test_budget_validation():
    with pytest.raises(ValueError):
        stabilize(path(2), [0, 0], budget=0)


def test_integer_mode_rejects_fractional_heights():
    with pytest.raises(ValueError, match="whole"):
        stabilize(path(2), [0.5, 1.0])
    h, _ = stabilize(path(2), [1.0, 1.0])
    assert h.dtype == np.int64


def test_source_model_not_stabilizable():
    # center is a source whose toppling pushes out 2 and costs only 0.5
    lat = build_rectangle((3,))
    cls = build_site_classes(lat, {"kind": "explicit", "sites": []})
    classes = cls.classes.copy()
    classes[1] = 2
    cls = type(cls)(lat, classes)
    m = assemble_toppling_matrix(lat, cls, gamma=1.0, beta=1.5)
    eta = np.asarray(m.diag) - 1e-3
    eta[1] += 1.0
    counts = []
    for budget in (100, 1000):
        with pytest.raises(NonStabilizable) as err:
            stabilize(m, eta, budget=budget)
        counts.append(err.value.odometer.sum())
    assert counts[1] > counts[0]


def test_continuous_conservation():
    lat = build_box(2, 2)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}), gamma=0.7, alpha=0.3)
    rng = np.random.default_rng(0)
    eta = rng.random(lat.n_sites) * 2 * np.asarray(m.diag)
    h, odo = stabilize(m, eta)
    res = conservation_residual(m, eta, h, odo)
    assert np.abs(res).max() <= 1e-9 * max(1.0, np.abs(eta).max())
    assert np.all(h < m.diag)


def test_fifo_matches_random_order():
    m = box((3, 4))
    rng = np.random.default_rng(1)
    for _ in range(50):
        eta = rng.integers(0, 3 * np.asarray(m.diag))
        a = stabilize(m, eta)
        b = stabilize_random_order(m, eta, rng)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_burning_examples():
    m = path(2)
    assert burning_test(m, [1, 1]).recurrent
    assert not burning_test(m, [0, 0]).recurrent
    rec = {tuple(e) for e in [(1, 1), (1, 0), (0, 1)]}
    for eta in itertools.product(range(2), repeat=2):
        assert burning_test(m, eta).recurrent == (eta in rec)


def test_burning_single_dissipative_site():
    lat = build_box(1, 0)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}))
    for k in range(3):
        res = burning_test(m, [k])
        assert res.recurrent and res.order == [0]


@pytest.mark.parametrize("shape", [(2,), (3,), (2, 2), (2, 3)])
def test_burning_agrees_with_dense_rule(shape):
    m = box(shape)
    D = m.to_dense()
    for eta in itertools.product(*[range(int(c)) for c in m.diag]):
        assert burning_test(m, eta).recurrent == burnable(D, eta)


@pytest.mark.parametrize("shape,count", [((2,), 3), ((3,), 4), ((8,), 9), ((2, 2), 192)])
def test_enumerate_counts(shape, count):
    m = box(shape)
    rec = enumerate_recurrent(m)
    assert len(rec) == count == round(np.linalg.det(m.to_dense()))


def test_enumerate_single_site():
    lat = build_box(1, 0)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}))
    assert len(enumerate_recurrent(m)) == 3


def test_enumerate_cap():
    with pytest.raises(ValueError):
        enumerate_recurrent(box((4, 4)), cap=1000)


def test_stationary_two_site_uniform():
    m = path(2)
    counts = {}
    n = 30000
    for s in sample_stationary(m, 100, n, seed=3):
        counts[tuple(s.heights)] = counts.get(tuple(s.heights), 0) + 1
    assert set(counts) == {(1, 1), (1, 0), (0, 1)}
    for c in counts.values():
        # consecutive states are correlated; allow a loose 5 sigma
        assert abs(c / n - 1 / 3) <= 5 * np.sqrt(2 / 9 / n)


def test_stationary_single_site_uniform():
    lat = build_box(1, 0)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}))
    h = [s.heights[0] for s in sample_stationary(m, 10, 3000, seed=0)]
    # adding one grain cycles 0 -> 1 -> 2 -> 0
    assert np.bincount(h).tolist() == [1000, 1000, 1000]


def test_dhar_small_box():
    m = box((3, 3))
    G = np.linalg.inv(m.to_dense())
    c = 4
    vals = np.array([s.probes[c][0] for s in sample_stationary(m, 1000, 20000, seed=5, probe_sites=[c])],
                    dtype=float)
    mean, se = batch_means(vals)
    assert np.all(np.abs(mean - G[c]) <= 3.5 * se + 1e-12)


def test_thinning_and_outputs(tmp_path):
    m = path(3)
    samples = list(sample_stationary(m, 5, 10, thinning=3, seed=1))
    assert [s.step for s in samples] == [5 + 3 * k + 2 for k in range(10)]
    write_heights_jsonl(samples, tmp_path / "h.jsonl", 1)
    write_avalanche_csv(samples, tmp_path / "a.csv", 1)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "seed,step,site,size,diameter"
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 10


def test_avalanche_statistics_trivial():
    lat = build_box(1, 0)
    m = assemble_toppling_matrix(lat, build_site_classes(lat, {"kind": "all"}))
    st = avalanche_statistics(sample_stationary(m, 0, 300, seed=0, probe_sites=[0]), 0, fit=False)
    assert set(st.sizes.tolist()) <= {0, 1}
    assert np.all(st.diam_tail == 0)


def test_avalanche_statistics_no_samples():
    with pytest.raises(InsufficientSamples):
        avalanche_statistics([], 0)


def test_tree_avalanche_bounded_by_walk_lifetime():
    # E(size) <= Σ_y G(o, y) <= E_o(T) of the trapped walk on the same tree
    base = build_qary_tree(2, 8)
    field_ = sample_trap_field(base, 0.3, seed=11)
    tree = prune_to_galton_watson(base, field_)
    m = assemble_toppling_matrix(tree)
    st = avalanche_statistics(sample_stationary(m, 500, 4000, seed=2, probe_sites=[0]), 0, fit=False)
    T = []
    for s in range(2000):
        tr = run_trapped_tree_walk(base, field_, 10_000, seed=s)
        T.append(tr.survival_time if tr.killed else len(tr.positions) - 1)
    T = np.asarray(T, dtype=float)
    mean, se = batch_means(st.sizes)
    assert mean <= solve_green_row(m, 0).sum() + 3 * se
    assert mean <= T.mean() + 3 * (se + T.std() / np.sqrt(len(T)))


def test_tree_matrix():
    t = build_qary_tree(2, 2)
    A = assemble_toppling_matrix(t).to_dense()
    assert np.all(np.diag(A) == 3)
    assert A[0, 1] == A[1, 0] == -1
