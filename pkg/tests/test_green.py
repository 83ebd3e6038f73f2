import numpy as np
import pytest

from sandsink.green import (BOUNDED, CONVERGES, DIVERGES, GROWING, INCONCLUSIVE, GreenSolver,
                            NotPositiveDefinite, annealed_tree_tail, classify_growth, covering_radius,
                            determinant, finite_complement_check, interior_row_sums, lines_gap_bound,
                            row_sum_sequence, row_sums, solve_green_row, tree_tail_sums)
from sandsink.sandpile import assemble_toppling_matrix
from sandsink.topology import build_box, build_qary_tree, build_rectangle, build_site_classes


def matrix(lat, pattern, **kw):
    return assemble_toppling_matrix(lat, build_site_classes(lat, pattern), **kw)


def test_single_dissipative_site():
    m = matrix(build_box(1, 0), {"kind": "all"})
    assert solve_green_row(m, 0)[0] == pytest.approx(1 / 3)


def test_two_site_inverse():
    m = matrix(build_rectangle((2,)), {"kind": "empty"})
    G = np.array([solve_green_row(m, x) for x in range(2)])
    assert np.allclose(G, np.array([[2, 1], [1, 2]]) / 3)


def test_three_site_row_sums():
    m = matrix(build_rectangle((3,)), {"kind": "empty"})
    assert np.allclose(row_sums(m), [1.5, 2.0, 1.5])


@pytest.mark.parametrize("shape,det", [((2,), 3), ((3,), 4), ((2, 2), 192), ((1,), 2)])
def test_exact_determinants(shape, det):
    m = matrix(build_rectangle(shape), {"kind": "empty"})
    assert determinant(m) == det


def test_continuous_determinant_matches_dense():
    lat = build_box(2, 2)
    m = matrix(lat, {"kind": "finite_source", "sites": [[0, 0]]}, gamma=1.3, alpha=0.4, beta=0.7)
    assert determinant(m) == pytest.approx(np.linalg.det(m.to_dense()), rel=1e-9)


def test_inverse_symmetric_with_small_residual():
    lat = build_box(2, 4)
    m = matrix(lat, {"kind": "sublattice", "period": [3, 2]}, gamma=2.0, alpha=0.5)
    A = m.to_dense()
    G = np.array([solve_green_row(m, x) for x in range(lat.n_sites)])
    assert np.abs(A @ G - np.eye(lat.n_sites)).max() <= 1e-10 * np.abs(G).max()
    assert np.abs(G - G.T).max() <= 1e-10 * np.abs(G).max()
    assert np.all(G > 0)


def test_monotone_in_volume():
    pattern = {"kind": "lines", "r": [2, 5]}
    prev = None
    for n in (2, 3, 5, 8):
        lat = build_box(2, n)
        g = solve_green_row(matrix(lat, pattern), lat.index_of((0, 0)))
        cur = {tuple(c): v for c, v in zip(lat.coords.tolist(), g)}
        if prev is not None:
            assert all(cur[k] >= v - 1e-12 for k, v in prev.items())
        prev = cur


def test_not_positive_definite():
    lat = build_box(1, 20)
    m = matrix(lat, {"kind": "finite_source", "sites": [[0]]}, alpha=0.01, beta=1.0)
    with pytest.raises(NotPositiveDefinite) as err:
        GreenSolver(m)
    assert err.value.min_eig < 0


def test_weak_source_is_fine():
    lat = build_box(1, 20)
    m = matrix(lat, {"kind": "finite_source", "sites": [[0]]}, alpha=1.0, beta=0.5)
    assert np.all(solve_green_row(m, lat.index_of((0,))) > 0)


def test_classify_growth():
    assert classify_growth([1, 1.5, 1.75, 1.875, 1.9375])[0] == BOUNDED
    assert classify_growth([1, 2, 4, 8, 16])[0] == GROWING
    assert classify_growth([1, 2, 3, 4, 5])[0] == GROWING
    assert classify_growth([1, 2])[0] == INCONCLUSIVE
    assert classify_growth([1, 2, 2.5, 2.6, 3.5])[0] == INCONCLUSIVE


@pytest.mark.parametrize("pattern,expect", [({"kind": "all"}, BOUNDED),
                                            ({"kind": "empty"}, GROWING),
                                            ({"kind": "sublattice", "period": [2]}, BOUNDED)])
def test_row_sum_verdicts_d1(pattern, expect):
    rep = row_sum_sequence(1, pattern, (0,), [2, 4, 8, 16, 32])
    assert rep.verdict == expect
    assert np.all(np.diff(rep.row_sums[:, 0]) >= -1e-12)


def test_row_sum_sequence_csv(tmp_path):
    rep = row_sum_sequence(2, {"kind": "all"}, [(0, 0), (1, 0)], [1, 2, 4])
    rep.write_csv(tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "n,x_index,row_sum" and len(rows) == 7
    with pytest.raises(ValueError):
        row_sum_sequence(2, {"kind": "all"}, (0, 0), [4, 2])


def test_interior_sums_all_d():
    # Δ 1 = (2d + 1) - deg on all-D; deep inside row sums approach 1
    u = interior_row_sums(2, {"kind": "all"}, 8)
    assert len(u) == 81
    assert np.all(u < 1) and u.max() > 0.99
    assert u[40] == u.max()


@pytest.mark.parametrize("pattern,d,radius", [({"kind": "all"}, 2, 0),
                                              ({"kind": "sublattice", "period": [2]}, 1, 1),
                                              ({"kind": "sublattice", "period": [2, 2]}, 2, 2),
                                              ({"kind": "lines", "r": list(range(3, 400, 3))}, 2, 1)])
def test_covering_radius_bounded(pattern, d, radius):
    cr = covering_radius(pattern, 8, d)
    assert not cr.unbounded and cr.radius == radius


@pytest.mark.parametrize("pattern,d", [({"kind": "empty"}, 2),
                                       ({"kind": "axis", "axis": 0}, 2),
                                       ({"kind": "lines", "r": [1, 3, 6]}, 2)])
def test_covering_radius_unbounded(pattern, d):
    assert covering_radius(pattern, 8, d).unbounded


def test_finite_complement():
    patch = [[x, y] for x in (-1, 0, 1) for y in (-1, 0, 1)]
    ok, count = finite_complement_check({"kind": "finite_complement", "sites": patch}, 4, 2)
    assert ok and count == 9
    ok, _ = finite_complement_check({"kind": "axis", "axis": 0}, 4, 2)
    assert not ok


def test_gap_series():
    assert lines_gap_bound(lambda k: k + 1, 2).verdict == CONVERGES
    assert lines_gap_bound(lambda k: (k + 1) ** 2, 2).verdict == CONVERGES
    assert lines_gap_bound(lambda k: 2 ** k, 2).verdict == DIVERGES
    res = lines_gap_bound(lambda k: k + 1, 1, k_max=60)
    # Σ 2^{-k} = 2 up to the certified tail
    assert abs(res.partial_sums[-1] + res.tail_bound - 2) < 1e-12 + res.tail_bound
    with pytest.raises(ValueError):
        lines_gap_bound([1, 2, 2, 3], 2)


def test_tree_tail_sums_full_tree():
    t = build_qary_tree(2, 6)
    tails = tree_tail_sums(t, [0, 2, 4, 6])
    assert np.all(np.diff(tails) < 0) and tails[-1] == 0


def test_annealed_tree_tail_decays():
    rep = annealed_tree_tail(2, 0.7, 10, 60, list(range(2, 9)), 0)
    assert np.all(np.diff(rep.mean_tail) <= 0)
    assert rep.fit.slope < 0
    assert rep.tree_sizes.min() >= 1
