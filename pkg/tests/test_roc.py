import itertools

import numpy as np
import pytest

from relax2d.constants import ROC_VALUE_TOL
from relax2d.energy import BIOT, DIST, det2, q_biot_unconstrained, q_dist_unconstrained, q_glp, w_biot
from relax2d.io import load_grid, save_grid
from relax2d.roc import (
    DirectionSet,
    Grid4,
    ResourceLimitError,
    RocConfig,
    build_grid,
    directions,
    estimate_memory,
    line_points,
    roc_iterate,
    roc_iterate_reference,
)

F04 = 0.4 * np.eye(2)


def _distinct_up_to_sign(l):
    """Enumerate a (x) b directly and identify M with -M and positive multiples."""
    classes = set()
    rng = range(-l, l + 1)
    for a in itertools.product(rng, rng):
        for b in itertools.product(rng, rng):
            M = np.outer(a, b)
            if not M.any():
                continue
            unit = M / np.abs(M).max()
            key = min(tuple(np.round(unit.ravel(), 12)), tuple(np.round(-unit.ravel(), 12)))
            classes.add(key)
    return classes


@pytest.mark.parametrize("l", [1, 2])
def test_direction_count_matches_enumeration(l):
    dirs = directions(l, 0.1)
    assert len(dirs) == len(_distinct_up_to_sign(l))
    if l == 1:
        assert len(dirs) == 16


def test_directions_are_rank_one_and_pairwise_independent():
    D = directions(2, 0.1).integer.reshape(-1, 4).astype(float)
    assert np.all(np.abs(det2(D.reshape(-1, 2, 2))) == 0)
    G = D @ D.T
    n = np.sqrt(np.diag(G))
    cos = G / np.outer(n, n)
    np.fill_diagonal(cos, 0)
    assert np.all(np.abs(np.abs(cos) - 1) > 1e-9)


def test_lattice_range():
    lo, n = RocConfig(delta=0.1, radius=2.0).lattice_range()
    assert list(n) == [41] * 4 and list(lo) == [-20] * 4
    lo, n = RocConfig.compression_box(0.1).lattice_range()
    assert list(n) == [10, 21, 21, 10]


def test_memory_budget():
    cfg = RocConfig(delta=0.1, radius=2.0, memory_budget=1024)
    assert estimate_memory(cfg) > 1024
    with pytest.raises(ResourceLimitError):
        build_grid(BIOT, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        RocConfig(delta=0.0)
    with pytest.raises(ValueError):
        RocConfig(k_max=0)
    with pytest.raises(ValueError):
        RocConfig(bounds=[(1, 0)] * 4).resolved_bounds()
    with pytest.raises(ValueError):
        RocConfig(delta=0.5, bounds=[(0.1, 0.2)] * 4).lattice_range()


def test_line_through_compression():
    cfg = RocConfig(delta=0.1, radius=2.0)
    grid = Grid4(0.1, cfg.lattice_range()[0], np.zeros(tuple(cfg.lattice_range()[1])))
    curve = line_points(F04, [[1, 0], [0, 0]], grid)
    assert len(curve.ts) == 41
    assert curve.ts[0] == -24 and curve.ts[-1] == 16
    shear = line_points(F04, [[0, 1], [0, 0]], grid)
    assert len(shear.ts) == 41
    assert shear.ts[0] == -20 and shear.ts[-1] == 20


def test_constrained_line_is_truncated():
    cfg = RocConfig(delta=0.1, radius=2.0)
    lo, n = cfg.lattice_range()
    grid = Grid4(0.1, lo, np.zeros(tuple(n)))
    curve = line_points(F04, [[1, 0], [0, 0]], grid, constrained=True)
    # det(F + l delta e1 (x) e1) = (0.4 + 0.1 l) 0.4 > 0  iff  l > -4
    assert curve.ts[0] == -3 and curve.ts[-1] == 16
    single = line_points(np.diag([0.4, -0.4]), [[1, 0], [0, 0]], grid, constrained=True)
    assert len(single.ts) == 1


def test_line_rejects_bad_direction():
    grid = Grid4(0.5, [-2] * 4, np.zeros((5, 5, 5, 5)))
    with pytest.raises(ValueError):
        line_points(np.zeros((2, 2)), np.eye(2), grid)


def _small(W, constrained, k_max=3, delta=0.5):
    cfg = RocConfig(delta=delta, radius=1.0, k_max=k_max, constrained=constrained)
    grid = build_grid(W, cfg)
    return cfg, grid


@pytest.mark.parametrize("W", [BIOT, DIST], ids=["biot", "dist"])
@pytest.mark.parametrize("constrained", [False, True])
def test_kernel_matches_reference(W, constrained):
    cfg, grid = _small(W, constrained, k_max=2)
    dirs = directions(1, cfg.delta)
    fast = roc_iterate(grid, dirs, cfg).grid.values
    slow = roc_iterate_reference(grid, dirs, cfg).values
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_kernel_matches_reference_second_order_directions():
    cfg, grid = _small(BIOT, False, k_max=1)
    dirs = directions(2, cfg.delta)
    fast = roc_iterate(grid, dirs, cfg).grid.values
    slow = roc_iterate_reference(grid, dirs, cfg).values
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_direction_order_does_not_matter():
    cfg, grid = _small(DIST, False)
    dirs = directions(1, cfg.delta)
    rev = DirectionSet(dirs.integer[::-1].copy(), dirs.delta)
    a = roc_iterate(grid, dirs, cfg).grid.values
    b = roc_iterate(grid, rev, cfg).grid.values
    np.testing.assert_array_equal(a, b)


def test_iterates_decrease_and_stay_above_envelope():
    cfg = RocConfig(delta=0.2, radius=1.0, k_max=4, record=False)
    grid = build_grid(BIOT, cfg)
    dirs = directions(1, cfg.delta)
    prev = grid.values
    for k in range(1, 5):
        cfg.k_max = k
        cur = roc_iterate(grid, dirs, cfg).grid.values
        assert np.all(cur <= prev + 1e-15)
        prev = cur
    F = grid.lattice_matrices()
    assert np.all(prev.ravel() >= q_biot_unconstrained(F) - ROC_VALUE_TOL)
    assert np.all(prev.ravel() <= grid.values.ravel())


def test_biot_compression_reaches_zero_in_two_iterations():
    cfg = RocConfig(delta=0.2, radius=1.0, k_max=2)
    res = roc_iterate(build_grid(BIOT, cfg), directions(1, 0.2), cfg)
    assert abs(res.value_at(F04)) <= ROC_VALUE_TOL
    assert w_biot(F04) == pytest.approx(0.72)


def test_constrained_box_value():
    cfg = RocConfig.compression_box(0.1)
    res = roc_iterate(build_grid(BIOT, cfg), directions(1, 0.1), cfg)
    assert res.value_at(F04) == pytest.approx(0.68, abs=ROC_VALUE_TOL)
    F = res.grid.lattice_matrices()
    d = det2(F)
    vals = res.grid.values.ravel()
    pos = d > 1e-12
    assert np.all(vals[pos] >= q_glp(F[pos]) - ROC_VALUE_TOL)


def test_early_stop_and_trace():
    cfg = RocConfig(delta=0.5, radius=1.0, k_max=50, record=False)
    res = roc_iterate(build_grid(BIOT, cfg), directions(1, 0.5), cfg)
    assert len(res.trace) < 50
    assert res.trace[-1]["max_decrease"] < cfg.epsilon
    assert res.records == []


def test_dist_relaxation_in_unconstrained_box():
    cfg = RocConfig(delta=0.1, radius=1.0, k_max=6)
    res = roc_iterate(build_grid(DIST, cfg), directions(1, 0.1), cfg)
    assert res.value_at(F04) == pytest.approx(q_dist_unconstrained(F04), abs=ROC_VALUE_TOL)


def test_interpolation():
    cfg = RocConfig(delta=0.5, radius=1.0)
    grid = build_grid(BIOT, cfg)
    idx = (1, 2, 3, 4)
    assert grid.interpolate(grid.matrix(idx)) == grid.values[idx]
    # the interpolant of an affine function is exact
    lin = Grid4(0.5, grid.lo, np.zeros((5, 5, 5, 5)))
    a = np.arange(4.0)
    lin.values = sum(np.meshgrid(*[a[k] * ax for k, ax in enumerate(lin.axes)], indexing="ij"))
    F = np.array([[0.3, -0.7], [0.1, 0.9]])
    assert lin.interpolate(F) == pytest.approx(float(a @ F.ravel()))
    with pytest.raises(ValueError):
        grid.interpolate(3 * np.eye(2))


def test_grid_snapshot_roundtrip(tmp_path):
    cfg = RocConfig.compression_box(0.1)
    grid = build_grid(BIOT, cfg)
    save_grid(grid, tmp_path / "g")
    back = load_grid(tmp_path / "g")
    np.testing.assert_array_equal(back.values, grid.values)
    np.testing.assert_array_equal(back.lo, grid.lo)
    assert back.delta == grid.delta
    assert (tmp_path / "g.bin").stat().st_size == grid.values.size * 8
