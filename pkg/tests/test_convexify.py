import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial import ConvexHull

from relax2d.convexify import SampledCurve, even_extension, lower_convex_hull, vl_envelope
from relax2d.energy import q_biot_unconstrained

from conftest import random_matrices


def test_convex_samples_are_their_own_hull():
    t = np.linspace(-2, 2, 41)
    env = lower_convex_hull(SampledCurve(t, t**2))
    np.testing.assert_array_equal(env.hull_ts, t)
    np.testing.assert_allclose(env(t), t**2)


def test_collinear_points_are_dropped():
    t = np.arange(6.0)
    env = lower_convex_hull(SampledCurve(t, 2 * t + 1))
    np.testing.assert_array_equal(env.vertex_index, [0, 5])
    np.testing.assert_allclose(env(t), 2 * t + 1)


def test_double_well():
    t = np.linspace(-2, 2, 401)
    env = lower_convex_hull(SampledCurve(t, (np.abs(t) - 1) ** 2))
    expected = np.maximum(np.abs(t) - 1, 0) ** 2
    np.testing.assert_allclose(env(t), expected, atol=1e-12)


def test_single_point_curve():
    env = lower_convex_hull(SampledCurve([0.5], [3.0]))
    assert env(0.5) == 3.0


def test_curve_validation():
    with pytest.raises(ValueError):
        SampledCurve([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        SampledCurve([1.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        SampledCurve([], [])


@given(arrays(np.float64, st.integers(3, 60), elements=st.floats(-5, 5)))
def test_hull_properties(vs):
    ts = np.arange(len(vs), dtype=float)
    env = lower_convex_hull(SampledCurve(ts, vs))
    h = env(ts)
    # below the samples, touching them at the vertices, endpoints kept
    assert np.all(h <= vs + 1e-12)
    np.testing.assert_allclose(h[env.vertex_index], vs[env.vertex_index])
    assert env.vertex_index[0] == 0 and env.vertex_index[-1] == len(vs) - 1
    # convex: nonnegative second differences
    assert np.all(np.diff(h, 2) >= -1e-9)


def test_hull_matches_qhull(rng):
    for _ in range(20):
        ts = np.sort(rng.uniform(-1, 1, 50))
        ts = np.unique(ts)
        vs = rng.normal(size=len(ts))
        env = lower_convex_hull(SampledCurve(ts, vs))
        hull = ConvexHull(np.column_stack([ts, vs]))
        # lower hull edges of qhull have outward normals pointing down
        lower = set()
        for eq, simplex in zip(hull.equations, hull.simplices):
            if eq[1] < 0:
                lower.update(simplex.tolist())
        assert set(env.vertex_index.tolist()) == lower


def test_even_extension_is_symmetric():
    c = even_extension(lambda t: (t - 1) ** 2, 4.0, 1e-3)
    np.testing.assert_array_equal(c.ts, -c.ts[::-1])
    np.testing.assert_array_equal(c.vs, c.vs[::-1])
    assert c.ts[-1] == pytest.approx(4.0)


def test_vl_envelope_reproduces_biot_relaxation(rng):
    F = random_matrices(rng, 500, scale=1.5)
    got = vl_envelope(lambda t: (t - 1) ** 2, F, sampling=(4.0, 1e-3))
    np.testing.assert_allclose(got, q_biot_unconstrained(F), atol=2e-3)


def test_vl_envelope_radius():
    with pytest.raises(ValueError):
        vl_envelope(lambda t: (t - 1) ** 2, 5 * np.eye(2), sampling=(4.0, 1e-2))
