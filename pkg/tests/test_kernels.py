"""Numba and numpy kernel paths must agree."""

import numpy as np
import pytest

from needleplan import _kernels_numba, _kernels_numpy, kernels


@pytest.fixture(params=["numba", "numpy"])
def impl(request):
    return _kernels_numba if request.param == "numba" else _kernels_numpy


def random_segments(rng, k=4):
    useg = rng.uniform(-0.3, 0.3, k)
    vseg = rng.uniform(0.1, 1.0, k)
    steps = rng.integers(0, 25, k).astype(np.int64)
    return useg, vseg, steps


class TestWrap:
    def test_range(self, impl):
        for a in np.linspace(-20, 20, 401):
            w = impl.wrap_angle(a)
            assert -np.pi < w <= np.pi
            assert abs((a - w) % (2 * np.pi)) < 1e-9 or abs((a - w) % (2 * np.pi) - 2 * np.pi) < 1e-9


class TestRolloutEquivalence:
    def test_basic(self, rng):
        for trial in range(20):
            useg, vseg, steps = random_segments(rng)
            a = _kernels_numba.rollout(0.0, 5.0, 0.1, useg, vseg, steps, 1e9, False)
            b = _kernels_numpy.rollout(0.0, 5.0, 0.1, useg, vseg, steps, 1e9, False)
            assert a[0].shape == b[0].shape
            assert np.allclose(a[0], b[0], atol=1e-8)
            assert np.array_equal(a[1], b[1])

    def test_exit_stop(self, rng):
        for trial in range(20):
            useg, vseg, steps = random_segments(rng)
            a = _kernels_numba.rollout(0.0, 5.0, 0.0, useg, vseg, steps, 6.0, True)
            b = _kernels_numpy.rollout(0.0, 5.0, 0.0, useg, vseg, steps, 6.0, True)
            assert a[0].shape == b[0].shape
            assert np.allclose(a[0], b[0], atol=1e-8)

    def test_gate_stops(self, rng):
        for mode in (kernels.STOP_ENTER_GATE, kernels.STOP_EXIT_GATE):
            for trial in range(20):
                useg, vseg, steps = random_segments(rng)
                args = (3.0, 5.2, 0.4, 1.5, 3.0)
                a = _kernels_numba.rollout(0.0, 5.0, 0.0, useg, vseg, steps, 1e9, True,
                                           mode, *args)
                b = _kernels_numpy.rollout(0.0, 5.0, 0.0, useg, vseg, steps, 1e9, True,
                                           mode, *args)
                assert a[0].shape == b[0].shape
                assert np.allclose(a[0], b[0], atol=1e-8)


class TestPolygonEquivalence:
    def test_random_points(self, rng):
        polys = [rng.normal(size=(m, 2)) * 3 for m in (3, 5, 8)]
        verts, offs = kernels.pack_polygons(polys)
        pts = np.ascontiguousarray(rng.normal(size=(500, 2)) * 4)
        a = _kernels_numba.points_in_polys(pts, verts, offs)
        b = _kernels_numpy.points_in_polys(pts, verts, offs)
        assert np.array_equal(a, b)

    def test_empty_polys(self, impl):
        verts, offs = kernels.pack_polygons([])
        pts = np.zeros((4, 2))
        assert not impl.points_in_polys(pts, verts, offs).any()

    def test_unit_square_membership(self, impl):
        verts, offs = kernels.pack_polygons([[(0, 0), (1, 0), (1, 1), (0, 1)]])
        pts = np.array([[0.5, 0.5], [1.5, 0.5], [-0.1, 0.2], [0.9, 0.99]])
        got = impl.points_in_polys(pts, verts, offs)
        assert got.tolist() == [True, False, False, True]


class TestValidityEquivalence:
    def test_random_traces(self, rng):
        polys = [np.array([[2.0, 2.0], [4.0, 2.0], [4.0, 4.0], [2.0, 4.0]])]
        dverts, doffs = kernels.pack_polygons(polys)
        tverts, toffs = kernels.pack_polygons([np.array([[5.0, 0.0], [8.0, 0.0], [8.0, 8.0], [5.0, 8.0]])])
        for trial in range(30):
            useg, vseg, steps = random_segments(rng)
            states, controls = _kernels_numba.rollout(0.5, rng.uniform(0, 8), rng.uniform(-1, 1),
                                                      useg, vseg, steps, 1e9, False)
            a = _kernels_numba.trace_validity(states, controls, dverts, doffs, tverts, toffs,
                                              10.0, 8.0, 0.35, 1.0, 1.0, 0.5)
            b = _kernels_numpy.trace_validity(states, controls, dverts, doffs, tverts, toffs,
                                              10.0, 8.0, 0.35, 1.0, 1.0, 0.5)
            assert a == b


class TestGateFeatureEquivalence:
    def test_random_states(self, rng):
        states = np.ascontiguousarray(rng.normal(size=(200, 3)) * 3)
        a = _kernels_numba.gate_feature_rows(states, 1.0, -2.0, 0.7)
        b = _kernels_numpy.gate_feature_rows(states, 1.0, -2.0, 0.7)
        assert np.allclose(a, b, atol=1e-12)


def test_backend_selected():
    assert kernels.BACKEND in ("numba", "numpy")
    kernels.warmup()
