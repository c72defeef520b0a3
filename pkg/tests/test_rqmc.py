import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import qmc

from spmc import rqmc


class TestStreams:
    def test_keys_are_deterministic_and_distinct(self):
        a = rqmc.stream_key(5, np.arange(1000))
        b = rqmc.stream_key(5, np.arange(1000))
        np.testing.assert_array_equal(a, b)
        assert np.unique(a).size == 1000
        assert not np.any(rqmc.stream_key(6, np.arange(1000)) == a)

    def test_uniforms_in_open_interval(self):
        u = rqmc.stream_uniforms(rqmc.stream_key(0, np.arange(10)), (500, 3))
        assert u.shape == (10, 500, 3)
        assert u.min() > 0 and u.max() < 1
        # crude moment check on 15000 values
        assert abs(u.mean() - 0.5) < 0.01
        assert abs(u.var() - 1 / 12) < 0.005

    def test_stream_does_not_depend_on_batch(self):
        keys = rqmc.stream_key(3, np.arange(20), 4)
        full = rqmc.stream_uniforms(keys, (8, 2))
        np.testing.assert_array_equal(rqmc.stream_uniforms(keys[7:8], (8, 2))[0], full[7])


class TestSobol:
    def test_unshifted_points_match_scipy(self):
        pts = rqmc.sobol_points(4, 3).points
        ref = qmc.Sobol(3, scramble=False).random_base2(4)
        np.testing.assert_allclose(pts, ref, atol=1e-15)

    def test_balance_property(self):
        # each one-dimensional projection of a shifted net hits every 1/N bin once
        ps = rqmc.sobol_points(6, 4, shift_seed=11)
        bins = np.floor(ps.points * ps.N).astype(int)
        for j in range(ps.d):
            np.testing.assert_array_equal(np.sort(bins[:, j]), np.arange(ps.N))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 7), st.integers(1, 6), st.integers(0, 2**32))
    def test_shifted_points_in_unit_cube(self, m, d, seed):
        pts = rqmc.sobol_points(m, d, shift_seed=seed).points
        assert pts.shape == (2**m, d)
        assert np.all(pts >= 0) and np.all(pts < 1)

    def test_shift_is_uniform_on_average(self):
        # E[f(shifted point)] equals the integral for any fixed base point
        keys = rqmc.stream_key(1, np.arange(4000))
        draws = rqmc.uniform_draws(keys, 1, 2, use_rqmc=True)
        np.testing.assert_allclose(draws.mean(axis=(0, 1)), [0.5, 0.5], atol=0.02)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError):
            rqmc.uniform_draws(rqmc.stream_key(0, np.arange(2)), 10, 2, use_rqmc=True)

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            rqmc.sobol_points(2, rqmc.MAX_DIM + 1)

    def test_scrambled_points(self):
        ps = rqmc.sobol_points(5, 3, shift_seed=4, scramble=True)
        assert ps.points.shape == (32, 3)
        bins = np.floor(ps.points * 32).astype(int)
        np.testing.assert_array_equal(np.sort(bins[:, 0]), np.arange(32))


class TestTransforms:
    def test_box_and_gaussian(self):
        u = np.array([[0.0, 0.5], [0.25, 0.75]])
        np.testing.assert_allclose(rqmc.to_uniform_box(u), [[-np.pi, 0], [-np.pi / 2, np.pi / 2]])
        z = rqmc.std_normal(np.array([[0.0, 0.5]]))
        assert np.isfinite(z).all() and z[0, 1] == 0.0
        L = np.array([[2.0, 0.0], [1.0, 1.0]])
        g = rqmc.to_gaussian(np.array([[0.8413447460685429, 0.5]]), L)
        np.testing.assert_allclose(g, [[2.0, 1.0]], rtol=1e-9)
