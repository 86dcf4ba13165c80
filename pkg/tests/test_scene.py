import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdr4dgs.errors import DegenerateRotation, DegenerateTemporalVariance, NonFiniteParameter
from hdr4dgs.scene import (
    Gaussian4DCloud,
    build_covariance4,
    build_rotation4,
    colors_at,
    conditional_spatial,
    eval_color_4dsh,
    left_matrix,
    temporal_weight,
)

ID = np.array([1.0, 0.0, 0.0, 0.0])


def _unit(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _quat_mul(a, b):
    # Hamilton product, independent of the matrix helpers under test
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


class TestRotation:
    def test_identity_quaternions(self):
        np.testing.assert_array_equal(build_rotation4(ID, ID), np.eye(4))

    def test_random_pairs_are_special_orthogonal(self, rng):
        for _ in range(200):
            rot = build_rotation4(_unit(rng), _unit(rng))
            assert np.abs(rot.T @ rot - np.eye(4)).max() < 1e-9
            assert abs(np.linalg.det(rot) - 1.0) < 1e-9

    def test_left_factor_is_quaternion_product(self, rng):
        l, p = _unit(rng), rng.normal(size=4)
        np.testing.assert_allclose(left_matrix(l) @ p, _quat_mul(l, p), atol=1e-12)

    def test_pure_left_square_maps_axes_to_themselves(self):
        rot = build_rotation4([0.0, 1.0, 0.0, 0.0], ID)
        sq = rot @ rot
        lmat = left_matrix(np.array([0.0, 1.0, 0.0, 0.0]))
        np.testing.assert_allclose(sq, lmat @ lmat, atol=1e-12)
        # i*i = -1, so the square is -I: each axis goes to minus itself
        np.testing.assert_allclose(np.abs(sq), np.eye(4), atol=1e-12)

    def test_zero_quaternion_raises(self):
        with pytest.raises(DegenerateRotation):
            build_rotation4(np.zeros(4), ID)

    def test_nearly_unit_is_normalized(self):
        rot = build_rotation4(ID * 1.0005, ID)
        np.testing.assert_allclose(rot, np.eye(4), atol=1e-12)


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(build_covariance4(np.zeros(4), ID, ID), np.eye(4), atol=1e-15)

    def test_scaled_axis(self):
        cov = build_covariance4([math.log(2.0), 0, 0, 0], ID, ID)
        np.testing.assert_allclose(cov, np.diag([4.0, 1, 1, 1]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self, rng):
        for _ in range(50):
            ls = rng.uniform(-2, 1, 4)
            cov = build_covariance4(ls, rng.normal(size=4), rng.normal(size=4))
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(np.exp(2 * ls)), rtol=0, atol=1e-8)

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteParameter):
            build_covariance4([np.nan, 0, 0, 0], ID, ID)

    def test_psd_over_many_draws(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            cov = build_covariance4(rng.uniform(-4, 2, 4), rng.normal(size=4), rng.normal(size=4))
            assert np.abs(cov - cov.T).max() < 1e-12
            assert np.linalg.eigvalsh(cov).min() >= -1e-9


class TestTemporal:
    def test_peak(self):
        assert temporal_weight(np.eye(4) * 0.3, 0.4, 0.4) == 1.0

    def test_one_sigma(self):
        sigma = np.diag([1.0, 1.0, 1.0, 0.09])
        assert temporal_weight(sigma, 0.2, 0.5) == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert temporal_weight(sigma, 0.2, 0.5) == pytest.approx(0.606531, abs=1e-6)

    def test_tail(self):
        sigma = np.diag([1.0, 1.0, 1.0, 0.01])
        assert temporal_weight(sigma, 0.0, 1.0) < 2e-22

    def test_degenerate_variance(self):
        with pytest.raises(DegenerateTemporalVariance):
            temporal_weight(np.diag([1.0, 1.0, 1.0, 0.0]), 0.0, 0.0)
        with pytest.raises(DegenerateTemporalVariance):
            conditional_spatial(np.diag([1.0, 1.0, 1.0, 1e-13]), np.zeros(4), 0.0)


class TestConditional:
    def test_block_diagonal_is_independent(self, rng):
        a = rng.normal(size=(3, 3))
        sigma = np.zeros((4, 4))
        sigma[:3, :3] = a @ a.T + np.eye(3)
        sigma[3, 3] = 0.5
        mean4 = rng.normal(size=4)
        for t in (0.0, 0.3, 1.0):
            m3, c3 = conditional_spatial(sigma, mean4, t)
            np.testing.assert_allclose(m3, mean4[:3])
            np.testing.assert_allclose(c3, sigma[:3, :3])

    def test_toy_one_spatial_dimension(self):
        # embed the 2D toy [[2,1],[1,1]] into x and t; y, z are independent
        sigma = np.diag([2.0, 1.0, 1.0, 1.0])
        sigma[0, 3] = sigma[3, 0] = 1.0
        m3, c3 = conditional_spatial(sigma, np.zeros(4), 1.0)
        assert m3[0] == pytest.approx(1.0, abs=1e-12)
        assert c3[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_toy_matches_slice_sampling(self):
        # fit a Gaussian to joint samples whose t lands near 1
        rng = np.random.default_rng(3)
        cov = np.array([[2.0, 1.0], [1.0, 1.0]])
        s = rng.multivariate_normal([0.0, 0.0], cov, size=2_000_000)
        near = s[np.abs(s[:, 1] - 1.0) < 0.01, 0]
        assert near.mean() == pytest.approx(1.0, abs=0.03)
        assert near.var() == pytest.approx(1.0, abs=0.05)

    def test_conditional_covariance_psd(self, rng):
        for _ in range(500):
            sigma = build_covariance4(rng.uniform(-3, 1, 4), rng.normal(size=4), rng.normal(size=4))
            _, c3 = conditional_spatial(sigma, rng.normal(size=4), rng.uniform())
            assert np.linalg.eigvalsh(c3).min() >= -1e-9

    def test_marginal_times_conditional_factorization(self, rng):
        for _ in range(20):
            sigma = build_covariance4(rng.uniform(-1, 0.5, 4), rng.normal(size=4), rng.normal(size=4))
            mean4 = rng.normal(scale=0.3, size=4)
            inv4 = np.linalg.inv(sigma)
            for _ in range(25):
                x = mean4[:3] + rng.normal(scale=0.5, size=3)
                t = rng.uniform()
                d = np.append(x, t) - mean4
                full = math.exp(-0.5 * d @ inv4 @ d)
                m3, c3 = conditional_spatial(sigma, mean4, t)
                dx = x - m3
                cond = math.exp(-0.5 * dx @ np.linalg.solve(c3, dx))
                prod = temporal_weight(sigma, mean4[3], t) * cond
                assert abs(prod - full) <= 1e-10 * max(full, 1e-300)


class TestColor:
    def _coeffs(self):
        return np.zeros((3, 9, 3))

    def test_dc_only(self):
        c = self._coeffs()
        c[0, 0] = (1.0, 0.0, 0.0)
        out = eval_color_4dsh(c, [0.0, 0.0, 1.0], 0.37)
        y00 = 1.0 / (2.0 * math.sqrt(math.pi))
        np.testing.assert_allclose(out, [0.5 + y00, 0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(out, [0.7820948, 0.5, 0.5], atol=1e-7)

    def test_zero_coefficients(self, rng):
        for _ in range(10):
            d = rng.normal(size=3)
            out = eval_color_4dsh(self._coeffs(), d / np.linalg.norm(d), rng.uniform())
            np.testing.assert_array_equal(out, [0.5, 0.5, 0.5])

    def test_negative_clamps(self):
        c = self._coeffs()
        c[0, 0] = (-4.0, 0.0, 0.0)
        np.testing.assert_array_equal(eval_color_4dsh(c, [1.0, 0.0, 0.0], 0.0), [0.0, 0.5, 0.5])

    def test_time_periodic(self, rng):
        c = rng.normal(size=(3, 9, 3))
        d = np.array([0.6, 0.0, 0.8])
        for t in (0.0, 0.25, 0.5, 0.9):
            a = eval_color_4dsh(c, d, t)
            b = eval_color_4dsh(c, d, t + 1.0)
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)

    def test_batched_matches_single(self, rng):
        cloud = Gaussian4DCloud.zeros(6)
        cloud.sh_coeffs = rng.normal(size=cloud.sh_coeffs.shape)
        dirs = rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        batch = colors_at(cloud, 0.3, dirs)
        for i in range(6):
            np.testing.assert_allclose(batch[i], eval_color_4dsh(cloud.sh_coeffs[i], dirs[i], 0.3), atol=1e-12)


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    ls=arrays(np.float64, (3, 4), elements=st.floats(-30, 30)),
    ql=arrays(np.float64, (3, 4), elements=finite),
    qr=arrays(np.float64, (3, 4), elements=finite),
    op=arrays(np.float64, 3, elements=st.floats(-30, 30)),
)
def test_activations_respect_ranges(ls, ql, qr, op):
    ql = ql + np.array([1e-3, 0, 0, 0]) * (np.linalg.norm(ql, axis=1, keepdims=True) < 1e-6)
    qr = qr + np.array([1e-3, 0, 0, 0]) * (np.linalg.norm(qr, axis=1, keepdims=True) < 1e-6)
    cloud = Gaussian4DCloud(np.zeros((3, 4)), ls, ql, qr, op, np.zeros((3, 3, 9, 3)))
    assert np.all(cloud.scales() > 0)
    a, b = cloud.unit_quats()
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(b, axis=1), 1.0, atol=1e-6)
    alpha = cloud.opacities()
    assert np.all((alpha > 0) & (alpha < 1))
