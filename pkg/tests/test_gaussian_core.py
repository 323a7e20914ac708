import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpkan.gaussian_core import (DomainError, GaussianImage, GaussianScalar, GaussianVector, clamp_variance,
                                 denormalize, gaussian_add, gaussian_scale, logit, normalize, sigmoid)

means = st.floats(-50, 50, allow_nan=False)
variances = st.floats(0, 50, allow_nan=False)
gaussians = st.builds(GaussianScalar, means, variances)


class TestGaussianScalar:
    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            GaussianScalar(0.0, -1e-3)

    @pytest.mark.parametrize("bad", [(math.nan, 1.0), (0.0, math.inf), (math.inf, 0.0)])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            GaussianScalar(*bad)

    def test_unpacks(self):
        m, v = GaussianScalar(1.5, 0.25)
        assert (m, v) == (1.5, 0.25)


class TestAdd:
    def test_standard_normals(self):
        assert gaussian_add(GaussianScalar(0, 1), GaussianScalar(0, 1)) == GaussianScalar(0, 2)

    def test_identity(self):
        a = GaussianScalar(0.3, 0.7)
        assert gaussian_add(a, GaussianScalar(0, 0)) == a

    def test_substitution(self):
        assert gaussian_add(GaussianScalar(1, 0.5), GaussianScalar(-1, 0.25)) == GaussianScalar(0, 0.75)

    @given(gaussians, gaussians)
    def test_commutes_exactly(self, a, b):
        assert gaussian_add(a, b) == gaussian_add(b, a)

    @given(gaussians, gaussians, gaussians)
    def test_associates(self, a, b, c):
        left = gaussian_add(gaussian_add(a, b), c)
        right = gaussian_add(a, gaussian_add(b, c))
        np.testing.assert_allclose(tuple(left), tuple(right), rtol=1e-12, atol=1e-12)


class TestScale:
    def test_half(self):
        assert gaussian_scale(GaussianScalar(2, 4), 0.5) == GaussianScalar(1, 1)

    def test_one(self):
        a = GaussianScalar(-0.4, 3.0)
        assert gaussian_scale(a, 1.0) == a

    def test_zero(self):
        assert gaussian_scale(GaussianScalar(3, 2), 0.0) == GaussianScalar(0, 0)


class TestNormalize:
    def test_origin(self):
        assert normalize(GaussianScalar(0, 0)) == GaussianScalar(0.0, 0.5)

    def test_large_mean_limit(self):
        y = normalize(GaussianScalar(30.0, 1.0))
        assert y.mean == pytest.approx(1.0, abs=1e-12)
        assert y.variance < 1e-300

    def test_large_variance_limit(self):
        y = normalize(GaussianScalar(0.5, 60.0))
        assert y.variance == pytest.approx(1.0, abs=1e-12)

    @given(st.floats(-15, 15), st.floats(0, 30))
    def test_output_in_open_box(self, m, v):
        y = normalize(GaussianScalar(m, v))
        assert -1 < y.mean < 1
        assert 0 < y.variance < 1

    @given(st.floats(-5, 5), st.floats(1e-3, 1), st.floats(0, 10))
    def test_mean_strictly_increasing(self, m, dm, v):
        assert normalize(GaussianScalar(m + dm, v)).mean > normalize(GaussianScalar(m, v)).mean


class TestDenormalize:
    def test_origin(self):
        assert denormalize(GaussianScalar(0.0, 0.5)) == GaussianScalar(0.0, 0.0)

    def test_round_trip(self):
        back = denormalize(normalize(GaussianScalar(1.3, 0.7)))
        np.testing.assert_allclose(tuple(back), (1.3, 0.7), rtol=0, atol=1e-9)

    def test_near_boundary_stays_finite(self):
        y = denormalize(GaussianScalar(0.999999999, 0.5))
        # atanh(1 - 1e-9) = 0.5 * ln((2 - 1e-9) / 1e-9)
        assert y.mean == pytest.approx(0.5 * math.log((2 - 1e-9) / 1e-9), rel=1e-6)
        assert math.isfinite(y.variance)

    @pytest.mark.parametrize("y", [(1.0, 0.5), (-1.0, 0.5), (0.0, 0.0), (0.0, 1.0), (0.2, 1.5)])
    def test_outside_open_box(self, y):
        with pytest.raises(DomainError):
            denormalize(GaussianScalar(*y))

    def test_point_without_preimage(self):
        # logit(0.01) + atanh(0.9)^2 < 0: no nonnegative variance maps here
        assert logit(0.01) + math.atanh(0.9) ** 2 < 0
        with pytest.raises(DomainError):
            denormalize(GaussianScalar(0.9, 0.01))

    @given(st.floats(-0.999, 0.999), st.floats(1e-6, 1 - 1e-6))
    def test_interior_round_trip_or_domain_error(self, m, v):
        if logit(v) + math.atanh(m) ** 2 < 0:
            with pytest.raises(DomainError):
                denormalize(GaussianScalar(m, v))
            return
        y = normalize(denormalize(GaussianScalar(m, v)))
        np.testing.assert_allclose(tuple(y), (m, v), rtol=0, atol=1e-9)


class TestHelpers:
    def test_sigmoid_extremes(self):
        np.testing.assert_array_equal(sigmoid(np.array([-1000.0, 0.0, 1000.0])), [0.0, 0.5, 1.0])

    def test_clamp_small_negative(self):
        assert clamp_variance(-1e-15) == 0.0

    def test_clamp_warns_on_large_negative(self, caplog):
        with caplog.at_level("WARNING"):
            assert clamp_variance(-1e-6, "probe") == 0.0
        assert "probe" in caplog.text


class TestContainers:
    def test_vector_from_scalars(self):
        v = GaussianVector.from_scalars([GaussianScalar(1, 2), GaussianScalar(3, 4)])
        assert len(v) == 2
        assert v[1] == GaussianScalar(3, 4)
        assert list(v) == [GaussianScalar(1, 2), GaussianScalar(3, 4)]

    def test_image_shape_and_pixel(self):
        mean = np.arange(24.0).reshape(2, 3, 4)
        img = GaussianImage(mean, np.ones_like(mean))
        assert (img.channels, img.height, img.width) == (2, 3, 4)
        assert img.pixel(1, 2, 3) == GaussianScalar(23.0, 1.0)
        np.testing.assert_array_equal(img.flatten().mean, np.arange(24.0))

    def test_image_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            GaussianImage(np.zeros((1, 2, 2)), -np.ones((1, 2, 2)))

    def test_arrays_are_read_only(self):
        v = GaussianVector(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            v.mean[0] = 1.0
