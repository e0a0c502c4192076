import math

import numpy as np
import pytest

from modules.levelset import (
    DenseField, LevelSetOptions, ball_sdf, band_error_norms, eikonal_residual_quantile,
    godunov_gradient_field, plane_sdf, smoothed_sign, sussman_redistance, upwind_gradient_magnitude
)
from modules.sparse_grid import GridGeometry
from utils.errors import InputError


def line_field(values, h=1.0):
    values = np.asarray(values, dtype=np.float64)
    geometry = GridGeometry(dims=2, size=(len(values), 1), spacing=(h, h))
    return DenseField(geometry, values.reshape(-1, 1))


class TestSmoothedSign:

    def test_zero_numerator(self):
        assert smoothed_sign(0.0, 1.0, 0.1) == 0.0

    def test_zero_limit(self):
        assert smoothed_sign(0.0, 0.0, 0.1) == 0.0

    def test_saturation(self):
        assert smoothed_sign(1e6, 1.0, 0.01) == pytest.approx(1.0, abs=1e-9)
        assert smoothed_sign(-1e6, 1.0, 0.01) == pytest.approx(-1.0, abs=1e-9)

    @pytest.mark.parametrize('h', [0.01, 0.5, 3.0])
    def test_one_cell_from_interface(self, h):
        assert smoothed_sign(h, 1.0, h) == pytest.approx(1 / math.sqrt(2), rel=1e-12)

    def test_bounded(self, rng):
        phi = rng.normal(size=1000) * 10
        grad = rng.random(1000) * 5
        values = smoothed_sign(phi, grad, 0.3)
        assert np.all(np.abs(values) <= 1.0)

    def test_rejects_nonpositive_h(self):
        with pytest.raises(InputError):
            smoothed_sign(1.0, 1.0, 0.0)


class TestUpwindGradient:

    def test_linear_field(self):
        field = line_field(np.arange(10) * 0.5, h=0.5)
        for i in range(10):
            assert upwind_gradient_magnitude(field, (i, 0), 1.0) == 1.0

    def test_constant_field(self):
        field = line_field(np.full(8, 3.0))
        assert upwind_gradient_magnitude(field, (4, 0), 1.0) == 0.0
        assert upwind_gradient_magnitude(field, (0, 0), -1.0) == 0.0

    def test_kink(self):
        # phi = |x| with the apex at node 5; the formula picks the outgoing slopes
        field = line_field(np.abs(np.arange(11) - 5.0))
        assert upwind_gradient_magnitude(field, (5, 0), -1.0) == 1.0
        assert upwind_gradient_magnitude(field, (5, 0), 1.0) == 0.0
        assert upwind_gradient_magnitude(field, (2, 0), 1.0) == 1.0

    def test_field_version_agrees(self, rng):
        geometry = GridGeometry.isotropic((9, 7, 6), 0.25)
        field = DenseField(geometry, rng.normal(size=geometry.size))
        sign = np.sign(field.data)
        grad = godunov_gradient_field(field.data, geometry.spacing, sign)
        for index in [(0, 0, 0), (4, 3, 2), (8, 6, 5), (3, 0, 5)]:
            expected = upwind_gradient_magnitude(field, index, sign[index])
            assert grad[index] == pytest.approx(expected, rel=1e-12, abs=1e-12)


class TestSussmanRedistance:

    def test_exact_sdf_is_fixed_point(self):
        geometry = GridGeometry.isotropic((24, 24, 24), 0.125, origin=(-1.4, -1.4, -1.4))
        exact = plane_sdf((1.0, 2.0, 2.0), 0.1)
        field = DenseField.from_function(geometry, exact)
        opts = LevelSetOptions()
        phi, diagnostics = sussman_redistance(field, opts, initial_is_sdf=True)
        band = np.abs(field.data) <= opts.band_width_for_error * 0.125
        change = np.abs(phi.data - field.data)[band]
        assert change.max() < opts.convergence_tolerance * 0.125
        assert diagnostics.converged
        assert diagnostics.iterations <= 2

    def test_ball_sdf_input_stays_close(self):
        geometry = GridGeometry.isotropic((33, 33, 33), 0.1, origin=(-1.6, -1.6, -1.6))
        exact = ball_sdf((0.0, 0.0, 0.0), 1.0)
        field = DenseField.from_function(geometry, exact)
        phi, _ = sussman_redistance(field, initial_is_sdf=True)
        norms = band_error_norms(phi, exact, 4.0)
        assert norms['Linf'] < 2.5 * 0.1

    def test_step_indicator(self):
        n, h = 32, 0.25
        values = np.where(np.arange(n) < n // 2, -1.0, 1.0)
        # stopping band covers the whole line so far nodes are settled too
        phi, diagnostics = sussman_redistance(line_field(values, h), LevelSetOptions(stop_band_width=n))
        # interface halfway between nodes n/2 - 1 and n/2
        exact = (np.arange(n) - (n / 2 - 0.5)) * h
        assert diagnostics.converged
        assert np.max(np.abs(phi.data[:, 0] - exact)) <= h

    def test_preserves_sign(self, rng):
        geometry = GridGeometry.isotropic((20, 20), 1.0)
        indicator = DenseField(geometry, np.where(rng.random(geometry.size) > 0.5, 1.0, -1.0))
        phi, _ = sussman_redistance(indicator, LevelSetOptions(max_iterations=50))
        assert np.array_equal(np.sign(phi.data), indicator.data)

    def test_not_converged_is_a_warning(self):
        geometry = GridGeometry.isotropic((32, 32), 1.0)
        indicator = DenseField.from_function(geometry, ball_sdf((15.5, 15.5), 8.0))
        indicator.data[...] = np.sign(indicator.data)
        phi, diagnostics = sussman_redistance(indicator, LevelSetOptions(max_iterations=2))
        assert not diagnostics.converged
        assert diagnostics.iterations == 2
        assert 'residual' in diagnostics.warning
        assert np.isfinite(phi.data).all()

    def test_rejects_non_finite(self):
        geometry = GridGeometry.isotropic((8, 8), 1.0)
        data = np.ones(geometry.size)
        data[3, 3] = np.nan
        with pytest.raises(InputError):
            sussman_redistance(DenseField(geometry, data))

    def test_workers_do_not_change_result(self):
        geometry = GridGeometry.isotropic((24, 20, 18), 0.5)
        indicator = DenseField.from_function(geometry, ball_sdf((6.0, 5.0, 4.0), 3.0))
        indicator.data[...] = np.sign(indicator.data)
        opts = LevelSetOptions(max_iterations=40)
        serial, _ = sussman_redistance(indicator, opts, workers=1)
        parallel, _ = sussman_redistance(indicator, opts, workers=4)
        np.testing.assert_array_equal(serial.data, parallel.data)

    def test_redistanced_ball_satisfies_eikonal(self):
        geometry = GridGeometry.isotropic((41, 41), 0.1, origin=(-2.0, -2.0))
        indicator = DenseField.from_function(geometry, ball_sdf((0.0, 0.0), 1.0))
        indicator.data[...] = np.sign(indicator.data)
        phi, _ = sussman_redistance(indicator)
        assert eikonal_residual_quantile(phi, band_width=4.0, quantile=0.9) < 0.1

    def test_eikonal_residual_scales_with_spacing(self):
        for n in (31, 61, 121):
            h = 3.0 / (n - 1)
            geometry = GridGeometry.isotropic((n, n), h, origin=(-1.5, -1.5))
            indicator = DenseField.from_function(geometry, ball_sdf((0.013, 0.007), 1.0))
            indicator.data[...] = np.sign(indicator.data)
            phi, _ = sussman_redistance(indicator)
            assert eikonal_residual_quantile(phi, band_width=4.0, quantile=0.9) <= 1.0 * h


class TestBandErrorNorms:

    def setup_method(self):
        self.geometry = GridGeometry.isotropic((17, 17), 0.25, origin=(-2.0, -2.0))
        self.exact = ball_sdf((0.0, 0.0), 1.0)

    def test_exact_field(self):
        phi = DenseField.from_function(self.geometry, self.exact)
        assert band_error_norms(phi, self.exact, 4.0) == {'L2': 0.0, 'Linf': 0.0}

    def test_constant_offset(self):
        phi = DenseField.from_function(self.geometry, lambda x: self.exact(x) + 0.125)
        norms = band_error_norms(phi, self.exact, 4.0)
        assert norms['Linf'] == pytest.approx(0.125)
        assert norms['L2'] == pytest.approx(0.125)

    def test_linf_bounds_l2(self, rng):
        phi = DenseField.from_function(self.geometry, self.exact)
        phi.data[...] += rng.normal(scale=0.01, size=phi.data.shape)
        norms = band_error_norms(phi, self.exact, 4.0)
        assert norms['Linf'] >= norms['L2'] > 0

    def test_empty_band(self):
        phi = DenseField.from_function(self.geometry, self.exact)
        with pytest.raises(InputError):
            band_error_norms(phi, lambda x: np.full(x.shape[:-1], 100.0), 4.0)


class TestOptions:

    @pytest.mark.parametrize('kwargs', [
        {'max_iterations': 0},
        {'convergence_tolerance': 0.0},
        {'pseudo_time_step': 1.5},
        {'band_width_for_error': -1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InputError):
            LevelSetOptions(**kwargs)

    def test_dense_field_size_check(self):
        with pytest.raises(InputError):
            DenseField(GridGeometry.isotropic((4, 4), 1.0), np.zeros(15))
