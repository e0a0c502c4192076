import math

import numpy as np
import pytest
from scipy import ndimage

from modules.geometry import (
    DiffusionProfile, PhaseBand, VoxelMask, box_sdf, build_sparse_grid, disk_radius_for_porosity,
    fill_uniform_diffusion, filter_thin_features, indicator_to_mask, mask_from_config, mask_to_indicator,
    periodic_disk_array_mask, periodic_disk_array_sdf, phase_phi_min, populate_diffusion_channel, porosity,
    rpc_like_mask, smooth_diffusion_coefficient, sphere_packing, sphere_packing_mask
)
from modules.levelset import DenseField, ball_sdf
from modules.sparse_grid import DIFFUSION, PHI, GridGeometry
from utils.errors import GeometryError, InputError


class TestIndicator:

    def test_all_true(self):
        mask = VoxelMask((4, 4, 4), 1.0, np.ones((4, 4, 4), dtype=bool))
        assert (mask_to_indicator(mask).data == 1.0).all()

    def test_all_false(self):
        mask = VoxelMask((4, 4), 1.0, np.zeros((4, 4), dtype=bool))
        assert (mask_to_indicator(mask).data == -1.0).all()

    def test_checkerboard(self):
        bits = np.array([[True, False], [False, True]])
        indicator = mask_to_indicator(VoxelMask((2, 2), 0.5, bits))
        np.testing.assert_array_equal(indicator.data, [[1.0, -1.0], [-1.0, 1.0]])
        assert indicator.geometry.spacing == (0.5, 0.5)
        np.testing.assert_array_equal(indicator_to_mask(indicator).bits, bits)

    def test_zero_sized_axis(self):
        with pytest.raises(InputError):
            VoxelMask((4, 0, 4), 1.0, np.zeros((4, 0, 4), dtype=bool))


class TestThinFeatureFilter:

    @staticmethod
    def indicator(bits):
        return mask_to_indicator(VoxelMask(bits.shape, 1.0, bits))

    def test_single_voxel_removed(self):
        bits = np.zeros((9, 9, 9), dtype=bool)
        bits[4, 4, 4] = True
        assert (filter_thin_features(self.indicator(bits), 2).data == -1.0).all()

    def test_cube_preserved(self):
        bits = np.zeros((12, 12, 12), dtype=bool)
        bits[4:8, 4:8, 4:8] = True
        filtered = filter_thin_features(self.indicator(bits), 2)
        np.testing.assert_array_equal(filtered.data > 0, bits)
        # brute-force opening with the same structuring element agrees
        reference = ndimage.binary_opening(bits, structure=np.ones((3, 3, 3), dtype=bool))
        np.testing.assert_array_equal(filtered.data > 0, reference)

    def test_all_positive_unchanged(self):
        field = self.indicator(np.ones((6, 6), dtype=bool))
        np.testing.assert_array_equal(filter_thin_features(field).data, field.data)

    def test_thin_slab_removed(self):
        bits = np.zeros((10, 10, 10), dtype=bool)
        bits[:, :, 5] = True
        assert not (filter_thin_features(self.indicator(bits), 2).data > 0).any()

    def test_phase_touching_face_kept(self):
        bits = np.zeros((10, 10), dtype=bool)
        bits[:3, :] = True
        filtered = filter_thin_features(self.indicator(bits), 2)
        np.testing.assert_array_equal(filtered.data > 0, bits)

    def test_never_adds_phase(self, rng):
        bits = rng.random((16, 16, 16)) > 0.4
        filtered = filter_thin_features(self.indicator(bits), 2)
        assert not ((filtered.data > 0) & ~bits).any()

    @pytest.mark.parametrize('shape, min_thickness', [((16, 16, 16), 2), ((24, 24), 2), ((20, 20), 4)])
    def test_second_pass_changes_nothing(self, rng, shape, min_thickness):
        once = filter_thin_features(self.indicator(rng.random(shape) > 0.35), min_thickness)
        twice = filter_thin_features(once, min_thickness)
        np.testing.assert_array_equal(twice.data, once.data)


class TestBuildSparseGrid:

    def test_positive_everywhere(self):
        grid = build_sparse_grid(box_sdf((10, 10, 10)))
        assert grid.occupancy_stats().fill_fraction == 1.0

    def test_unit_disk_area(self):
        n = 256
        h = 2.56 / n
        geometry = GridGeometry.isotropic((n, n), h, origin=(-1.28 + h / 2,) * 2)
        sdf = DenseField.from_function(geometry, ball_sdf((0.0, 0.0), 1.0))
        grid = build_sparse_grid(sdf, PhaseBand())
        fill = grid.active_node_count / geometry.dense_node_count
        assert fill == pytest.approx(math.pi / 2.56 ** 2, rel=0.02)
        assert grid.active_node_count == int((sdf.data > np.finfo(np.float64).eps).sum())

    def test_empty_result(self):
        sdf = DenseField(GridGeometry.isotropic((8, 8), 1.0), -np.ones((8, 8)))
        with pytest.raises(GeometryError):
            build_sparse_grid(sdf, PhaseBand(0.0))

    def test_band_upper_limit(self):
        geometry = GridGeometry.isotropic((16, 1), 1.0)
        sdf = DenseField(geometry, np.arange(16, dtype=np.float64) - 4.0)
        grid = build_sparse_grid(sdf, PhaseBand(0.0, 5.0))
        assert sorted(i for i, _ in grid.iter_active_nodes()) == [5, 6, 7, 8]

    def test_phi_channel_holds_sdf(self):
        sdf = DenseField.from_function(GridGeometry.isotropic((12, 12), 1.0), ball_sdf((6, 6), 4.0))
        grid = build_sparse_grid(sdf)
        indices = grid.active_indices()
        np.testing.assert_array_equal(grid.active_values(PHI), sdf.data[tuple(indices.T)])

    def test_allocate_all(self):
        sdf = DenseField.from_function(GridGeometry.isotropic((12, 12), 1.0), ball_sdf((6, 6), 4.0))
        grid = build_sparse_grid(sdf, allocate_all=True)
        assert grid.active_node_count == 144

    def test_float32(self):
        grid = build_sparse_grid(box_sdf((8, 8)), dtype='float32')
        assert grid.dtype == np.float32

    def test_invalid_band(self):
        with pytest.raises(InputError):
            PhaseBand(1.0, 0.5)

    @pytest.mark.parametrize('band', [PhaseBand(), PhaseBand(0.0, 2.5), PhaseBand(-1.0, 1.0)])
    def test_band_consistency(self, band):
        sdf = sphere_packing((20, 17, 13), radius=3.0, target_porosity=0.6, seed=4).sdf()
        grid = build_sparse_grid(sdf, band)
        eps = np.finfo(np.float64).eps
        inside = (sdf.data > band.b_low + eps) & (sdf.data < band.b_up - eps)
        np.testing.assert_array_equal(grid.dense_mask(), inside)
        phi = grid.active_values(PHI)
        assert ((phi > band.b_low) & (phi < band.b_up)).all()
        assert grid.mask_array().reshape(grid.chunk_count, -1).any(axis=1).all()


class TestDiffusionProfile:

    def setup_method(self):
        self.profile = DiffusionProfile(D_min=0.1, D_max=2.0, gamma1=-3.0, gamma2=6.0)

    def test_midpoint(self):
        assert smooth_diffusion_coefficient(0.5, self.profile) == pytest.approx(0.1 + 1.0)

    def test_saturation(self):
        assert smooth_diffusion_coefficient(10.0, self.profile) == pytest.approx(2.1, abs=1e-12)
        assert smooth_diffusion_coefficient(-10.0, self.profile) == pytest.approx(0.1, abs=1e-12)

    def test_bounded(self, rng):
        values = smooth_diffusion_coefficient(rng.normal(scale=5, size=1000), self.profile)
        assert (values >= 0.1).all() and (values <= 2.1).all()

    def test_invalid(self):
        with pytest.raises(InputError):
            DiffusionProfile(D_min=-1.0, D_max=1.0, gamma1=0.0, gamma2=1.0)
        with pytest.raises(InputError):
            DiffusionProfile(D_min=0.0, D_max=0.0, gamma1=0.0, gamma2=1.0)

    def test_from_sdf_midpoint_at_minimum_phi(self):
        h = 2.56 / 64
        geometry = GridGeometry.isotropic((64, 64), h, origin=(-1.28 + h / 2,) * 2)
        grid = build_sparse_grid(DenseField.from_function(geometry, ball_sdf((0.0, 0.0), 1.0)))
        phi_min = phase_phi_min(grid)
        profile = DiffusionProfile.from_sdf(phi_min, h, D_min=0.0, D_max=1.0)
        populate_diffusion_channel(grid, profile)
        at_min = grid.active_values(DIFFUSION)[np.argmin(grid.active_values(PHI))]
        assert at_min == pytest.approx(0.5, rel=1e-12)
        assert profile.gamma2 == pytest.approx(4.0 / h)

    def test_uniform_phi_gives_uniform_d(self):
        grid = build_sparse_grid(box_sdf((8, 8, 8)))
        populate_diffusion_channel(grid, DiffusionProfile(0.0, 1.0, 0.0, 4.0))
        assert np.unique(grid.active_values(DIFFUSION)).size == 1

    def test_vanishing_d_max(self):
        grid = build_sparse_grid(box_sdf((8, 8)))
        populate_diffusion_channel(grid, DiffusionProfile(0.3, 1e-12, 0.0, 1.0))
        np.testing.assert_allclose(grid.active_values(DIFFUSION), 0.3, atol=1e-11)

    def test_uniform_fill_rejects_nonpositive(self):
        with pytest.raises(InputError):
            fill_uniform_diffusion(build_sparse_grid(box_sdf((8, 8))), 0.0)


class TestPorosity:

    def test_all_true(self):
        assert porosity(VoxelMask((4, 4), 1.0, np.ones((4, 4)))) == 1.0

    def test_half_true(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[:2] = True
        assert porosity(VoxelMask((4, 4), 1.0, bits)) == 0.5

    def test_sphere_packing_matches_count(self):
        mask = sphere_packing_mask((32, 32, 32), 4.0, 0.6, seed=3)
        assert porosity(mask) == mask.bits.sum() / mask.bits.size
        assert porosity(mask) <= 0.6


class TestSyntheticGeometries:

    def test_sphere_packing_is_seeded(self):
        first = sphere_packing((24, 24, 24), 3.0, 0.7, seed=11)
        second = sphere_packing((24, 24, 24), 3.0, 0.7, seed=11)
        np.testing.assert_array_equal(first.centers, second.centers)

    def test_sphere_packing_sdf_is_exact_in_fluid(self):
        packing = sphere_packing((20, 20, 20), 3.0, 0.8, seed=2)
        sdf = packing.sdf()
        coords = packing.geometry.node_coordinates()
        node = (5, 7, 9)
        expected = min(np.linalg.norm(coords[node] - c) - 3.0 for c in packing.centers)
        assert sdf[node] == pytest.approx(expected)

    def test_disk_radius(self):
        radius = disk_radius_for_porosity(16, 0.6)
        assert 1 - math.pi * radius ** 2 / 256 == pytest.approx(0.6)
        with pytest.raises(InputError):
            disk_radius_for_porosity(16, 0.1)

    def test_disk_array_porosity(self):
        mask = periodic_disk_array_mask((128, 128), 32, 0.6)
        assert porosity(mask) == pytest.approx(0.6, abs=0.02)

    def test_disk_array_is_periodic(self):
        sdf = periodic_disk_array_sdf((64, 64), 16, 0.5)
        np.testing.assert_allclose(sdf.data[:16, :16], sdf.data[16:32, 32:48])

    def test_rpc_fill_and_chunk_fill(self):
        mask = rpc_like_mask((64, 64, 64))
        fill = porosity(mask)
        assert 0.07 < fill < 0.11
        grid = build_sparse_grid(mask_to_indicator(mask))
        stats = grid.occupancy_stats()
        assert stats.chunk_fill_fraction > stats.fill_fraction

    def test_mask_from_config(self):
        mask = mask_from_config({'kind': 'disk_array', 'size': [64, 64], 'period': 16, 'porosity': 0.6})
        assert mask.size == (64, 64)
        box = mask_from_config({'kind': 'box', 'size': [8, 8, 8]})
        assert box.bits.all()
        with pytest.raises(InputError):
            mask_from_config({'kind': 'torus', 'size': [8, 8]})
