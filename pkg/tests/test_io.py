import json

import numpy as np
import pandas as pd
import pytest

from data_sources import PgmStackSource, RawVolumeSource, mask_source_for
from data_sources.pgm_stack import format_pgm, parse_pgm
from modules.geometry import build_sparse_grid, mask_to_indicator, rpc_like_mask, sphere_packing_mask
from modules.levelset import DenseField, ball_sdf
from modules.monitoring import MassRecorder, SnapshotWriter, VtkSeriesWriter
from modules.reporting import RunReport, write_convergence_csvs, write_diagnostics_csv, write_json
from modules.solver import SimulationConfig, StepDiagnostics, run_simulation, set_initial_condition
from modules.sparse_grid import DIFFUSION, PHI, U, GridGeometry
from modules.verification import ConvergenceReport
from utils.errors import ConfigError, InputError
from utils.helpers import format_bytes, split_override
from utils.snapshots import (
    dense_snapshot_nbytes, describe_snapshot, read_dense_snapshot, read_sparse_snapshot, snapshot_nbytes,
    write_dense_snapshot, write_sparse_snapshot
)
from utils.vtk import read_vtk, write_grid_vtk, write_vtk


class TestSparseSnapshot:

    def test_round_trip(self, ball_grid, rng, tmp_path):
        ball_grid.set_active_values(U, rng.random(ball_grid.active_node_count))
        path = tmp_path / 'grid.sbgr'
        written = write_sparse_snapshot(ball_grid, path)
        assert written == path.stat().st_size == snapshot_nbytes(ball_grid)

        loaded = read_sparse_snapshot(path)
        assert loaded.geometry == ball_grid.geometry
        assert loaded.properties == ball_grid.properties
        assert loaded.chunk_count == ball_grid.chunk_count
        for name in (U, PHI, DIFFUSION):
            np.testing.assert_array_equal(loaded.to_dense(name), ball_grid.to_dense(name))

    def test_float32(self, tmp_path):
        geometry = GridGeometry.isotropic((10, 9), 0.25, origin=(1.0, -2.0))
        grid = build_sparse_grid(DenseField.from_function(geometry, ball_sdf((1.5, -1.0), 0.8)), dtype='float32')
        path = tmp_path / 'grid32.sbgr'
        assert write_sparse_snapshot(grid, path) == snapshot_nbytes(grid)
        loaded = read_sparse_snapshot(path)
        assert loaded.dtype == np.float32
        np.testing.assert_array_equal(loaded.to_dense(PHI), grid.to_dense(PHI))

    def test_sparse_is_smaller_than_dense(self, tmp_path):
        grid = build_sparse_grid(mask_to_indicator(rpc_like_mask((64, 64, 64))))
        write_sparse_snapshot(grid, tmp_path / 'rpc.sbgr')
        described = describe_snapshot(tmp_path / 'rpc.sbgr')
        assert described['kind'] == 'sparse'
        assert described['snapshot_bytes'] < described['dense_snapshot_bytes']
        assert described['dense_snapshot_bytes'] == dense_snapshot_nbytes(grid.geometry, len(grid.properties), 8)

    def test_truncated(self, ball_grid, tmp_path):
        path = tmp_path / 'grid.sbgr'
        write_sparse_snapshot(ball_grid, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(InputError, match='truncated'):
            read_sparse_snapshot(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'junk.sbgr'
        path.write_bytes(b'XXXX' + bytes(64))
        with pytest.raises(InputError, match='magic'):
            read_sparse_snapshot(path)
        with pytest.raises(InputError):
            describe_snapshot(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_sparse_snapshot(tmp_path / 'absent.sbgr')


class TestDenseSnapshot:

    def test_round_trip(self, box_geometry, rng, tmp_path):
        field = DenseField(box_geometry, rng.normal(size=box_geometry.size))
        path = tmp_path / 'sdf.dnsf'
        written = write_dense_snapshot(field, path)
        assert written == path.stat().st_size == dense_snapshot_nbytes(box_geometry)
        loaded = read_dense_snapshot(path)
        assert loaded.geometry == box_geometry
        np.testing.assert_array_equal(loaded.data, field.data)

    def test_describe(self, box_geometry, tmp_path):
        path = tmp_path / 'sdf.dnsf'
        write_dense_snapshot(DenseField(box_geometry, np.full(box_geometry.size, 2.0)), path)
        described = describe_snapshot(path)
        assert described['kind'] == 'dense'
        assert described['min'] == described['max'] == 2.0

    def test_wrong_kind(self, ball_grid, tmp_path):
        path = tmp_path / 'grid.sbgr'
        write_sparse_snapshot(ball_grid, path)
        with pytest.raises(InputError):
            read_dense_snapshot(path)


class TestVtk:

    def test_grid_round_trip(self, ball_grid, rng, tmp_path):
        ball_grid.set_active_values(U, rng.random(ball_grid.active_node_count))
        path = write_grid_vtk(ball_grid, tmp_path / 'u.vtk')
        geometry, fields = read_vtk(path)
        assert geometry == ball_grid.geometry
        assert set(fields) == {U, DIFFUSION, PHI, 'mask'}
        np.testing.assert_array_equal(fields[U], ball_grid.to_dense(U))
        np.testing.assert_array_equal(fields['mask'].astype(bool), ball_grid.dense_mask())

    def test_x_varies_fastest(self, tmp_path):
        geometry = GridGeometry.isotropic((3, 2), 1.0)
        values = np.arange(6, dtype=np.float64).reshape(3, 2)
        path = write_vtk(tmp_path / 'order.vtk', geometry, {'v': values})
        lines = path.read_text().splitlines()
        assert 'DIMENSIONS 3 2 1' in lines
        start = lines.index('LOOKUP_TABLE default') + 1
        assert [float(v) for v in lines[start:start + 6]] == [0, 2, 4, 1, 3, 5]

    def test_blank_value(self, ball_grid, tmp_path):
        set_initial_condition(ball_grid, 1.0)
        _, fields = read_vtk(write_grid_vtk(ball_grid, tmp_path / 'blank.vtk', blank=-1.0))
        assert (fields[U][~ball_grid.dense_mask()] == -1.0).all()

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(InputError):
            write_vtk(tmp_path / 'bad.vtk', GridGeometry.isotropic((3, 3), 1.0), {'v': np.zeros((2, 2))})

    def test_not_vtk(self, tmp_path):
        path = tmp_path / 'plain.txt'
        path.write_text('hello\n')
        with pytest.raises(InputError):
            read_vtk(path)


class TestRawVolume:

    def test_round_trip(self, tmp_path):
        mask = sphere_packing_mask((12, 10, 8), 2.5, 0.7, seed=5, voxel_size=0.5)
        path = RawVolumeSource.write(mask, tmp_path / 'mask.raw')
        loaded = mask_source_for(path).load()
        assert loaded.size == mask.size
        assert loaded.voxel_size == (0.5, 0.5, 0.5)
        np.testing.assert_array_equal(loaded.bits, mask.bits)

    def test_byte_order_is_x_fastest(self, tmp_path):
        path = tmp_path / 'tiny.raw'
        path.write_bytes(bytes([1, 0, 0, 0, 0, 0]))
        path.with_suffix('.json').write_text(json.dumps({'size': [3, 2]}))
        bits = mask_source_for(path).load().bits
        assert bits.shape == (3, 2)
        assert bits[0, 0] and bits.sum() == 1
        path.write_bytes(bytes([0, 1, 0, 0, 0, 0]))
        assert mask_source_for(path).load().bits[1, 0]

    @pytest.mark.parametrize('meta, field', [
        ({'size': [3, 2, 'x']}, 'size'),
        ({'size': [3]}, 'size'),
        ({'size': [3, 2], 'voxel_size': -1}, 'voxel_size'),
        ({'size': [3, 2], 'axis_order': 'xy'}, 'axis_order'),
        ({'size': [4, 2]}, 'size'),
        ([1, 2], 'sidecar'),
    ])
    def test_bad_sidecar_names_field(self, meta, field, tmp_path):
        path = tmp_path / 'bad.raw'
        path.write_bytes(bytes(6))
        path.with_suffix('.json').write_text(json.dumps(meta))
        with pytest.raises(ConfigError) as excinfo:
            RawVolumeSource(path).load()
        assert excinfo.value.field == field
        assert str(excinfo.value).startswith(f'{field}:')
        assert excinfo.value.exit_code == 2

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'bad.raw'
        path.write_bytes(bytes(6))
        path.with_suffix('.json').write_text('{not json')
        with pytest.raises(ConfigError):
            RawVolumeSource(path).load()

    def test_missing_files(self, tmp_path):
        with pytest.raises(InputError):
            RawVolumeSource(tmp_path / 'absent.raw').load()
        path = tmp_path / 'nosidecar.raw'
        path.write_bytes(bytes(6))
        with pytest.raises(InputError, match='sidecar'):
            RawVolumeSource(path).load()


class TestPgm:

    def test_parse(self):
        image = parse_pgm('P2\n# comment\n3 2\n1\n1 0 0\n0 0 1\n')
        assert image.shape == (3, 2)
        assert image[0, 0] == 1 and image[2, 1] == 1

    def test_format_round_trip(self):
        image = np.array([[1, 0], [0, 0], [1, 1]])
        np.testing.assert_array_equal(parse_pgm(format_pgm(image)), image)

    def test_stack_round_trip(self, tmp_path):
        mask = sphere_packing_mask((9, 8, 5), 2.0, 0.6, seed=1)
        directory = PgmStackSource.write(mask, tmp_path / 'slices')
        loaded = mask_source_for(directory, voxel_size=0.25).load()
        np.testing.assert_array_equal(loaded.bits, mask.bits)
        assert loaded.voxel_size == (0.25, 0.25, 0.25)

    def test_single_image_is_2d(self, tmp_path):
        path = tmp_path / 'one.pgm'
        path.write_text(format_pgm(np.eye(4, dtype=int)))
        assert mask_source_for(path).load().size == (4, 4)

    @pytest.mark.parametrize('text', ['P5\n1 1\n1\n0\n', 'P2\n2 2\n1\n0 1 0\n', 'P2\n2 x\n1\n'])
    def test_malformed(self, text, tmp_path):
        path = tmp_path / 'bad.pgm'
        path.write_text(text)
        with pytest.raises(InputError):
            PgmStackSource(path).load()

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(InputError):
            mask_source_for(tmp_path / 'x.raw', kind='tiff')


class TestObservers:

    def test_mass_recorder_and_csv(self, ball_grid, tmp_path):
        set_initial_condition(ball_grid, 1.0)
        recorder = MassRecorder()
        run_simulation(ball_grid, SimulationConfig(dt=0.1, n_steps=4), [recorder])
        frame = recorder.to_frame()
        assert list(frame.columns) == list(StepDiagnostics.CSV_COLUMNS)
        assert len(frame) == 5
        assert abs(recorder.relative_drift()) < 1e-12

        path = write_diagnostics_csv(recorder.records, tmp_path / 'mass.csv')
        assert path.read_text().splitlines()[0] == 'step,time,total_mass,min_u,max_u'
        np.testing.assert_array_equal(pd.read_csv(path)['total_mass'].to_numpy(), frame['total_mass'].to_numpy())

    def test_csv_is_deterministic(self, ball_grid, tmp_path):
        outputs = []
        for attempt in range(2):
            grid = ball_grid.copy()
            set_initial_condition(grid, lambda x: np.sin(x[:, 0]))
            recorder = MassRecorder()
            run_simulation(grid, SimulationConfig(dt=0.1, n_steps=5), [recorder], workers=2)
            outputs.append(write_diagnostics_csv(recorder.records, tmp_path / f'run{attempt}.csv').read_bytes())
        assert outputs[0] == outputs[1]

    def test_vtk_series_and_snapshot(self, ball_grid, tmp_path):
        set_initial_condition(ball_grid, 1.0)
        series = VtkSeriesWriter(tmp_path / 'vtk', every=2)
        snapshot = SnapshotWriter(tmp_path / 'final.sbgr')
        run_simulation(ball_grid, SimulationConfig(dt=0.1, n_steps=5), [series, snapshot])
        assert [p.name for p in series.written] == ['u_000000.vtk', 'u_000002.vtk', 'u_000004.vtk']
        assert snapshot.bytes_written == (tmp_path / 'final.sbgr').stat().st_size
        np.testing.assert_array_equal(read_sparse_snapshot(tmp_path / 'final.sbgr').to_dense(U), ball_grid.to_dense(U))


class TestReporting:

    def test_run_report_id_is_stable(self, tmp_path):
        first = RunReport.create('simulate', {'a': 1})
        second = RunReport.create('simulate', {'a': 1})
        assert first.id == second.id
        assert RunReport.create('simulate', {'a': 2}).id != first.id
        data = json.loads(write_json(first, tmp_path / 'run.json').read_text())
        assert data['command'] == 'simulate'

    def test_non_finite_values_become_null(self, tmp_path):
        data = json.loads(write_json({'x': float('nan'), 'y': np.float64(2.0), 'z': np.arange(2)},
                                     tmp_path / 'values.json').read_text())
        assert data == {'x': None, 'y': 2.0, 'z': [0, 1]}

    def test_convergence_csvs(self, tmp_path):
        report = ConvergenceReport('disk', [32, 64], [0.08, 0.04], [1e-3, 3e-4], [2e-3, 7e-4]).finalize()
        paths = write_convergence_csvs(report, tmp_path, stem='verify_disk')
        assert set(paths) == {'L2', 'Linf'}
        assert paths['Linf'].read_text().splitlines()[0] == 'h,error'


class TestHelpers:

    def test_format_bytes(self):
        assert format_bytes(512) == '512 B'
        assert format_bytes(2048) == '2.0 KiB'
        assert format_bytes(3 * 1024 ** 3) == '3.0 GiB'

    def test_split_override(self):
        assert split_override('simulation.dt=0.01') == (['simulation', 'dt'], '0.01')
        with pytest.raises(ValueError):
            split_override('simulation.dt')
        with pytest.raises(ValueError):
            split_override('simulation..dt=1')
