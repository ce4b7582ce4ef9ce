"""Тесты сеток, генераторов и бинарного формата наборов"""

import numpy as np
import pytest

from src.data.dataset_io import (
    ChannelNormalizer, Dataset, load_dataset, save_dataset, split_dataset, subsample_dataset,
)
from src.data.generators import (
    DARCY_HIGH, DARCY_LOW, assemble_diffusion_system, generate, generate_darcy2d, generate_poisson1d,
    poisson1d_solution, solve_diffusion,
)
from src.data.mesh import FunctionPair, Mesh, grid_mesh, model_inputs, resample, restrict_mesh, subsample
from src.numerics.errors import BadMagic, ChecksumMismatch, CorruptFile, IncompatibleFactor, NotAGrid, \
    TruncatedFile, VersionUnsupported


class TestMesh:

    def test_row_major_order(self):
        mesh = grid_mesh(3, 3)
        assert mesh.size == 9 and mesh.dim == 2
        np.testing.assert_array_equal(mesh.points[1], [0.0, 0.5])
        np.testing.assert_array_equal(mesh.points[3], [0.5, 0.0])
        assert mesh.grid.spacing == 0.5

    def test_one_dimensional(self):
        mesh = grid_mesh(5)
        assert mesh.points.shape == (5, 1)
        assert mesh.grid.ny == 1 and mesh.grid.ndim == 1

    def test_subsample_identity(self, rng):
        mesh = grid_mesh(9, 9)
        pair = FunctionPair(mesh, rng.standard_normal(81), rng.standard_normal(81))
        same = subsample(pair, 1)
        np.testing.assert_array_equal(same.f_values, pair.f_values)
        assert same.mesh.grid == mesh.grid

    def test_subsample_65_to_33(self):
        mesh = grid_mesh(65, 65)
        f = mesh.points[:, 0] + 2.0 * mesh.points[:, 1]
        coarse = subsample(FunctionPair(mesh, f, f ** 2), 2)
        assert coarse.mesh.grid.nx == 33 and coarse.mesh.grid.ny == 33
        assert coarse.mesh.size == 33 * 33
        corners = [0, 32, 33 * 32, 33 * 33 - 1]
        np.testing.assert_allclose(coarse.f_values[corners, 0], [0.0, 2.0, 1.0, 3.0])
        np.testing.assert_allclose(coarse.f_values[:, 0], coarse.mesh.points[:, 0] + 2.0 * coarse.mesh.points[:, 1])

    def test_incompatible_factor(self):
        pair = FunctionPair(grid_mesh(10), np.zeros(10), np.zeros(10))
        with pytest.raises(IncompatibleFactor):
            subsample(pair, 2)

    def test_not_a_grid(self, rng):
        pair = FunctionPair(Mesh(rng.uniform(size=(6, 2))), np.zeros(6), np.zeros(6))
        with pytest.raises(NotAGrid):
            subsample(pair, 1)

    def test_resample_linear_1d(self):
        mesh = grid_mesh(9)
        values = (3.0 * mesh.points + 1.0)[None]
        points = np.array([[0.05], [0.5], [0.93]])
        np.testing.assert_allclose(resample(mesh, values, points)[0, :, 0], 3.0 * points[:, 0] + 1.0)

    def test_resample_bilinear_2d(self, rng):
        mesh = grid_mesh(5, 5)
        x, y = mesh.points[:, 0], mesh.points[:, 1]
        values = np.stack([1.0 + x + 2.0 * y + x * y, x - y], axis=-1)[None].repeat(2, axis=0)
        points = rng.uniform(size=(7, 2))
        out = resample(mesh, values, points)
        assert out.shape == (2, 7, 2)
        px, py = points[:, 0], points[:, 1]
        np.testing.assert_allclose(out[1, :, 0], 1.0 + px + 2.0 * py + px * py, atol=1e-12)

    def test_resample_to_own_nodes(self, rng):
        mesh = grid_mesh(17, 17)
        values = rng.standard_normal((17 * 17, 1))
        np.testing.assert_allclose(resample(mesh, values, mesh.points), values, atol=1e-12)

    def test_resample_scattered_nearest(self):
        mesh = Mesh(np.array([[0.0, 0.0], [1.0, 1.0]]))
        out = resample(mesh, np.array([[1.0], [5.0]]), np.array([[0.1, 0.2], [0.9, 0.7]]))
        np.testing.assert_array_equal(out[:, 0], [1.0, 5.0])

    def test_model_inputs(self, rng):
        mesh = grid_mesh(4, 4)
        x = model_inputs(mesh, rng.standard_normal((3, 16, 1)))
        assert x.shape == (3, 16, 3)
        np.testing.assert_array_equal(x[2, :, :2], mesh.points)


class TestGenerators:

    def test_constant_coefficient_1d(self):
        n = 33
        x = np.linspace(0.0, 1.0, n)
        u = solve_diffusion(np.ones(n), 1.0 / (n - 1))
        np.testing.assert_allclose(u, x * (1.0 - x) / 2.0, atol=1e-6)

    def test_system_is_symmetric(self, rng):
        a = np.where(rng.uniform(size=(6, 6)) > 0.5, DARCY_HIGH, DARCY_LOW)
        system, index = assemble_diffusion_system(a, 0.2)
        assert system.dimension == 16
        dense = system.matrix.toarray()
        np.testing.assert_allclose(dense, dense.T)
        assert np.all(np.linalg.eigvalsh(dense) > 0)
        assert (index >= 0).sum() == 16

    def test_darcy_deterministic(self):
        first = generate_darcy2d(2, 9, seed=4)
        second = generate_darcy2d(2, 9, seed=4, workers=2)
        assert first.same_content(second)

    def test_darcy_fields(self):
        ds = generate_darcy2d(2, 9, seed=1)
        assert ds.f.shape == (2, 81, 1) and ds.u.shape == (2, 81, 1)
        assert set(np.unique(ds.f)) <= {DARCY_HIGH, DARCY_LOW}
        boundary = (ds.mesh.points == 0.0).any(axis=1) | (ds.mesh.points == 1.0).any(axis=1)
        np.testing.assert_array_equal(ds.u[:, boundary], 0.0)
        assert np.all(ds.u[:, ~boundary] > 0)

    def test_darcy_discrete_residual(self):
        ds = generate_darcy2d(3, 17, seed=6)
        for i in range(ds.n):
            a = ds.f[i, :, 0].reshape(17, 17)
            u = ds.u[i, :, 0].reshape(17, 17)
            system, index = assemble_diffusion_system(a, ds.mesh.grid.spacing)
            mask = index >= 0
            interior = np.zeros(system.dimension)
            interior[index[mask]] = u[mask]
            residual = system.matrix @ interior - 1.0
            assert np.linalg.norm(residual) / np.sqrt(system.dimension) < 1e-8

    def test_darcy_min_resolution(self):
        with pytest.raises(ValueError):
            generate_darcy2d(1, 5, seed=0)

    def test_poisson_eigenrelation(self):
        x = np.linspace(0.0, 1.0, 11)
        f, u = poisson1d_solution([1.0, 0.0], x)
        np.testing.assert_allclose(f, np.sin(np.pi * x), atol=1e-15)
        np.testing.assert_allclose(u, np.sin(np.pi * x) / np.pi ** 2, atol=1e-15)

    def test_poisson_zero_source(self):
        f, u = poisson1d_solution(np.zeros(4), np.linspace(0.0, 1.0, 7))
        np.testing.assert_array_equal(f, 0.0)
        np.testing.assert_array_equal(u, 0.0)

    def test_poisson_dataset(self):
        first = generate_poisson1d(5, 32, seed=7)
        assert first.same_content(generate_poisson1d(5, 32, seed=7))
        assert not first.same_content(generate_poisson1d(5, 32, seed=8))
        assert first.provenance['generator'] == 'poisson1d'

    def test_unknown_generator(self):
        with pytest.raises(ValueError):
            generate('burgers', 1, 16, 0)


class TestDatasetFile:

    def test_round_trip(self, tmp_path, poisson_small):
        path = save_dataset(poisson_small, tmp_path / 'd.onod')
        loaded = load_dataset(path)
        assert loaded.same_content(poisson_small)
        assert loaded.mesh.grid == poisson_small.mesh.grid

    def test_round_trip_scattered(self, tmp_path, rng):
        mesh = Mesh(rng.uniform(size=(7, 2)))
        ds = Dataset(mesh, rng.standard_normal((3, 7, 2)), rng.standard_normal((3, 7, 1)))
        assert load_dataset(save_dataset(ds, tmp_path / 's.onod')).same_content(ds)

    def test_empty(self, tmp_path):
        ds = generate_poisson1d(0, 8, seed=0)
        loaded = load_dataset(save_dataset(ds, tmp_path / 'e.onod'))
        assert loaded.n == 0 and loaded.same_content(ds)

    def test_byte_identical(self, tmp_path):
        a = save_dataset(generate_poisson1d(10, 64, seed=7), tmp_path / 'a.onod')
        b = save_dataset(generate_poisson1d(10, 64, seed=7), tmp_path / 'b.onod')
        assert a.read_bytes() == b.read_bytes()

    def test_corrupted_payload(self, tmp_path, poisson_small):
        path = save_dataset(poisson_small, tmp_path / 'd.onod')
        raw = bytearray(path.read_bytes())
        raw[100] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            load_dataset(path)

    def test_bad_magic(self, tmp_path, poisson_small):
        path = save_dataset(poisson_small, tmp_path / 'd.onod')
        path.write_bytes(b'XXXX' + path.read_bytes()[4:])
        with pytest.raises(BadMagic):
            load_dataset(path)

    def test_version(self, tmp_path, poisson_small):
        path = save_dataset(poisson_small, tmp_path / 'd.onod')
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + (99).to_bytes(4, 'little') + raw[8:])
        with pytest.raises(VersionUnsupported):
            load_dataset(path)

    def test_trailing_bytes(self, tmp_path, poisson_small):
        path = save_dataset(poisson_small, tmp_path / 'd.onod')
        path.write_bytes(path.read_bytes() + b'\x00' * 8)
        with pytest.raises(CorruptFile):
            load_dataset(path)

    def test_truncated(self, tmp_path, poisson_small):
        path = save_dataset(poisson_small, tmp_path / 'd.onod')
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(TruncatedFile):
            load_dataset(path)


class TestSplitAndNormalize:

    def test_split_sizes(self):
        ds = generate_poisson1d(20, 8, seed=0)
        train, val, test = split_dataset(ds, seed=0)
        assert (train.n, val.n, test.n) == (16, 2, 2)
        rows = np.concatenate([train.f, val.f, test.f])[:, :, 0]
        assert len({r.tobytes() for r in rows}) == 20

    def test_split_deterministic(self):
        ds = generate_poisson1d(20, 8, seed=0)
        a = split_dataset(ds, seed=5)
        b = split_dataset(ds, seed=5)
        assert all(x.same_content(y) for x, y in zip(a, b))

    def test_normalizer(self, poisson_small):
        norm = ChannelNormalizer.fit(poisson_small)
        encoded = norm.encode_u(poisson_small.u)
        np.testing.assert_allclose(encoded.mean(), 0.0, atol=1e-12)
        np.testing.assert_allclose(encoded.std(), 1.0, atol=1e-12)
        np.testing.assert_allclose(norm.decode_f(norm.encode_f(poisson_small.f)), poisson_small.f, atol=1e-12)

    def test_constant_channel_floor(self):
        mesh = grid_mesh(4)
        ds = Dataset(mesh, np.full((2, 4, 1), 3.0), np.ones((2, 4, 1)))
        norm = ChannelNormalizer.fit(ds)
        np.testing.assert_array_equal(norm.f_std, [1.0])
        np.testing.assert_array_equal(norm.encode_f(ds.f), 0.0)

    def test_subsample_dataset(self):
        ds = generate_poisson1d(3, 17, seed=0)
        coarse = subsample_dataset(ds, 4)
        assert coarse.mesh.size == 5
        np.testing.assert_array_equal(coarse.u, ds.u[:, ::4])
        assert restrict_mesh(ds.mesh, 4).grid == coarse.mesh.grid
