import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scenegen.voxel import (Mesh, OccupancyGrid, WatertightError, column_heights, detect_ground_level, fix_ground,
                            flood_fill_solid, marching_cubes, sample_surface_points, voxelize_mesh)

from oracles import bfs_fill, point_in_mesh


def cube_mesh(lo=0.0, hi=1.0) -> Mesh:
    v = np.array([[x, y, z] for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return Mesh(v, tris)


def sphere_field(n: int, radius: float, center=None) -> np.ndarray:
    c = np.full(3, (n - 1) / 2) if center is None else np.asarray(center)
    g = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1)
    return radius - np.linalg.norm(g - c, axis=-1)


def sphere_grid(n: int, radius: float) -> np.ndarray:
    g = np.stack(np.meshgrid(*[np.arange(n) + 0.5] * 3, indexing="ij"), -1)
    return np.linalg.norm(g - n / 2, axis=-1) <= radius


# voxelize


def test_unit_cube_fills_every_center():
    mesh = cube_mesh()
    grid = voxelize_mesh(mesh, 8)
    assert grid.dims == (8, 8, 8)
    centers = (np.arange(8) + 0.5) / 8
    for idx in [(0, 0, 0), (7, 7, 7), (3, 5, 1), (0, 7, 4)]:
        p = np.array([centers[i] for i in idx])
        assert point_in_mesh(p, mesh.vertices, mesh.triangles)
    assert grid.count() == 512


def test_empty_mesh_voxelizes_to_nothing():
    assert voxelize_mesh(Mesh(), 8).count() == 0


def test_sphere_volume_at_resolution_64():
    field = sphere_field(70, 32.0)
    mesh = marching_cubes(field, 0.0, pad=False)
    grid = voxelize_mesh(mesh, 64)
    expected = 4 / 3 * np.pi * (grid.dims[0] / 2) ** 3
    assert abs(grid.count() - expected) / expected < 0.03


def test_voxelize_matches_point_in_mesh_oracle():
    rng = np.random.default_rng(3)
    mesh = marching_cubes(sphere_field(12, 4.2, center=(5.3, 5.8, 6.1)), 0.0, pad=False)
    grid = voxelize_mesh(mesh, 10)
    lo = mesh.vertices.min(0)
    pitch = float((mesh.vertices.max(0) - lo).max()) / 10
    for idx in rng.integers(0, 10, size=(40, 3)):
        idx = np.minimum(idx, np.array(grid.dims) - 1)
        p = lo + (idx + 0.5) * pitch
        assert grid.data[tuple(idx)] == point_in_mesh(p, mesh.vertices, mesh.triangles)


def test_open_mesh_rejected():
    mesh = cube_mesh()
    open_mesh = Mesh(mesh.vertices, mesh.triangles[:-1])
    with pytest.raises(WatertightError):
        voxelize_mesh(open_mesh, 8)


def test_marching_cubes_round_trip_iou():
    n = 48
    occ = sphere_grid(n, 17.0)
    mesh = marching_cubes(occ.astype(np.float32), 0.5)
    grid = voxelize_mesh(mesh, n, origin=np.zeros(3), pitch=1.0, dims=(n, n, n))
    inter = (grid.data & occ).sum()
    assert inter / (grid.data | occ).sum() >= 0.95


# flood fill


def test_hollow_shell_becomes_solid():
    data = np.ones((5, 5, 5), bool)
    data[1:4, 1:4, 1:4] = False
    out = flood_fill_solid(OccupancyGrid(data))
    assert out.count() == 125
    assert np.array_equal(out.data, bfs_fill(data))


def test_full_grid_is_fixpoint():
    g = OccupancyGrid(np.ones((4, 4, 4), bool))
    assert flood_fill_solid(g) == g


def test_corner_hole_touches_boundary():
    data = np.ones((4, 4, 4), bool)
    data[0, 0, 0] = False
    assert flood_fill_solid(OccupancyGrid(data)).count() == 63


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (8, 8, 8)))
def test_flood_fill_matches_bfs(data):
    out = flood_fill_solid(OccupancyGrid(data)).data
    assert np.array_equal(out, bfs_fill(data))
    assert np.all(out >= data)  # monotone
    assert np.array_equal(flood_fill_solid(OccupancyGrid(out)).data, out)  # idempotent


def test_flood_fill_bfs_on_100_grids():
    rng = np.random.default_rng(0)
    for _ in range(100):
        data = rng.random((16, 16, 16)) < rng.uniform(0.3, 0.7)
        assert np.array_equal(flood_fill_solid(OccupancyGrid(data)).data, bfs_fill(data))


# ground


def test_fix_ground_on_empty_grid():
    g = fix_ground(OccupancyGrid.empty((6, 12, 7)), 5)
    assert g.count() == 5 * 6 * 7


def test_fix_ground_idempotent_and_keeps_towers():
    data = np.zeros((8, 20, 8), bool)
    data[2:4, 8:15, 2:4] = True
    once = fix_ground(OccupancyGrid(data), 8)
    twice = fix_ground(once, 8)
    assert once == twice
    added = once.data & ~data
    assert added[:, 3:8].all() and not added[:, 8:].any() and not added[:, :3].any()
    assert np.array_equal(once.data[:, 8:], data[:, 8:])


def test_fix_ground_needs_room():
    with pytest.raises(ValueError):
        fix_ground(OccupancyGrid.empty((4, 10, 4)), 4)


def test_detect_ground_level_on_flat_scene():
    data = np.zeros((10, 30, 10), bool)
    data[:, :7] = True
    data[1:3, :20, 1:3] = True
    assert detect_ground_level(OccupancyGrid(data)) == 7


def test_column_heights():
    data = np.zeros((2, 5, 2), bool)
    data[0, 2, 0] = True
    data[1, 0:4, 1] = True
    assert column_heights(data).tolist() == [[3, 0], [0, 4]]


# marching cubes


def test_marching_cubes_empty_field():
    assert marching_cubes(np.zeros((4, 4, 4)), 0.5).is_empty


def test_single_voxel_is_closed_sphere():
    f = np.zeros((3, 3, 3), np.float32)
    f[1, 1, 1] = 1
    mesh = marching_cubes(f, 0.5)
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2
    assert mesh.signed_volume() > 0


def test_half_space_area():
    n = 12
    f = np.zeros((n, n, n), np.float32)
    f[:, :5, :] = 1
    mesh = marching_cubes(f, 0.5, pad=False)
    assert abs(mesh.area() - (n - 1) ** 2) / (n - 1) ** 2 < 0.02
    assert np.allclose(mesh.vertices[:, 1], 5.0)


def test_sphere_area_radius_12():
    mesh = marching_cubes(sphere_field(32, 12.0), 0.0)
    target = 4 * np.pi * 12 ** 2
    assert abs(mesh.area() - target) / target < 0.05
    assert mesh.is_watertight()


@settings(max_examples=25, deadline=None)
@given(arrays(bool, (6, 5, 6)))
def test_boolean_marching_cubes_is_watertight(data):
    mesh = marching_cubes(data.astype(np.float32), 0.5)
    if data.any():
        assert mesh.is_watertight()
        assert np.all(mesh.triangle_areas() > 0)
    else:
        assert mesh.is_empty


# surface sampling


def test_samples_lie_on_triangle():
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 1]], [[0, 1, 2]])
    p = sample_surface_points(mesh, 500, np.random.default_rng(0))
    normal = np.cross([1, 0, 0], [0, 1, 1]) / np.sqrt(2)
    assert np.abs(p @ normal).max() < 1e-6


def test_sample_zero_and_empty():
    assert sample_surface_points(Mesh(), 0, np.random.default_rng(0)).shape == (0, 3)
    with pytest.raises(ValueError):
        sample_surface_points(Mesh(), 3, np.random.default_rng(0))


def test_square_sample_mean():
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]], [[0, 1, 2], [0, 2, 3]])
    p = sample_surface_points(mesh, 100_000, np.random.default_rng(1))
    assert np.abs(p.mean(0) - [0.5, 0, 0.5]).max() < 0.01


def test_sampling_is_seeded():
    mesh = cube_mesh()
    a = sample_surface_points(mesh, 50, np.random.default_rng(5))
    b = sample_surface_points(mesh, 50, np.random.default_rng(5))
    assert np.array_equal(a, b)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_grid_requires_positive_dims(nx, ny, nz):
    assert OccupancyGrid.empty((nx, ny, nz)).dims == (nx, ny, nz)
    with pytest.raises(ValueError):
        OccupancyGrid(np.zeros((nx, 0, nz), bool))
