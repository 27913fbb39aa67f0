import numpy as np
import pytest
import trimesh

from errors import InvalidInputError, ParseError, TopologyError
from geometry import (
    SurfaceDistance,
    TriMesh,
    edge_triangle_penetrations,
    inside,
    inside_grid,
    load_obj,
    point_to_mesh_distance,
    ray_parity_inside,
    sample_surface,
    sample_volume,
    save_obj,
    winding_numbers,
)
from phantom import ellipsoid_mesh


@pytest.fixture(scope="module")
def sphere():
    return ellipsoid_mesh([0.0, 0.0, 0.0], [10.0, 10.0, 10.0], 12, 18)


@pytest.fixture(scope="module")
def blob():
    return ellipsoid_mesh([1.0, -2.0, 0.5], [12.0, 7.0, 9.0], 10, 16)


def test_ellipsoid_is_watertight(sphere):
    assert sphere.is_watertight()
    assert sphere.open_edges() == []
    sphere.require_watertight()


def test_missing_triangle_reports_open_edges(sphere):
    holed = TriMesh(sphere.vertices, sphere.triangles[1:])
    assert not holed.is_watertight()
    with pytest.raises(TopologyError) as err:
        holed.require_watertight("skin")
    assert len(err.value.open_edges) == 3


def test_degenerate_triangle_rejected():
    with pytest.raises(InvalidInputError):
        TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))


def test_area_approaches_sphere(sphere):
    assert sphere.area() == pytest.approx(4.0 * np.pi * 100.0, rel=0.05)
    assert sphere.area() < 4.0 * np.pi * 100.0


def test_normals_point_outward(sphere):
    centroids = sphere.corners.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", sphere.face_normals, centroids) > 0.0)


# ============================================================================
# OBJ
# ============================================================================

def test_obj_round_trip_with_confidence(tmp_path, sphere):
    conf = np.linspace(0.0, 1.0, sphere.n_vertices)
    mesh = TriMesh(sphere.vertices, sphere.triangles, conf)
    back = load_obj(save_obj(mesh, tmp_path / "scan.obj"))
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-8)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_allclose(back.confidence, conf, atol=1e-6)
    assert not back.fan_triangulated


def test_obj_quads_are_fanned(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text(
        "# unit square\n"
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "vn 0 0 1\n"
        "f 1//1 2//1 3//1 4//1\n"
    )
    mesh = load_obj(path)
    assert mesh.fan_triangulated
    np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2], [0, 2, 3]])
    assert mesh.area() == pytest.approx(1.0)
    np.testing.assert_array_equal(mesh.confidence, 1.0)


def test_obj_negative_indices(tmp_path):
    path = tmp_path / "rel.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    np.testing.assert_array_equal(load_obj(path).triangles, [[0, 1, 2]])


@pytest.mark.parametrize(
    "body, line",
    [
        ("v 0 0 0\nv 1 0\n", 2),
        ("v 0 0 0\nv 1 0 zero\n", 2),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n", 4),
        ("v 0 0 0\nv 1 0 0\n\nf 1 2\n", 4),
    ],
)
def test_obj_parse_errors_carry_line(tmp_path, body, line):
    path = tmp_path / "bad.obj"
    path.write_text(body)
    with pytest.raises(ParseError) as err:
        load_obj(path)
    assert err.value.line == line


# ============================================================================
# SAMPLING AND DISTANCES
# ============================================================================

def test_surface_samples_lie_on_mesh(sphere):
    samples = sample_surface(sphere, 500, seed=3)
    assert len(samples) == 500
    dist, _ = point_to_mesh_distance(samples.points, sphere)
    assert dist.max() < 1e-9
    np.testing.assert_allclose(samples.barycentric.sum(axis=1), 1.0)
    again = sample_surface(sphere, 500, seed=3)
    np.testing.assert_array_equal(samples.points, again.points)


def test_vertex_mode_returns_vertices(sphere):
    samples = sample_surface(sphere, sphere.n_vertices, seed=0, vertex_mode=True)
    np.testing.assert_array_equal(samples.points, sphere.vertices)
    rebuilt = np.einsum("ni,nij->nj", samples.barycentric, sphere.corners[samples.triangle_ids])
    np.testing.assert_allclose(rebuilt, sphere.vertices, atol=1e-12)


def test_distance_matches_brute_force(rng, blob):
    points = rng.uniform(-20.0, 20.0, size=(200, 3))
    dist, closest, tri = SurfaceDistance(blob).query(points)
    corners = np.repeat(blob.corners, len(points), axis=0)
    queries = np.tile(points, (blob.n_triangles, 1))
    brute = np.linalg.norm(trimesh.triangles.closest_point(corners, queries) - queries, axis=1)
    brute = brute.reshape(blob.n_triangles, len(points)).min(axis=0)
    np.testing.assert_allclose(dist, brute, atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(closest - points, axis=1), dist, atol=1e-10)
    assert tri.shape == (200,)


def test_point_distance_scalar(sphere):
    d, closest = point_to_mesh_distance([0.0, 0.0, 25.0], sphere)
    assert np.ndim(d) == 0
    assert d == pytest.approx(15.0, abs=0.3)
    assert closest[2] == pytest.approx(10.0, abs=0.3)


# ============================================================================
# INSIDE / OUTSIDE
# ============================================================================

def test_winding_numbers_inside_and_outside(sphere):
    w = winding_numbers([[0.0, 0.0, 0.0], [0.0, 0.0, 30.0]], sphere)
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-9)


def test_winding_agrees_with_ray_parity(rng, blob):
    points = rng.uniform(-15.0, 15.0, size=(2000, 3))
    dist, _ = point_to_mesh_distance(points, blob)
    points = points[dist > 1e-3]
    np.testing.assert_array_equal(inside(points, blob), ray_parity_inside(points, blob))


def test_inside_rejects_open_mesh(sphere):
    with pytest.raises(TopologyError):
        inside([0.0, 0.0, 0.0], TriMesh(sphere.vertices, sphere.triangles[2:]))


def test_inside_grid_matches_pointwise(blob):
    origin = np.array([-14.0, -10.0, -11.0])
    shape = (14, 10, 12)
    h = 2.0
    grid = inside_grid(blob, origin, h, shape)
    idx = np.argwhere(np.ones(shape, dtype=bool))
    expected = inside(origin + (idx + 0.5) * h, blob).reshape(shape)
    np.testing.assert_array_equal(grid, expected)
    assert grid.any() and not grid.all()


def test_penetrations_separated_and_overlapping():
    a = ellipsoid_mesh([0.0, 0.0, 0.0], [5.0, 5.0, 5.0], 8, 12)
    far = ellipsoid_mesh([20.0, 0.0, 0.0], [5.0, 5.0, 5.0], 8, 12)
    near = ellipsoid_mesh([6.0, 0.3, 0.2], [5.0, 5.0, 5.0], 8, 12)
    assert edge_triangle_penetrations(a, far) == 0
    assert edge_triangle_penetrations(a, near) > 0


def test_nested_meshes_do_not_penetrate():
    outer = ellipsoid_mesh([0.0, 0.0, 0.0], [10.0, 10.0, 10.0], 8, 12)
    inner = ellipsoid_mesh([0.0, 0.0, 0.0], [4.0, 4.0, 4.0], 8, 12)
    assert edge_triangle_penetrations(outer, inner) == 0


def test_volume_samples_avoid_holes(sphere):
    hole = ellipsoid_mesh([0.0, 0.0, 0.0], [4.0, 4.0, 4.0], 8, 12)
    points = sample_volume(sphere, [hole], 400, seed=5)
    assert points.shape == (400, 3)
    assert np.all(inside(points, sphere))
    assert not np.any(inside(points, hole))
    np.testing.assert_array_equal(points, sample_volume(sphere, [hole], 400, seed=5))
