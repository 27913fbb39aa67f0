import numpy as np
import pytest

from collision import (
    CollisionSettings,
    barrier,
    collision_barrier,
    is_feasible,
    lip_regions,
    make_pinch_scenario,
    vertex_triangle_barrier,
)
from errors import InvalidInputError
from geometry import TriMesh
from sim import SimEffects, assemble, solve_quasistatic


def test_barrier_values():
    k, d_hat = 2.0, 1.5
    e, de = barrier(np.array([0.75, 1.5, 3.0]), d_hat, k)
    assert e[0] == pytest.approx(k * 0.75 ** 2 * np.log(2.0))
    assert e[1] == 0.0 and e[2] == 0.0
    assert de[0] < 0.0 and de[1] == 0.0


def test_barrier_derivative_matches_finite_differences():
    d = np.linspace(0.05, 0.95, 7)
    eps = 1e-7
    _, de = barrier(d, 1.0, 3.0)
    fd = (barrier(d + eps, 1.0, 3.0)[0] - barrier(d - eps, 1.0, 3.0)[0]) / (2 * eps)
    np.testing.assert_allclose(de, fd, rtol=1e-6)


def test_settings_validation():
    with pytest.raises(InvalidInputError):
        CollisionSettings([("a", "b")], distance=0.0)
    with pytest.raises(InvalidInputError):
        CollisionSettings([("a", "b")], stiffness=-1.0)


@pytest.fixture
def triangle():
    return TriMesh(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), np.array([[0, 1, 2]]))


def test_point_over_triangle(triangle):
    point = np.array([[0.5, 0.5, 0.25]])
    energy, grad_p, grad_v = vertex_triangle_barrier(point, triangle, 0.5, 1.0)
    assert energy == pytest.approx(barrier(np.array([0.25]), 0.5, 1.0)[0][0])
    # pushing the point towards the triangle raises the energy
    assert grad_p[0, 2] < 0.0
    np.testing.assert_allclose(grad_p[0, :2], 0.0, atol=1e-15)
    np.testing.assert_allclose(grad_v.sum(axis=0), -grad_p[0], atol=1e-15)


def test_far_point_has_no_barrier(triangle):
    energy, grad_p, grad_v = vertex_triangle_barrier(np.array([[0.5, 0.5, 3.0]]), triangle, 0.5, 1.0)
    assert energy == 0.0
    assert not grad_p.any() and not grad_v.any()


def test_touching_point_raises(triangle):
    with pytest.raises(InvalidInputError):
        vertex_triangle_barrier(np.array([[0.5, 0.5, 0.0]]), triangle, 0.5, 1.0)


# ============================================================================
# PINCH SCENARIO
# ============================================================================

@pytest.fixture(scope="module")
def pinch():
    return make_pinch_scenario()


def test_pinch_lattice_is_two_slabs(pinch):
    assert pinch.lattice.n_components() == 2


def test_pinch_start_is_feasible(pinch):
    assert is_feasible(pinch.embeddings, pinch.meshes, pinch.lattice.nodes, pinch.settings.pairs)
    energy, grad = collision_barrier(pinch.embeddings, pinch.meshes, pinch.lattice.nodes, pinch.settings)
    assert energy == 0.0
    assert not grad.any()


def test_collision_gradient_matches_finite_differences(pinch):
    nodes = pinch.lattice.nodes
    u = nodes.copy()
    # upper slab 0.6 mm lower: facing sheets 0.4 apart, inside the 0.5 barrier
    u[nodes[:, 1] >= 4.0, 1] -= 0.6
    energy, grad = collision_barrier(pinch.embeddings, pinch.meshes, u, pinch.settings)
    assert energy > 0.0
    eps = 1e-6
    watched = [int(np.argmin(np.linalg.norm(nodes - p, axis=1))) for p in ([4.0, 4.0, 4.0], [3.0, 3.0, 5.0])]
    for node in watched:
        hi = u.copy()
        lo = u.copy()
        hi[node, 1] += eps
        lo[node, 1] -= eps
        fd = (collision_barrier(pinch.embeddings, pinch.meshes, hi, pinch.settings)[0]
              - collision_barrier(pinch.embeddings, pinch.meshes, lo, pinch.settings)[0]) / (2 * eps)
        assert grad[node, 1] == pytest.approx(fd, rel=1e-4, abs=1e-12)


@pytest.fixture(scope="module")
def pinch_setup(pinch):
    return assemble(pinch.lattice, pinch.embeddings, meshes=pinch.meshes, max_iterations=60)


def test_pinch_without_barrier_interpenetrates(pinch, pinch_setup):
    report_only = CollisionSettings(pinch.settings.pairs, pinch.settings.distance, enabled=False)
    result = solve_quasistatic(pinch_setup, pinch.bundle(), SimEffects(collision=report_only))
    assert result.penetration_pairs > 0


def test_pinch_with_barrier_stays_apart(pinch, pinch_setup):
    result = solve_quasistatic(pinch_setup, pinch.bundle(), SimEffects(collision=pinch.settings))
    assert result.penetration_pairs == 0
    assert is_feasible(pinch.embeddings, pinch.meshes, result.u, pinch.settings.pairs)
    assert np.all(np.isfinite(result.energies))
    # the slabs still moved towards each other
    lower_top = result.surface("lower")[:, 1]
    assert lower_top.max() > 3.0


def test_infeasible_start_is_rejected(pinch, pinch_setup):
    u = pinch.lattice.nodes.copy()
    dent = (u[:, 1] >= 4.0) & (np.abs(u[:, 0] - 4.0) <= 2.0) & (np.abs(u[:, 2] - 4.0) <= 2.0)
    u[dent, 1] -= 1.5
    with pytest.raises(InvalidInputError):
        solve_quasistatic(pinch_setup, pinch.bundle(), SimEffects(collision=pinch.settings), u_init=u)


def test_pinch_scenario_validation():
    with pytest.raises(InvalidInputError):
        make_pinch_scenario(size=2)


# ============================================================================
# REGIONS
# ============================================================================

def test_lip_regions_are_disjoint_bands(full_canonical):
    regions = lip_regions(full_canonical.skin)
    upper, lower = regions["upper_lip"], regions["lower_lip"]
    assert upper.n_triangles > 0 and lower.n_triangles > 0
    assert upper.vertices[:, 1].min() > -38.0
    assert lower.vertices[:, 1].max() < -42.0
    assert np.all(upper.vertices[:, 2] > 0.0) and np.all(lower.vertices[:, 2] > 0.0)


def test_lip_regions_need_triangles(canonical):
    with pytest.raises(InvalidInputError):
        lip_regions(canonical.skin, split_y=500.0)
