import numpy as np
import pytest
from pydantic import ValidationError

from conftest import COARSE
from errors import InvalidInputError
from geometry import edge_triangle_penetrations
from numerics import kabsch
from phantom import (
    N_EXPR_CODE,
    N_ID_PARAMS,
    Bulge,
    ExpressionSpec,
    fit_id_params,
    bone_oracle,
    frontal_mask,
    gen_corpus,
    ground_truth_map,
    jaw_transform,
    load_corpus,
    look_at_camera,
    make_identity,
    manifest_digest,
    min_bone_gap,
    posed_anatomy,
    project,
    random_expression_code,
    unwarp,
    warp,
    warp_jacobian,
)

ID_PARAMS = np.array([0.6, -0.4, 0.3, -0.7, 0.5, -0.2])


@pytest.fixture(scope="module")
def identity(canonical):
    return make_identity(ID_PARAMS, canonical)


@pytest.fixture(scope="module")
def open_spec():
    return ExpressionSpec.from_code([0.8, 0.5, 0.7, -0.6, 0.9, -0.5])


def test_canonical_meshes_are_watertight(canonical):
    for mesh in (canonical.skin, canonical.skull, canonical.jaw):
        mesh.require_watertight()
    assert len(canonical.landmark_ids) == len(set(canonical.landmark_ids.tolist()))


def test_bones_sit_inside_skin(canonical):
    assert min_bone_gap(canonical) > 4.0
    skull_bottom = canonical.skull.vertices[:, 1].min()
    jaw_top = canonical.jaw.vertices[:, 1].max()
    assert jaw_top < skull_bottom


def test_back_band_has_low_confidence(canonical):
    back = canonical.skin.vertices[:, 2] < -45.0
    assert back.any()
    assert np.all(canonical.skin.confidence[back] < 1.0)
    assert np.all(canonical.skin.confidence[~back] == 1.0)


# ============================================================================
# IDENTITY WARP
# ============================================================================

def test_zero_params_give_canonical(canonical):
    same = make_identity(np.zeros(N_ID_PARAMS), canonical)
    np.testing.assert_array_equal(same.skin.vertices, canonical.skin.vertices)
    np.testing.assert_array_equal(same.hinge_pivot, canonical.hinge_pivot)


def test_unwarp_inverts_warp(rng):
    y = rng.uniform(-90.0, 90.0, size=(300, 3))
    np.testing.assert_allclose(unwarp(warp(y, ID_PARAMS), ID_PARAMS), y, atol=1e-9)


def test_warp_jacobian_matches_finite_differences(rng):
    y = rng.uniform(-80.0, 80.0, size=(20, 3))
    eps = 1e-6
    fd = np.stack([(warp(y + eps * e, ID_PARAMS) - warp(y - eps * e, ID_PARAMS)) / (2 * eps) for e in np.eye(3)], axis=2)
    np.testing.assert_allclose(warp_jacobian(y, ID_PARAMS), fd, atol=1e-7)


def test_random_identities_keep_bones_inside_skin(canonical, rng):
    for _ in range(50):
        ident = make_identity(rng.uniform(-1.0, 1.0, N_ID_PARAMS), canonical)
        assert edge_triangle_penetrations(ident.skin, ident.skull) == 0
        assert edge_triangle_penetrations(ident.skin, ident.jaw) == 0
        assert edge_triangle_penetrations(ident.skull, ident.jaw) == 0


def test_identity_params_out_of_range(canonical):
    with pytest.raises(InvalidInputError):
        make_identity(np.full(N_ID_PARAMS, 1.5), canonical)
    with pytest.raises(InvalidInputError):
        make_identity(np.zeros(3), canonical)


def test_bone_oracle_recovers_bones(canonical, identity):
    np.testing.assert_allclose(fit_id_params(identity.skin.vertices, canonical), ID_PARAMS, atol=1e-9)
    skull, jaw = bone_oracle(identity.skin.vertices, canonical)
    np.testing.assert_allclose(skull, identity.skull.vertices, atol=1e-8)
    np.testing.assert_allclose(jaw, identity.jaw.vertices, atol=1e-8)


# ============================================================================
# EXPRESSIONS
# ============================================================================

def test_from_code_ranges():
    spec = ExpressionSpec.from_code([1.0, -1.0, 0.0, 0.5, 0.0, 0.0])
    assert spec.jaw_angle == pytest.approx(0.25)
    assert spec.jaw_slide == pytest.approx(-2.0)
    assert len(spec.bulges) == 1
    assert not spec.is_neutral()
    assert ExpressionSpec.neutral().is_neutral()
    with pytest.raises(InvalidInputError):
        ExpressionSpec.from_code([-0.1, 0.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(InvalidInputError):
        ExpressionSpec.from_code([0.5, 0.0, 1.2, 0.0, 0.0, 0.0])
    with pytest.raises(InvalidInputError):
        ExpressionSpec.from_code([0.5] * (N_EXPR_CODE - 1))


def test_random_codes_are_valid(rng):
    for _ in range(20):
        ExpressionSpec.from_code(random_expression_code(rng))


def test_bulge_rejects_asymmetric_stretch():
    with pytest.raises(ValidationError):
        Bulge(center=[0, 0, 0], radius=5.0, stretch=[[1, 0.1, 0], [0, 1, 0], [0, 0, 1]], falloff=2.0)


def test_neutral_map_is_identity(identity):
    gt = ground_truth_map(identity, ExpressionSpec.neutral())
    np.testing.assert_array_equal(gt.eval(identity.skin.vertices), identity.skin.vertices)


def test_skull_fixed_and_jaw_rigid(identity, open_spec):
    gt = ground_truth_map(identity, open_spec)
    np.testing.assert_allclose(gt.eval(identity.skull.vertices), identity.skull.vertices, atol=1e-12)
    jaw = jaw_transform(identity, open_spec)
    np.testing.assert_allclose(gt.eval(identity.jaw.vertices), jaw.apply(identity.jaw.vertices), atol=1e-9)
    fit = kabsch(identity.jaw.vertices, gt.eval(identity.jaw.vertices))
    np.testing.assert_allclose(fit.rotation, jaw.rotation, atol=1e-9)


def test_jaw_opens_about_hinge(identity, open_spec):
    jaw = jaw_transform(identity, ExpressionSpec(jaw_angle=open_spec.jaw_angle))
    assert jaw.angle() == pytest.approx(open_spec.jaw_angle)
    np.testing.assert_allclose(jaw.apply(identity.hinge_pivot[None])[0], identity.hinge_pivot, atol=1e-12)


def test_ground_truth_jacobian(identity, open_spec):
    gt = ground_truth_map(identity, open_spec)
    x = identity.skin.vertices[::3]
    _, jac = gt.eval_with_jacobian(x)
    eps = 1e-5
    fd = np.stack([(gt.eval(x + eps * e) - gt.eval(x - eps * e)) / (2 * eps) for e in np.eye(3)], axis=2)
    np.testing.assert_allclose(jac, fd, atol=1e-4)


def test_single_point_eval(identity, open_spec):
    gt = ground_truth_map(identity, open_spec)
    p = identity.skin.vertices[5]
    out, jac = gt.eval_with_jacobian(p)
    assert out.shape == (3,) and jac.shape == (3, 3)
    np.testing.assert_allclose(out, gt.eval(p[None])[0])


def test_posed_anatomy_keeps_skull(identity, open_spec):
    posed = posed_anatomy(identity, open_spec)
    np.testing.assert_allclose(posed.skull.vertices, identity.skull.vertices, atol=1e-12)
    assert posed.skin.n_vertices == identity.skin.n_vertices
    assert not np.allclose(posed.skin.vertices, identity.skin.vertices)


# ============================================================================
# CAMERAS
# ============================================================================

def test_camera_projects_target_to_principal_point():
    cam = look_at_camera([0.0, 0.0, 600.0])
    uv, depth = project(cam, [[0.0, 0.0, 0.0], [10.0, 10.0, 0.0]])
    np.testing.assert_allclose(uv[0], [256.0, 256.0], atol=1e-9)
    np.testing.assert_allclose(depth, 600.0)
    # viewed from the front: +x is image right, +y is image up
    assert uv[1, 0] > 256.0 and uv[1, 1] < 256.0


def test_frontal_mask(canonical):
    mask = frontal_mask(canonical)
    assert np.all(canonical.skin.vertices[mask, 2] > 0.0)
    assert 0 < len(mask) < canonical.skin.n_vertices


# ============================================================================
# CORPUS
# ============================================================================

def test_corpus_round_trip(tmp_path):
    manifest = gen_corpus(2, 3, seed=7, out_dir=tmp_path / "a", resolution=COARSE)
    corpus = load_corpus(tmp_path / "a")
    assert corpus.pairs() == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert corpus.manifest == manifest
    first = corpus.identities[0]
    assert first.specs[0].is_neutral()
    np.testing.assert_allclose(first.skins[0].vertices, first.anatomy.skin.vertices, atol=1e-8)
    expected = ground_truth_map(first.anatomy, first.specs[1]).eval(first.anatomy.skin.vertices)
    np.testing.assert_allclose(first.skins[1].vertices, expected, atol=1e-6)


def test_corpus_is_deterministic(tmp_path):
    gen_corpus(1, 2, seed=11, out_dir=tmp_path / "a", resolution=COARSE)
    gen_corpus(1, 2, seed=11, out_dir=tmp_path / "b", resolution=COARSE)
    gen_corpus(1, 2, seed=12, out_dir=tmp_path / "c", resolution=COARSE)
    assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
    assert manifest_digest(tmp_path / "a") != manifest_digest(tmp_path / "c")
    assert (tmp_path / "a" / "id_0" / "expr_1_skin.obj").read_text() == (tmp_path / "b" / "id_0" / "expr_1_skin.obj").read_text()
