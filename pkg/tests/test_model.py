import numpy as np
import pytest
import torch

from config.settings import FieldConfig
from errors import InvalidInputError, ParseError
from field import DTYPE, as_tensor
from model import (
    FaceModel,
    checkpoint_id,
    field_box,
    interpolate_identity,
    load_checkpoint,
    retarget,
    save_checkpoint,
)


def perturb(model, seed=0, scale=0.05):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for f in (model.identity_field, model.expression_field):
            for p in f.parameters():
                p.add_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * scale)


def test_fresh_model_is_identity(tiny_model, canonical):
    beta, gamma = tiny_model.codes(np.zeros(6), np.zeros(6))
    assert beta.shape == (3,) and gamma.shape == (3,)
    anatomy = tiny_model.identity_anatomy(beta, canonical)
    np.testing.assert_allclose(anatomy.skin.vertices, canonical.skin.vertices, atol=1e-12)
    np.testing.assert_allclose(anatomy.id_params, 0.0, atol=1e-9)
    skin = tiny_model.expression_skin(beta, gamma, canonical)
    np.testing.assert_allclose(skin.vertices, canonical.skin.vertices, atol=1e-12)


def test_field_box_contains_skin(canonical):
    lo, hi = field_box(FieldConfig())
    assert np.all(canonical.skin.vertices > lo) and np.all(canonical.skin.vertices < hi)


def test_sinusoidal_model_builds():
    model = FaceModel.from_config(FieldConfig(kind="sinusoidal", n_layers=3, width=8, d_id=2, d_ex=2, hidden=4))
    assert model.identity_field.kind == "sinusoidal"
    assert model.expression_field.latent_dim == 4


def test_face_map_composes_fields(tiny_model, canonical):
    perturb(tiny_model)
    beta, gamma = tiny_model.codes(np.full(6, 0.3), np.full(6, 0.2))
    x = as_tensor(canonical.skin.vertices[:20])
    with torch.no_grad():
        expected = tiny_model.expression_map(beta, gamma).eval(tiny_model.identity_map(beta).eval(x))
        torch.testing.assert_close(tiny_model.face_map(beta, gamma).eval(x), expected)


def test_checkpoint_round_trip(tmp_path, tiny_model, canonical):
    perturb(tiny_model, seed=1)
    path = save_checkpoint(tiny_model, tmp_path / "model.pt", {"steps": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"steps": 3}
    assert loaded.config == tiny_model.config
    beta, gamma = tiny_model.codes(np.full(6, 0.1), np.full(6, -0.4))
    with torch.no_grad():
        a = tiny_model.expression_skin(beta, gamma, canonical).vertices
        b = loaded.expression_skin(*loaded.codes(np.full(6, 0.1), np.full(6, -0.4)), canonical).vertices
    np.testing.assert_array_equal(a, b)
    assert checkpoint_id(path) == checkpoint_id(path)
    assert len(checkpoint_id(path)) == 16


def test_checkpoint_wrong_format(tmp_path):
    path = tmp_path / "other.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_retarget_uses_target_identity(tiny_model):
    perturb(tiny_model, seed=2)
    beta_a, gamma_a = tiny_model.codes(np.full(6, 0.5), np.full(6, 0.5))
    beta_b, _ = tiny_model.codes(np.full(6, -0.5), np.zeros(6))
    x = torch.zeros(4, 3, dtype=DTYPE)
    with torch.no_grad():
        torch.testing.assert_close(retarget(tiny_model, gamma_a, beta_b).eval(x),
                                   tiny_model.face_map(beta_b, gamma_a).eval(x))


def test_interpolate_identity():
    a = torch.zeros(3, dtype=DTYPE)
    b = torch.ones(3, dtype=DTYPE)
    torch.testing.assert_close(interpolate_identity(a, b, 0.25), torch.full((3,), 0.25, dtype=DTYPE))
    torch.testing.assert_close(interpolate_identity(a, b, 0.0), a)
    with pytest.raises(InvalidInputError):
        interpolate_identity(a, b, 1.5)
