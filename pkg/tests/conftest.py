import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from config.settings import FieldConfig  # noqa: E402
from lattice import HexLattice, embed  # noqa: E402
from model import FaceModel  # noqa: E402
from phantom import PhantomResolution, make_canonical  # noqa: E402

COARSE = PhantomResolution(skin_lat=12, skin_lon=18, bone_lat=6, bone_lon=12, cap_rings=2)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def canonical():
    return make_canonical(COARSE)


@pytest.fixture(scope="session")
def full_canonical():
    return make_canonical()


def slab(nx: int = 4, ny: int = 3, nz: int = 4, h: float = 1.0) -> HexLattice:
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    return HexLattice.from_cells(np.zeros(3), h, np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1))


def face_points(lattice: HexLattice, axis: int, value: float) -> np.ndarray:
    """Lattice node positions on one axis-aligned face."""
    nodes = lattice.nodes
    return nodes[np.isclose(nodes[:, axis], value)]


@pytest.fixture
def slab_setup_inputs():
    """4x3x4 slab with the bottom face as skull and the top face as jaw."""
    lattice = slab()
    embeddings = {
        "skull": embed(lattice, face_points(lattice, 1, 0.0), "skull"),
        "jaw": embed(lattice, face_points(lattice, 1, 3.0), "jaw"),
    }
    return lattice, embeddings


@pytest.fixture
def tiny_field_config():
    return FieldConfig(kind="grid", grid_resolution=[4, 4, 4], d_id=3, d_ex=3, hidden=8)


@pytest.fixture
def tiny_model(tiny_field_config):
    return FaceModel.from_config(tiny_field_config, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    """One identity with a neutral and two expressions, coarse meshes."""
    from phantom import gen_corpus

    root = tmp_path_factory.mktemp("corpus")
    gen_corpus(1, 3, seed=5, out_dir=root, resolution=COARSE)
    return root


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    from phantom import load_corpus

    return load_corpus(tiny_corpus_dir)


@pytest.fixture
def tiny_run_config(tiny_field_config):
    from config.settings import RunConfig, SamplingConfig, ScheduleConfig

    return RunConfig(
        field=tiny_field_config,
        sampling=SamplingConfig(n_volume=40, n_bone=8, n_fix=10, n_skin=30, volume_pool=2),
        schedule=ScheduleConfig(batch_size=2, learning_rate=1e-2, epochs=2, decay_after=1, log_every=1),
    )
