import numpy as np
import pytest

from oponerf.camera import RigSpec, arc_rig
from oponerf.config import Config
from oponerf.scene import generate_scene
from oponerf.train import make_train_data


def toy_data(cfg: Config):
    """The default synthetic frame-0 scene and its 21-view arc rig."""
    scene = generate_scene(cfg.object_count, cfg.scene_seed)
    cams = arc_rig(RigSpec(n_views=cfg.n_views, width=cfg.resolution, height=cfg.resolution))
    return make_train_data(cfg, scene, cams)


@pytest.fixture(scope="session")
def default_data():
    return toy_data(Config())


def small_config(**changes) -> Config:
    """A model small enough for a few fast training iterations."""
    base = dict(resolution=16, channels=4, width=4, grid_x=6, grid_y=6, grid_z=4, rank=2, latent=4,
                batch_rays=8, samples=4, iterations=3, log_every=1)
    base.update(changes)
    return Config(**base)


@pytest.fixture(scope="session")
def small_data():
    return toy_data(small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
