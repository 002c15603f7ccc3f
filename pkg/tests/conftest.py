import numpy as np
import pytest

from fluoroforge import phantoms
from fluoroforge.carm_geometry import camera_from_view
from fluoroforge.drr_renderer import Spectrum


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def water_cube():
    """101^3 voxel water cube spanning exactly 100 mm per side."""
    return phantoms.water_cube_volume(edge_mm=100.0, spacing_mm=1.0)


@pytest.fixture(scope="session")
def spectrum():
    return Spectrum()


@pytest.fixture
def simple_camera():
    """Odd-sized detector so an exact center pixel exists on the principal ray."""
    return camera_from_view(
        isocenter=np.zeros(3), direction=[0.0, 0.0, 1.0],
        sad_mm=700.0, sid_mm=1000.0, pixel_size=1.0, image_dims=(65, 65),
    )


@pytest.fixture(scope="session")
def phantom_inputs(tmp_path_factory):
    """Shared small phantom input directory (2 CTs, tools, catalog, config)."""
    root = tmp_path_factory.mktemp("phantom_inputs")
    config_path = phantoms.write_phantom_dataset(root, seed=7, random_views_per_ct=3)
    return config_path
