import numpy as np
import pytest

from jobvs import PhantomConfig, generate_cohort


@pytest.fixture(scope="session")
def small_cfg():
    # 32-voxel phantoms keep CPU unit tests fast; geometry scaled accordingly
    return PhantomConfig(
        size=32,
        brain_axes=(0.36, 0.33, 0.30),
        n_vessel_roots=2,
        branch_depth=2,
        vessel_radius_range=(1.0, 1.5),
        seed=11,
    )


@pytest.fixture(scope="session")
def small_cohort(small_cfg):
    return generate_cohort(small_cfg, 4)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
