import pytest

import prnu_match as pm


@pytest.fixture(scope="session")
def mini_dataset():
    """Small shared dataset: 4 devices, 32x32 sensor, fast to build."""
    cfg = pm.SynthConfig(
        n_devices=4,
        dims=(32, 32),
        flats_per_device=8,
        naturals_per_device=12,
        master_seed=101,
    )
    return pm.build_dataset(cfg)
