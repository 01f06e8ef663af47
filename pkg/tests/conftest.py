"""Shared fixtures: a small phantom dataset and a briefly trained model.

Both are session-scoped because training even the desk-scale network costs
tens of seconds; behavioral tests (adaptation trends, harness round trips)
reuse them.
"""

import numpy as np
import pytest

from sattca import harness, phantom, segnet

FIXTURE_SEED = 123


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    """Small, easy dataset: sharp high-contrast lesions of mid-to-large size,
    so a fixture model trains in a couple of minutes."""
    cfg = phantom.PhantomConfig(count=20, seed=FIXTURE_SEED,
                                diameter_range_mm=(10.0, 40.0), tail_mass=0.2,
                                rim_softness=0.0, noise_sigma_hu=25.0,
                                irregularity=0.1)
    root = tmp_path_factory.mktemp("phantom_ds")
    return phantom.generate_dataset(cfg, root)


@pytest.fixture(scope="session")
def fixture_net_cfg():
    return segnet.NetworkConfig(base_channels=4, depth=3, ms_enabled=True)


@pytest.fixture(scope="session")
def fixture_model(fixture_dataset, fixture_net_cfg, tmp_path_factory):
    """A lightly trained model: enough steps to segment lesion cores, few
    enough to keep the suite fast."""
    model = segnet.build_model(fixture_net_cfg, seed=FIXTURE_SEED)
    out = tmp_path_factory.mktemp("fixture_train")
    cfg = harness.TrainConfig(epochs=10, batch_size=1, lr_max=3e-3,
                              seed=FIXTURE_SEED)
    ckpt = harness.train(model, fixture_dataset, cfg, out)
    trained, _ = segnet.load_checkpoint(ckpt)
    return trained


@pytest.fixture()
def fixture_sample(fixture_dataset):
    entry = fixture_dataset.split("test")[0]
    return fixture_dataset.load_roi_sample(entry)


@pytest.fixture()
def large_lesion_sample():
    """A mass-sized lesion case for scale-aware behavioral checks."""
    cfg = phantom.PhantomConfig(count=1, seed=FIXTURE_SEED)
    rng = np.random.default_rng([FIXTURE_SEED, 7])
    vol, mask, diameter = phantom.generate_case(rng, cfg, diameter_mm=45.0)
    from sattca.volgrid import RoiSample, preprocess_hu

    return RoiSample(image=preprocess_hu(vol), gt=mask,
                     lesion_diameter_mm=diameter, sample_id="large_45mm")
