import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("hrdet", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "hrdet"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    from hrdet import tensor as T

    with T.default_dtype(np.float64):
        yield


TINY_OVERRIDES = {
    "data.canvas": "256x128", "data.lowres": "128x64", "data.n_images": 6,
    "backbone.stage_channels": [8, 8, 16, 16], "backbone.blocks_per_stage": [1, 1, 1, 1],
    "backbone.stem_channels": 8, "backbone.fpn_channels": 8,
    "roi.l": 16, "roi.N": 4, "vit.d": 16, "vit.L": 1, "vit.heads": 2,
    "train.steps": 4, "train.max_regions": 4, "train.optimizer": "adam", "train.lr": 1e-3,
    "rpn.pre_nms_k": 32, "rpn.post_nms_k_train": 8, "rpn.post_nms_k_test": 8,
    "ablation.steps": 2, "ablation.encoder_layers_alt": 2,
}


def tiny_config(**extra):
    from hrdet.config import RunConfig

    return RunConfig().replace(**{**TINY_OVERRIDES, **extra}).validate()


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    from hrdet.synth import Dataset, generate_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(tiny_cfg.data.n_images, 3, tiny_cfg.data, root)
    return Dataset(root)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = f"{'PASS' if passed else 'FAIL'}  criterion {key}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
