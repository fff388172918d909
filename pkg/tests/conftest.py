import dataclasses

import numpy as np
import pytest

from irk.checks import TINY
from irk.config import DataConfig, ModelConfig, RunConfig
from irk.synth import generate_dataset

# small enough that a forward pass takes milliseconds
SMALL_MODEL = dict(image_height=16, image_width=16, patch_size=8, channels=3, dim=16, heads=2,
                   layers=2, encoder_blocks=1, fusion_blocks=2, mlp_ratio=2, vocab_size=128,
                   max_text_len=32, instruction_image_size=8, num_identities=6)

SMALL_DATA = dict(train_identities=6, samples_per_identity=4, test_identities=3, image_height=16,
                  image_width=16, channels=3)


def small_run(**overrides) -> RunConfig:
    base = RunConfig(model=ModelConfig(**SMALL_MODEL), data=DataConfig(**SMALL_DATA), P=3, K=2,
                     lr=1e-3, warmup_start_lr=1e-5, warmup_steps=4, steps=6, checkpoint_every=3)
    return base.replace(**overrides)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(DataConfig(**SMALL_DATA))


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def small_cfg():
    return small_run()


def replace_data(cfg: RunConfig, **changes) -> RunConfig:
    return cfg.replace(data=dataclasses.replace(cfg.data, **changes))


ACCEPTANCE_LINES: list = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
