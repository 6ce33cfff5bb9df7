import dataclasses

import pytest
import torch

from unimiss.config import FullConfig, MiTConfig, ProjectorConfig

MICRO_MIT = MiTConfig(
    embed_dims=(8, 16, 16, 32),
    num_heads=(1, 2, 2, 4),
    ffn_expansion=(2, 2, 2, 2),
    pos_grid_2d=(32, 32),
    pos_grid_3d=(16, 32, 32),
)

# criterion lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def micro_config(**overrides) -> FullConfig:
    """Small enough for a CPU unit test, large enough to exercise every code path."""
    cfg = FullConfig()
    cfg.mit = dataclasses.replace(MICRO_MIT)
    cfg.projector = ProjectorConfig(n_layers=3, hidden_dim=32, output_dim=16)
    cfg.schedule.total_steps = 12
    cfg.schedule.warmup_steps = 2
    cfg.schedule.batch_size_2d = 2
    cfg.schedule.batch_size_3d = 1
    cfg.data.n_2d = 6
    cfg.data.n_3d = 3
    cfg.data.phantom.shape = (16, 32, 32)
    cfg.augment.patch_2d = (16, 16)
    cfg.augment.patch_3d = (16, 16, 16)
    cfg.run.checkpoint_every = 4
    for key, value in overrides.items():
        section, field = key.split("__")
        setattr(getattr(cfg, section), field, value)
    return cfg.validate()


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
