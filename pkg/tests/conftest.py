import numpy as np
import pytest
from hypothesis import settings

from rfl.models import ViTConfig, build_tiny_vit
from rfl.pipeline import DataConfig, ExperimentConfig, PipelineSettings, ScheduleSettings

settings.register_profile("repo", derandomize=True, deadline=None, database=None)
settings.load_profile("repo")

TINY = ViTConfig(image_size=8, channels=1, patch_size=4, depth=2, width=16, heads=2, mlp_ratio=2, num_classes=3)


@pytest.fixture
def tiny_vit():
    return build_tiny_vit(TINY, np.random.default_rng(0))


@pytest.fixture
def images():
    return np.random.default_rng(1).uniform(0, 1, size=(6, 1, 8, 8)).astype(np.float32)


@pytest.fixture
def labels():
    return np.array([0, 1, 2, 0, 1, 2])


def small_experiment(**pipeline) -> ExperimentConfig:
    """Seconds-scale experiment on 8x8 digits for integration tests."""
    cfg = ExperimentConfig(
        data=DataConfig(image_size=8, source_val_per_class=5, source_test_per_class=10,
                        target_train_per_class=20, target_val_per_class=5, target_test_per_class=10),
        model=ViTConfig(image_size=8, patch_size=4, depth=1, width=16, heads=2, mlp_ratio=2),
        schedule=ScheduleSettings(epochs=2),
        pipeline=PipelineSettings(pretrain_epochs=2, timing="none", eval_samples=20),
    )
    for k, v in pipeline.items():
        setattr(cfg.pipeline, k, v)
    return cfg


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import lines

    rows = lines()
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
