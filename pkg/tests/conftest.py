"""Shared fixtures: a small trained teacher and friends, sized for unit-test
speed (16px canvas, 8-channel base width). The acceptance suite builds its own
larger fixtures with realistic budgets."""

import numpy as np
import pytest
import torch

from cleandift.backbone import BackboneConfig, TeacherTrainConfig, train_teacher
from cleandift.consolidate import AlignmentConfig, init_heads, init_student_from_teacher
from cleandift.features import FeatureService
from cleandift.schedule import build_schedule
from cleandift.scenes import generate_scene_set, images_tensor

UNIT_CANVAS = 16
UNIT_T = 20


@pytest.fixture(scope="session")
def unit_config():
    return BackboneConfig(
        image_size=UNIT_CANVAS, base_channels=8, stage_multipliers=(1, 2, 2),
        timestep_embed_dim=32,
    )


@pytest.fixture(scope="session")
def unit_schedule():
    return build_schedule(UNIT_T, "cosine")


@pytest.fixture(scope="session")
def unit_scenes():
    return generate_scene_set(8, UNIT_CANVAS, seed=7)


@pytest.fixture(scope="session")
def unit_images(unit_scenes):
    return images_tensor(unit_scenes)


@pytest.fixture(scope="session")
def unit_teacher(unit_config, unit_schedule, unit_images):
    from cleandift.backbone import init_denoiser

    model = init_denoiser(unit_config, seed=3)
    model, _ = train_teacher(
        unit_images, unit_schedule, TeacherTrainConfig(steps=30, batch_size=8),
        seed=3, model=model,
    )
    return model


@pytest.fixture(scope="session")
def unit_student(unit_teacher):
    return init_student_from_teacher(unit_teacher)


@pytest.fixture(scope="session")
def unit_heads(unit_teacher):
    return init_heads(unit_teacher, AlignmentConfig(), seed=5)


@pytest.fixture()
def unit_service(unit_teacher, unit_student, unit_schedule, unit_heads):
    return FeatureService(unit_teacher, unit_student, unit_schedule, heads=unit_heads)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance suite's one-line-per-criterion verdicts after the
    test run, outside pytest's output capture."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "CRITERION_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
