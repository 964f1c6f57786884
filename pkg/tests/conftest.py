import dataclasses

import pytest
import torch

from diffkd.config import (
    DiffKDConfig,
    ExperimentConfig,
    HeadConfig,
    LRScheduleConfig,
    OptimizerConfig,
    SyntheticConfig,
)

def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(name): acceptance criterion, reported in the summary"
    )


_acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        _acceptance_results[marker.args[0]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name in sorted(_acceptance_results):
        outcome = _acceptance_results[name]
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"  {status}  {name}")


def tiny_experiment_config(**overrides) -> ExperimentConfig:
    """Small synthetic config that trains in seconds; shared by harness,
    CLI, and determinism tests."""
    base = dict(
        dataset="synthetic",
        num_classes=4,
        teacher_arch="tinyconv",
        student_arch="tinyconv",
        epochs=2,
        batch_size=32,
        seed=0,
        log_interval=2,
        optimizer=OptimizerConfig(lr=0.05),
        lr_schedule=LRScheduleConfig(kind="constant"),
        synthetic=SyntheticConfig(
            classes=4, train_size=96, eval_size=64, image_size=16, noise_std=0.8
        ),
        diffkd=DiffKDConfig(total_timesteps=50, initial_timestep=25, nfe=2),
        heads=[
            HeadConfig(feature_tap="backbone", distance="mse"),
            HeadConfig(feature_tap="logits", distance="kl"),
        ],
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_experiment_config()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)
