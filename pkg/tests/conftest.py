"""Shared fixtures.

Two toy denoisers are trained per session: a small one for unit tests and the
full-size one (through the command-line pipeline) for the acceptance suite.
"""

import time

import pytest
from oracles import ACCEPTANCE

from dancegen.backends import IdentityAutoencoder, TrainingConfig, train_toy_denoiser
from dancegen.diffusion import make_schedule
from dancegen.toyworld import ToyWorld

SMALL_TRAINING = TrainingConfig(hidden=64, local_hidden=16, steps=300, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def world():
    return ToyWorld()


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(50)


@pytest.fixture(scope="session")
def autoencoder():
    return IdentityAutoencoder((32, 32, 3))


@pytest.fixture(scope="session")
def small_data(world):
    return world.training_set(128, seed=11)


@pytest.fixture(scope="session")
def small_model(small_data, schedule):
    return train_toy_denoiser(small_data, schedule, SMALL_TRAINING)


@pytest.fixture(scope="session")
def pipeline_root(tmp_path_factory):
    return tmp_path_factory.mktemp("pipeline")


@pytest.fixture(scope="session")
def trained_pipeline(pipeline_root):
    """Run ``compose`` and ``train-toy`` once; returns paths and the elapsed seconds."""
    import json

    from dancegen.cli import main

    cfg = pipeline_root / "run.json"
    cfg.write_text(json.dumps({"dataset_size": 1024, "training": {"steps": 1500}, "seed": 0}))
    t0 = time.perf_counter()
    assert main(["compose", "--config", str(cfg), "--toy-persons", "2", "--frames", "8",
                 "--out", str(pipeline_root / "compose")]) == 0  # fmt: skip
    assert main(["train-toy", "--config", str(cfg), "--out", str(pipeline_root / "train")]) == 0
    return {
        "root": pipeline_root,
        "config": cfg,
        "compose": pipeline_root / "compose",
        "checkpoint": pipeline_root / "train" / "toy.ckpt",
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def toy_model(trained_pipeline):
    from dancegen.backends import load_checkpoint

    return load_checkpoint(trained_pipeline["checkpoint"])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
