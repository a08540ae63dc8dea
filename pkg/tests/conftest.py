import numpy as np
import pytest
import torch

from pmae.config import preset
from pmae.harness import ExperimentConfig
from pmae.model import Backbone
from pmae.prompts import TransmittedParams, init_params

# Lines recorded by acceptance tests; echoed in the terminal summary so they
# survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny():
    return preset("tiny")


@pytest.fixture
def tiny_backbone(tiny):
    return Backbone.build(tiny, seed=0)


@pytest.fixture
def tiny_backbone64(tiny):
    return Backbone.build(tiny, seed=0, dtype=torch.float64)


def random_params(config, num_classes, seed=0, dtype=torch.float32, scale=0.1) -> TransmittedParams:
    """Prompts as initialized plus a non-zero classifier, so every gradient path is live."""
    w = init_params(config, num_classes, np.random.default_rng(seed), dtype)
    g = torch.Generator().manual_seed(seed)
    weight = torch.randn(w.weight.shape, generator=g, dtype=dtype) * scale
    bias = torch.randn(w.bias.shape, generator=g, dtype=dtype) * scale
    return TransmittedParams(w.p_d, weight, bias, w.p_r)


def random_images(config, n, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, config.channels, config.image_side, config.image_side), generator=g, dtype=dtype)


def tiny_experiment(**kw) -> ExperimentConfig:
    """A full pipeline that runs in about a second."""
    base = dict(
        model="tiny",
        tasks=2,
        clients=2,
        beta=0.5,
        rounds_all=4,
        epochs=1,
        server_epochs=2,
        restore_count=2,
        batch_size=8,
        server_batch_size=8,
        server_full_batch_max=0,
        seeds=[7],
        num_classes=4,
        train_per_class=10,
        test_per_class=4,
        pretrain_epochs=1,
        pretrain_classes=4,
        pretrain_per_class=8,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture
def cache_dir(tmp_path_factory, monkeypatch):
    d = tmp_path_factory.getbasetemp() / "backbone_cache"
    monkeypatch.setenv("PMAE_CACHE", str(d))
    return d
