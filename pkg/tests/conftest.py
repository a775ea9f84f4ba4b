import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fd2cl.model import Model, ModelConfig
from fd2cl.synthdata import ArtifactSpec, TaskSpec, generate_dataset

settings.register_profile("fd2cl", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fd2cl")

SMALL = ModelConfig(channels=3, height=8, width=8, feature_dim=16, hidden_dim=32, head_dim=16)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return Model(SMALL, seed=3)


def randomize(model, rng, scale=0.3):
    """Move every trainable tensor off its initial value (B=0, W2=0 are degenerate points)."""
    for p in model.trainable():
        p.data = p.data + scale * rng.normal(size=p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_tasks(n=2, counts=None, kinds=("HighFreqCheckerboard", "SpectralSlope", "BlendBoundary", "PhaseJitter"),
               strengths=(0.05, 0.05, 1.0, 1.0)):
    counts = counts or {"train": 48, "val": 16, "test": 32}
    return [generate_dataset(TaskSpec(task_id=i, name=f"t{i}", seed=50 + i, counts=counts,
                                      artifact=ArtifactSpec(kinds[i], strengths[i])))
            for i in range(n)]
