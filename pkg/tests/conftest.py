"""Shared fixtures: a small benchmark world and base classifier.

Session-scoped so the expensive pieces (world generation, pretraining) run
once. Tests must never mutate these objects; anything that edits a model
must do so on a clone.
"""

import numpy as np
import pytest

from gradedit import WorldConfig, generate_world, pretrain_model


@pytest.fixture(scope="session")
def small_world():
    return generate_world(
        WorldConfig(
            num_entities=8,
            num_relations=2,
            num_classes=6,
            feature_dim=16,
            pretrain_per_fact=25,
            records_per_fact=4,
        )
    )


@pytest.fixture(scope="session")
def small_model(small_world):
    model, acc = pretrain_model(small_world, hidden_dims=(24,), epochs=40)
    assert acc > 0.9
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
