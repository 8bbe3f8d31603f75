"""Shared fixtures: a miniature trained world/model for contract tests."""

import numpy as np
import pytest

from georange.data import (DatasetManifest, SyntheticWorldSpec,
                           generate_synthetic_world, save_world)
from georange.model import save_checkpoint
from georange.training import TrainConfig, TrainData, train


MINI_SPEC = SyntheticWorldSpec(width=24, height=12, climate_fields=3,
                               train_species=8, held_out_species=2,
                               sharpness=5.0, text_noise=0.5, seed=3,
                               text_dim=16, min_obs=40, max_obs=60,
                               sections_per_species=2)


def world_train_data(world, env=False):
    train_obs = [r for r in world.observations
                 if r.species_id in set(world.train_ids)]
    counts = {}
    for r in train_obs:
        counts[r.species_id] = counts.get(r.species_id, 0) + 1
    manifest = DatasetManifest(species_counts=counts, pre_counts=counts,
                               held_out=world.held_out_ids, cap=1000)
    return TrainData(observations=train_obs, manifest=manifest,
                     embeddings=world.embeddings,
                     covariates=world.covariates if env else None)


@pytest.fixture(scope="session")
def mini_world():
    return generate_synthetic_world(MINI_SPEC)


@pytest.fixture(scope="session")
def mini_model(mini_world):
    data = world_train_data(mini_world)
    config = TrainConfig(epochs=4, learning_rate=0.001, batch_size=32, m=4,
                         lam_pos=64.0, seed=0, precision="float32")
    params, _ = train(data, config)
    return params


@pytest.fixture(scope="session")
def mini_bundle(mini_world, mini_model, tmp_path_factory):
    """World directory + checkpoint + observations on disk."""
    base = tmp_path_factory.mktemp("mini")
    world_dir = base / "world"
    save_world(mini_world, world_dir)
    ckpt = base / "model.lesm"
    save_checkpoint(mini_model, ckpt)
    return {"world": mini_world, "params": mini_model,
            "world_dir": world_dir, "checkpoint": ckpt}
