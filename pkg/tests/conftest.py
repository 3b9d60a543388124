"""Shared fixtures: tiny configs, datasets, and a briefly-trained model."""

from __future__ import annotations

import pytest

import sohdiff as sd
from sohdiff.seeding import stream

TOY_L = 64
TOY_C_MAX = 1000


def tiny_model_config(l: int = TOY_L, n_feat: int = 4, n_early: int = 100) -> sd.DenoiserConfig:
    return sd.DenoiserConfig(
        l=l,
        base_channels=16,
        channel_multipliers=(1, 2),
        attn_levels=frozenset({1}),
        time_embed_dim=32,
        cond_embed_dim=32,
        dim_p=4,
        enc_layers=1,
        enc_heads=2,
        enc_d_model=16,
        n_feat=n_feat,
        n_early=n_early,
    )


@pytest.fixture(scope="session")
def toy_schedule() -> sd.NoiseSchedule:
    return sd.make_schedule("linear", T=50)


@pytest.fixture(scope="session")
def toy_dataset() -> sd.Dataset:
    return sd.make_synthetic_dataset(
        12, stream(7, "data"), l=TOY_L, c_max=TOY_C_MAX, n_feat=4
    )


@pytest.fixture(scope="session")
def toy_split(toy_dataset):
    return sd.split_dataset(toy_dataset, 0.25, stream(7, "data", 1))


@pytest.fixture(scope="session")
def tiny_trained(toy_split, toy_schedule):
    """A briefly trained tiny model; enough structure for protocol tests."""
    train_ds, _ = toy_split
    cfg = sd.TrainConfig(steps=60, batch_size=8, T=toy_schedule.T, seed=11,
                         ema_decay=0.99, eval_every=20)
    model, report = sd.run_training(train_ds, tiny_model_config(), cfg, toy_schedule)
    return model, report
