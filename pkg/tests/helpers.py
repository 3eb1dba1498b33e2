"""Shared fixtures data and the fixed acceptance training recipe."""

from __future__ import annotations

import numpy as np

from relmo.data import Scene, SyntheticConfig, generate_scenes
from relmo.model import ModelConfig
from relmo.training import TrainConfig

ACCEPT_SEED = 42

# toy model, 8 scenes, lr 1e-3, loss mode both; 8 scenes per batch makes one
# optimiser step per epoch, so the step decay is spaced every 100 epochs
OVERFIT_TRAIN = TrainConfig(
    lr=1e-3, decay=0.8, decay_every=100, batch_size=8, epochs=2000, max_steps=2000, loss_mode="both", seed=ACCEPT_SEED
)


def toy_scenes(count: int = 8, seed: int = ACCEPT_SEED, config: ModelConfig | None = None, interaction: float = 0.0):
    cfg = ModelConfig.toy() if config is None else config
    return generate_scenes(
        count, SyntheticConfig(N=cfg.N, T=cfg.T, P=cfg.P, J=cfg.J, seed=seed, interaction_strength=interaction)
    )


def random_scene(rng: np.random.Generator, n: int, t: int, p: int, j: int, scale: float = 1.0) -> Scene:
    return Scene(rng.normal(scale=scale, size=(n, t + p, j, 3)), t)


def moving_average(x, window: int = 50) -> np.ndarray:
    return np.convolve(np.asarray(x, dtype=np.float64), np.ones(window) / window, mode="valid")
