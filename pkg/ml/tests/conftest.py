"""
Shared fixtures for the test suite.
"""

import numpy as np
import pytest

from ml.data.attention_env import GlimpseSpec, make_glyph_dataset
from ml.data.tracking_env import GridConfig, default_camera_layout, generate_dataset
from ml.inference.belief_engine import DiscreteModel
from ml.training.train_models import EpsilonSchedule, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_state_model():
    """Static 2-state model with one action: Pr(z=0 | y) = (0.9, 0.2)"""
    observations = np.array([[[0.9, 0.2],
                              [0.1, 0.8]]])
    return DiscreteModel.static(observations)


@pytest.fixture
def two_action_model():
    """Static 2-state model; action 0 is sharper than action 1"""
    observations = np.array([
        [[0.9, 0.2], [0.1, 0.8]],
        [[0.6, 0.4], [0.4, 0.6]],
    ])
    return DiscreteModel.static(observations)


@pytest.fixture
def small_grid():
    """6x6 grid, two cameras, no sensor noise"""
    return GridConfig(width=6, height=6, n_cameras=2, episode_len=6,
                      walk_persistence=0.5, noise_adjacent=0.0, miss_prob=0.0)


@pytest.fixture
def small_tracking(small_grid):
    cameras = default_camera_layout(small_grid)
    train, test = generate_dataset(small_grid, n_tracks=20, seed=7)
    return small_grid, cameras, train, test


@pytest.fixture
def tiny_train_config():
    """A few episodes of every training stage; enough to exercise the loop, not to learn"""
    return TrainConfig.tracking_defaults(
        episodes=6,
        warmup_steps=12,
        batch_episodes=2,
        trace_len=4,
        burn_in=1,
        update_every=2,
        target_sync_every=10,
        eval_every=3,
        eval_items=4,
        hidden_sizes=(8,),
        recurrent_size=8,
        epsilon=EpsilonSchedule(0.5, 0.5, 0),
    )


@pytest.fixture
def glyph_dataset():
    return make_glyph_dataset(seed=3, n_per_class=4, pixel_noise=0.05)


@pytest.fixture
def glimpse_spec():
    return GlimpseSpec(patch_rows=4, patch_cols=4, episode_len=4)
