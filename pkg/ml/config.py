"""
Run configuration: sectioned key=value files validated by pydantic.

    [run]      seed, out, n_tracks, multi_person, n_jobs
    [grid]     GridConfig fields
    [cameras]  coverage, overlap, layout
    [glyphs]   n_per_class, pixel_noise, test_fraction, idx_images, idx_labels,
               idx_test_images, idx_test_labels
    [glimpse]  GlimpseSpec fields
    [network]  hidden_sizes (comma separated), recurrent_size, dropout, l2_scale
    [train]    TrainConfig fields; unset keys keep the task's defaults

Unknown sections or keys and out-of-range values raise ConfigError naming the
key. The full schema is documented in docs/CONFIG.md.
"""

import configparser
import logging
import os
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ml.data.attention_env import GlimpseSpec, RewardSchedule
from ml.data.tracking_env import GridConfig, RewardMode
from ml.errors import ConfigError
from ml.training.train_models import EpsilonSchedule, TrainConfig

logger = logging.getLogger(__name__)

Task = Literal['tracking', 'attention']


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class RunSection(_Section):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    out: str = 'runs/default'
    n_tracks: int = Field(500, ge=2)
    multi_person: int = Field(1, ge=1)
    n_jobs: int = 1


class GridSection(_Section):
    width: int = Field(10, ge=2)
    height: int = Field(10, ge=2)
    n_cameras: int = Field(4, ge=1)
    episode_len: int = Field(12, ge=1)
    walk_persistence: float = Field(0.5, ge=0.0, le=1.0)
    noise_adjacent: float = Field(0.1, ge=0.0, le=1.0)
    miss_prob: float = Field(0.05, ge=0.0, le=1.0)


class CamerasSection(_Section):
    coverage: float = Field(0.7, gt=0.0, le=1.0)
    overlap: int = Field(1, ge=0)
    layout: Optional[str] = None


class GlyphsSection(_Section):
    n_per_class: int = Field(50, ge=2)
    pixel_noise: float = Field(0.05, ge=0.0, le=1.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    idx_test_images: Optional[str] = None
    idx_test_labels: Optional[str] = None

    @model_validator(mode='after')
    def _paired_paths(self):
        for images, labels in (('idx_images', 'idx_labels'), ('idx_test_images', 'idx_test_labels')):
            if (getattr(self, images) is None) != (getattr(self, labels) is None):
                raise ValueError(f"{images} and {labels} must be set together")
        if self.idx_test_images is not None and self.idx_images is None:
            raise ValueError("idx_test_images needs idx_images for the train split")
        return self


class GlimpseSection(_Section):
    patch_rows: int = Field(4, ge=1)
    patch_cols: int = Field(4, ge=1)
    episode_len: int = Field(12, ge=1)


class NetworkSection(_Section):
    hidden_sizes: List[int] = Field(default_factory=lambda: [32, 32])
    recurrent_size: int = Field(64, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)
    l2_scale: float = Field(0.01, ge=0.0)

    @field_validator('hidden_sizes', mode='before')
    @classmethod
    def _split_sizes(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [part.strip() for part in value.split(',') if part.strip()]
        return value

    @field_validator('hidden_sizes')
    @classmethod
    def _positive_sizes(cls, value: List[int]) -> List[int]:
        if any(size < 1 for size in value):
            raise ValueError(f"layer sizes must be positive, got {value}")
        return value


class TrainSection(_Section):
    episodes: Optional[int] = Field(None, ge=1)
    warmup_steps: Optional[int] = Field(None, ge=0)
    epsilon_initial: Optional[float] = Field(None, ge=0.0, le=1.0)
    epsilon_final: Optional[float] = Field(None, ge=0.0, le=1.0)
    epsilon_switch_episode: Optional[int] = Field(None, ge=0)
    lr: Optional[float] = Field(None, gt=0.0)
    batch_episodes: Optional[int] = Field(None, ge=1)
    trace_len: Optional[int] = Field(None, ge=1)
    burn_in: Optional[int] = Field(None, ge=0)
    update_every: Optional[int] = Field(None, ge=1)
    target_sync_every: Optional[int] = Field(None, ge=1)
    reward_mode: Optional[Literal['dan', 'dan_plus_coverage', 'coverage']] = None
    reward_schedule: Optional[Literal['continuous', 'terminal']] = None
    m_terminal_only: Optional[bool] = None
    recompute_rewards: Optional[bool] = None
    eval_every: Optional[int] = Field(None, ge=1)
    eval_items: Optional[int] = Field(None, ge=1)
    gamma: Optional[float] = Field(None, ge=0.0, le=1.0)
    buffer_capacity: Optional[int] = Field(None, ge=1)
    max_grad_norm: Optional[float] = Field(None, gt=0.0)
    policy: Optional[Literal['learned', 'random']] = None


class RunConfig(_Section):
    run: RunSection = Field(default_factory=RunSection)
    grid: GridSection = Field(default_factory=GridSection)
    cameras: CamerasSection = Field(default_factory=CamerasSection)
    glyphs: GlyphsSection = Field(default_factory=GlyphsSection)
    glimpse: GlimpseSection = Field(default_factory=GlimpseSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    train: TrainSection = Field(default_factory=TrainSection)

    def grid_config(self) -> GridConfig:
        return GridConfig(**self.grid.model_dump())

    def glimpse_spec(self) -> GlimpseSpec:
        return GlimpseSpec(**self.glimpse.model_dump())

    def train_config(self, task: Task) -> TrainConfig:
        """Task defaults overlaid with the [network] section and every key set in [train]"""
        base = TrainConfig.attention_defaults() if task == 'attention' else TrainConfig.tracking_defaults()
        changes: Dict[str, Any] = {
            'hidden_sizes': tuple(self.network.hidden_sizes),
            'recurrent_size': self.network.recurrent_size,
            'dropout': self.network.dropout,
            'l2_scale': self.network.l2_scale,
        }
        values = self.train.model_dump(exclude_none=True)
        schedule = base.epsilon
        epsilon = EpsilonSchedule(
            initial=values.pop('epsilon_initial', schedule.initial),
            final=values.pop('epsilon_final', schedule.final),
            switch_episode=values.pop('epsilon_switch_episode', schedule.switch_episode),
        )
        changes['epsilon'] = epsilon
        if 'reward_mode' in values:
            values['reward_mode'] = RewardMode(values['reward_mode'])
        if 'reward_schedule' in values:
            values['reward_schedule'] = RewardSchedule(values['reward_schedule'])
        changes.update(values)
        config = base.replace(**changes)
        episode_len = self.glimpse.episode_len if task == 'attention' else self.grid.episode_len
        config.validate(episode_len)
        return config


SECTIONS = tuple(RunConfig.model_fields)


def _format_errors(error: ValidationError) -> str:
    return '; '.join(f"{'.'.join(str(part) for part in item['loc'])}: {item['msg']}" for item in error.errors())


def load_run_config(filepath: Optional[str] = None,
                    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
                    base: Optional[Dict[str, Dict[str, Any]]] = None) -> RunConfig:
    """
    Parse a config file, or start from `base` (a resolved config such as a
    manifest's) when no file is given, then apply per-section overrides,
    e.g. {'run': {'seed': 3}}
    """
    data: Dict[str, Dict[str, Any]] = {section: dict(values) for section, values in (base or {}).items()}
    if filepath:
        if not os.path.exists(filepath):
            raise ConfigError(f"config file {filepath} does not exist")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(filepath)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse {filepath}: {e}") from e
        data = {section: dict(parser.items(section)) for section in parser.sections()}

    for section, values in (overrides or {}).items():
        data.setdefault(section, {}).update({key: value for key, value in values.items() if value is not None})

    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}; expected {list(SECTIONS)}")
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_format_errors(e)}") from e
    logger.debug(f"Resolved configuration: {config.model_dump()}")
    return config
