"""
Synthetic camera-selection tracking environment.

People follow persistent random walks on a grid; each camera watches an
axis-aligned rectangle and returns a noisy reading of the person's cell or a
null reading. The exact per-axis DiscreteModel used by the model-based
baselines is derived from the same reading distribution the simulator samples.
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ml.errors import ConfigError, EpisodeStateError, ShapeError
from ml.inference.belief_engine import DiscreteModel

logger = logging.getLogger(__name__)

MOVES = (-1, 0, 1)
NEIGHBOR_OFFSETS = tuple((dx, dy) for dx in MOVES for dy in MOVES if (dx, dy) != (0, 0))

Cell = Tuple[int, int]


@dataclass(frozen=True)
class GridConfig:
    """Grid, walk and sensor-noise parameters"""
    width: int = 10
    height: int = 10
    n_cameras: int = 4
    episode_len: int = 12
    walk_persistence: float = 0.5
    noise_adjacent: float = 0.1
    miss_prob: float = 0.05

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.width}x{self.height}")
        if self.n_cameras < 1:
            raise ConfigError(f"need at least one camera, got {self.n_cameras}")
        if self.episode_len < 1:
            raise ConfigError(f"episode_len must be >= 1, got {self.episode_len}")
        for name in ('walk_persistence', 'noise_adjacent', 'miss_prob'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {value}")

    def axis_size(self, axis: str) -> int:
        if axis == 'x':
            return self.width
        if axis == 'y':
            return self.height
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


@dataclass(frozen=True)
class CameraSpec:
    """Camera watching the inclusive cell rectangle [x0, x1] x [y0, y1]"""
    id: int
    x0: int
    y0: int
    x1: int
    y1: int

    def covers(self, x: int, y: int) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def validate(self, config: GridConfig):
        if not (0 <= self.x0 <= self.x1 < config.width and 0 <= self.y0 <= self.y1 < config.height):
            raise ConfigError(
                f"camera {self.id} rectangle ({self.x0},{self.y0})-({self.x1},{self.y1}) "
                f"is outside the {config.width}x{config.height} grid"
            )

    def to_dict(self) -> Dict[str, int]:
        return {'id': self.id, 'x0': self.x0, 'y0': self.y0, 'x1': self.x1, 'y1': self.y1}


@dataclass(frozen=True)
class Track:
    """One person's cell positions, one per episode step"""
    positions: np.ndarray
    track_id: int = 0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.int64)
        if positions.ndim != 2 or positions.shape[1] != 2 or len(positions) < 1:
            raise ShapeError(f"track positions must have shape (steps, 2), got {positions.shape}")
        if len(positions) > 1 and np.abs(np.diff(positions, axis=0)).max() > 1:
            raise ShapeError(f"track {self.track_id} moves more than one cell per axis in a step")
        positions.flags.writeable = False
        object.__setattr__(self, 'positions', positions)

    def __len__(self) -> int:
        return int(len(self.positions))

    def to_dict(self) -> Dict[str, Any]:
        return {'track_id': self.track_id, 'positions': self.positions.tolist()}


@dataclass(frozen=True)
class EnvObservation:
    """Camera reading; both coordinates are None for a null reading"""
    camera_id: int
    reading_x: Optional[int]
    reading_y: Optional[int]

    def __post_init__(self):
        if (self.reading_x is None) != (self.reading_y is None):
            raise ShapeError("readings must be null on both axes together")

    @property
    def is_null(self) -> bool:
        return self.reading_x is None

    def axis_symbol(self, axis: str, config: GridConfig) -> int:
        """Observation index along one axis; the null reading is the extra last symbol"""
        reading = self.reading_x if axis == 'x' else self.reading_y
        return config.axis_size(axis) if reading is None else int(reading)


class RewardMode(Enum):
    DAN = "dan"
    DAN_PLUS_COVERAGE = "dan_plus_coverage"
    COVERAGE = "coverage"


COVERAGE_BONUS = 0.2


def step_reward(prediction_correct: bool, observed: bool, mode: RewardMode) -> float:
    """Per-step reward tier: 1 for a correct prediction, the coverage bonus, or 0"""
    if mode is RewardMode.COVERAGE:
        return 1.0 if observed else 0.0
    if prediction_correct:
        return 1.0
    if mode is RewardMode.DAN_PLUS_COVERAGE and observed:
        return COVERAGE_BONUS
    return 0.0


def coverage_reward(obs: EnvObservation, prediction_correct: bool, mode: RewardMode) -> float:
    return step_reward(prediction_correct, not obs.is_null, mode)


# Camera layouts

def _camera_span(lo: int, hi: int, coverage_side: float, overlap: int,
                 first: bool, last: bool, size: int) -> Tuple[int, int]:
    tile = hi - lo + 1
    side = max(1, int(round(coverage_side * tile)))
    start = lo + (tile - side) // 2
    end = start + side - 1
    if not first:
        start -= overlap
    if not last:
        end += overlap
    return max(0, start), min(size - 1, end)


def default_camera_layout(config: GridConfig, coverage: float = 0.7, overlap: int = 1) -> List[CameraSpec]:
    """Tile the grid with one rectangle per camera, shrunk to leave blind spots and overlapped at seams"""
    cols = int(math.ceil(math.sqrt(config.n_cameras)))
    rows = int(math.ceil(config.n_cameras / cols))
    side = math.sqrt(coverage)
    cameras = []
    for camera_id in range(config.n_cameras):
        row, col = divmod(camera_id, cols)
        x_lo, x_hi = col * config.width // cols, (col + 1) * config.width // cols - 1
        y_lo, y_hi = row * config.height // rows, (row + 1) * config.height // rows - 1
        x0, x1 = _camera_span(x_lo, x_hi, side, overlap, col == 0, col == cols - 1, config.width)
        y0, y1 = _camera_span(y_lo, y_hi, side, overlap, row == 0, row == rows - 1, config.height)
        cameras.append(CameraSpec(id=camera_id, x0=x0, y0=y0, x1=x1, y1=y1))
    logger.info(f"Camera layout: {config.n_cameras} cameras cover "
                f"{coverage_fraction(config, cameras):.0%} of the {config.width}x{config.height} grid")
    return cameras


def coverage_fraction(config: GridConfig, cameras: Sequence[CameraSpec]) -> float:
    covered = np.zeros((config.width, config.height), dtype=bool)
    for camera in cameras:
        covered[camera.x0:camera.x1 + 1, camera.y0:camera.y1 + 1] = True
    return float(covered.mean())


def save_camera_layout(filepath: str, config: GridConfig, cameras: Sequence[CameraSpec]):
    with open(filepath, 'w') as f:
        json.dump({
            'grid': {'w': config.width, 'h': config.height},
            'cameras': [camera.to_dict() for camera in cameras],
        }, f, indent=2)
        f.write('\n')


def load_camera_layout(filepath: str, config: Optional[GridConfig] = None) -> List[CameraSpec]:
    with open(filepath, 'r') as f:
        data = json.load(f)
    cameras = [CameraSpec(**camera) for camera in data['cameras']]
    if config is not None:
        if (data['grid']['w'], data['grid']['h']) != (config.width, config.height):
            raise ConfigError(
                f"camera layout is for a {data['grid']['w']}x{data['grid']['h']} grid, "
                f"config has {config.width}x{config.height}"
            )
        if len(cameras) != config.n_cameras:
            raise ConfigError(f"camera layout has {len(cameras)} cameras, config expects {config.n_cameras}")
        for camera in cameras:
            camera.validate(config)
    return cameras


# Person tracks

def generate_track(config: GridConfig, rng: np.random.Generator, track_id: int = 0,
                   start: Optional[Cell] = None, first_move: Optional[Cell] = None) -> Track:
    """
    Persistent random walk. Each axis independently repeats its previous unit
    move with probability walk_persistence, otherwise draws uniformly from
    {-1, 0, +1}; positions are clipped at the borders.
    """
    sizes = (config.width, config.height)
    if start is None:
        position = [int(rng.integers(sizes[0])), int(rng.integers(sizes[1]))]
    else:
        position = [int(start[0]), int(start[1])]
    previous: List[Optional[int]] = [None, None]
    positions = [tuple(position)]

    for step in range(1, config.episode_len):
        for axis in range(2):
            if step == 1 and first_move is not None:
                move = int(first_move[axis])
            elif previous[axis] is not None and rng.random() < config.walk_persistence:
                move = previous[axis]
            else:
                move = int(rng.integers(-1, 2))
            position[axis] = min(max(position[axis] + move, 0), sizes[axis] - 1)
            previous[axis] = move
        positions.append(tuple(position))

    return Track(positions=np.array(positions), track_id=track_id)


def generate_dataset(config: GridConfig, n_tracks: int, seed: int) -> Tuple[List[Track], List[Track]]:
    """Deterministic tracks (one derived seed per track), split 80/20 into train and test"""
    if n_tracks < 2:
        raise ConfigError(f"need at least 2 tracks for a train/test split, got {n_tracks}")
    children = np.random.SeedSequence(seed).spawn(n_tracks)
    tracks = [generate_track(config, np.random.default_rng(child), track_id=i)
              for i, child in enumerate(children)]
    n_train = min(max(1, (4 * n_tracks) // 5), n_tracks - 1)
    logger.info(f"Generated {n_tracks} tracks of length {config.episode_len}: "
                f"{n_train} train / {n_tracks - n_train} test")
    return tracks[:n_train], tracks[n_train:]


def save_tracks(filepath: str, tracks: Sequence[Track]):
    with open(filepath, 'w') as f:
        for track in tracks:
            f.write(json.dumps(track.to_dict()) + '\n')


def load_tracks(filepath: str) -> List[Track]:
    tracks = []
    with open(filepath, 'r') as f:
        for line in f:
            if line.strip():
                record = json.loads(line)
                tracks.append(Track(positions=np.array(record['positions']), track_id=record['track_id']))
    return tracks


# Observation model

def reading_distribution(config: GridConfig, camera: CameraSpec, x: int, y: int) -> List[Tuple[Optional[Cell], float]]:
    """Exact distribution of the reading a camera returns for a person at (x, y)"""
    if not camera.covers(x, y):
        return [(None, 1.0)]
    neighbors = [(x + dx, y + dy) for dx, dy in NEIGHBOR_OFFSETS if camera.covers(x + dx, y + dy)]
    seen = 1.0 - config.miss_prob
    noise = config.noise_adjacent if neighbors else 0.0
    outcomes = [(None, config.miss_prob), ((x, y), seen * (1.0 - noise))]
    outcomes.extend((cell, seen * noise / len(neighbors)) for cell in neighbors)
    return [(cell, p) for cell, p in outcomes if p > 0]


def sample_reading(config: GridConfig, camera: CameraSpec, x: int, y: int,
                   rng: np.random.Generator) -> EnvObservation:
    outcomes = reading_distribution(config, camera, x, y)
    probs = np.array([p for _, p in outcomes])
    cell = outcomes[int(rng.choice(len(outcomes), p=probs / probs.sum()))][0]
    if cell is None:
        return EnvObservation(camera_id=camera.id, reading_x=None, reading_y=None)
    return EnvObservation(camera_id=camera.id, reading_x=int(cell[0]), reading_y=int(cell[1]))


# Per-axis models

def axis_transition(config: GridConfig, axis: str) -> np.ndarray:
    """
    Exact kernel of one axis of the walk. States are (previous move, cell)
    pairs laid out as move_index * n + cell, since persistence makes the cell
    alone non-Markov.
    """
    n = config.axis_size(axis)
    persistence = config.walk_persistence
    transition = np.zeros((len(MOVES) * n, len(MOVES) * n))
    for move_index, move in enumerate(MOVES):
        for cell in range(n):
            source = move_index * n + cell
            for next_index, next_move in enumerate(MOVES):
                p = (1.0 - persistence) / len(MOVES) + (persistence if next_move == move else 0.0)
                target = next_index * n + min(max(cell + next_move, 0), n - 1)
                transition[target, source] += p
    return transition


def axis_prior(config: GridConfig, axis: str) -> np.ndarray:
    """
    Belief at the first step: uniform cell, uniform previous move. A uniform
    previous move makes the first move uniform too, matching generate_track.
    """
    n_states = len(MOVES) * config.axis_size(axis)
    return np.full(n_states, 1.0 / n_states)


def cell_marginal(probs: np.ndarray, n_cells: int) -> np.ndarray:
    """Sum an axis belief over the previous-move component"""
    return np.asarray(probs, dtype=np.float64).reshape(len(MOVES), n_cells).sum(axis=0)


def axis_occupancy(config: GridConfig, axis: str) -> np.ndarray:
    """Cell distribution of one axis averaged over the steps of an episode"""
    n = config.axis_size(axis)
    transition = axis_transition(config, axis)
    state = axis_prior(config, axis)
    total = np.zeros(n)
    for _ in range(config.episode_len):
        total += cell_marginal(state, n)
        state = transition @ state
    return total / config.episode_len


def factored_model(config: GridConfig, cameras: Sequence[CameraSpec], axis: str) -> DiscreteModel:
    """
    Per-axis model over (previous move, cell) states with observations
    {cells} + {null}.

    The transition is axis_transition, exact for any persistence. The
    observation matrix marginalizes the joint reading distribution over the
    other axis, weighted by that axis's episode occupancy, and is shared by
    every previous move.
    """
    n = config.axis_size(axis)
    other_axis = 'y' if axis == 'x' else 'x'
    weights = axis_occupancy(config, other_axis)
    index = 0 if axis == 'x' else 1

    per_cell = np.zeros((len(cameras), n + 1, n))
    for camera_index, camera in enumerate(cameras):
        for cell in range(n):
            for v, weight in enumerate(weights):
                x, y = (cell, v) if axis == 'x' else (v, cell)
                for reading, p in reading_distribution(config, camera, x, y):
                    symbol = n if reading is None else reading[index]
                    per_cell[camera_index, symbol, cell] += p * weight

    return DiscreteModel(transition=axis_transition(config, axis),
                         observations=np.tile(per_cell, (1, 1, len(MOVES))))


# Episode steppers

class MultiPersonEpisode:
    """Several independent people observed through one shared camera choice per step"""

    def __init__(self, config: GridConfig, cameras: Sequence[CameraSpec], tracks: Sequence[Track],
                 rng: np.random.Generator):
        if len(tracks) < 1:
            raise ShapeError("an episode needs at least one track")
        lengths = {len(track) for track in tracks}
        if len(lengths) != 1:
            raise ShapeError(f"tracks in one episode must have equal lengths, got {sorted(lengths)}")
        self.config = config
        self.cameras = list(cameras)
        self.tracks = list(tracks)
        self.rng = rng
        self.t = 0

    @property
    def length(self) -> int:
        return len(self.tracks[0])

    @property
    def done(self) -> bool:
        return self.t >= self.length

    def step(self, camera: int) -> Tuple[List[EnvObservation], List[Cell]]:
        if self.done:
            raise EpisodeStateError(f"episode finished after {self.length} steps")
        if not 0 <= camera < len(self.cameras):
            raise ShapeError(f"camera {camera} out of range [0, {len(self.cameras)})")
        observations, positions = [], []
        for track in self.tracks:
            x, y = (int(v) for v in track.positions[self.t])
            observations.append(sample_reading(self.config, self.cameras[camera], x, y, self.rng))
            positions.append((x, y))
        self.t += 1
        return observations, positions


class TrackingEpisode(MultiPersonEpisode):
    """Single-person episode"""

    def __init__(self, config: GridConfig, cameras: Sequence[CameraSpec], track: Track,
                 rng: np.random.Generator):
        super().__init__(config, cameras, [track], rng)

    def step(self, camera: int) -> Tuple[EnvObservation, Cell]:
        observations, positions = super().step(camera)
        return observations[0], positions[0]
