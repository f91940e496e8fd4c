"""
Training pipeline for anticipatory agents.

Runs warmup, epsilon-greedy episodes with replay updates and target syncs,
periodic held-out evaluation, and the tracking baselines (random camera
policy, coverage-trained Q, exact-model oracle). Learning curves are pandas
DataFrames with the columns in CURVE_COLUMNS.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ml.data.attention_env import (AttentionEpisode, GlimpseSpec, GlyphDataset, RewardSchedule,
                                   reward_schedule)
from ml.data.tracking_env import (CameraSpec, EnvObservation, GridConfig, MultiPersonEpisode, RewardMode,
                                  Track, TrackingEpisode, axis_prior, cell_marginal, factored_model)
from ml.errors import ConfigError
from ml.inference.belief_engine import DiscreteModel, action_scores, bayes_update, correct_belief
from ml.models.dan_agent import (AgentConfig, DanAgent, EpisodeBuilder, EpisodeTrace, HistoryEncoder,
                                 ReplayBuffer, one_hot)
from ml.training.events import EventLog
from ml.training.seeding import SeedStreams

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['episode', 'mean_eval_reward', 'mean_eval_accuracy', 'td_loss', 'ce_loss']
AXES = ('x', 'y')
POLICIES = ('learned', 'random')
BASELINES = ('random_policy', 'coverage', 'exact_oracle')


@dataclass(frozen=True)
class EpsilonSchedule:
    """`initial` before episode `switch_episode`, `final` from then on"""
    initial: float = 0.1
    final: float = 0.1
    switch_episode: int = 0

    def value(self, episode: int) -> float:
        return self.initial if episode < self.switch_episode else self.final


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 3000
    warmup_steps: int = 3000
    epsilon: EpsilonSchedule = EpsilonSchedule()
    lr: float = 0.001
    batch_episodes: int = 4
    trace_len: int = 8
    burn_in: int = 4
    update_every: int = 4
    target_sync_every: int = 500
    reward_mode: RewardMode = RewardMode.DAN
    reward_schedule: RewardSchedule = RewardSchedule.CONTINUOUS
    m_terminal_only: Optional[bool] = None
    recompute_rewards: bool = False
    eval_every: int = 100
    eval_items: int = 100
    gamma: float = 0.99
    buffer_capacity: int = 1000
    hidden_sizes: Tuple[int, ...] = (32, 32)
    recurrent_size: int = 64
    dropout: float = 0.0
    l2_scale: float = 0.01
    max_grad_norm: float = 5.0
    policy: str = 'learned'

    @classmethod
    def tracking_defaults(cls, **overrides) -> 'TrainConfig':
        return dataclasses.replace(cls(), **overrides)

    @classmethod
    def attention_defaults(cls, **overrides) -> 'TrainConfig':
        base = cls(
            episodes=3000,
            warmup_steps=0,
            epsilon=EpsilonSchedule(initial=1.0, final=0.05, switch_episode=1500),
            lr=0.0005,
            update_every=4,
        )
        return dataclasses.replace(base, **overrides)

    def replace(self, **changes) -> 'TrainConfig':
        return dataclasses.replace(self, **changes)

    @property
    def train_m_terminal_only(self) -> bool:
        if self.m_terminal_only is not None:
            return self.m_terminal_only
        return self.reward_schedule is RewardSchedule.TERMINAL

    def validate(self, episode_len: int):
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if self.trace_len > episode_len:
            raise ConfigError(f"trace_len {self.trace_len} exceeds the episode length {episode_len}")
        if not 0 <= self.burn_in < self.trace_len:
            raise ConfigError(f"burn_in must lie in [0, trace_len), got {self.burn_in} with trace_len {self.trace_len}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        for name in ('batch_episodes', 'update_every', 'target_sync_every', 'eval_every', 'eval_items'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.buffer_capacity < self.batch_episodes:
            raise ConfigError(f"buffer_capacity {self.buffer_capacity} is smaller than batch_episodes {self.batch_episodes}")

    def agent_config(self, n_actions: int, n_classes: int, input_size: int) -> AgentConfig:
        return AgentConfig(
            n_actions=n_actions, n_classes=n_classes, input_size=input_size,
            hidden_sizes=tuple(self.hidden_sizes), recurrent_size=self.recurrent_size,
            dropout=self.dropout, l2_scale=self.l2_scale, lr=self.lr, gamma=self.gamma,
            epsilon=self.epsilon.value(0), max_grad_norm=self.max_grad_norm, burn_in=self.burn_in,
        )


def make_json_serializable(obj: Any) -> Any:
    """Convert numpy types to JSON serializable types"""
    if isinstance(obj, dict):
        return {str(key): make_json_serializable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [make_json_serializable(item) for item in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# Replay and update cadence

class UpdateScheduler:
    """Owns the replay buffers of a set of agents and drives warmup, updates and target syncs"""

    def __init__(self, agents: Dict[str, DanAgent], config: TrainConfig, streams: SeedStreams, events: EventLog):
        self.agents = agents
        self.config = config
        self.events = events
        self.buffers = {name: ReplayBuffer(config.buffer_capacity) for name in agents}
        self.replay_rng = streams.generator('replay')
        self.dropout_rng = streams.generator('dropout')
        self.total_steps = 0
        self.warm = config.warmup_steps == 0
        self._td: List[float] = []
        self._ce: List[float] = []
        events.emit(0, 'warmup_start', {'warmup_steps': config.warmup_steps})
        if self.warm:
            events.emit(0, 'warmup_end', {})

    def after_step(self):
        self.total_steps += 1
        if not self.warm and self.total_steps >= self.config.warmup_steps:
            self.warm = True
            self.events.emit(self.total_steps, 'warmup_end', {})
            logger.info(f"Warmup finished after {self.total_steps} steps")
        if self.warm and self.total_steps % self.config.update_every == 0:
            self._update()
        if self.total_steps % self.config.target_sync_every == 0:
            for agent in self.agents.values():
                agent.sync_targets()
            self.events.emit(self.total_steps, 'target_sync', {})

    def _update(self):
        config = self.config
        losses: Dict[str, Dict[str, Optional[float]]] = {}
        for name, agent in self.agents.items():
            buffer = self.buffers[name]
            td = ce = None
            slices = buffer.sample_slices(config.batch_episodes, config.trace_len, self.replay_rng)
            if slices is None:
                continue
            if config.policy == 'learned':
                q_slices = slices
                if config.recompute_rewards:
                    q_slices = agent.recompute_rewards(slices, config.reward_mode, config.reward_schedule)
                td = agent.q_update(q_slices, self.dropout_rng)
            if config.reward_mode is not RewardMode.COVERAGE:
                terminal_only = config.train_m_terminal_only
                if terminal_only:
                    slices = buffer.sample_slices(config.batch_episodes, config.trace_len, self.replay_rng,
                                                  align_end=True)
                ce = agent.m_update(slices, self.dropout_rng, terminal_only=terminal_only)
            if td is not None:
                self._td.append(td)
            if ce is not None:
                self._ce.append(ce)
            losses[name] = {'td_loss': td, 'ce_loss': ce}
        if losses:
            self.events.emit(self.total_steps, 'update', losses)
            logger.debug(f"Step {self.total_steps} updates: {losses}")

    def end_episode(self, traces: Dict[str, EpisodeTrace]):
        for name, trace in traces.items():
            self.buffers[name].add(trace)

    def drain_losses(self) -> Tuple[float, float]:
        """Mean TD and cross-entropy losses since the previous call (NaN when none)"""
        td = float(np.mean(self._td)) if self._td else float('nan')
        ce = float(np.mean(self._ce)) if self._ce else float('nan')
        self._td, self._ce = [], []
        return td, ce


def _curve_row(episode: int, reward: float, accuracy: float, td: float, ce: float) -> Dict[str, float]:
    return {'episode': episode, 'mean_eval_reward': reward, 'mean_eval_accuracy': accuracy,
            'td_loss': td, 'ce_loss': ce}


def save_learning_curve(curve: pd.DataFrame, filepath: str):
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    curve[CURVE_COLUMNS].to_csv(filepath, index=False, float_format='%.6f')


def load_learning_curve(filepath: str) -> pd.DataFrame:
    curve = pd.read_csv(filepath)
    missing = [column for column in CURVE_COLUMNS if column not in curve.columns]
    if missing:
        raise ValueError(f"{filepath} is missing curve columns {missing}")
    return curve


# Tracking: camera policies used for evaluation

class CameraPolicy:
    """Chooses one camera per step for a group of people and predicts their cells"""
    scores_coverage = False

    def reset(self, n_persons: int):
        raise NotImplementedError

    def choose(self) -> int:
        raise NotImplementedError

    def observe(self, camera: int, observations: Sequence[EnvObservation]):
        raise NotImplementedError

    def predictions(self, observations: Sequence[EnvObservation]) -> List[Optional[Tuple[int, int]]]:
        raise NotImplementedError


class LearnedCameraPolicy(CameraPolicy):
    """Camera maximizing the mean Q-value over the x/y agents and every person; M networks predict"""

    def __init__(self, agents: Dict[str, DanAgent], grid: GridConfig, n_cameras: int,
                 rng: Optional[np.random.Generator] = None, random_cameras: bool = False):
        self.agents = agents
        self.grid = grid
        self.n_cameras = n_cameras
        self.rng = rng
        self.random_cameras = random_cameras
        self.encoders = {axis: HistoryEncoder(n_cameras, grid.axis_size(axis) + 1) for axis in AXES}
        self.histories: List[Dict[str, List[np.ndarray]]] = []

    def reset(self, n_persons: int):
        self.histories = [{axis: [self.encoders[axis].start()] for axis in AXES} for _ in range(n_persons)]

    def q_matrix(self) -> np.ndarray:
        """Q-values (agents x persons, cameras)"""
        return np.array([self.agents[axis].q_values(np.stack(person[axis]))
                         for person in self.histories for axis in AXES])

    def choose(self) -> int:
        if self.random_cameras:
            return int(self.rng.integers(self.n_cameras))
        return int(np.argmax(self.q_matrix().mean(axis=0)))

    def observe(self, camera: int, observations: Sequence[EnvObservation]):
        for person, obs in zip(self.histories, observations):
            for axis in AXES:
                features = one_hot(obs.axis_symbol(axis, self.grid), self.grid.axis_size(axis) + 1)
                person[axis].append(self.encoders[axis].encode(camera, features))

    def predictions(self, observations: Sequence[EnvObservation]) -> List[Optional[Tuple[int, int]]]:
        return [(self.agents['x'].predict(np.stack(person['x'])), self.agents['y'].predict(np.stack(person['y'])))
                for person in self.histories]


class ObservationPredictor(LearnedCameraPolicy):
    """Coverage baseline: the learned Q picks cameras and the reading itself is the prediction"""
    scores_coverage = True

    def predictions(self, observations: Sequence[EnvObservation]) -> List[Optional[Tuple[int, int]]]:
        return [None if obs.is_null else (obs.reading_x, obs.reading_y) for obs in observations]


class OraclePolicy(CameraPolicy):
    """Exact per-axis Bayes filters; greedy camera by summed expected information gain"""

    def __init__(self, models: Dict[str, DiscreteModel], grid: GridConfig):
        self.models = models
        self.grid = grid
        self.beliefs: List[Dict[str, np.ndarray]] = []
        self.t = 0

    def reset(self, n_persons: int):
        self.beliefs = [{axis: axis_prior(self.grid, axis) for axis in AXES} for _ in range(n_persons)]
        self.t = 0

    def choose(self) -> int:
        scores = sum(action_scores(person[axis], self.models[axis]) for person in self.beliefs for axis in AXES)
        return int(np.argmax(scores))

    def observe(self, camera: int, observations: Sequence[EnvObservation]):
        # the prior already describes the first step, so it is corrected without a transition
        update = correct_belief if self.t == 0 else bayes_update
        for person, obs in zip(self.beliefs, observations):
            for axis in AXES:
                symbol = obs.axis_symbol(axis, self.grid)
                person[axis] = update(person[axis], camera, symbol, self.models[axis]).probs
        self.t += 1

    def cell_beliefs(self, person: int) -> Dict[str, np.ndarray]:
        return {axis: cell_marginal(self.beliefs[person][axis], self.grid.axis_size(axis)) for axis in AXES}

    def predictions(self, observations: Sequence[EnvObservation]) -> List[Optional[Tuple[int, int]]]:
        return [tuple(int(np.argmax(cells)) for cells in self.cell_beliefs(person).values())
                for person in range(len(self.beliefs))]


@dataclass
class TrackingScores:
    """Mean per-episode scores over evaluation episodes"""
    mean_reward: float
    mean_accuracy: float
    prediction_reward: float
    coverage_rate: float
    per_person_rewards: List[float]
    episodes: int

    def to_dict(self) -> Dict[str, Any]:
        return make_json_serializable(dataclasses.asdict(self))


def evaluate_policy(policy: CameraPolicy, grid: GridConfig, cameras: Sequence[CameraSpec],
                    tracks: Sequence[Track], multi_person: int = 1, seed: int = 0) -> TrackingScores:
    """
    Run consecutive groups of `multi_person` tracks. A step scores 1 for a person
    when both coordinates are predicted; the episode reward is the per-step sum
    averaged over persons.
    """
    if multi_person < 1 or len(tracks) < multi_person:
        raise ConfigError(f"need at least {multi_person} evaluation tracks, got {len(tracks)}")
    rng = np.random.default_rng(seed)
    groups = [tracks[i:i + multi_person] for i in range(0, len(tracks) - multi_person + 1, multi_person)]
    correct = np.zeros((len(groups), multi_person))
    covered = np.zeros((len(groups), multi_person))
    steps = 0

    for g, group in enumerate(groups):
        env = MultiPersonEpisode(grid, cameras, group, rng)
        policy.reset(len(group))
        steps = env.length
        while not env.done:
            camera = policy.choose()
            observations, positions = env.step(camera)
            policy.observe(camera, observations)
            for p, (prediction, position) in enumerate(zip(policy.predictions(observations), positions)):
                correct[g, p] += prediction is not None and tuple(prediction) == tuple(position)
                covered[g, p] += not observations[p].is_null

    scored = covered if policy.scores_coverage else correct
    per_person = scored.mean(axis=0)
    return TrackingScores(
        mean_reward=float(per_person.mean()),
        mean_accuracy=float(correct.mean() / steps),
        prediction_reward=float(correct.mean(axis=0).mean()),
        coverage_rate=float(covered.mean() / steps),
        per_person_rewards=[float(v) for v in per_person],
        episodes=len(groups),
    )


def evaluate_tracking(agents: Dict[str, DanAgent], grid: GridConfig, cameras: Sequence[CameraSpec],
                      tracks: Sequence[Track], multi_person: int = 1, seed: int = 0) -> TrackingScores:
    return evaluate_policy(LearnedCameraPolicy(agents, grid, len(cameras)), grid, cameras, tracks,
                           multi_person=multi_person, seed=seed)


def _evaluation_policy(agents: Dict[str, DanAgent], grid: GridConfig, cameras: Sequence[CameraSpec],
                       config: TrainConfig, seed: int) -> CameraPolicy:
    if config.reward_mode is RewardMode.COVERAGE:
        return ObservationPredictor(agents, grid, len(cameras))
    if config.policy == 'random':
        return LearnedCameraPolicy(agents, grid, len(cameras), rng=np.random.default_rng(seed), random_cameras=True)
    return LearnedCameraPolicy(agents, grid, len(cameras))


# Tracking training

@dataclass
class TrackingRun:
    agents: Dict[str, DanAgent]
    curve: pd.DataFrame
    total_steps: int
    final_scores: Optional[TrackingScores] = None


def _choose_camera(agents: Dict[str, DanAgent], builders: Dict[str, EpisodeBuilder], n_cameras: int,
                   epsilon: float, rng: np.random.Generator, random_policy: bool) -> int:
    if random_policy or rng.random() < epsilon:
        return int(rng.integers(n_cameras))
    q = np.mean([agents[axis].q_values(builders[axis].history) for axis in AXES], axis=0)
    return int(np.argmax(q))


def _tracking_episode(grid: GridConfig, cameras: Sequence[CameraSpec], track: Track,
                      agents: Dict[str, DanAgent], encoders: Dict[str, HistoryEncoder], config: TrainConfig,
                      epsilon: float, env_rng: np.random.Generator, policy_rng: np.random.Generator,
                      scheduler: UpdateScheduler) -> Dict[str, EpisodeTrace]:
    env = TrackingEpisode(grid, cameras, track, env_rng)
    builders = {axis: EpisodeBuilder(encoders[axis]) for axis in AXES}
    for t in range(env.length):
        camera = _choose_camera(agents, builders, len(cameras), epsilon, policy_rng, config.policy == 'random')
        obs, position = env.step(camera)
        for index, axis in enumerate(AXES):
            features = one_hot(obs.axis_symbol(axis, grid), grid.axis_size(axis) + 1)
            history = builders[axis].observe(camera, features)
            reward = agents[axis].prediction_reward(
                history, position[index], config.reward_mode, observed=not obs.is_null,
                schedule=config.reward_schedule, terminal=t == env.length - 1,
            )
            builders[axis].record(reward, position[index], observed=not obs.is_null)
        scheduler.after_step()
    return {axis: builders[axis].finish() for axis in AXES}


def train_tracking(grid: GridConfig, cameras: Sequence[CameraSpec], train_tracks: Sequence[Track],
                   test_tracks: Sequence[Track], config: TrainConfig, seed: int,
                   events: Optional[EventLog] = None, checkpoint_dir: Optional[str] = None) -> TrackingRun:
    """Train the x and y agents on their own axis labels; they share the camera choice"""
    config.validate(grid.episode_len)
    if not train_tracks or not test_tracks:
        raise ConfigError("tracking training needs non-empty train and test tracks")
    events = events if events is not None else EventLog()
    streams = SeedStreams(seed)
    init_rng = streams.generator('init')
    agents = {
        axis: DanAgent(config.agent_config(len(cameras), grid.axis_size(axis),
                                           len(cameras) + grid.axis_size(axis) + 1), init_rng)
        for axis in AXES
    }
    encoders = {axis: HistoryEncoder(len(cameras), grid.axis_size(axis) + 1) for axis in AXES}
    scheduler = UpdateScheduler(agents, config, streams, events)
    env_rng, policy_rng, track_rng = (streams.generator(name) for name in ('env', 'policy', 'tracks'))
    eval_tracks = list(test_tracks[:config.eval_items])

    logger.info(f"Training tracking agents for {config.episodes} episodes "
                f"(reward {config.reward_mode.value}, schedule {config.reward_schedule.value}, policy {config.policy})")
    rows, epsilon, scores = [], None, None
    for episode in range(config.episodes):
        value = config.epsilon.value(episode)
        if value != epsilon:
            epsilon = value
            for agent in agents.values():
                agent.epsilon = epsilon
            events.emit(scheduler.total_steps, 'epsilon', {'episode': episode, 'epsilon': epsilon})

        track = train_tracks[int(track_rng.integers(len(train_tracks)))]
        traces = _tracking_episode(grid, cameras, track, agents, encoders, config, epsilon,
                                   env_rng, policy_rng, scheduler)
        scheduler.end_episode(traces)

        if (episode + 1) % config.eval_every == 0 or episode + 1 == config.episodes:
            policy = _evaluation_policy(agents, grid, cameras, config, streams.child_seed('eval_policy'))
            scores = evaluate_policy(policy, grid, cameras, eval_tracks, seed=streams.child_seed('eval'))
            td, ce = scheduler.drain_losses()
            rows.append(_curve_row(episode + 1, scores.mean_reward, scores.mean_accuracy, td, ce))
            events.emit(scheduler.total_steps, 'evaluation', {'episode': episode + 1, **scores.to_dict()})
            logger.info(f"Episode {episode + 1}, Eval reward: {scores.mean_reward:.4f}, "
                        f"Accuracy: {scores.mean_accuracy:.4f}, TD loss: {td:.4f}, CE loss: {ce:.4f}")

    if checkpoint_dir:
        for axis, agent in agents.items():
            agent.save(checkpoint_dir, prefix=axis, step_counter=scheduler.total_steps)
        events.emit(scheduler.total_steps, 'checkpoint', {'directory': os.path.basename(checkpoint_dir)})

    return TrackingRun(agents=agents, curve=pd.DataFrame(rows, columns=CURVE_COLUMNS),
                       total_steps=scheduler.total_steps, final_scores=scores)


@dataclass
class BaselineResult:
    kind: str
    scores: TrackingScores
    curve: Optional[pd.DataFrame] = None


def run_baseline(kind: str, grid: GridConfig, cameras: Sequence[CameraSpec], train_tracks: Sequence[Track],
                 test_tracks: Sequence[Track], config: TrainConfig, seed: int,
                 events: Optional[EventLog] = None) -> BaselineResult:
    """random_policy: only M learns; coverage: Q learns the coverage reward; exact_oracle: no learning"""
    if kind == 'random_policy':
        run = train_tracking(grid, cameras, train_tracks, test_tracks, config.replace(policy='random'), seed, events)
        return BaselineResult(kind, run.final_scores, run.curve)
    if kind == 'coverage':
        run = train_tracking(grid, cameras, train_tracks, test_tracks,
                             config.replace(reward_mode=RewardMode.COVERAGE), seed, events)
        return BaselineResult(kind, run.final_scores, run.curve)
    if kind == 'exact_oracle':
        models = {axis: factored_model(grid, cameras, axis) for axis in AXES}
        scores = evaluate_policy(OraclePolicy(models, grid), grid, cameras, list(test_tracks[:config.eval_items]),
                                 seed=SeedStreams(seed).child_seed('eval'))
        logger.info(f"Exact oracle: mean reward {scores.mean_reward:.4f}")
        return BaselineResult(kind, scores)
    raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


# Attention

@dataclass
class AttentionScores:
    continuous_return: float
    terminal_return: float
    accuracy: float
    step_accuracy: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return make_json_serializable(dataclasses.asdict(self))


@dataclass
class AttentionRun:
    agent: DanAgent
    curve: pd.DataFrame
    total_steps: int
    final_scores: Optional[AttentionScores] = None


def evaluate_attention(agent: DanAgent, spec: GlimpseSpec, images: np.ndarray, labels: np.ndarray,
                       random_patches: bool = False, seed: int = 0) -> AttentionScores:
    """Greedy glimpses; returns both schedules' mean returns and final-step accuracy"""
    rng = np.random.default_rng(seed)
    n_pixels = int(np.prod(images.shape[1:]))
    encoder = HistoryEncoder(spec.n_patches, n_pixels)
    hits = np.zeros(spec.episode_len)
    continuous, terminal = [], []
    for image, label in zip(images, labels):
        env = AttentionEpisode(spec, image, int(label))
        history = [encoder.start()]
        cont = term = 0.0
        for t in range(spec.episode_len):
            if random_patches:
                patch = int(rng.integers(spec.n_patches))
            else:
                patch = agent.select_action(np.stack(history), rng, epsilon=0.0)
            composite, _ = env.step(patch)
            history.append(encoder.encode(patch, composite))
            correct = agent.predict(np.stack(history)) == int(label)
            hits[t] += correct
            cont += reward_schedule(RewardSchedule.CONTINUOUS, t, spec.episode_len, correct)
            term += reward_schedule(RewardSchedule.TERMINAL, t, spec.episode_len, correct)
        continuous.append(cont)
        terminal.append(term)
    step_accuracy = hits / max(1, len(labels))
    return AttentionScores(
        continuous_return=float(np.mean(continuous)),
        terminal_return=float(np.mean(terminal)),
        accuracy=float(step_accuracy[-1]),
        step_accuracy=[float(v) for v in step_accuracy],
    )


def train_attention(spec: GlimpseSpec, dataset: GlyphDataset, config: TrainConfig, seed: int,
                    events: Optional[EventLog] = None, checkpoint_dir: Optional[str] = None) -> AttentionRun:
    config.validate(spec.episode_len)
    images, labels = dataset.split('train')
    test_images, test_labels = dataset.split('test')
    if len(images) == 0 or len(test_images) == 0:
        raise ConfigError("attention training needs non-empty train and test splits")
    spec.validate(images.shape[1:])
    events = events if events is not None else EventLog()
    streams = SeedStreams(seed)
    n_pixels = int(np.prod(images.shape[1:]))
    agent = DanAgent(config.agent_config(spec.n_patches, dataset.n_classes, spec.n_patches + n_pixels),
                     streams.generator('init'))
    encoder = HistoryEncoder(spec.n_patches, n_pixels)
    scheduler = UpdateScheduler({'attention': agent}, config, streams, events)
    policy_rng, item_rng = streams.generator('policy'), streams.generator('items')
    eval_images, eval_labels = test_images[:config.eval_items], test_labels[:config.eval_items]

    logger.info(f"Training attention agent for {config.episodes} episodes "
                f"({spec.n_patches} patches, schedule {config.reward_schedule.value}, policy {config.policy})")
    rows, epsilon, scores = [], None, None
    for episode in range(config.episodes):
        value = config.epsilon.value(episode)
        if value != epsilon:
            epsilon = agent.epsilon = value
            events.emit(scheduler.total_steps, 'epsilon', {'episode': episode, 'epsilon': epsilon})

        index = int(item_rng.integers(len(images)))
        env = AttentionEpisode(spec, images[index], int(labels[index]))
        builder = EpisodeBuilder(encoder)
        for t in range(spec.episode_len):
            if config.policy == 'random':
                patch = int(policy_rng.integers(spec.n_patches))
            else:
                patch = agent.select_action(builder.history, policy_rng)
            composite, label = env.step(patch)
            history = builder.observe(patch, composite)
            reward = agent.prediction_reward(history, label, RewardMode.DAN, observed=True,
                                             schedule=config.reward_schedule, terminal=t == spec.episode_len - 1)
            builder.record(reward, label)
            scheduler.after_step()
        scheduler.end_episode({'attention': builder.finish()})

        if (episode + 1) % config.eval_every == 0 or episode + 1 == config.episodes:
            scores = evaluate_attention(agent, spec, eval_images, eval_labels,
                                        random_patches=config.policy == 'random',
                                        seed=streams.child_seed('eval'))
            td, ce = scheduler.drain_losses()
            rows.append(_curve_row(episode + 1, scores.continuous_return, scores.accuracy, td, ce))
            events.emit(scheduler.total_steps, 'evaluation', {'episode': episode + 1, **scores.to_dict()})
            logger.info(f"Episode {episode + 1}, Eval return: {scores.continuous_return:.4f}, "
                        f"Accuracy: {scores.accuracy:.4f}, TD loss: {td:.4f}, CE loss: {ce:.4f}")

    if checkpoint_dir:
        agent.save(checkpoint_dir, prefix='attention', step_counter=scheduler.total_steps)
        events.emit(scheduler.total_steps, 'checkpoint', {'directory': os.path.basename(checkpoint_dir)})

    return AttentionRun(agent=agent, curve=pd.DataFrame(rows, columns=CURVE_COLUMNS),
                        total_steps=scheduler.total_steps, final_scores=scores)
