"""
Anticipatory agent: a Q network choosing sensing actions and an M network
predicting the hidden target, trained together from replayed episodes.

History encoding: position 0 of every input sequence is the all-zero start
vector; position k+1 encodes (action a_k, observation z_{k+1}) as
one-hot(action) ++ observation features. Q(h_k) is read at position k and
M's prediction for the label of step k at position k+1.
"""

import logging
import os
from collections import deque
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ml.data.attention_env import RewardSchedule
from ml.data.tracking_env import RewardMode, step_reward
from ml.errors import EpisodeStateError, ShapeError
from ml.models.neural import (AdamState, LayerKind, NetworkSpec, Parameters, adam_step, backward, clip_gradients,
                              copy_params, cross_entropy_batch, forward, init_params, load_checkpoint,
                              save_checkpoint)

logger = logging.getLogger(__name__)


def one_hot(index: int, size: int) -> np.ndarray:
    vector = np.zeros(size)
    vector[index] = 1.0
    return vector


class HistoryEncoder:
    """Maps (action, observation features) pairs to recurrent-network inputs"""

    def __init__(self, n_actions: int, feature_size: int):
        self.n_actions = n_actions
        self.feature_size = feature_size

    @property
    def input_size(self) -> int:
        return self.n_actions + self.feature_size

    def start(self) -> np.ndarray:
        return np.zeros(self.input_size)

    def encode(self, action: int, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64).ravel()
        if features.size != self.feature_size:
            raise ShapeError(f"expected {self.feature_size} observation features, got {features.size}")
        if not 0 <= action < self.n_actions:
            raise ShapeError(f"action {action} out of range [0, {self.n_actions})")
        return np.concatenate([one_hot(action, self.n_actions), features])


@dataclass(frozen=True)
class ExperienceTuple:
    history: np.ndarray
    action: int
    reward: float
    next_history: np.ndarray
    label: int
    terminal: bool


@dataclass
class ReplaySlice:
    """Contiguous window of one episode: trace_len transitions and their trace_len + 1 inputs"""
    inputs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    labels: np.ndarray
    observed: np.ndarray
    terminal: np.ndarray


@dataclass
class EpisodeTrace:
    """A whole stored episode; inputs has one more row than there are steps"""
    inputs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    labels: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        n = len(self.actions)
        if n < 1 or self.inputs.shape[0] != n + 1:
            raise ShapeError(f"an episode of {n} steps needs {n + 1} input rows, got {self.inputs.shape[0]}")
        if not len(self.rewards) == len(self.labels) == len(self.observed) == n:
            raise ShapeError("per-step arrays of an episode must have equal lengths")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))

    def tuples(self) -> Iterator[ExperienceTuple]:
        for t in range(self.length):
            yield ExperienceTuple(
                history=self.inputs[:t + 1],
                action=int(self.actions[t]),
                reward=float(self.rewards[t]),
                next_history=self.inputs[:t + 2],
                label=int(self.labels[t]),
                terminal=t == self.length - 1,
            )

    def slice(self, start: int, trace_len: int) -> ReplaySlice:
        if not 0 <= start <= self.length - trace_len:
            raise ShapeError(f"slice [{start}, {start + trace_len}) does not fit an episode of {self.length} steps")
        stop = start + trace_len
        return ReplaySlice(
            inputs=self.inputs[start:stop + 1],
            actions=self.actions[start:stop],
            rewards=self.rewards[start:stop],
            labels=self.labels[start:stop],
            observed=self.observed[start:stop],
            terminal=np.arange(start, stop) == self.length - 1,
        )


class EpisodeBuilder:
    """Accumulates one episode step by step"""

    def __init__(self, encoder: HistoryEncoder):
        self.encoder = encoder
        self._inputs = [encoder.start()]
        self._actions: List[int] = []
        self._rewards: List[float] = []
        self._labels: List[int] = []
        self._observed: List[bool] = []

    @property
    def history(self) -> np.ndarray:
        return np.stack(self._inputs)

    @property
    def steps(self) -> int:
        return len(self._actions)

    def observe(self, action: int, features: np.ndarray) -> np.ndarray:
        """Append the (action, observation) pair; returns the extended history"""
        if len(self._inputs) != len(self._rewards) + 1:
            raise EpisodeStateError("record the previous step's reward before observing again")
        self._inputs.append(self.encoder.encode(action, features))
        self._actions.append(int(action))
        return self.history

    def record(self, reward: float, label: int, observed: bool = True):
        if len(self._inputs) != len(self._rewards) + 2:
            raise EpisodeStateError("observe a step before recording its reward")
        self._rewards.append(float(reward))
        self._labels.append(int(label))
        self._observed.append(bool(observed))

    def finish(self) -> EpisodeTrace:
        return EpisodeTrace(
            inputs=self.history,
            actions=np.array(self._actions, dtype=np.int64),
            rewards=np.array(self._rewards),
            labels=np.array(self._labels, dtype=np.int64),
            observed=np.array(self._observed, dtype=bool),
        )


class ReplayBuffer:
    """Ring buffer of whole episodes"""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.episodes = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, episode: EpisodeTrace):
        self.episodes.append(episode)

    def sample_slices(self, batch_size: int, trace_len: int, rng: np.random.Generator,
                      align_end: bool = False) -> Optional[List[ReplaySlice]]:
        """
        Episodes drawn uniformly with replacement, one slice each; `align_end`
        takes the slice ending at the terminal step. None until the buffer
        holds batch_size episodes.
        """
        if len(self.episodes) < batch_size:
            return None
        slices = []
        for index in rng.integers(len(self.episodes), size=batch_size):
            episode = self.episodes[int(index)]
            last_start = episode.length - trace_len
            if last_start < 0:
                raise ShapeError(f"trace_len {trace_len} exceeds the stored episode length {episode.length}")
            start = last_start if align_end else int(rng.integers(last_start + 1))
            slices.append(episode.slice(start, trace_len))
        return slices


def reward_value(correct: bool, observed: bool, terminal: bool,
                 mode: RewardMode = RewardMode.DAN,
                 schedule: RewardSchedule = RewardSchedule.CONTINUOUS) -> float:
    if schedule is RewardSchedule.TERMINAL and not terminal:
        return 0.0
    return step_reward(correct, observed, mode)


def double_dqn_value(reward: float, q_online_next: np.ndarray, q_target_next: np.ndarray,
                     gamma: float, terminal: bool) -> float:
    """r + gamma * Q_target(h')[argmax Q_online(h')], or r at a terminal step"""
    if terminal:
        return float(reward)
    best = int(np.argmax(q_online_next))
    return float(reward + gamma * q_target_next[best])


@dataclass(frozen=True)
class AgentConfig:
    n_actions: int
    n_classes: int
    input_size: int
    hidden_sizes: Tuple[int, ...] = (32, 32)
    recurrent_size: int = 64
    dropout: float = 0.0
    l2_scale: float = 0.01
    lr: float = 0.001
    gamma: float = 0.99
    epsilon: float = 0.1
    max_grad_norm: float = 5.0
    burn_in: int = 4

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    def q_spec(self) -> NetworkSpec:
        return NetworkSpec.drqn(self.input_size, self.hidden_sizes, self.recurrent_size, self.n_actions,
                                dropout_rate=self.dropout, l2_scale=self.l2_scale)

    def m_spec(self) -> NetworkSpec:
        return NetworkSpec.drqn(self.input_size, self.hidden_sizes, self.recurrent_size, self.n_classes,
                                dropout_rate=self.dropout, l2_scale=self.l2_scale)


@dataclass
class _Batch:
    inputs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    labels: np.ndarray
    observed: np.ndarray
    terminal: np.ndarray


def _stack(slices: Sequence[ReplaySlice]) -> _Batch:
    lengths = {len(s.actions) for s in slices}
    if len(lengths) != 1:
        raise ShapeError(f"slices in one minibatch must share a length, got {sorted(lengths)}")
    return _Batch(
        inputs=np.stack([s.inputs for s in slices]),
        actions=np.stack([s.actions for s in slices]),
        rewards=np.stack([s.rewards for s in slices]).astype(np.float64),
        labels=np.stack([s.labels for s in slices]),
        observed=np.stack([s.observed for s in slices]),
        terminal=np.stack([s.terminal for s in slices]),
    )


class DanAgent:
    """Q and M networks with their target copies and optimizers"""

    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        self.config = config
        self.epsilon = config.epsilon
        self.gamma = config.gamma
        self.q_spec = config.q_spec()
        self.m_spec = config.m_spec()
        self.q_params = init_params(self.q_spec, rng)
        self.m_params = init_params(self.m_spec, rng)
        self.q_target: Parameters = copy_params(self.q_params)
        self.m_target: Parameters = copy_params(self.m_params)
        self.q_optimizer = AdamState.create(self.q_params, lr=config.lr)
        self.m_optimizer = AdamState.create(self.m_params, lr=config.lr)
        self.updates = 0

    # Acting

    def q_values(self, history: np.ndarray) -> np.ndarray:
        outputs, _ = forward(self.q_params, self.q_spec, history)
        return outputs[-1]

    def predict_logits(self, history: np.ndarray, target: bool = False) -> np.ndarray:
        outputs, _ = forward(self.m_target if target else self.m_params, self.m_spec, history)
        return outputs[-1]

    def predict(self, history: np.ndarray) -> int:
        return int(np.argmax(self.predict_logits(history)))

    def select_action(self, history: np.ndarray, rng: np.random.Generator,
                      epsilon: Optional[float] = None) -> int:
        """Epsilon-greedy on Q; ties go to the lowest action index"""
        epsilon = self.epsilon if epsilon is None else epsilon
        if rng.random() < epsilon:
            return int(rng.integers(self.config.n_actions))
        return int(np.argmax(self.q_values(history)))

    def prediction_reward(self, history: np.ndarray, label: int, mode: RewardMode = RewardMode.DAN,
                          observed: bool = True, schedule: RewardSchedule = RewardSchedule.CONTINUOUS,
                          terminal: bool = True) -> float:
        """Reward from the target M network's prediction of `label` after `history`"""
        if mode is RewardMode.COVERAGE:
            correct = False
        else:
            correct = int(np.argmax(self.predict_logits(history, target=True))) == int(label)
        return reward_value(correct, observed, terminal, mode, schedule)

    def double_dqn_target(self, experience: ExperienceTuple) -> float:
        if experience.terminal:
            return float(experience.reward)
        online, _ = forward(self.q_params, self.q_spec, experience.next_history)
        target, _ = forward(self.q_target, self.q_spec, experience.next_history)
        return double_dqn_value(experience.reward, online[-1], target[-1], self.gamma, False)

    # Learning

    def _update_mask(self, n_steps: int) -> np.ndarray:
        return np.arange(n_steps) >= self.config.burn_in

    def recompute_rewards(self, slices: Sequence[ReplaySlice], mode: RewardMode,
                          schedule: RewardSchedule) -> List[ReplaySlice]:
        """Replace stored rewards with ones from the current target M network"""
        batch = _stack(slices)
        logits, _ = forward(self.m_target, self.m_spec, batch.inputs)
        correct = np.argmax(logits[:, 1:], axis=-1) == batch.labels
        refreshed = []
        for i, s in enumerate(slices):
            rewards = np.array([
                reward_value(bool(c), bool(o), bool(t), mode, schedule)
                for c, o, t in zip(correct[i], s.observed, s.terminal)
            ])
            refreshed.append(ReplaySlice(s.inputs, s.actions, rewards, s.labels, s.observed, s.terminal))
        return refreshed

    def q_update(self, slices: Optional[Sequence[ReplaySlice]], rng: Optional[np.random.Generator] = None) -> Optional[float]:
        """One Adam step on the squared double-DQN TD error of the post-burn-in steps"""
        if not slices:
            return None
        batch = _stack(slices)
        n_steps = batch.actions.shape[1]
        mask = np.broadcast_to(self._update_mask(n_steps), batch.actions.shape)
        count = int(mask.sum())
        if count == 0:
            return None

        online_eval, _ = forward(self.q_params, self.q_spec, batch.inputs)
        target_eval, _ = forward(self.q_target, self.q_spec, batch.inputs)
        best = np.argmax(online_eval[:, 1:], axis=-1)
        bootstrap = np.take_along_axis(target_eval[:, 1:], best[..., None], axis=-1)[..., 0]
        targets = batch.rewards + self.gamma * bootstrap * (~batch.terminal)

        outputs, trace = forward(self.q_params, self.q_spec, batch.inputs, train=True, rng=rng)
        taken = np.take_along_axis(outputs[:, :n_steps], batch.actions[..., None], axis=-1)[..., 0]
        td = (taken - targets) * mask
        loss = float(np.sum(td * td) / count)

        grad_outputs = np.zeros_like(outputs)
        np.put_along_axis(grad_outputs[:, :n_steps], batch.actions[..., None], (2.0 * td / count)[..., None], axis=-1)
        grads = backward(self.q_params, self.q_spec, trace, grad_outputs)
        grads, _ = clip_gradients(grads, self.config.max_grad_norm)
        self.q_params, self.q_optimizer = adam_step(self.q_params, grads, self.q_optimizer)
        self.updates += 1
        return loss

    def m_update(self, slices: Optional[Sequence[ReplaySlice]], rng: Optional[np.random.Generator] = None,
                 terminal_only: bool = False) -> Optional[float]:
        """One Adam step on the mean cross-entropy of the post-burn-in (or terminal) predictions"""
        if not slices:
            return None
        batch = _stack(slices)
        mask = np.broadcast_to(self._update_mask(batch.labels.shape[1]), batch.labels.shape)
        if terminal_only:
            mask = mask & batch.terminal
        count = int(mask.sum())
        if count == 0:
            return None

        outputs, trace = forward(self.m_params, self.m_spec, batch.inputs, train=True, rng=rng)
        losses, grads_at_logits = cross_entropy_batch(outputs[:, 1:][mask], batch.labels[mask])
        grad_outputs = np.zeros_like(outputs)
        grad_outputs[:, 1:][mask] = grads_at_logits / count
        grads = backward(self.m_params, self.m_spec, trace, grad_outputs)
        grads, _ = clip_gradients(grads, self.config.max_grad_norm)
        self.m_params, self.m_optimizer = adam_step(self.m_params, grads, self.m_optimizer)
        return float(losses.mean())

    def sync_targets(self):
        self.q_target = copy_params(self.q_params)
        self.m_target = copy_params(self.m_params)

    # Persistence

    def save(self, directory: str, prefix: str = 'agent', step_counter: int = 0):
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(os.path.join(directory, f'{prefix}_q.json'), self.q_spec, self.q_params, step_counter)
        save_checkpoint(os.path.join(directory, f'{prefix}_m.json'), self.m_spec, self.m_params, step_counter)
        logger.info(f"Agent checkpoints saved to {directory} ({prefix})")

    @classmethod
    def load(cls, directory: str, prefix: str = 'agent', epsilon: float = 0.0) -> 'DanAgent':
        q_spec, q_params, meta = load_checkpoint(os.path.join(directory, f'{prefix}_q.json'))
        m_spec, m_params, _ = load_checkpoint(os.path.join(directory, f'{prefix}_m.json'))
        hidden = tuple(layer.size for layer in q_spec.layers if layer.kind is LayerKind.DENSE)
        recurrent_size = next(layer.size for layer in q_spec.layers if layer.kind is LayerKind.RECURRENT)
        dropout_rate = next((layer.rate for layer in q_spec.layers if layer.kind is LayerKind.DROPOUT), 0.0)
        config = AgentConfig(
            n_actions=q_spec.output_size, n_classes=m_spec.output_size, input_size=q_spec.input_size,
            hidden_sizes=hidden, recurrent_size=recurrent_size, dropout=dropout_rate,
            l2_scale=q_spec.l2_scale, epsilon=epsilon,
        )
        agent = cls(config, np.random.default_rng(0))
        agent.q_params, agent.m_params = q_params, m_params
        agent.sync_targets()
        agent.updates = int(meta.get('step_counter') or 0)
        logger.info(f"Agent loaded from {directory} ({prefix})")
        return agent
