"""
Model-based reference for active perception.

Exact discrete Bayes filtering (transition first, then observation correction),
expected information gain and expected prediction value of sensing actions,
greedy action selection, a brute-force path enumerator used as a test oracle,
and a bootstrap particle filter.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr

from ml.errors import (
    BeliefValidationError,
    EnumerationLimitError,
    ImpossibleObservationError,
    ParticleDegeneracyError,
    ShapeError,
)
from ml.inference.convex_bounds import (
    BeliefLike,
    BeliefVector,
    PredictionRewardSpec,
    RewardVectorFamily,
    as_belief,
)

logger = logging.getLogger(__name__)

STOCHASTIC_TOLERANCE = 1e-9
MAX_ENUMERATED_PATHS = 1 << 28
ENUMERATION_CHUNK = 1 << 20


@dataclass(frozen=True)
class DiscreteModel:
    """
    Discrete hidden-target dynamics.

    transition[y_next, y] = Pr(y_next | y)
    observations[a, z, y] = Pr(z | y, a)
    """
    transition: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        transition = np.array(self.transition, dtype=np.float64)
        observations = np.array(self.observations, dtype=np.float64)
        if transition.ndim != 2 or transition.shape[0] != transition.shape[1]:
            raise ShapeError(f"transition must be square, got shape {transition.shape}")
        if observations.ndim != 3 or observations.shape[2] != transition.shape[0]:
            raise ShapeError(
                f"observations must have shape (n_actions, n_obs, {transition.shape[0]}), "
                f"got {observations.shape}"
            )
        if np.any(transition < 0) or np.any(observations < 0):
            raise BeliefValidationError("model probabilities must be non-negative")
        column_sums = transition.sum(axis=0)
        if np.max(np.abs(column_sums - 1.0)) > STOCHASTIC_TOLERANCE:
            raise BeliefValidationError(f"transition columns must sum to 1, got {column_sums.tolist()}")
        obs_sums = observations.sum(axis=1)
        if np.max(np.abs(obs_sums - 1.0)) > STOCHASTIC_TOLERANCE:
            worst = np.unravel_index(np.argmax(np.abs(obs_sums - 1.0)), obs_sums.shape)
            raise BeliefValidationError(
                f"observation columns must sum to 1; action {worst[0]}, target {worst[1]} "
                f"sums to {obs_sums[worst]!r}"
            )
        transition.flags.writeable = False
        observations.flags.writeable = False
        object.__setattr__(self, 'transition', transition)
        object.__setattr__(self, 'observations', observations)

    @property
    def n_targets(self) -> int:
        return int(self.transition.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.observations.shape[0])

    @property
    def n_obs(self) -> int:
        return int(self.observations.shape[1])

    @classmethod
    def static(cls, observations: np.ndarray) -> 'DiscreteModel':
        """Model whose target never changes"""
        observations = np.asarray(observations, dtype=np.float64)
        return cls(transition=np.eye(observations.shape[2]), observations=observations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_targets': self.n_targets,
            'n_actions': self.n_actions,
            'n_obs': self.n_obs,
            'transition': self.transition.ravel().tolist(),
            'observations': [obs.ravel().tolist() for obs in self.observations],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DiscreteModel':
        n, n_obs = int(data['n_targets']), int(data['n_obs'])
        transition = np.asarray(data['transition'], dtype=np.float64).reshape(n, n)
        observations = np.array(
            [np.asarray(obs, dtype=np.float64).reshape(n_obs, n) for obs in data['observations']]
        )
        if observations.shape[0] != int(data['n_actions']):
            raise ShapeError(f"expected {data['n_actions']} observation matrices, got {observations.shape[0]}")
        return cls(transition=transition, observations=observations)

    def save(self, filepath: str):
        with open(filepath, 'w') as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, filepath: str) -> 'DiscreteModel':
        with open(filepath, 'r') as f:
            return cls.from_dict(json.load(f))


def random_model(n_targets: int, n_actions: int, n_obs: int,
                 rng: np.random.Generator, static: bool = False) -> DiscreteModel:
    """Model with Dirichlet(1) columns, used for property tests"""
    if static:
        transition = np.eye(n_targets)
    else:
        transition = rng.dirichlet(np.ones(n_targets), size=n_targets).T
    observations = np.stack([
        rng.dirichlet(np.ones(n_obs), size=n_targets).T for _ in range(n_actions)
    ])
    return DiscreteModel(transition=transition, observations=observations)


def _check_action(model: DiscreteModel, a: int, z: int = None):
    if not 0 <= a < model.n_actions:
        raise ShapeError(f"action {a} out of range [0, {model.n_actions})")
    if z is not None and not 0 <= z < model.n_obs:
        raise ShapeError(f"observation {z} out of range [0, {model.n_obs})")


def _belief_array(b: BeliefLike, model: DiscreteModel) -> np.ndarray:
    probs = as_belief(b).probs
    if probs.size != model.n_targets:
        raise ShapeError(f"belief has {probs.size} entries, model has {model.n_targets} targets")
    return probs


def predict_belief(b: BeliefLike, model: DiscreteModel) -> np.ndarray:
    return model.transition @ _belief_array(b, model)


def observation_distribution(b: BeliefLike, a: int, model: DiscreteModel) -> np.ndarray:
    """Pr(z | b, a) after the transition step"""
    _check_action(model, a)
    return model.observations[a] @ predict_belief(b, model)


def correct_belief(b: BeliefLike, a: int, z: int, model: DiscreteModel) -> BeliefVector:
    """Observation correction alone, for a belief that already describes the current step"""
    _check_action(model, a, z)
    return _correct(_belief_array(b, model), a, z, model)


def bayes_update(b: BeliefLike, a: int, z: int, model: DiscreteModel) -> BeliefVector:
    _check_action(model, a, z)
    return _correct(predict_belief(b, model), a, z, model)


def _correct(predicted: np.ndarray, a: int, z: int, model: DiscreteModel) -> BeliefVector:
    joint = model.observations[a, z] * predicted
    total = joint.sum()
    if total <= 0:
        raise ImpossibleObservationError(f"observation {z} has zero probability under action {a}")
    posterior = joint / total
    # renormalize away rounding so the sum check cannot trip on long histories
    return BeliefVector(posterior / posterior.sum())


def _posteriors(b: BeliefLike, a: int, model: DiscreteModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(predicted belief, Pr(z), posterior rows for every z with Pr(z) > 0)"""
    _check_action(model, a)
    predicted = predict_belief(b, model)
    joint = model.observations[a] * predicted[None, :]
    pz = joint.sum(axis=1)
    possible = pz > 0
    return predicted, pz[possible], joint[possible] / pz[possible, None]


def expected_info_gain(b: BeliefLike, a: int, model: DiscreteModel) -> float:
    """H(T b) - E_z[H(posterior)]; isolates the observation's effect from transition diffusion"""
    predicted, pz, posteriors = _posteriors(b, a, model)
    prior_entropy = entr(predicted).sum()
    posterior_entropy = entr(posteriors).sum(axis=1)
    return float(prior_entropy - pz @ posterior_entropy)


def expected_prediction_value(b: BeliefLike, a: int, model: DiscreteModel,
                              family: RewardVectorFamily) -> float:
    """E_z[max_j <posterior_z, r_j>], without the constant conjugate term"""
    if family.n_y != model.n_targets:
        raise ShapeError(f"family dimension {family.n_y} does not match {model.n_targets} targets")
    _, pz, posteriors = _posteriors(b, a, model)
    best = (posteriors @ family.matrix.T).max(axis=1)
    return float(pz @ best)


def expected_bound_gap(b: BeliefLike, a: int, model: DiscreteModel,
                       spec: PredictionRewardSpec) -> float:
    """E_z[-H(posterior)] - E_z[rho'(posterior)] with rho' the 0-1 tangent bound"""
    if spec.n_y != model.n_targets:
        raise ShapeError(f"reward spec n_y={spec.n_y} does not match {model.n_targets} targets")
    _, pz, posteriors = _posteriors(b, a, model)
    neg_entropy = -entr(posteriors).sum(axis=1)
    rho_prime = spec.margin * posteriors.max(axis=1) + spec.r_incorrect - spec.log_normalizer
    return float(pz @ (neg_entropy - rho_prime))


Criterion = Union[str, RewardVectorFamily]


def action_scores(b: BeliefLike, model: DiscreteModel, criterion: Criterion = 'info_gain') -> np.ndarray:
    if isinstance(criterion, RewardVectorFamily):
        return np.array([expected_prediction_value(b, a, model, criterion) for a in range(model.n_actions)])
    if criterion == 'info_gain':
        return np.array([expected_info_gain(b, a, model) for a in range(model.n_actions)])
    raise ValueError(f"unknown criterion {criterion!r}; use 'info_gain' or a RewardVectorFamily")


def greedy_action(b: BeliefLike, model: DiscreteModel, criterion: Criterion = 'info_gain') -> int:
    """Best action under the criterion; ties go to the lowest action index"""
    return int(np.argmax(action_scores(b, model, criterion)))


def brute_force_posterior(history: Sequence[Tuple[int, int]], prior: BeliefLike, model: DiscreteModel,
                          max_history: int = 8, max_targets: int = 64) -> BeliefVector:
    """
    Posterior over the current target by summing over every hidden trajectory.

    Paths are enumerated in blocks of ENUMERATION_CHUNK, so memory stays flat;
    the total is still capped at MAX_ENUMERATED_PATHS (8 targets with a
    history of 8 fits, 64 targets only with short histories).
    """
    history = list(history)
    prior_probs = _belief_array(prior, model)
    if len(history) > max_history or model.n_targets > max_targets:
        raise EnumerationLimitError(
            f"enumeration limited to history <= {max_history} and n_targets <= {max_targets}, "
            f"got {len(history)} and {model.n_targets}"
        )
    n_paths = model.n_targets ** (len(history) + 1)
    if n_paths > MAX_ENUMERATED_PATHS:
        raise EnumerationLimitError(f"{n_paths} trajectories exceed the limit of {MAX_ENUMERATED_PATHS}")
    if not history:
        return as_belief(prior)
    for a, z in history:
        _check_action(model, a, z)

    shape = (model.n_targets,) * (len(history) + 1)
    posterior = np.zeros(model.n_targets)
    for start in range(0, n_paths, ENUMERATION_CHUNK):
        paths = np.unravel_index(np.arange(start, min(start + ENUMERATION_CHUNK, n_paths)), shape)
        weights = prior_probs[paths[0]].copy()
        for k, (a, z) in enumerate(history):
            weights *= model.transition[paths[k + 1], paths[k]]
            weights *= model.observations[a, z, paths[k + 1]]
        posterior += np.bincount(paths[-1], weights=weights, minlength=model.n_targets)

    total = posterior.sum()
    if total <= 0:
        raise ImpossibleObservationError("history has zero probability under the model")
    return BeliefVector(posterior / total)


def tv_distance(b1: BeliefLike, b2: BeliefLike) -> float:
    p, q = as_belief(b1).probs, as_belief(b2).probs
    if p.shape != q.shape:
        raise ShapeError(f"cannot compare beliefs of length {p.size} and {q.size}")
    return float(0.5 * np.abs(p - q).sum())


# Particle filtering

class ResamplingScheme(Enum):
    SYSTEMATIC = "systematic"
    MULTINOMIAL = "multinomial"


@dataclass(frozen=True)
class ParticleSet:
    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if particles.ndim != 1 or particles.size < 1:
            raise ShapeError("a particle set needs at least one particle")
        if weights.shape != particles.shape:
            raise ShapeError(f"{weights.size} weights for {particles.size} particles")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > STOCHASTIC_TOLERANCE:
            raise BeliefValidationError("particle weights must be non-negative and sum to 1")
        object.__setattr__(self, 'particles', particles)
        object.__setattr__(self, 'weights', weights)

    def __len__(self) -> int:
        return int(self.particles.size)

    @classmethod
    def from_belief(cls, b: BeliefLike, n_particles: int, rng: np.random.Generator) -> 'ParticleSet':
        probs = as_belief(b).probs
        particles = rng.choice(probs.size, size=n_particles, p=probs)
        return cls(particles=particles, weights=np.full(n_particles, 1.0 / n_particles))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions), n - 1)


def particle_filter_step(p: ParticleSet, a: int, z: int, model: DiscreteModel, rng: np.random.Generator,
                         resampling: ResamplingScheme = ResamplingScheme.SYSTEMATIC) -> ParticleSet:
    """Bootstrap step: propagate through the transition, weight by the observation, resample"""
    _check_action(model, a, z)
    if int(p.particles.max()) >= model.n_targets:
        raise ShapeError(f"particle value exceeds the model's {model.n_targets} targets")

    cdf = np.cumsum(model.transition, axis=0)[:, p.particles]
    u = rng.random(len(p))
    propagated = np.minimum((u[None, :] > cdf).sum(axis=0), model.n_targets - 1)

    weights = p.weights * model.observations[a, z, propagated]
    total = weights.sum()
    if total <= 0:
        raise ParticleDegeneracyError(
            f"all {len(p)} particles have zero likelihood for observation {z} under action {a}"
        )
    weights = weights / total

    if resampling is ResamplingScheme.SYSTEMATIC:
        index = systematic_resample(weights, rng)
    else:
        index = rng.choice(len(p), size=len(p), p=weights)
    return ParticleSet(particles=propagated[index], weights=np.full(len(p), 1.0 / len(p)))


def particle_posterior(p: ParticleSet, n_targets: int) -> BeliefVector:
    histogram = np.bincount(p.particles, weights=p.weights, minlength=n_targets)
    return BeliefVector(histogram / histogram.sum())
