"""
Prediction rewards as tangents of the negative entropy.

The expected reward of predicting label j under belief b is the affine function
<b, r_j> - lse(r_j); each one is a tangent of -H(b) and their maximum is a lower
bound whose worst-case gap is available in closed form for 0-1 style rewards.
This module evaluates those quantities exactly and verifies the gap by sweeping
the probability simplex.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Dict, Hashable, Iterable, List, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.special import entr, logsumexp
from scipy.special import softmax as _softmax

from ml.errors import BeliefValidationError, BoundApplicabilityError, ShapeError

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9
BOUND_TOLERANCE = 1e-9
MAX_GRID_POINTS = 2_000_000
SWEEP_CHUNK_SIZE = 50_000


@dataclass(frozen=True)
class BeliefVector:
    """Probability vector over the n_y target values"""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise BeliefValidationError(f"belief must be one-dimensional, got shape {probs.shape}")
        if probs.size < 2:
            raise BeliefValidationError(f"belief needs at least 2 entries, got {probs.size}")
        if not np.all(np.isfinite(probs)):
            raise BeliefValidationError("belief contains non-finite entries")
        if probs.min() < 0.0 or probs.max() > 1.0 + SUM_TOLERANCE:
            raise BeliefValidationError(f"belief entries must lie in [0, 1], got {probs.tolist()}")
        total = float(probs.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise BeliefValidationError(f"belief sums to {total!r}, expected 1 within {SUM_TOLERANCE}")
        probs.flags.writeable = False
        object.__setattr__(self, 'probs', probs)

    @property
    def n_y(self) -> int:
        return int(self.probs.size)

    def __len__(self) -> int:
        return self.n_y

    def tolist(self) -> List[float]:
        return self.probs.tolist()


BeliefLike = Union[BeliefVector, Sequence[float], np.ndarray]


def as_belief(b: BeliefLike) -> BeliefVector:
    return b if isinstance(b, BeliefVector) else BeliefVector(b)


def normalize_belief(values: Sequence[float]) -> BeliefVector:
    """Explicitly rescale non-negative weights onto the simplex"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or np.any(values < 0):
        raise BeliefValidationError("weights must be a non-negative vector")
    total = values.sum()
    if total <= 0:
        raise BeliefValidationError("cannot normalize an all-zero weight vector")
    return BeliefVector(values / total)


@dataclass(frozen=True)
class PredictionRewardSpec:
    """Reward r' for a correct prediction and r'' otherwise, over n_y labels"""
    r_correct: float
    r_incorrect: float
    n_y: int

    def __post_init__(self):
        if int(self.n_y) != self.n_y or self.n_y < 2:
            raise BeliefValidationError(f"n_y must be an integer >= 2, got {self.n_y}")
        if self.r_correct < self.r_incorrect:
            raise BoundApplicabilityError(
                f"r_correct ({self.r_correct}) must be >= r_incorrect ({self.r_incorrect})"
            )

    @property
    def margin(self) -> float:
        return float(self.r_correct - self.r_incorrect)

    @property
    def theorem_applicable(self) -> bool:
        return 1.0 <= self.margin <= self.n_y

    @property
    def log_normalizer(self) -> float:
        """ln(e^{r'} + (n_y - 1) e^{r''}), the conjugate of every 0-1 reward vector"""
        return float(np.logaddexp(self.r_correct, self.r_incorrect + math.log(self.n_y - 1)))


@dataclass(frozen=True)
class RewardVectorFamily:
    """Labelled reward vectors; each defines one tangent of the negative entropy"""
    labels: Tuple[Hashable, ...]
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError(f"reward vectors must form a matrix, got shape {matrix.shape}")
        labels = tuple(self.labels)
        if len(labels) != matrix.shape[0]:
            raise ShapeError(f"{len(labels)} labels for {matrix.shape[0]} reward vectors")
        if len(set(labels)) != len(labels):
            raise ShapeError(f"reward vector labels must be unique, got {labels}")
        matrix.flags.writeable = False
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[Hashable, Sequence[float]]]) -> 'RewardVectorFamily':
        pairs = list(pairs)
        if not pairs:
            return cls(labels=(), matrix=np.zeros((0, 0)))
        lengths = {len(vector) for _, vector in pairs}
        if len(lengths) != 1:
            raise ShapeError(f"reward vectors have mixed lengths {sorted(lengths)}")
        return cls(labels=tuple(label for label, _ in pairs),
                   matrix=np.array([vector for _, vector in pairs], dtype=np.float64))

    @property
    def n_y(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def vectors(self) -> List[Tuple[Hashable, np.ndarray]]:
        return list(zip(self.labels, self.matrix))

    def __len__(self) -> int:
        return len(self.labels)

    def conjugates(self) -> np.ndarray:
        """lse(r_j) for every vector, the intercept of each tangent"""
        return logsumexp(self.matrix, axis=1)

    def shifted(self, constant: float) -> 'RewardVectorFamily':
        return RewardVectorFamily(labels=self.labels, matrix=self.matrix + constant)


def entropy(b: BeliefLike) -> float:
    """Shannon entropy in nats with 0 ln 0 = 0"""
    return float(np.sum(entr(as_belief(b).probs)))


def log_sum_exp(x: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("log_sum_exp of an empty vector")
    return float(logsumexp(x))


def softmax(r: Sequence[float]) -> BeliefVector:
    """Point where the tangent defined by r touches -H"""
    return BeliefVector(_softmax(np.asarray(r, dtype=np.float64)))


def reward_vectors_01(spec: PredictionRewardSpec) -> RewardVectorFamily:
    """Vector j pays r' at position j and r'' elsewhere; labels are 0..n_y-1"""
    matrix = np.full((spec.n_y, spec.n_y), float(spec.r_incorrect))
    np.fill_diagonal(matrix, float(spec.r_correct))
    return RewardVectorFamily(labels=tuple(range(spec.n_y)), matrix=matrix)


def abstain_family(n_y: int, value: float = 0.0, label: Hashable = 'abstain') -> RewardVectorFamily:
    """Single constant vector: the option of declining to predict"""
    return RewardVectorFamily(labels=(label,), matrix=np.full((1, n_y), float(value)))


def tangent_value(b: BeliefLike, r: Sequence[float]) -> float:
    probs = as_belief(b).probs
    r = np.asarray(r, dtype=np.float64)
    if r.shape != probs.shape:
        raise ShapeError(f"reward vector length {r.size} does not match belief length {probs.size}")
    return float(probs @ r - logsumexp(r))


def tangent_values(beliefs: np.ndarray, family: RewardVectorFamily) -> np.ndarray:
    """Tangent values for a batch of beliefs (rows) against every vector of a family"""
    beliefs = np.atleast_2d(beliefs)
    if beliefs.shape[1] != family.n_y:
        raise ShapeError(f"beliefs have {beliefs.shape[1]} entries, family has {family.n_y}")
    return beliefs @ family.matrix.T - family.conjugates()[None, :]


def prediction_lower_bound(b: BeliefLike, family: RewardVectorFamily) -> Tuple[float, Hashable]:
    """Max over the family's tangents; ties go to the earliest vector in the family"""
    if len(family) == 0:
        raise ShapeError("prediction_lower_bound needs a non-empty reward family")
    values = tangent_values(as_belief(b).probs, family)[0]
    best = int(np.argmax(values))
    return float(values[best]), family.labels[best]


def closed_form_01_bound(b: BeliefLike, spec: PredictionRewardSpec) -> float:
    probs = as_belief(b).probs
    if probs.size != spec.n_y:
        raise ShapeError(f"belief length {probs.size} does not match n_y={spec.n_y}")
    return float(spec.margin * probs.max() + spec.r_incorrect - spec.log_normalizer)


def approximation_error_01(b: BeliefLike, spec: PredictionRewardSpec) -> float:
    return -entropy(b) - closed_form_01_bound(b, spec)


def theorem_bound(spec: PredictionRewardSpec) -> float:
    """Worst-case gap between -H and the 0-1 tangent family, valid for 1 <= m <= n_y"""
    if not spec.theorem_applicable:
        raise BoundApplicabilityError(
            f"margin m = r' - r'' = {spec.margin} is outside [1, n_y={spec.n_y}]; "
            f"the bound is only established for 1 <= m <= n_y"
        )
    m = spec.margin
    eps_1 = math.log(1.0 / m) - 1.0
    eps_2 = math.log(1.0 / spec.n_y) - m / spec.n_y
    return max(eps_1, eps_2) - spec.r_incorrect + spec.log_normalizer


def max_error_locus(spec: PredictionRewardSpec) -> BeliefVector:
    """Belief uniform on k labels, k in 1..n_y maximizing -ln k - m/k"""
    ks = np.arange(1, spec.n_y + 1)
    k = int(ks[np.argmax(-np.log(ks) - spec.margin / ks)])
    probs = np.zeros(spec.n_y)
    probs[:k] = 1.0 / k
    return BeliefVector(probs)


def multi_tangent_bound(b: BeliefLike, families: Sequence[RewardVectorFamily]) -> float:
    """Max over all tangents of all families"""
    if len(families) == 0:
        raise ShapeError("multi_tangent_bound needs at least one reward family")
    probs = as_belief(b).probs
    best = -np.inf
    for family in families:
        if family.n_y != probs.size:
            raise ShapeError(f"family dimension {family.n_y} does not match belief length {probs.size}")
        if len(family):
            best = max(best, float(tangent_values(probs, family)[0].max()))
    return best


# Sampling of the simplex

@dataclass(frozen=True)
class GridSampler:
    step: float

    def describe(self) -> str:
        return f"grid:{self.step}"


@dataclass(frozen=True)
class RandomSampler:
    n: int
    seed: int = 0

    def describe(self) -> str:
        return f"random:{self.n}"


Sampler = Union[GridSampler, RandomSampler]


def parse_sampler(text: str, seed: int = 0) -> Sampler:
    """Parse `grid:STEP` or `random:N`"""
    kind, _, arg = text.partition(':')
    try:
        if kind == 'grid':
            step = float(arg)
            if not 0 < step <= 1:
                raise ValueError
            return GridSampler(step=step)
        if kind == 'random':
            n = int(arg)
            if n < 1:
                raise ValueError
            return RandomSampler(n=n, seed=seed)
    except ValueError:
        pass
    raise ValueError(f"sampler must be grid:STEP with 0 < STEP <= 1 or random:N with N >= 1, got {text!r}")


def simplex_grid(n_y: int, step: float) -> np.ndarray:
    """All beliefs whose entries are multiples of `step` (integer compositions of 1/step)"""
    resolution = int(round(1.0 / step))
    if abs(resolution * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    count = math.comb(resolution + n_y - 1, n_y - 1)
    if count > MAX_GRID_POINTS:
        raise ValueError(
            f"grid with step {step} over {n_y} labels has {count} points (limit {MAX_GRID_POINTS}); "
            f"use the random sampler"
        )
    slots = resolution + n_y - 1
    bars = np.array(list(combinations(range(slots), n_y - 1)), dtype=np.int64).reshape(count, n_y - 1)
    edges = np.hstack([np.full((count, 1), -1), bars, np.full((count, 1), slots)])
    # reversed so enumeration starts at the first vertex (1, 0, ..., 0)
    parts = (np.diff(edges, axis=1) - 1)[:, ::-1]
    return parts / resolution


def sample_beliefs(n_y: int, sampler: Sampler) -> np.ndarray:
    if isinstance(sampler, GridSampler):
        return simplex_grid(n_y, sampler.step)
    rng = np.random.default_rng(sampler.seed)
    draws = rng.dirichlet(np.ones(n_y), size=sampler.n)
    anchors = np.vstack([np.eye(n_y), np.full((1, n_y), 1.0 / n_y)])
    return np.vstack([draws, anchors])


@dataclass
class BoundReport:
    """Outcome of sweeping the approximation error over sampled beliefs"""
    n_y: int
    r_correct: float
    r_incorrect: float
    theorem_bound: float
    max_error: float
    argmax_belief: BeliefVector
    holds: bool
    samples_checked: int
    min_error: float = 0.0
    sampler: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_y': self.n_y,
            'r_correct': self.r_correct,
            'r_incorrect': self.r_incorrect,
            'theorem_bound': self.theorem_bound,
            'max_error': self.max_error,
            'argmax_belief': self.argmax_belief.tolist(),
            'holds': self.holds,
            'samples_checked': self.samples_checked,
            'min_error': self.min_error,
            'sampler': self.sampler,
        }

    def save(self, filepath: str):
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filepath, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write('\n')


def _chunk_errors(beliefs: np.ndarray, spec: PredictionRewardSpec) -> np.ndarray:
    neg_entropy = -entr(beliefs).sum(axis=1)
    bound = spec.margin * beliefs.max(axis=1) + spec.r_incorrect - spec.log_normalizer
    return neg_entropy - bound


def verify_bound_sweep(spec: PredictionRewardSpec, sampler: Sampler, n_jobs: int = 1) -> BoundReport:
    """Check 0 <= -H(b) - rho'(b) <= theorem_bound(spec) at every sampled belief"""
    bound = theorem_bound(spec)
    beliefs = sample_beliefs(spec.n_y, sampler)
    chunks = [beliefs[i:i + SWEEP_CHUNK_SIZE] for i in range(0, len(beliefs), SWEEP_CHUNK_SIZE)]

    if n_jobs == 1 or len(chunks) == 1:
        parts = [_chunk_errors(chunk, spec) for chunk in chunks]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(_chunk_errors)(chunk, spec) for chunk in chunks)
    errors = np.concatenate(parts)

    worst = int(np.argmax(errors))
    max_error = float(errors[worst])
    min_error = float(errors.min())
    holds = max_error <= bound + BOUND_TOLERANCE and min_error >= -BOUND_TOLERANCE

    if holds:
        logger.info(f"Bound holds for m={spec.margin}, n_y={spec.n_y}: "
                    f"max error {max_error:.9f} <= {bound:.9f} over {len(beliefs)} beliefs")
    else:
        logger.warning(f"Bound violated for m={spec.margin}, n_y={spec.n_y}: "
                       f"errors in [{min_error:.3e}, {max_error:.9f}], bound {bound:.9f}")

    return BoundReport(
        n_y=spec.n_y,
        r_correct=float(spec.r_correct),
        r_incorrect=float(spec.r_incorrect),
        theorem_bound=bound,
        max_error=max_error,
        argmax_belief=normalize_belief(beliefs[worst]),
        holds=bool(holds),
        samples_checked=int(len(beliefs)),
        min_error=min_error,
        sampler=sampler.describe(),
    )
