"""
Multi-seed comparisons: tracking variants against the baselines, continuous vs
terminal reward on the attention task, and a small epsilon x learning-rate sweep.
Seeds run in parallel with joblib; significance uses a one-sided Welch t-test.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from ml.data.attention_env import GlimpseSpec, GlyphDataset, RewardSchedule
from ml.data.tracking_env import CameraSpec, GridConfig, RewardMode, Track
from ml.training.train_models import (EpsilonSchedule, TrainConfig, run_baseline, train_attention,
                                      train_tracking)

logger = logging.getLogger(__name__)

TRACKING_VARIANTS = ('dan', 'dan_plus_coverage', 'coverage', 'random_policy', 'exact_oracle')
SWEEP_EPSILONS = (0.1, 0.3, 0.5)
SWEEP_LEARNING_RATES = (0.01, 0.001, 0.0001)


@dataclass
class TrackingSetup:
    grid: GridConfig
    cameras: List[CameraSpec]
    train_tracks: List[Track]
    test_tracks: List[Track]
    config: TrainConfig


def one_sided_test(better: Sequence[float], worse: Sequence[float]) -> Tuple[float, float]:
    """Welch t statistic and p-value for mean(better) > mean(worse)"""
    a, b = np.asarray(better, dtype=np.float64), np.asarray(worse, dtype=np.float64)
    if a.std() == 0 and b.std() == 0:
        # constant samples: the ordering is exact
        if a.mean() > b.mean():
            return float('inf'), 0.0
        return (0.0 if a.mean() == b.mean() else float('-inf')), 1.0
    result = stats.ttest_ind(a, b, equal_var=False, alternative='greater')
    return float(result.statistic), float(result.pvalue)


def episodes_to_threshold(curve: pd.DataFrame, threshold: float = 0.8,
                          column: str = 'mean_eval_accuracy') -> Optional[int]:
    """First evaluated episode whose score reaches the threshold, or None"""
    reached = curve[curve[column] >= threshold]
    if reached.empty:
        return None
    return int(reached['episode'].iloc[0])


def _tracking_variant(variant: str, setup: TrackingSetup, seed: int) -> Dict[str, Any]:
    args = (setup.grid, setup.cameras, setup.train_tracks, setup.test_tracks)
    if variant == 'dan':
        scores = train_tracking(*args, setup.config.replace(reward_mode=RewardMode.DAN), seed).final_scores
    elif variant == 'dan_plus_coverage':
        scores = train_tracking(*args, setup.config.replace(reward_mode=RewardMode.DAN_PLUS_COVERAGE), seed).final_scores
    else:
        scores = run_baseline(variant, *args, setup.config, seed).scores
    return {'variant': variant, 'seed': seed, 'prediction_reward': scores.prediction_reward,
            'mean_reward': scores.mean_reward, 'coverage_rate': scores.coverage_rate}


def compare_tracking(setup: TrackingSetup, seeds: Sequence[int], variants: Sequence[str] = TRACKING_VARIANTS,
                     n_jobs: int = 1) -> pd.DataFrame:
    """One row per (variant, seed) with prediction-scored final evaluation reward"""
    jobs = [(variant, seed) for variant in variants for seed in seeds]
    logger.info(f"Running {len(jobs)} tracking jobs ({len(variants)} variants x {len(seeds)} seeds)")
    rows = Parallel(n_jobs=n_jobs)(delayed(_tracking_variant)(variant, setup, seed) for variant, seed in jobs)
    return pd.DataFrame(rows)


def significance_table(results: pd.DataFrame, pairs: Sequence[Tuple[str, str]],
                       score: str = 'prediction_reward') -> pd.DataFrame:
    rows = []
    for better, worse in pairs:
        a = results.loc[results['variant'] == better, score].to_numpy()
        b = results.loc[results['variant'] == worse, score].to_numpy()
        statistic, p_value = one_sided_test(a, b)
        rows.append({'better': better, 'worse': worse, 'mean_better': float(a.mean()),
                     'mean_worse': float(b.mean()), 'ratio': float(a.mean() / b.mean()) if b.mean() else float('inf'),
                     't_statistic': statistic, 'p_value': p_value})
    return pd.DataFrame(rows)


def _attention_seed(spec: GlimpseSpec, dataset: GlyphDataset, config: TrainConfig, seed: int,
                    threshold: float) -> List[Dict[str, Any]]:
    rows = []
    for schedule in (RewardSchedule.CONTINUOUS, RewardSchedule.TERMINAL):
        run = train_attention(spec, dataset, config.replace(reward_schedule=schedule), seed)
        rows.append({
            'schedule': schedule.value,
            'seed': seed,
            'episodes_to_threshold': episodes_to_threshold(run.curve, threshold),
            'final_accuracy': run.final_scores.accuracy,
            'continuous_return': run.final_scores.continuous_return,
            'terminal_return': run.final_scores.terminal_return,
        })
    return rows


def compare_attention(spec: GlimpseSpec, dataset: GlyphDataset, config: TrainConfig, seeds: Sequence[int],
                      threshold: float = 0.8, n_jobs: int = 1) -> pd.DataFrame:
    """Continuous vs terminal reward schedules; runs that never reach the threshold get NaN episodes"""
    batches = Parallel(n_jobs=n_jobs)(
        delayed(_attention_seed)(spec, dataset, config, seed, threshold) for seed in seeds
    )
    return pd.DataFrame([row for batch in batches for row in batch])


def median_episodes_to_threshold(results: pd.DataFrame, schedule: str, cap: int) -> float:
    """Median over seeds, counting runs that never reached the threshold as `cap`"""
    values = results.loc[results['schedule'] == schedule, 'episodes_to_threshold']
    return float(values.fillna(cap).median())


def _sweep_point(setup: TrackingSetup, epsilon: float, lr: float, seed: int) -> Dict[str, Any]:
    config = setup.config.replace(epsilon=EpsilonSchedule(epsilon, epsilon, 0), lr=lr)
    run = train_tracking(setup.grid, setup.cameras, setup.train_tracks, setup.test_tracks, config, seed)
    return {'epsilon': epsilon, 'lr': lr, 'seed': seed, 'prediction_reward': run.final_scores.prediction_reward}


def sweep_tracking(setup: TrackingSetup, seed: int, epsilons: Sequence[float] = SWEEP_EPSILONS,
                   learning_rates: Sequence[float] = SWEEP_LEARNING_RATES, n_jobs: int = 1) -> pd.DataFrame:
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_sweep_point)(setup, epsilon, lr, seed) for epsilon in epsilons for lr in learning_rates
    )
    return pd.DataFrame(rows).sort_values('prediction_reward', ascending=False, kind='stable').reset_index(drop=True)
