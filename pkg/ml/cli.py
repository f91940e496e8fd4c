"""
Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
Every command writes its artifacts under --out together with a manifest JSON
listing the produced files and the resolved configuration.
"""

import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd

from ml.config import RunConfig, load_run_config
from ml.data.attention_env import GlyphDataset, RewardSchedule, load_idx, load_idx_splits, make_glyph_dataset
from ml.data.tracking_env import (GridConfig, RewardMode, default_camera_layout, generate_dataset,
                                  load_camera_layout, load_tracks, save_camera_layout, save_tracks)
from ml.errors import AnticipationError, ConfigError
from ml.inference.convex_bounds import PredictionRewardSpec, parse_sampler, verify_bound_sweep
from ml.models.dan_agent import DanAgent
from ml.models.neural import gradient_check, random_network
from ml.training.events import EventLog
from ml.training.experiments import (TrackingSetup, compare_attention, compare_tracking,
                                     median_episodes_to_threshold, one_sided_test, significance_table)
from ml.training.train_models import (AXES, BASELINES, evaluate_attention, evaluate_tracking,
                                      make_json_serializable, run_baseline, save_learning_curve,
                                      train_attention, train_tracking)

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_VERIFICATION = 2

TRACKS_TRAIN = 'train_tracks.jsonl'
TRACKS_TEST = 'test_tracks.jsonl'
CAMERAS_FILE = 'cameras.json'
GLYPHS_FILE = 'glyphs.json'
MANIFEST_FILE = 'manifest.json'


class VerificationFailed(click.ClickException):
    exit_code = EXIT_VERIFICATION


class ExitCodeGroup(click.Group):
    """Maps usage and configuration errors to exit 1 and verification failures to exit 2"""

    def main(self, *args, **kwargs):
        kwargs['standalone_mode'] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo('Aborted!', err=True)
            sys.exit(EXIT_USAGE)
        except click.UsageError as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except (AnticipationError, ValueError, OSError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_USAGE)
        sys.exit(rv if isinstance(rv, int) else 0)


def write_json(filepath: str, payload: Any):
    with open(filepath, 'w') as f:
        json.dump(make_json_serializable(payload), f, indent=2, sort_keys=True)
        f.write('\n')


def write_manifest(filepath: str, command: str, files: List[str], config: Optional[Dict[str, Any]] = None,
                   **extra: Any):
    write_json(filepath, {'command': command, 'files': sorted(files), 'config': config or {}, **extra})


def _overrides(seed: Optional[int], **sections: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    overrides = {name: values for name, values in sections.items() if values}
    if seed is not None:
        overrides.setdefault('run', {})['seed'] = seed
    return overrides


def _cameras(rc: RunConfig, grid: GridConfig):
    if rc.cameras.layout:
        return load_camera_layout(rc.cameras.layout, grid)
    return default_camera_layout(grid, coverage=rc.cameras.coverage, overlap=rc.cameras.overlap)


def _tracking_data(rc: RunConfig, grid: GridConfig, data_dir: Optional[str]):
    if data_dir:
        cameras = load_camera_layout(os.path.join(data_dir, CAMERAS_FILE), grid)
        return (cameras, load_tracks(os.path.join(data_dir, TRACKS_TRAIN)),
                load_tracks(os.path.join(data_dir, TRACKS_TEST)))
    train, test = generate_dataset(grid, rc.run.n_tracks, rc.run.seed)
    return _cameras(rc, grid), train, test


def _glyph_data(rc: RunConfig, data_dir: Optional[str]) -> GlyphDataset:
    if data_dir:
        return GlyphDataset.load(os.path.join(data_dir, GLYPHS_FILE))
    glyphs = rc.glyphs
    if glyphs.idx_test_images:
        return load_idx_splits(glyphs.idx_images, glyphs.idx_labels, glyphs.idx_test_images, glyphs.idx_test_labels)
    if glyphs.idx_images:
        return load_idx(glyphs.idx_images, glyphs.idx_labels, test_fraction=glyphs.test_fraction, seed=rc.run.seed)
    return make_glyph_dataset(rc.run.seed, glyphs.n_per_class, glyphs.pixel_noise, glyphs.test_fraction)


def _training_run(checkpoint_dir: str) -> Tuple[Optional[RunConfig], Optional[str]]:
    """Resolved config and data directory recorded by the train command that wrote checkpoint_dir"""
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_dir)), MANIFEST_FILE)
    if not os.path.exists(path):
        return None, None
    with open(path, 'r') as f:
        manifest = json.load(f)
    if not str(manifest.get('command', '')).startswith('train'):
        return None, None
    return load_run_config(base=manifest.get('config')), manifest.get('data')


@click.group(cls=ExitCodeGroup)
@click.option('--verbose', is_flag=True, help='Log at DEBUG level.')
def cli(verbose: bool):
    """Anticipatory sensing: tangent bounds, belief filters and DAN training."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )


@cli.command('verify-bounds')
@click.option('--ny', 'n_y', type=int, required=True, help='Number of target values.')
@click.option('--r-correct', type=float, default=1.0, show_default=True)
@click.option('--r-incorrect', type=float, default=0.0, show_default=True)
@click.option('--sampler', default='grid:0.01', show_default=True, help='grid:STEP or random:N')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--n-jobs', type=int, default=1, show_default=True)
@click.option('--out', 'out_path', default='report.json', show_default=True, type=click.Path(dir_okay=False))
def verify_bounds(n_y: int, r_correct: float, r_incorrect: float, sampler: str, seed: int, n_jobs: int,
                  out_path: str):
    """Sweep the simplex and check the 0-1 tangent bound's worst-case error."""
    spec = PredictionRewardSpec(r_correct=r_correct, r_incorrect=r_incorrect, n_y=n_y)
    report = verify_bound_sweep(spec, parse_sampler(sampler, seed), n_jobs=n_jobs)
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    report.save(out_path)
    write_manifest(os.path.splitext(out_path)[0] + '.manifest.json', 'verify-bounds',
                   [os.path.basename(out_path)],
                   {'n_y': n_y, 'r_correct': r_correct, 'r_incorrect': r_incorrect, 'sampler': sampler, 'seed': seed})
    click.echo(f"theorem_bound={report.theorem_bound:.6f} max_error={report.max_error:.6f} "
               f"samples={report.samples_checked} holds={report.holds}")
    if not report.holds:
        raise VerificationFailed(f"bound violated: max error {report.max_error!r} exceeds {report.theorem_bound!r}")


@cli.command('gen-data')
@click.argument('kind', type=click.Choice(['tracking', 'glyphs']))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int)
@click.option('--n-tracks', type=int, help='Overrides [run] n_tracks.')
@click.option('--n-per-class', type=int, help='Overrides [glyphs] n_per_class.')
@click.option('--noise', type=float, help='Overrides [glyphs] pixel_noise.')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
def gen_data(kind: str, config_path: Optional[str], seed: Optional[int], n_tracks: Optional[int],
             n_per_class: Optional[int], noise: Optional[float], out_dir: str):
    """Generate tracks plus a camera layout, or a glyph dataset."""
    rc = load_run_config(config_path, _overrides(
        seed, run={'n_tracks': n_tracks} if n_tracks else {},
        glyphs={key: value for key, value in (('n_per_class', n_per_class), ('pixel_noise', noise)) if value is not None},
    ))
    os.makedirs(out_dir, exist_ok=True)
    if kind == 'tracking':
        grid = rc.grid_config()
        cameras, train, test = _tracking_data(rc, grid, None)
        save_tracks(os.path.join(out_dir, TRACKS_TRAIN), train)
        save_tracks(os.path.join(out_dir, TRACKS_TEST), test)
        save_camera_layout(os.path.join(out_dir, CAMERAS_FILE), grid, cameras)
        files, extra = [TRACKS_TRAIN, TRACKS_TEST, CAMERAS_FILE], {'n_train': len(train), 'n_test': len(test)}
        click.echo(f"Wrote {len(train)} train / {len(test)} test tracks and {len(cameras)} cameras to {out_dir}")
    else:
        dataset = _glyph_data(rc, None)
        dataset.save(os.path.join(out_dir, GLYPHS_FILE))
        files = [GLYPHS_FILE]
        extra = {'n_images': len(dataset), 'pixel_noise': dataset.pixel_noise}
        click.echo(f"Wrote {len(dataset)} glyphs (pixel noise {dataset.pixel_noise}) to {out_dir}")
    write_manifest(os.path.join(out_dir, MANIFEST_FILE), f'gen-data {kind}', files, rc.model_dump(), **extra)


@cli.command('train')
@click.argument('task', type=click.Choice(['tracking', 'attention']))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int)
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--episodes', type=int, help='Overrides [train] episodes.')
@click.option('--reward', type=click.Choice([s.value for s in RewardSchedule]), help='Reward schedule.')
@click.option('--reward-mode', type=click.Choice([m.value for m in RewardMode]))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
def train(task: str, config_path: Optional[str], seed: Optional[int], data_dir: Optional[str],
          episodes: Optional[int], reward: Optional[str], reward_mode: Optional[str], out_dir: str):
    """Train DAN agents; writes curves.csv, events.jsonl and checkpoints."""
    rc = load_run_config(config_path, _overrides(
        seed, train={key: value for key, value in
                     (('episodes', episodes), ('reward_schedule', reward), ('reward_mode', reward_mode))
                     if value is not None},
    ))
    config = rc.train_config(task)
    os.makedirs(out_dir, exist_ok=True)
    checkpoint_dir = os.path.join(out_dir, 'checkpoints')
    with EventLog(os.path.join(out_dir, 'events.jsonl')) as events:
        if task == 'tracking':
            grid = rc.grid_config()
            cameras, train_tracks, test_tracks = _tracking_data(rc, grid, data_dir)
            run = train_tracking(grid, cameras, train_tracks, test_tracks, config, rc.run.seed, events, checkpoint_dir)
            save_camera_layout(os.path.join(checkpoint_dir, CAMERAS_FILE), grid, cameras)
            checkpoints = [f'{axis}_{net}.json' for axis in AXES for net in ('q', 'm')] + [CAMERAS_FILE]
        else:
            dataset = _glyph_data(rc, data_dir)
            run = train_attention(rc.glimpse_spec(), dataset, config, rc.run.seed, events, checkpoint_dir)
            checkpoints = ['attention_q.json', 'attention_m.json']
    save_learning_curve(run.curve, os.path.join(out_dir, 'curves.csv'))
    write_json(os.path.join(out_dir, 'final_scores.json'), run.final_scores.to_dict())
    files = ['curves.csv', 'events.jsonl', 'final_scores.json'] + [f'checkpoints/{name}' for name in checkpoints]
    write_manifest(os.path.join(out_dir, MANIFEST_FILE), f'train {task}', files, rc.model_dump(),
                   data=os.path.abspath(data_dir) if data_dir else None)
    click.echo(f"Trained {task} for {config.episodes} episodes; final evaluation: "
               f"reward {run.curve['mean_eval_reward'].iloc[-1]:.4f}, "
               f"accuracy {run.curve['mean_eval_accuracy'].iloc[-1]:.4f}")


@cli.command('eval')
@click.option('--checkpoint', 'checkpoint_dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--multi-person', type=int, help='People tracked at once (tracking only).')
@click.option('--seed', type=int)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False))
def evaluate(checkpoint_dir: str, data_dir: Optional[str], config_path: Optional[str],
             multi_person: Optional[int], seed: Optional[int], out_dir: Optional[str]):
    """Evaluate saved agents on held-out data and print mean rewards.

    Without --data the held-out split of the training run is used: the data
    directory it trained on, or data regenerated from its resolved config.
    """
    train_rc, train_data = _training_run(checkpoint_dir)
    if data_dir is None and train_rc is None:
        raise ConfigError(f"no training manifest next to {checkpoint_dir}; pass --data")
    data_dir = data_dir or train_data
    rc = load_run_config(config_path, _overrides(seed, run={'multi_person': multi_person} if multi_person else {}),
                         base=train_rc.model_dump() if train_rc is not None else None)
    data_rc = train_rc if train_rc is not None else rc
    if os.path.exists(os.path.join(checkpoint_dir, 'attention_q.json')):
        agent = DanAgent.load(checkpoint_dir, prefix='attention')
        images, labels = _glyph_data(data_rc, data_dir).split('test')
        scores = evaluate_attention(agent, rc.glimpse_spec(), images, labels, seed=rc.run.seed)
        click.echo(f"continuous return {scores.continuous_return:.4f}, terminal return {scores.terminal_return:.4f}, "
                   f"accuracy {scores.accuracy:.4f}")
    else:
        grid = rc.grid_config()
        agents = {axis: DanAgent.load(checkpoint_dir, prefix=axis) for axis in AXES}
        if data_dir:
            cameras, _, test_tracks = _tracking_data(rc, grid, data_dir)
        else:
            cameras = load_camera_layout(os.path.join(checkpoint_dir, CAMERAS_FILE), grid)
            _, test_tracks = generate_dataset(data_rc.grid_config(), data_rc.run.n_tracks, data_rc.run.seed)
        scores = evaluate_tracking(agents, grid, cameras, test_tracks, multi_person=rc.run.multi_person,
                                   seed=rc.run.seed)
        for person, value in enumerate(scores.per_person_rewards):
            click.echo(f"person {person}: mean episode reward {value:.4f}")
        click.echo(f"average: mean episode reward {scores.mean_reward:.4f}, accuracy {scores.mean_accuracy:.4f}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, 'scores.json'), scores.to_dict())
        write_manifest(os.path.join(out_dir, MANIFEST_FILE), 'eval', ['scores.json'], rc.model_dump())


@cli.command('baseline')
@click.argument('task', type=click.Choice(['tracking']))
@click.option('--kind', required=True, type=click.Choice(list(BASELINES)))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int)
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False))
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
def baseline(task: str, kind: str, config_path: Optional[str], seed: Optional[int], data_dir: Optional[str],
             out_dir: str):
    """Run a tracking baseline: random_policy, coverage or exact_oracle."""
    rc = load_run_config(config_path, _overrides(seed))
    grid = rc.grid_config()
    cameras, train_tracks, test_tracks = _tracking_data(rc, grid, data_dir)
    os.makedirs(out_dir, exist_ok=True)
    with EventLog(os.path.join(out_dir, 'events.jsonl')) as events:
        result = run_baseline(kind, grid, cameras, train_tracks, test_tracks, rc.train_config(task),
                              rc.run.seed, events)
    files = ['events.jsonl', 'scores.json']
    write_json(os.path.join(out_dir, 'scores.json'), result.scores.to_dict())
    if result.curve is not None:
        save_learning_curve(result.curve, os.path.join(out_dir, 'curves.csv'))
        files.append('curves.csv')
    write_manifest(os.path.join(out_dir, MANIFEST_FILE), f'baseline {task} {kind}', files, rc.model_dump())
    click.echo(f"{kind}: mean episode reward {result.scores.mean_reward:.4f}, "
               f"prediction reward {result.scores.prediction_reward:.4f}")


@cli.command('compare')
@click.argument('task', type=click.Choice(['tracking', 'attention']))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', type=int, help='First seed; runs use seed, seed+1, ...')
@click.option('--seeds', 'n_seeds', type=int, default=10, show_default=True)
@click.option('--n-jobs', type=int, help='Overrides [run] n_jobs.')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False))
def compare(task: str, config_path: Optional[str], seed: Optional[int], n_seeds: int, n_jobs: Optional[int],
            out_dir: str):
    """Multi-seed comparison with one-sided significance tests."""
    rc = load_run_config(config_path, _overrides(seed, run={'n_jobs': n_jobs} if n_jobs else {}))
    seeds = [rc.run.seed + i for i in range(n_seeds)]
    config = rc.train_config(task)
    os.makedirs(out_dir, exist_ok=True)
    if task == 'tracking':
        grid = rc.grid_config()
        cameras, train_tracks, test_tracks = _tracking_data(rc, grid, None)
        setup = TrackingSetup(grid, cameras, train_tracks, test_tracks, config)
        results = compare_tracking(setup, seeds, n_jobs=rc.run.n_jobs)
        table = significance_table(results, [('dan', 'random_policy'), ('dan', 'coverage'),
                                             ('dan_plus_coverage', 'random_policy')])
    else:
        results = compare_attention(rc.glimpse_spec(), _glyph_data(rc, None), config, seeds, n_jobs=rc.run.n_jobs)
        continuous = results.loc[results['schedule'] == 'continuous', 'continuous_return'].to_numpy()
        terminal = results.loc[results['schedule'] == 'terminal', 'continuous_return'].to_numpy()
        statistic, p_value = one_sided_test(continuous, terminal)
        cap = config.episodes
        table = pd.DataFrame([{
            'median_episodes_continuous': median_episodes_to_threshold(results, 'continuous', cap),
            'median_episodes_terminal': median_episodes_to_threshold(results, 'terminal', cap),
            't_statistic': statistic, 'p_value': p_value,
        }])
    results.to_csv(os.path.join(out_dir, 'results.csv'), index=False, float_format='%.6f')
    table.to_csv(os.path.join(out_dir, 'significance.csv'), index=False, float_format='%.6f')
    write_manifest(os.path.join(out_dir, MANIFEST_FILE), f'compare {task}', ['results.csv', 'significance.csv'],
                   rc.model_dump(), seeds=seeds)
    click.echo(table.to_string(index=False))


@cli.command('grad-check')
@click.option('--trials', type=int, default=20, show_default=True)
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--inject-sign-flip', is_flag=True, hidden=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False))
def grad_check(trials: int, seed: int, inject_sign_flip: bool, out_dir: Optional[str]):
    """Finite-difference check of backward on random recurrent networks."""
    reports = []
    for trial in range(trials):
        spec, params, inputs = random_network(np.random.default_rng([seed, trial]))
        reports.append(gradient_check(spec, params, inputs, seed=trial, sign_flip=inject_sign_flip and trial == 0))
    worst = max(reports, key=lambda r: r.max_rel_error)
    passed = all(r.passed for r in reports)
    click.echo(f"{trials} networks, {sum(r.entries_checked for r in reports)} entries, "
               f"max relative error {worst.max_rel_error:.3e} at {worst.worst_param}{list(worst.worst_index)}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_json(os.path.join(out_dir, 'grad_check.json'),
                   {'passed': passed, 'trials': [r.to_dict() for r in reports]})
        write_manifest(os.path.join(out_dir, MANIFEST_FILE), 'grad-check', ['grad_check.json'],
                       {'trials': trials, 'seed': seed})
    if not passed:
        raise VerificationFailed(f"gradient mismatch: relative error {worst.max_rel_error:.3e} "
                                 f"in {worst.worst_param} at index {list(worst.worst_index)}")


def main():
    cli(prog_name='ml')


if __name__ == '__main__':
    main()
