"""
Tests for run-configuration loading and validation.
"""

import pytest

from ml.config import RunConfig, load_run_config
from ml.data.attention_env import RewardSchedule
from ml.data.tracking_env import RewardMode
from ml.errors import ConfigError


@pytest.fixture
def write_config(tmp_path):
    def _write(text, name='run.cfg'):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return _write


class TestLoadRunConfig:
    def test_defaults_without_file(self):
        config = load_run_config()
        assert config == RunConfig()
        assert config.grid_config().width == 10
        assert config.network.hidden_sizes == [32, 32]

    def test_file_values_are_coerced(self, write_config):
        path = write_config(
            "[run]\nseed = 5\nn_tracks = 40\n\n"
            "[grid]\nwidth = 6\nheight = 7\nmiss_prob = 0\n\n"
            "[network]\nhidden_sizes = 16, 8\n\n"
            "[train]\nrecompute_rewards = true\nreward_mode = dan_plus_coverage\n"
        )
        config = load_run_config(path)
        assert config.run.seed == 5
        assert config.grid_config().height == 7
        assert config.network.hidden_sizes == [16, 8]
        assert config.train.recompute_rewards is True

    def test_overrides_win_and_none_is_ignored(self, write_config):
        path = write_config("[run]\nseed = 5\nn_tracks = 40\n")
        config = load_run_config(path, {'run': {'seed': 9, 'n_tracks': None}})
        assert config.run.seed == 9
        assert config.run.n_tracks == 40

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match='does not exist'):
            load_run_config(str(tmp_path / 'absent.cfg'))

    def test_unknown_section(self, write_config):
        with pytest.raises(ConfigError, match='policy'):
            load_run_config(write_config("[policy]\nkind = random\n"))

    def test_unknown_key(self, write_config):
        with pytest.raises(ConfigError, match='grid.depth'):
            load_run_config(write_config("[grid]\ndepth = 3\n"))

    @pytest.mark.parametrize("text,key", [
        ("[grid]\nmiss_prob = 1.5\n", 'grid.miss_prob'),
        ("[network]\nhidden_sizes = 16, 0\n", 'network.hidden_sizes'),
        ("[train]\nreward_mode = oracle\n", 'train.reward_mode'),
        ("[run]\nseed = -1\n", 'run.seed'),
    ])
    def test_invalid_values_name_the_key(self, write_config, text, key):
        with pytest.raises(ConfigError, match=key):
            load_run_config(write_config(text))

    def test_unparseable_file(self, write_config):
        with pytest.raises(ConfigError, match='cannot parse'):
            load_run_config(write_config("seed = 1\n"))

    @pytest.mark.parametrize("text", [
        "[glyphs]\nidx_images = a.idx\n",
        "[glyphs]\nidx_images = a.idx\nidx_labels = b.idx\nidx_test_labels = c.idx\n",
        "[glyphs]\nidx_test_images = a.idx\nidx_test_labels = b.idx\n",
    ])
    def test_idx_paths_come_in_pairs(self, write_config, text):
        with pytest.raises(ConfigError, match='glyphs'):
            load_run_config(write_config(text))

    def test_base_config_is_a_starting_point(self, write_config):
        base = load_run_config(overrides={'run': {'seed': 7}, 'grid': {'width': 6}}).model_dump()
        config = load_run_config(base=base, overrides={'run': {'multi_person': 2}})
        assert (config.run.seed, config.grid.width, config.run.multi_person) == (7, 6, 2)
        assert load_run_config(write_config("[run]\nseed = 1\n"), base=base).grid.width == 10


class TestTrainConfigResolution:
    def test_tracking_defaults_with_network(self, write_config):
        config = load_run_config(write_config("[network]\nhidden_sizes = 16\nrecurrent_size = 12\n"))
        train = config.train_config('tracking')
        assert train.hidden_sizes == (16,)
        assert train.recurrent_size == 12
        assert train.epsilon.value(0) == 0.1
        assert train.warmup_steps == 3000

    def test_attention_defaults_keep_schedule(self):
        train = load_run_config().train_config('attention')
        assert train.warmup_steps == 0
        assert train.epsilon.value(0) == 1.0
        assert train.epsilon.value(1500) == 0.05

    def test_partial_epsilon_override(self, write_config):
        config = load_run_config(write_config("[train]\nepsilon_final = 0.2\nreward_schedule = terminal\n"))
        train = config.train_config('attention')
        assert train.epsilon.initial == 1.0
        assert train.epsilon.final == 0.2
        assert train.epsilon.switch_episode == 1500
        assert train.reward_schedule is RewardSchedule.TERMINAL
        assert train.train_m_terminal_only

    def test_reward_mode_enum(self, write_config):
        train = load_run_config(write_config("[train]\nreward_mode = coverage\n")).train_config('tracking')
        assert train.reward_mode is RewardMode.COVERAGE

    def test_trace_checked_against_task_episode(self, write_config):
        config = load_run_config(write_config("[glimpse]\nepisode_len = 6\n\n[train]\ntrace_len = 10\nburn_in = 2\n"))
        assert config.train_config('tracking').trace_len == 10
        with pytest.raises(ConfigError, match='trace_len'):
            config.train_config('attention')
