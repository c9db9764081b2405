import pickle

import pytest
import yaml

from src.cbp import CbpConfig, UtilityKind
from src.config_loader import (
    ConfigLoader,
    ExperimentConfig,
    dump_config,
    parse_config,
    parse_overrides,
    parse_sweep_config,
    resolve_data_dir,
)
from src.errors import ConfigError, DataError, DivergenceError


class TestConfigLoader:

    def test_presets_and_settings(self, loader):
        assert 'scr-small' in loader.get_preset_names()
        assert loader.get_preset('pmnist-small')['hidden_sizes'] == [100, 100, 100]
        assert loader.get_setting('workers') == 1
        assert loader.get_setting('missing', 'fallback') == 'fallback'

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigLoader(tmp_path / 'nope.yaml').get_presets()


class TestExperimentConfig:

    def test_defaults(self, loader):
        cfg = parse_config(None, loader=loader)
        assert cfg.problem == 'scr'
        assert cfg.learner == 'bp' and cfg.optimizer == 'sgd'
        assert cfg.mitigations == []
        assert cfg.replacement_rate == 1e-4 and cfg.decay_rate == 0.99
        assert cfg.maturity_threshold == 100 and cfg.utility == 'overall'
        assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.epsilon == 1e-8
        assert cfg.n_tasks == 800 and cfg.examples_per_task == 60000
        assert cfg.total_steps == 3000000 and cfg.bin_size == 40000
        assert cfg.probe_size == 2000
        assert cfg.output_dir == 'results'

    def test_negative_replacement_rate(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig(replacement_rate=-1.0)
        assert exc.value.field == 'replacement_rate'

    @pytest.mark.parametrize('kwargs,field', [
        ({'problem': 'imagenet'}, 'problem'),
        ({'optimizer': 'rmsprop'}, 'optimizer'),
        ({'mitigations': ['batchnorm']}, 'mitigations'),
        ({'mitigations': ['cbp', 'dropout']}, 'mitigations'),
        ({'learner': 'linear_baseline', 'mitigations': ['cbp']}, 'mitigations'),
        ({'activation': 'softplus'}, 'activation'),
        ({'hidden_sizes': [5, 0]}, 'hidden_sizes'),
        ({'examples_per_task': 60001}, 'examples_per_task'),
        ({'probe_layers': [1]}, 'probe_layers'),
        ({'dropout_p': 1.0}, 'dropout_p'),
        ({'base_seed': -1}, 'base_seed'),
        ({'format': 'parquet'}, 'format'),
    ])
    def test_invalid(self, kwargs, field):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig(**kwargs)
        assert exc.value.field == field

    def test_sampling_with_replacement_allows_long_tasks(self):
        assert ExperimentConfig(examples_per_task=100000, with_replacement=True).examples_per_task == 100000

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict({'learning_rate': 0.1})
        assert exc.value.field == 'learning_rate'

    def test_round_trip(self, tmp_path, loader):
        cfg = ExperimentConfig(name='rt', problem='pmnist', hidden_sizes=[10, 10], activation='leaky_relu:0.1',
                               optimizer='adam', mitigations=['cbp'], utility='contribution',
                               step_size=0.003, n_tasks=4, examples_per_task=50, probe_layers=[1])
        path = tmp_path / 'rt.yaml'
        path.write_text(dump_config(cfg))
        assert parse_config(path, loader=loader) == cfg

    def test_replace(self):
        cfg = ExperimentConfig().replace(step_size='0.5', hidden_sizes=8)
        assert cfg.step_size == 0.5 and cfg.hidden_sizes == [8]

    def test_derived_settings(self):
        cfg = ExperimentConfig(mitigations=['cbp'], utility='adaptation', replacement_rate=1e-3)
        assert cfg.cbp_config() == CbpConfig(1e-3, 0.99, 100, UtilityKind.ADAPTATION)
        assert ExperimentConfig().cbp_config() is None

        sp = ExperimentConfig(mitigations=['shrink_perturb'], weight_decay=1e-4, perturb_variance=1e-6, dropout_p=0.2)
        assert sp.effective_weight_decay() == 1e-4
        assert sp.effective_perturb_variance() == 1e-6
        assert sp.effective_dropout() == 0.0

        plain = ExperimentConfig(weight_decay=1e-4)
        assert plain.effective_weight_decay() == 0.0
        assert ExperimentConfig(learner='linear_baseline').network_hidden_sizes() == []


class TestParsing:

    def test_overrides(self):
        overrides = parse_overrides(['--step_size=0.003', '--hidden-sizes=[100,100]',
                                     '--mitigations=cbp,l2', '--diagnostics=false'])
        cfg = ExperimentConfig.from_dict(overrides)
        assert cfg.step_size == 0.003
        assert cfg.hidden_sizes == [100, 100]
        assert cfg.mitigations == ['cbp', 'l2']
        assert cfg.diagnostics is False

    @pytest.mark.parametrize('arg', ['--step_size', 'step_size=1'])
    def test_malformed_override(self, arg):
        with pytest.raises(ConfigError):
            parse_overrides([arg])

    def test_bad_value(self):
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict({'n_runs': 'many'})
        assert exc.value.field == 'n_runs'

    def test_every_preset_parses(self, loader):
        for name in loader.get_preset_names():
            cfg, grid = parse_sweep_config(name, loader=loader)
            assert cfg.name == name
            for key, values in grid.items():
                for value in values:
                    cfg.replace(**{key: value})

    def test_preset_reference_merges(self, loader):
        cfg, grid = parse_sweep_config('pmnist-cbp-sweep', loader=loader)
        assert cfg.hidden_sizes == [100, 100, 100]
        assert cfg.mitigations == ['cbp']
        assert cfg.n_runs == 10 and cfg.extra_runs == 20
        assert grid == {'replacement_rate': [3e-3, 1e-3, 3e-4, 1e-4, 3e-5]}

    def test_file_with_preset_and_overrides(self, tmp_path, loader):
        path = tmp_path / 'mine.yaml'
        path.write_text(yaml.safe_dump({'preset': 'scr-small', 'activation': 'relu'}))
        cfg = parse_config(path, ['--n_runs=3'], loader=loader)
        assert cfg.name == 'mine'
        assert cfg.activation == 'relu' and cfg.total_steps == 1000000 and cfg.n_runs == 3

    def test_grid_needs_sweep(self, loader):
        with pytest.raises(ConfigError) as exc:
            parse_config('scr-step-size-sweep', loader=loader)
        assert exc.value.field == 'grid'

    def test_bad_grid(self, tmp_path, loader):
        path = tmp_path / 'g.yaml'
        path.write_text(yaml.safe_dump({'grid': {'step_size': []}}))
        with pytest.raises(ConfigError):
            parse_sweep_config(path, loader=loader)
        path.write_text(yaml.safe_dump({'grid': {'speed': [1, 2]}}))
        with pytest.raises(ConfigError):
            parse_sweep_config(path, loader=loader)

    def test_unknown_source(self, loader):
        with pytest.raises(ConfigError):
            parse_config('no-such-preset', loader=loader)

    def test_environment(self, monkeypatch, loader):
        monkeypatch.setenv('PLASTICITY_RESULTS_DIR', '/tmp/elsewhere')
        monkeypatch.setenv('PLASTICITY_WORKERS', '3')
        cfg = parse_config('scr-small', loader=loader)
        assert cfg.output_dir == '/tmp/elsewhere'
        assert cfg.workers == 3

    def test_data_dir_resolution(self, monkeypatch):
        assert str(resolve_data_dir()) == 'data/mnist'
        monkeypatch.setenv('PLASTICITY_DATA_DIR', '/data/env')
        assert str(resolve_data_dir()) == '/data/env'
        assert str(resolve_data_dir('/data/explicit')) == '/data/explicit'


class TestErrors:

    def test_errors_survive_pickling(self):
        for error in (ConfigError('step_size', 'bad'), DataError('magic', 'wrong', '/x'), DivergenceError(12)):
            copy = pickle.loads(pickle.dumps(error))
            assert type(copy) is type(error)
            assert str(copy) == str(error)
        assert pickle.loads(pickle.dumps(DataError('magic', 'wrong', '/x'))).path == '/x'
