"""
Long-running checks of the plasticity effects at desk scale.

Deselected by default; run with `pytest -m slow`. Runs use one worker per
CPU and still take hours.
"""

import os

import numpy as np
import pytest

from src.config_loader import parse_config, parse_sweep_config, resolve_data_dir
from src.errors import DataError
from src.experiment import run_experiment
from src.problems.pmnist import find_mnist_files
from src.sweep import sweep


pytestmark = pytest.mark.slow

WORKERS = os.cpu_count() or 1


def late_vs_floor(errors: np.ndarray):
    """Mean of the last five bins and the lowest bin after the third"""
    return float(errors[-5:].mean()), float(errors[3:].min())


def paired_drop(runs, metric: str, early: slice, late: slice) -> np.ndarray:
    """Per-run peak over the early tasks minus the mean over the late ones"""
    return np.array([
        max(run.series[metric][early]) - float(np.mean(run.series[metric][late]))
        for run in runs if not run.diverged
    ])


def standard_error(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / np.sqrt(len(values)))


@pytest.fixture(scope='module')
def regression_sweeps(tmp_path_factory):
    """Best-step-size backprop results for tanh and relu"""
    results = {}
    for activation in ('tanh', 'relu'):
        cfg, grid = parse_sweep_config('scr-step-size-sweep', [
            f'--activation={activation}', f'--workers={WORKERS}',
            f'--output_dir={tmp_path_factory.mktemp(activation)}',
        ])
        results[activation] = sweep(cfg, grid, save=False)
    return results


@pytest.fixture(scope='module')
def mnist_data_dir():
    data_dir = resolve_data_dir()
    try:
        find_mnist_files(data_dir)
    except DataError:
        pytest.skip("MNIST files not downloaded")
    return str(data_dir)


@pytest.fixture(scope='module')
def pmnist_results(mnist_data_dir):
    base = parse_config('pmnist-small', [f'--workers={WORKERS}', f'--data_dir={mnist_data_dir}'])
    bp = run_experiment(base, save=False)
    cbp = run_experiment(base.replace(mitigations=['cbp'], replacement_rate=1e-4), save=False)
    return bp, cbp


class TestSlowlyChangingRegression:

    @pytest.mark.parametrize('activation', ['tanh', 'relu'])
    def test_backprop_error_climbs_back(self, regression_sweeps, activation):
        result = regression_sweeps[activation]
        assert result.best is not None
        errors = result.points[result.best].summary.metrics['squared_error'].mean
        late, floor = late_vs_floor(errors)
        assert late >= 1.1 * floor

    @pytest.mark.parametrize('activation', ['tanh', 'relu'])
    def test_cbp_holds_its_floor(self, regression_sweeps, activation):
        result = regression_sweeps[activation]
        best = result.points[result.best]
        cfg = parse_config('scr-small', [
            f'--activation={activation}', f'--workers={WORKERS}',
            f'--step_size={best.params["step_size"]}', '--mitigations=cbp',
            '--replacement_rate=1e-4', '--decay_rate=0.99', '--maturity_threshold=100',
        ])
        cbp = run_experiment(cfg, save=False)
        assert not cbp.summary.diverged_runs

        errors = cbp.summary.metrics['squared_error'].mean
        late, floor = late_vs_floor(errors)
        assert late <= 1.05 * floor

        bp_late, _ = late_vs_floor(best.summary.metrics['squared_error'].mean)
        assert late < bp_late


class TestPermutedMnist:

    def test_backprop_accuracy_declines(self, pmnist_results):
        bp, _ = pmnist_results
        drops = paired_drop(bp.runs, 'online_accuracy', slice(0, 15), slice(39, 50))
        assert drops.mean() > 2 * standard_error(drops)

    def test_cbp_keeps_accuracy(self, pmnist_results):
        _, cbp = pmnist_results
        drops = paired_drop(cbp.runs, 'online_accuracy', slice(0, 15), slice(39, 50))
        assert drops.mean() <= 2 * standard_error(drops)

    def test_diagnostics_track_the_decline(self, pmnist_results):
        bp, cbp = pmnist_results
        metrics = bp.summary.metrics
        dead = metrics['dead_fraction'].mean
        magnitude = metrics['avg_weight_magnitude'].mean
        rank = metrics['effective_rank'].mean
        assert dead[-5:].mean() > dead[:5].mean()
        assert magnitude[-5:].mean() > magnitude[:5].mean()
        assert rank[-5:].mean() < rank[:5].mean()

        assert cbp.summary.metrics['dead_fraction'].mean[-5:].mean() <= 0.01


class TestReproducibility:

    def test_preset_metrics_are_byte_identical(self, tmp_path):
        cfg = parse_config('scr-small', ['--n_runs=2', f'--workers={WORKERS}'])
        run_experiment(cfg, tmp_path / 'first')
        run_experiment(cfg, tmp_path / 'second')
        for name in ('metrics.csv', 'summary.csv'):
            assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()
