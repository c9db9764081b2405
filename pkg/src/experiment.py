"""
Replicated experiment runs.

Each run gets its own seed (base_seed + run index) and derives one generator
per concern from it, so switching a mitigation on or off never shifts the
randomness of the data stream or the initial weights.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .config_loader import ExperimentConfig, dump_config, resolve_data_dir
from .diagnostics import DiagnosticsConfig, DiagnosticsRecord, probe_network
from .errors import DivergenceError, UndefinedRankError
from .learner import Learner
from .metrics import (
    MetricsRecord,
    RunSummary,
    bin_series,
    export,
    layer_metric,
    summarize_runs,
    write_records,
)
from .network import ActivationKind, init_kaiming_uniform
from .optim import (
    AdamOptimizer,
    AdamState,
    Optimizer,
    RegularizerConfig,
    SgdConfig,
    SgdOptimizer,
)
from .problems import BaseProblem, PermutedMnistProblem, SlowlyChangingRegression
from .problems.pmnist import find_mnist_files


logger = logging.getLogger(__name__)

# Map problem names to stream classes
PROBLEM_MAP = {
    'scr': SlowlyChangingRegression,
    'pmnist': PermutedMnistProblem,
}

# Sub-stream ids, one generator per concern
RNG_STREAMS = {
    'init': 0,
    'data': 1,
    'dropout': 2,
    'cbp': 3,
    'probe': 4,
    'perturb': 5,
}


def run_seed(cfg: ExperimentConfig, run_index: int) -> int:
    return cfg.base_seed + run_index


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng((seed, RNG_STREAMS[name]))


@dataclass
class RunResult:
    """
    Outcome of one run.

    series maps each metric to its per-bin values; it is what aggregation
    reads. records hold the same values in export order.
    """
    run: int
    seed: int
    records: List[MetricsRecord] = field(default_factory=list)
    series: Dict[str, List[float]] = field(default_factory=dict)
    steps: int = 0
    replacements: int = 0
    diverged: bool = False
    diverged_at: Optional[int] = None
    wall_clock: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'run': self.run,
            'seed': self.seed,
            'steps': self.steps,
            'replacements': self.replacements,
            'diverged': self.diverged,
            'diverged_at': self.diverged_at,
            'wall_clock': self.wall_clock,
        }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: List[RunResult]
    summary: RunSummary
    paths: List[Path] = field(default_factory=list)


def build_optimizer(cfg: ExperimentConfig, net, seed: int) -> Optimizer:
    reg = RegularizerConfig(
        weight_decay=cfg.effective_weight_decay(),
        perturb_variance=cfg.effective_perturb_variance(),
        dropout_p=cfg.effective_dropout(),
        noise_after_step=cfg.noise_after_step,
    )
    rng = stream_rng(seed, 'perturb') if reg.perturb_variance > 0.0 else None
    if cfg.optimizer == 'adam':
        state = AdamState.zeros(net, cfg.step_size, cfg.beta1, cfg.beta2, cfg.epsilon)
        return AdamOptimizer(state, reg, rng)
    return SgdOptimizer(net, SgdConfig(cfg.step_size, cfg.momentum), reg, rng)


def build_learner(cfg: ExperimentConfig, problem: BaseProblem, seed: int) -> Learner:
    """Network, optimizer and mitigations for one run"""
    hidden = cfg.network_hidden_sizes()
    dims = [problem.input_size, *hidden, problem.output_size]
    activations = [ActivationKind.parse(cfg.activation)] * len(hidden) + [ActivationKind('linear')]
    net = init_kaiming_uniform(dims, activations, stream_rng(seed, 'init'))

    dropout_p = cfg.effective_dropout()
    cbp = cfg.cbp_config()
    return Learner(
        net,
        build_optimizer(cfg, net, seed),
        problem.loss,
        dropout_p=dropout_p,
        cbp=cbp,
        dropout_rng=stream_rng(seed, 'dropout') if dropout_p > 0.0 else None,
        cbp_rng=stream_rng(seed, 'cbp') if cbp is not None else None,
    )


def _diagnostic_values(diag: DiagnosticsRecord) -> Dict[str, float]:
    """Flatten one boundary into metric values; silent layers only add to silent_layers"""
    values = {'avg_weight_magnitude': diag.avg_weight_magnitude}
    if not diag.layers:
        return values
    values['silent_layers'] = float(len(diag.silent_layers))
    per_layer = {
        'effective_rank': (diag.rank_layers, diag.effective_rank),
        'dead_fraction': (diag.layers, diag.dead_fraction),
        'saturated_fraction': (diag.layers, diag.saturated_fraction),
    }
    for metric, (layers, layer_values) in per_layer.items():
        if not layer_values:
            continue
        values[metric] = float(np.mean(layer_values))
        if len(diag.layers) > 1:
            for layer, value in zip(layers, layer_values):
                values[layer_metric(metric, layer)] = float(value)
    return values


class RunRecorder:
    """Collects per-example outcomes and boundary diagnostics of one run"""

    def __init__(self, run: int, classification: bool, bin_size: int):
        self.run = run
        self.classification = classification
        self.bin_size = bin_size
        self.values: List[float] = []
        self.task_correct: List[int] = []
        self.task_seen: List[int] = []
        self.diagnostics: Dict[int, Dict[str, float]] = {}
        self.diagnostic_steps: Dict[int, int] = {}

    def add(self, task: int, value: float):
        if self.classification:
            while len(self.task_seen) <= task:
                self.task_correct.append(0)
                self.task_seen.append(0)
            self.task_correct[task] += int(value)
            self.task_seen[task] += 1
        else:
            self.values.append(value)

    def add_diagnostics(self, bin_index: int, step: int, diag: DiagnosticsRecord):
        self.diagnostics[bin_index] = _diagnostic_values(diag)
        self.diagnostic_steps[bin_index] = step

    def finish(self, result: RunResult, completed_tasks: Optional[int] = None):
        """Fill result.records and result.series; unfinished tasks and bins are dropped"""
        if self.classification:
            n_bins = len(self.task_seen) if completed_tasks is None else min(completed_tasks, len(self.task_seen))
            performance = [self.task_correct[t] / self.task_seen[t] for t in range(n_bins)]
            ends = list(np.cumsum(self.task_seen[:n_bins]))
            metric = 'online_accuracy'
        else:
            performance = list(bin_series(self.values, self.bin_size))
            n_bins = len(performance)
            ends = [(b + 1) * self.bin_size for b in range(n_bins)]
            metric = 'squared_error'

        series: Dict[str, List[float]] = {metric: [float(v) for v in performance]}
        # A diagnostic missing from a bin stays a NaN gap so series remain bin-aligned
        names = list(dict.fromkeys(n for b in range(n_bins) for n in self.diagnostics.get(b, {})))
        for name in names:
            series[name] = []
        records = []
        for b in range(n_bins):
            diag = self.diagnostics.get(b, {})
            for name in names:
                series[name].append(diag.get(name, np.nan))
            for name, value in diag.items():
                records.append(MetricsRecord(self.run, b, self.diagnostic_steps[b], name, value))
            records.append(MetricsRecord(self.run, b, int(ends[b]), metric, float(performance[b])))
        result.records = records
        result.series = series


def run_single(cfg: ExperimentConfig, run_index: int) -> RunResult:
    """
    One seeded run over the whole stream.

    Diagnostics are taken before the first example of every task (or bin).
    A non-finite loss or weight aborts the run; bins finished before that
    are kept and the result is marked diverged.
    """
    seed = run_seed(cfg, run_index)
    start = time.perf_counter()
    problem = PROBLEM_MAP[cfg.problem].from_experiment(cfg, stream_rng(seed, 'data'))
    learner = build_learner(cfg, problem, seed)
    probe_rng = stream_rng(seed, 'probe')
    diag_cfg = None
    if cfg.diagnostics:
        diag_cfg = DiagnosticsConfig(cfg.probe_size, cfg.saturation_epsilon, cfg.probe_layers)

    logger.info("Run %d (seed %d): %s, %d steps", run_index, seed, problem.name, problem.total_steps)
    recorder = RunRecorder(run_index, problem.classification, cfg.bin_size)
    result = RunResult(run_index, seed)
    current_bin = -1
    try:
        for example in problem.examples():
            bin_index = example.task if problem.classification else (example.step - 1) // cfg.bin_size
            if bin_index != current_bin:
                current_bin = bin_index
                logger.debug("Run %d: bin %d at step %d", run_index, bin_index, example.step)
                if not learner.net.is_finite():
                    raise DivergenceError(example.step, "non-finite weights")
                if diag_cfg is not None:
                    probe = problem.probe_inputs(probe_rng, diag_cfg.sample_size)
                    try:
                        diag = probe_network(learner.net, probe, diag_cfg, bin_index, example.step - 1)
                    except UndefinedRankError as e:
                        raise DivergenceError(example.step, str(e))
                    recorder.add_diagnostics(bin_index, example.step - 1, diag)

            outcome = learner.train_step(example.x, example.target)
            if not math.isfinite(outcome.loss):
                raise DivergenceError(example.step, "non-finite loss")
            if problem.classification:
                recorder.add(example.task, float(np.argmax(outcome.prediction) == example.target))
            else:
                recorder.add(example.task, outcome.loss)
            result.steps = example.step
        recorder.finish(result)
    except DivergenceError as e:
        logger.warning("Run %d %s", run_index, e)
        result.diverged = True
        result.diverged_at = e.step
        recorder.finish(result, completed_tasks=max(current_bin, 0))

    result.replacements = learner.replacements
    result.wall_clock = time.perf_counter() - start
    logger.info("Run %d finished: %d steps, %d replacements, %.1fs",
                run_index, result.steps, result.replacements, result.wall_clock)
    return result


def run_all(cfg: ExperimentConfig) -> List[RunResult]:
    """Every run of cfg, fanned out over worker processes, in run order"""
    if cfg.problem == 'pmnist':
        # Fail in this process, before any worker starts
        find_mnist_files(resolve_data_dir(cfg.data_dir))

    workers = min(cfg.workers, cfg.n_runs)
    if workers <= 1:
        return [run_single(cfg, i) for i in range(cfg.n_runs)]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(run_single, cfg, i) for i in range(cfg.n_runs)]
        return [f.result() for f in futures]


def summarize(cfg: ExperimentConfig, runs: List[RunResult], wall_clock: float) -> RunSummary:
    return summarize_runs(
        {r.run: r.series for r in runs},
        [r.run for r in runs if r.diverged],
        cfg.to_dict(),
        wall_clock,
    )


def save_results(cfg: ExperimentConfig, runs: List[RunResult], summary: RunSummary,
                 out_dir: Path) -> List[Path]:
    """
    Write one record file per run, the combined records, the summary and a config echo.

    Returns:
        Paths written
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in runs:
        paths.append(write_records(r.records, out_dir / f"run_{r.run:03d}.{cfg.format}", cfg.format))

    all_records = [rec for r in runs for rec in r.records]
    summary.config = {**summary.config, 'runs': [r.to_dict() for r in runs]}
    paths.extend(export(all_records, summary, out_dir, cfg.format))

    config_path = out_dir / 'config.yaml'
    config_path.write_text(dump_config(cfg), encoding='utf-8')
    paths.append(config_path)
    return paths


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None,
                   save: bool = True) -> ExperimentResult:
    """
    Run every seed of cfg and aggregate.

    Args:
        cfg: Validated configuration
        out_dir: Where files go. Defaults to {output_dir}/{name}
        save: Write files at all

    Returns:
        ExperimentResult with the per-run results and the summary
    """
    start = time.perf_counter()
    runs = run_all(cfg)
    summary = summarize(cfg, runs, time.perf_counter() - start)
    if summary.diverged_runs:
        logger.warning("%d of %d runs diverged: %s", len(summary.diverged_runs), cfg.n_runs,
                       summary.diverged_runs)

    paths = []
    if save:
        out_dir = Path(out_dir) if out_dir is not None else Path(cfg.output_dir) / cfg.name
        paths = save_results(cfg, runs, summary, out_dir)
    return ExperimentResult(cfg, runs, summary, paths)
