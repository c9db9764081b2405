"""
Metric records, binning, cross-run aggregation and CSV/JSON export.

Record files have the columns run,bin,step,metric,value; summary files
metric,bin,mean,stderr. Floats are written with full round-trip precision,
so identical runs give byte-identical files.
"""

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import PlasticityError, ShapeError


METRIC_NAMES = (
    'squared_error',
    'online_accuracy',
    'dead_fraction',
    'saturated_fraction',
    'avg_weight_magnitude',
    'effective_rank',
    'silent_layers',
)
RECORD_COLUMNS = ['run', 'bin', 'step', 'metric', 'value']
SUMMARY_COLUMNS = ['metric', 'bin', 'mean', 'stderr']

# Per-layer variants are written as e.g. effective_rank_l2
_LAYER_SUFFIX = re.compile(r'_l\d+$')


def layer_metric(metric: str, layer: int) -> str:
    return f"{metric}_l{layer}"


def base_metric(metric: str) -> str:
    return _LAYER_SUFFIX.sub('', metric)


@dataclass(frozen=True)
class MetricsRecord:
    """
    One scalar observation.

    Attributes:
        run: Run index within the experiment
        bin: Task index (Permuted MNIST) or bin index (regression)
        step: Last example counted in the bin, or the step a diagnostic was taken at
        metric: One of METRIC_NAMES, optionally with a _l<layer> suffix
        value: Finite float
    """
    run: int
    bin: int
    step: int
    metric: str
    value: float

    def __post_init__(self):
        if base_metric(self.metric) not in METRIC_NAMES:
            raise ValueError(f"unknown metric '{self.metric}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class AggregateSeries:
    """Per-bin mean across runs; stderr is None with fewer than two runs. NaN marks a bin no run observed"""
    mean: np.ndarray
    stderr: Optional[np.ndarray]
    n_runs: int

    def overall(self) -> float:
        return float(pd.Series(self.mean, dtype=np.float64).mean())


@dataclass
class RunSummary:
    """
    Aggregates of one experiment.

    Attributes:
        metrics: metric name -> AggregateSeries over the non-diverged runs
        config: Resolved configuration echo
        n_runs: Runs attempted
        diverged_runs: Indices of runs that hit non-finite values
        wall_clock: Seconds spent
    """
    metrics: Dict[str, AggregateSeries] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    n_runs: int = 0
    diverged_runs: List[int] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def all_diverged(self) -> bool:
        return self.n_runs > 0 and len(self.diverged_runs) == self.n_runs

    def overall(self, metric: str) -> float:
        """Mean over all bins of the run-averaged metric"""
        if metric not in self.metrics:
            return float('nan')
        return self.metrics[metric].overall()

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for metric in sorted(self.metrics):
            series = self.metrics[metric]
            for i, mean in enumerate(series.mean):
                stderr = None if series.stderr is None else float(series.stderr[i])
                rows.append({'metric': metric, 'bin': i, 'mean': float(mean), 'stderr': stderr})
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def meta(self) -> Dict[str, Any]:
        return {
            'n_runs': self.n_runs,
            'diverged_runs': list(self.diverged_runs),
            'wall_clock': self.wall_clock,
            'overall': {m: self.overall(m) for m in sorted(self.metrics)},
            'config': self.config,
        }


def bin_series(values: Sequence[float], bin_size: int) -> np.ndarray:
    """Means of consecutive non-overlapping bins; a trailing partial bin is dropped"""
    if bin_size < 1:
        raise ValueError(f"bin_size must be >= 1, got {bin_size}")
    values = np.asarray(values, dtype=np.float64)
    n_bins = values.shape[0] // bin_size
    return values[:n_bins * bin_size].reshape(n_bins, bin_size).mean(axis=1)


def aggregate_runs(series: Sequence[Sequence[float]]) -> AggregateSeries:
    """Elementwise mean and standard error (n-1 denominator) across runs, skipping NaN gaps"""
    if len(series) == 0:
        return AggregateSeries(np.zeros(0), None, 0)
    lengths = {len(s) for s in series}
    if len(lengths) > 1:
        raise ShapeError(f"runs have different numbers of bins: {sorted(lengths)}")
    data = np.asarray(series, dtype=np.float64).reshape(len(series), lengths.pop())
    n_runs = data.shape[0]
    frame = pd.DataFrame(data)
    stderr = frame.sem(ddof=1).to_numpy() if n_runs >= 2 else None
    return AggregateSeries(frame.mean().to_numpy(), stderr, n_runs)


def summarize_runs(run_series: Mapping[int, Mapping[str, Sequence[float]]],
                   diverged_runs: Iterable[int] = (),
                   config: Optional[Dict[str, Any]] = None,
                   wall_clock: float = 0.0) -> RunSummary:
    """Aggregate every metric over the runs that did not diverge"""
    diverged = sorted(set(diverged_runs))
    healthy = [run_series[r] for r in sorted(run_series) if r not in diverged]
    metrics = {}
    for metric in sorted({m for s in healthy for m in s}):
        metrics[metric] = aggregate_runs([s[metric] for s in healthy if metric in s])
    return RunSummary(metrics, dict(config or {}), len(run_series), diverged, wall_clock)


def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([r.to_dict() for r in records], columns=RECORD_COLUMNS)
    if not np.isfinite(frame['value'].to_numpy(dtype=np.float64)).all():
        raise PlasticityError("refusing to write non-finite metric values")
    return frame


def write_records(records: Sequence[MetricsRecord], path: Union[str, Path], fmt: str = 'csv') -> Path:
    path = Path(path)
    frame = records_frame(records)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == 'csv':
            frame.to_csv(path, index=False)
        else:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump([r.to_dict() for r in records], f, indent=2)
    except OSError as e:
        raise PlasticityError(f"cannot write {path}: {e}")
    return path


def write_summary(summary: RunSummary, path: Union[str, Path], fmt: str = 'csv') -> Path:
    path = Path(path)
    frame = summary.to_frame()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == 'csv':
            frame.to_csv(path, index=False)
        else:
            rows = [
                {'metric': r.metric, 'bin': int(r.bin), 'mean': None if math.isnan(r.mean) else r.mean,
                 'stderr': None if r.stderr is None or math.isnan(r.stderr) else r.stderr}
                for r in frame.itertuples(index=False)
            ]
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(rows, f, indent=2)
    except OSError as e:
        raise PlasticityError(f"cannot write {path}: {e}")
    return path


def export(records: Sequence[MetricsRecord], summary: Optional[RunSummary],
           out_dir: Union[str, Path], fmt: str = 'csv') -> List[Path]:
    """
    Write records and (optionally) the summary into out_dir.

    Returns:
        Paths written: metrics.<fmt>, summary.<fmt>, run_summary.json
    """
    if fmt not in ('csv', 'json'):
        raise ValueError(f"unknown export format '{fmt}'")
    out_dir = Path(out_dir)
    paths = [write_records(records, out_dir / f'metrics.{fmt}', fmt)]
    if summary is not None:
        paths.append(write_summary(summary, out_dir / f'summary.{fmt}', fmt))
        meta_path = out_dir / 'run_summary.json'
        with open(meta_path, 'w', encoding='utf-8') as f:
            json.dump(summary.meta(), f, indent=2, default=str)
        paths.append(meta_path)
    return paths


def read_records(path: Union[str, Path]) -> List[MetricsRecord]:
    path = Path(path)
    if path.suffix == '.json':
        with open(path, 'r', encoding='utf-8') as f:
            rows = json.load(f)
    else:
        frame = pd.read_csv(path, float_precision='round_trip',
                            dtype={'run': int, 'bin': int, 'step': int, 'metric': str, 'value': float})
        rows = frame.to_dict(orient='records')
    return [MetricsRecord(int(r['run']), int(r['bin']), int(r['step']), str(r['metric']), float(r['value']))
            for r in rows]


def read_summary(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if path.suffix == '.json':
        return pd.DataFrame(json.load(open(path, encoding='utf-8')), columns=SUMMARY_COLUMNS)
    return pd.read_csv(path, float_precision='round_trip')


def build_report(directory: Union[str, Path]) -> str:
    """
    Plain-text tables for every summary found under directory.

    For each summary: one row per metric with the first-bin, last-bin and
    overall mean. Sweep tables are printed as they are.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise PlasticityError(f"not a results directory: {directory}")

    sections = []
    for sweep_path in sorted(directory.rglob('sweep.csv')):
        table = pd.read_csv(sweep_path)
        sections.append(f"== {sweep_path.parent}\n{table.to_string(index=False)}")

    summaries = sorted(list(directory.rglob('summary.csv')) + list(directory.rglob('summary.json')))
    for path in summaries:
        frame = read_summary(path)
        if frame.empty:
            sections.append(f"== {path.parent}\n(no complete bins)")
            continue
        grouped = frame.sort_values(['metric', 'bin']).groupby('metric')['mean']
        table = pd.DataFrame({
            'bins': grouped.size(),
            'first': grouped.first(),
            'last': grouped.last(),
            'overall': grouped.mean(),
        })
        sections.append(f"== {path.parent}\n{table.to_string()}")

    if not sections:
        raise PlasticityError(f"no summary or sweep files under {directory}")
    return "\n\n".join(sections)
