"""
Hyperparameter sweeps.

Every grid point runs the full replicated experiment. The best point is
picked from the emitted table alone: highest mean online accuracy on
Permuted MNIST, lowest mean squared error on regression, first in grid order
on ties. Points that diverged or failed are kept in the table and never
selected.
"""

import dataclasses
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from .config_loader import ExperimentConfig
from .errors import ConfigError, DataError
from .experiment import RunResult, run_all, run_experiment, save_results, summarize
from .metrics import RunSummary


logger = logging.getLogger(__name__)

STATUS_OK = 'ok'
STATUS_DIVERGED = 'diverged'
STATUS_ERROR = 'error'


@dataclass
class SweepPoint:
    index: int
    params: Dict[str, Any]
    status: str = STATUS_OK
    score: float = float('nan')
    n_runs: int = 0
    diverged_runs: List[int] = field(default_factory=list)
    error: Optional[str] = None
    summary: Optional[RunSummary] = None
    runs: List[RunResult] = field(default_factory=list, repr=False)

    def to_row(self) -> Dict[str, Any]:
        row = {'point': self.index}
        for key, value in self.params.items():
            row[key] = value if not isinstance(value, (list, tuple)) else json.dumps(list(value))
        row.update({
            'status': self.status,
            'score': self.score,
            'n_runs': self.n_runs,
            'diverged_runs': len(self.diverged_runs),
            'error': self.error or '',
        })
        return row


@dataclass
class SweepResult:
    points: List[SweepPoint]
    table: pd.DataFrame
    metric: str
    maximize: bool
    best: Optional[int]
    final: Optional[RunSummary] = None
    paths: List[Path] = field(default_factory=list)

    @property
    def best_params(self) -> Optional[Dict[str, Any]]:
        return None if self.best is None else self.points[self.best].params


def grid_points(grid: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of the grid, last key varying fastest"""
    if not grid:
        raise ConfigError('grid', "sweep needs a non-empty grid")
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def objective(cfg: ExperimentConfig) -> Tuple[str, bool]:
    """(metric, maximize) the sweep selects on"""
    if cfg.problem == 'pmnist':
        return 'online_accuracy', True
    return 'squared_error', False


def select_best(table: pd.DataFrame, maximize: bool) -> Optional[int]:
    """
    Index (the 'point' column) of the best healthy row, or None.

    idxmax/idxmin return the first occurrence, which gives the grid-order tie-break.
    """
    healthy = table[(table['status'] == STATUS_OK) & table['score'].notna()]
    if healthy.empty:
        return None
    scores = healthy.set_index('point')['score'].astype(float)
    return int(scores.idxmax() if maximize else scores.idxmin())


def _point_name(index: int) -> str:
    return f"point_{index:03d}"


def run_point(cfg: ExperimentConfig, index: int, params: Dict[str, Any], metric: str,
              out_dir: Optional[Path], save: bool) -> SweepPoint:
    point = SweepPoint(index, params)
    try:
        point_cfg = cfg.replace(**params)
        result = run_experiment(point_cfg, out_dir / _point_name(index) if out_dir else None, save)
    except DataError:
        raise
    except Exception as e:
        point.status = STATUS_ERROR
        point.error = str(e)
        logger.error("Sweep point %d %s failed: %s", index, params, e)
        return point

    summary = result.summary
    point.summary = summary
    point.runs = result.runs
    point.n_runs = summary.n_runs
    point.diverged_runs = list(summary.diverged_runs)
    if summary.diverged_runs:
        point.status = STATUS_DIVERGED
    else:
        point.score = summary.overall(metric)
    return point


def run_extra(cfg: ExperimentConfig, best: SweepPoint, out_dir: Optional[Path],
              save: bool) -> Tuple[RunSummary, List[Path]]:
    """
    Re-run the selected point with cfg.extra_runs further seeds.

    The new runs continue the seed sequence after the sweep's runs; the
    returned summary covers all of them.
    """
    start = time.perf_counter()
    sweep_cfg = cfg.replace(**best.params)
    n_runs = sweep_cfg.n_runs
    extra_cfg = sweep_cfg.replace(base_seed=sweep_cfg.base_seed + n_runs, n_runs=cfg.extra_runs)
    extra = run_all(extra_cfg)
    for r in extra:
        r.run += n_runs
        r.records = [dataclasses.replace(rec, run=r.run) for rec in r.records]

    runs = best.runs + extra
    combined_cfg = sweep_cfg.replace(n_runs=n_runs + cfg.extra_runs)
    summary = summarize(combined_cfg, runs, time.perf_counter() - start)
    paths = save_results(combined_cfg, runs, summary, out_dir / 'best') if save and out_dir else []
    return summary, paths


def sweep(cfg: ExperimentConfig, grid: Dict[str, List[Any]], out_dir: Optional[Path] = None,
          save: bool = True) -> SweepResult:
    """
    Run every grid point and select the best.

    Args:
        cfg: Base configuration; grid values override it per point
        grid: key -> list of values
        out_dir: Defaults to {output_dir}/{name}
        save: Write per-point results, sweep.csv and sweep.json

    Returns:
        SweepResult with the table and the selected point
    """
    metric, maximize = objective(cfg)
    if save and out_dir is None:
        out_dir = Path(cfg.output_dir) / cfg.name
    points = []
    for index, params in enumerate(grid_points(grid)):
        logger.info("Sweep point %d: %s", index, params)
        points.append(run_point(cfg, index, params, metric, out_dir, save))

    table = pd.DataFrame([p.to_row() for p in points])
    best = select_best(table, maximize)
    result = SweepResult(points, table, metric, maximize, best)
    if best is None:
        logger.warning("No sweep point finished without divergence")
    elif cfg.extra_runs > 0:
        logger.info("Re-running point %d with %d more runs", best, cfg.extra_runs)
        result.final, result.paths = run_extra(cfg, points[best], out_dir, save)

    if save:
        result.paths.extend(save_sweep(result, out_dir))
    return result


def save_sweep(result: SweepResult, out_dir: Path) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / 'sweep.csv'
    result.table.to_csv(table_path, index=False)

    final = None
    if result.final is not None:
        final = {'n_runs': result.final.n_runs, 'score': result.final.overall(result.metric)}
    meta_path = out_dir / 'sweep.json'
    with open(meta_path, 'w', encoding='utf-8') as f:
        json.dump({
            'metric': result.metric,
            'maximize': result.maximize,
            'best_point': result.best,
            'best_params': result.best_params,
            'best_score': None if result.best is None else _finite(result.points[result.best].score),
            'final': final,
        }, f, indent=2)
    return [table_path, meta_path]


def _finite(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None
