"""
Artifact writer for environments, traces, safe-set snapshots and metrics.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd

from agent import EpisodeTrace
from env import EnvFormatError, GridWorld, world_from_frame
from evaluation import RunMetrics, metrics_frame

logger = logging.getLogger(__name__)

# Enough digits for float64 values to survive a CSV round trip.
EXACT_FLOAT = '%.17g'
SUMMARY_FLOAT = '%.6f'
PARTIAL_MARKER = 'PARTIAL'


def trace_frame(trace: EpisodeTrace, w: GridWorld) -> pd.DataFrame:
    """Columns step, t, row, col, y, unsafe, stuck (plus lower_bound when recorded)."""
    rows = []
    for r in trace.records:
        row, col = w.row_col(r.state)
        entry = {'step': r.step, 't': r.t, 'row': row, 'col': col, 'y': r.y,
                 'unsafe': int(r.unsafe), 'stuck': int(r.stuck)}
        if r.lower_bound is not None:
            entry['lower_bound'] = r.lower_bound
        rows.append(entry)
    return pd.DataFrame(rows)


def snapshot_frame(trace: EpisodeTrace) -> pd.DataFrame:
    """Long table (t, set_name, state) of every recorded safe-set member."""
    rows = []
    for r in trace.records:
        if r.sets is None:
            continue
        for name, mask in r.sets.as_dict().items():
            rows.extend((r.t, name, int(s)) for s in np.flatnonzero(mask))
    return pd.DataFrame(rows, columns=['t', 'set_name', 'state'])


def _make_serializable(obj):
    """Convert numpy scalars and containers to JSON types."""
    if isinstance(obj, dict):
        return {key: _make_serializable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_make_serializable(item) for item in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def environment_metadata_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix('.json')


def save_environment(w: GridWorld, path: Union[str, Path], extra: Dict[str, Any] = None) -> Path:
    """Write the long-format safety table as CSV and its metadata as JSON next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    w.to_frame().to_csv(path, index=False, float_format=EXACT_FLOAT)
    metadata = dict(w.describe())
    metadata.update(w.metadata)
    if extra:
        metadata.update(extra)
    with open(environment_metadata_path(path), 'w') as f:
        json.dump(_make_serializable(metadata), f, indent=2, sort_keys=True)
    logger.info(f"Environment saved to {path}")
    return path


def load_environment(path: Union[str, Path]) -> GridWorld:
    """Load a world written by save_environment."""
    path = Path(path)
    meta_path = environment_metadata_path(path)
    if not path.exists() or not meta_path.exists():
        raise EnvFormatError(f"Environment file or its metadata is missing: {path}")
    with open(meta_path, 'r') as f:
        metadata = json.load(f)
    try:
        table = pd.read_csv(path)
        return world_from_frame(table, float(metadata['h']), metadata['initial_safe'],
                                float(metadata.get('noise_std', 0.001)))
    except KeyError as e:
        raise EnvFormatError(f"Environment metadata {meta_path} lacks {e}") from e


class ArtifactWriter:
    """Writes the outputs of one experiment below a single directory."""

    def __init__(self, output_dir: Union[str, Path], export_snapshots: bool = False):
        """
        Initialize artifact writer.

        Args:
            output_dir: Root directory of the experiment outputs
            export_snapshots: Also write per-step safe-set snapshots
        """
        self.output_dir = Path(output_dir)
        self.export_snapshots = export_snapshots
        self.traces_dir = self.output_dir / 'traces'
        self.snapshots_dir = self.output_dir / 'snapshots'
        self.traces_dir.mkdir(parents=True, exist_ok=True)
        if export_snapshots:
            self.snapshots_dir.mkdir(parents=True, exist_ok=True)
        self.partial_marker.unlink(missing_ok=True)
        logger.info(f"Artifact writer initialized ({self.output_dir})")

    @property
    def partial_marker(self) -> Path:
        return self.output_dir / PARTIAL_MARKER

    def write_trace(self, trace: EpisodeTrace, w: GridWorld, run_index: int) -> Path:
        name = f"{trace.policy.value}_run{run_index}.csv"
        path = self.traces_dir / name
        trace_frame(trace, w).to_csv(path, index=False, float_format=EXACT_FLOAT)
        if self.export_snapshots and trace.has_snapshots:
            snapshot_frame(trace).to_csv(self.snapshots_dir / name, index=False)
        logger.debug(f"Trace written to {path}")
        return path

    def write_metrics(self, metrics: Sequence[RunMetrics]) -> Path:
        path = self.output_dir / 'metrics.csv'
        metrics_frame(metrics).to_csv(path, index=False, float_format=EXACT_FLOAT, na_rep='-')
        return path

    def write_summary(self, summary: pd.DataFrame) -> Path:
        path = self.output_dir / 'summary.csv'
        summary.to_csv(path, index=False, float_format=SUMMARY_FLOAT, na_rep='-')
        logger.info(f"📊 Summary written to {path}")
        return path

    def mark_partial(self, failures: Iterable[str]) -> Path:
        """Flag the outputs as incomplete, listing the failed runs."""
        lines: List[str] = list(failures)
        self.partial_marker.write_text('\n'.join(lines) + '\n')
        logger.error(f"{len(lines)} run(s) failed; outputs marked partial")
        return self.partial_marker
