"""
Per-run metrics and the Monte-Carlo summary table.
"""
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from agent import POLICY_ORDER, EpisodeTrace, Policy
from env import GridWorld

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    'policy', 'normalized_rmse', 'normalized_rmse_sd', 'failures', 'unsafe_actions',
    'accuracy', 'accuracy_sd', 'precision', 'precision_sd', 'recall', 'recall_sd', 'rmse_raw',
]


class AggregationError(ValueError):
    """Per-run metrics cannot be combined into one table."""
    pass


@dataclass
class RunMetrics:
    """Metrics of one episode; classification is None where undefined."""
    policy: str
    run_index: int
    rmse_raw: float
    unsafe_visits: int
    stuck_steps: int
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def compute_rmse(trace: EpisodeTrace, w: GridWorld) -> float:
    """Per-step RMSE of the posterior means over all states, averaged over steps."""
    per_step = [
        float(np.sqrt(np.mean((trace.means[r.t] - w.safety[r.t]) ** 2)))
        for r in trace.records
    ]
    return float(np.mean(per_step))


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def compute_classification(trace: EpisodeTrace, w: GridWorld) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """
    Accuracy, precision and recall of S_hat_t against the true safe set.

    Counts are summed over every step before taking the ratios. Safe is the
    positive class. A ratio with a zero denominator is None. Traces without
    snapshots give (None, None, None).
    """
    if not trace.records or not trace.has_snapshots:
        return None, None, None
    tp = tn = fp = fn = 0
    for record in trace.records:
        predicted = record.sets.S_hat
        truth = w.true_safe_set(record.t)
        tp += int(np.sum(predicted & truth))
        tn += int(np.sum(~predicted & ~truth))
        fp += int(np.sum(predicted & ~truth))
        fn += int(np.sum(~predicted & truth))
    return _ratio(tp + tn, tp + tn + fp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def count_safety(traces: Sequence[EpisodeTrace]) -> Tuple[int, int]:
    """(runs with at least one unsafe visit, total unsafe visits)."""
    visits = [t.unsafe_visits for t in traces]
    return sum(1 for v in visits if v > 0), int(sum(visits))


def evaluate_run(trace: EpisodeTrace, w: GridWorld, run_index: int) -> RunMetrics:
    accuracy, precision, recall = compute_classification(trace, w)
    return RunMetrics(
        policy=trace.policy.value,
        run_index=run_index,
        rmse_raw=compute_rmse(trace, w),
        unsafe_visits=trace.unsafe_visits,
        stuck_steps=trace.stuck_steps,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
    )


def metrics_frame(metrics: Sequence[RunMetrics]) -> pd.DataFrame:
    """Per-run table sorted by policy order and run index."""
    order = {p.value: i for i, p in enumerate(POLICY_ORDER)}
    rows = sorted(metrics, key=lambda m: (order.get(m.policy, len(order)), m.run_index))
    return pd.DataFrame([m.to_dict() for m in rows], columns=list(RunMetrics.__dataclass_fields__))


def _mean_sd(values: Sequence[Optional[float]]) -> Tuple[float, float]:
    defined = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if len(defined) == 0:
        return np.nan, np.nan
    return float(np.mean(defined)), float(np.std(defined, ddof=0))


def aggregate_runs(metrics: Sequence[RunMetrics], reference: Policy = Policy.ST_SAFEMDP) -> pd.DataFrame:
    """
    Summarize per-run metrics per policy.

    Args:
        metrics: Metrics of every (policy, run index)
        reference: Policy whose RMSE normalizes the others run by run

    Returns:
        DataFrame with SUMMARY_COLUMNS, one row per policy in canonical order.
        Undefined values are NaN.

    Raises:
        AggregationError: If policies cover different run indices
    """
    if not metrics:
        raise AggregationError("No run metrics to aggregate")
    by_policy = {}
    for m in metrics:
        by_policy.setdefault(m.policy, {})
        if m.run_index in by_policy[m.policy]:
            raise AggregationError(f"Duplicate run {m.run_index} for policy {m.policy}")
        by_policy[m.policy][m.run_index] = m

    run_sets = {policy: set(runs) for policy, runs in by_policy.items()}
    first = next(iter(run_sets.values()))
    for policy, runs in run_sets.items():
        if runs != first:
            raise AggregationError(
                f"Policy {policy} has {len(runs)} runs but another policy has {len(first)}; run indices differ")

    reference_runs = by_policy.get(reference.value)
    if reference_runs is None:
        logger.warning(f"Reference policy {reference.value} missing; normalized RMSE left undefined")

    known = [p.value for p in POLICY_ORDER]
    policies = [p for p in known if p in by_policy] + sorted(p for p in by_policy if p not in known)
    rows: List[dict] = []
    for policy in policies:
        runs = by_policy[policy]
        indices = sorted(runs)
        if reference_runs is not None:
            ratios = []
            for i in indices:
                ref = reference_runs[i].rmse_raw
                ratios.append(runs[i].rmse_raw / ref if ref > 0 else None)
            norm_mean, norm_sd = _mean_sd(ratios)
        else:
            norm_mean, norm_sd = np.nan, np.nan
        failures = sum(1 for i in indices if runs[i].unsafe_visits > 0)
        unsafe_actions = sum(runs[i].unsafe_visits for i in indices)
        acc, acc_sd = _mean_sd([runs[i].accuracy for i in indices])
        prec, prec_sd = _mean_sd([runs[i].precision for i in indices])
        rec, rec_sd = _mean_sd([runs[i].recall for i in indices])
        rmse_raw, _ = _mean_sd([runs[i].rmse_raw for i in indices])
        rows.append({
            'policy': policy,
            'normalized_rmse': norm_mean,
            'normalized_rmse_sd': norm_sd,
            'failures': failures,
            'unsafe_actions': unsafe_actions,
            'accuracy': acc,
            'accuracy_sd': acc_sd,
            'precision': prec,
            'precision_sd': prec_sd,
            'recall': rec,
            'recall_sd': rec_sd,
            'rmse_raw': rmse_raw,
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
