"""Continual-learning metrics over accuracy ledgers and model snapshots.

Stage and task indices are 1-based here, matching the usual a_{t,i}
notation: ``a[t][i]`` is the accuracy on task ``i`` after learning task
``t``. Ledgers store the matrix 0-based; these helpers translate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingDataError, UndefinedError

DORMANT_THRESHOLD = 0.01
RANK_THRESHOLD = 0.01


def _matrix(ledger) -> np.ndarray:
    return np.asarray(getattr(ledger, "accuracy", ledger), dtype=np.float64)


def _row(acc: np.ndarray, t: int) -> np.ndarray:
    if not 1 <= t <= acc.shape[0]:
        raise MissingDataError(f"stage {t} is outside the ledger (1..{acc.shape[0]})")
    row = acc[t - 1, :t]
    if np.any(np.isnan(row)):
        raise MissingDataError(f"accuracy row for stage {t} is incomplete")
    return row


def average_accuracy(ledger, t: int) -> float:
    """A_t: mean accuracy over tasks 1..t after learning task t."""
    return float(np.mean(_row(_matrix(ledger), t)))


def accumulated_accuracy(ledger, t: int) -> float:
    """Mean of the stage averages A_1..A_t."""
    acc = _matrix(ledger)
    return float(np.mean([average_accuracy(acc, s) for s in range(1, t + 1)]))


def backward_transfer(ledger, t: int) -> float:
    """BWT_t = 1/(t-1) * sum_{i<=t} (a_{t,i} - a_{i,i})."""
    if t < 2:
        raise UndefinedError("backward transfer needs at least two stages")
    acc = _matrix(ledger)
    row = _row(acc, t)
    diag = np.array([_row(acc, i)[i - 1] for i in range(1, t + 1)])
    return float(np.sum(row - diag) / (t - 1))


def backward_transfer_previous(ledger, t: int) -> float:
    """Same quantity summed over i < t only; the i = t term is zero."""
    if t < 2:
        raise UndefinedError("backward transfer needs at least two stages")
    acc = _matrix(ledger)
    row = _row(acc, t)
    total = 0.0
    for i in range(1, t):
        total += row[i - 1] - _row(acc, i)[i - 1]
    return total / (t - 1)


def forward_transfer(ledger, t: int, scratch=None) -> float:
    """FWT_t = 1/(t-1) * sum_{i=2..t} (a_{i,i} - scratch_i).

    ``scratch`` maps 1-based task index to from-scratch accuracy; by default
    it is taken from ``ledger.scratch``, which is keyed 0-based.
    """
    if t < 2:
        raise UndefinedError("forward transfer needs at least two stages")
    acc = _matrix(ledger)
    if scratch is None:
        raw = getattr(ledger, "scratch", None) or {}
        scratch = {i + 1: v for i, v in raw.items()}
    total = 0.0
    for i in range(2, t + 1):
        if i not in scratch:
            raise MissingDataError(f"no from-scratch accuracy for task {i}")
        total += _row(acc, i)[i - 1] - scratch[i]
    return float(total / (t - 1))


@dataclass(frozen=True)
class StageMetrics:
    stage: int
    average_accuracy: float
    accumulated_accuracy: float
    bwt: float | None
    fwt: float | None


def stage_metrics(ledger, t: int) -> StageMetrics:
    bwt = fwt = None
    if t >= 2:
        bwt = backward_transfer(ledger, t)
        try:
            fwt = forward_transfer(ledger, t)
        except MissingDataError:
            fwt = None
    return StageMetrics(t, average_accuracy(ledger, t), accumulated_accuracy(ledger, t), bwt, fwt)


def online_accuracy(ledger, task_i: int) -> float:
    """Mean of a task's prequential batch accuracies (``task_i`` is 1-based)."""
    online = getattr(ledger, "online", ledger)
    if not 1 <= task_i <= len(online) or len(online[task_i - 1]) == 0:
        raise MissingDataError(f"no batch accuracies logged for task {task_i}")
    return float(np.mean(online[task_i - 1]))


def dormant_units(activations, delta: float = DORMANT_THRESHOLD) -> float:
    """Fraction of units whose mean absolute activation falls below ``delta``.

    ``activations`` is either one value per unit or a (samples, units)
    array from which the per-unit mean |activation| is taken.
    """
    a = np.abs(np.asarray(activations, dtype=np.float64))
    if a.ndim == 2:
        a = a.mean(axis=0)
    if a.size == 0:
        raise UndefinedError("dormant fraction of an empty population")
    return float(np.mean(a < delta))


def stable_rank(weights, delta: float = RANK_THRESHOLD) -> int:
    """Smallest k whose top-k singular values carry a 1 - delta share of the total."""
    s = np.linalg.svd(np.asarray(weights, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        raise UndefinedError("stable rank of an all-zero matrix")
    s = np.where(s < 1e-12 * s[0], 0.0, s)
    share = np.cumsum(s) / s.sum()
    # tolerance absorbs rounding in the cumulative sum at exact thresholds
    return int(np.searchsorted(share, (1.0 - delta) - 1e-12) + 1)


def avg_weight_magnitude(params) -> float:
    """Mean absolute value over every entry of the given arrays."""
    if isinstance(params, np.ndarray):
        params = [params]
    total = sum(float(np.abs(p).sum()) for p in params)
    count = sum(np.size(p) for p in params)
    if count == 0:
        raise UndefinedError("weight magnitude of an empty parameter set")
    return total / count
