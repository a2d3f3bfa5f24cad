"""Behavioral scoring, parent-relative categories and behavior/probe correlation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import LabeledDataset, load_dataset
from .errors import (
    ConstantInput,
    DimensionMismatch,
    InsufficientData,
    IoFailure,
    ParameterOutOfRange,
)
from .models import ToyArchitecture, predict
from .probe import ProbeReport

BETTER, BETWEEN, WORSE = "Better", "Between", "Worse"
CATEGORIES = (BETTER, BETWEEN, WORSE)


# --------------------------------------------------------------------------- behavior


@dataclass(frozen=True, eq=False)
class BehaviorTask:
    task_id: str
    data: LabeledDataset


@dataclass(frozen=True, eq=False)
class BehaviorSuite:
    suite_id: str
    tasks: tuple[BehaviorTask, ...]


@dataclass(frozen=True)
class BehaviorRow:
    model_id: str
    suite_id: str
    task_id: str
    accuracy: float


@dataclass(frozen=True)
class BehaviorReport:
    rows: tuple[BehaviorRow, ...]

    def __post_init__(self):
        rows = tuple(sorted(self.rows, key=lambda r: (r.model_id, r.suite_id, r.task_id)))
        keys = [(r.model_id, r.task_id) for r in rows]
        if len(set(keys)) != len(keys):
            raise ValueError("behavior report holds duplicate (model, task) rows")
        object.__setattr__(self, "rows", rows)

    @property
    def models(self) -> list[str]:
        return sorted({r.model_id for r in self.rows})

    def suite_means(self) -> dict[str, dict[str, float]]:
        """model id -> suite id -> mean accuracy over the suite's tasks."""
        grouped: dict[str, dict[str, list[float]]] = {}
        for r in self.rows:
            grouped.setdefault(r.model_id, {}).setdefault(r.suite_id, []).append(r.accuracy)
        return {m: {s: float(np.mean(v)) for s, v in sorted(by.items())} for m, by in sorted(grouped.items())}

    def task_scores(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for r in self.rows:
            out.setdefault(r.model_id, {})[r.task_id] = r.accuracy
        return out

    def to_json_dict(self) -> dict:
        means = [
            {"model_id": m, "suite_id": s, "mean_accuracy": v}
            for m, by in self.suite_means().items()
            for s, v in by.items()
        ]
        return {"kind": "behavior_report", "rows": [r.__dict__ for r in self.rows], "suite_means": means}

    @classmethod
    def from_json_dict(cls, data: dict) -> "BehaviorReport":
        if data.get("kind") != "behavior_report":
            raise ValueError("not a behavior report")
        return cls(tuple(BehaviorRow(**r) for r in data["rows"]))

    def csv_rows(self):
        header = ["model_id", "suite_id", "task_id", "accuracy"]
        return header, [[r.model_id, r.suite_id, r.task_id, r.accuracy] for r in self.rows]

    @classmethod
    def combine(cls, reports: Sequence["BehaviorReport"]) -> "BehaviorReport":
        return cls(tuple(r for rep in reports for r in rep.rows))


def evaluate_behavior(
    model: Checkpoint, arch: ToyArchitecture, suites: Sequence[BehaviorSuite], model_id: str = "model"
) -> BehaviorReport:
    """Argmax accuracy of ``model`` on every task of every suite."""
    if not suites:
        raise ValueError("evaluate_behavior needs at least one suite")
    arch.check(model)
    rows = []
    for suite in suites:
        for task in suite.tasks:
            if task.data.num_classes > arch.num_classes:
                raise DimensionMismatch(
                    f"task {task.task_id} has {task.data.num_classes} classes, model {arch.num_classes}"
                )
            if len(task.data) == 0:
                raise ValueError(f"task {task.task_id} is empty")
            pred = predict(model, arch, task.data.inputs)
            rows.append(BehaviorRow(model_id, suite.suite_id, task.task_id, float(np.mean(pred == task.data.labels))))
    return BehaviorReport(tuple(rows))


def load_suites(path) -> list[BehaviorSuite]:
    """Read ``{"suites": [{suite_id, tasks: [{task_id, path}]}]}``; paths relative to the file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    suites = []
    for s in data["suites"]:
        tasks = tuple(BehaviorTask(t["task_id"], load_dataset(path.parent / t["path"])) for t in s["tasks"])
        suites.append(BehaviorSuite(s["suite_id"], tasks))
    return suites


# --------------------------------------------------------------------------- parent comparison


def categorize_vs_parents(merged: float, parent_a: float, parent_b: float, epsilon: float = 0.0) -> str:
    """Better / Between / Worse relative to the interval spanned by both parents.

    Scores exactly ``epsilon`` outside the interval count as Between.
    """
    for label, value in (("merged", merged), ("parent_a", parent_a), ("parent_b", parent_b)):
        if not 0.0 <= value <= 1.0:
            raise ParameterOutOfRange(f"{label} score {value} outside [0, 1]")
    if not epsilon >= 0.0:
        raise ParameterOutOfRange(f"epsilon must be >= 0, got {epsilon}")
    if merged > max(parent_a, parent_b) + epsilon:
        return BETTER
    if merged < min(parent_a, parent_b) - epsilon:
        return WORSE
    return BETWEEN


@dataclass(frozen=True)
class ParentComparison:
    merged_model_id: str
    task_id: str
    category: str
    parent_a_score: float
    parent_b_score: float
    merged_score: float
    epsilon: float


def compare_to_parents(
    task_scores: Mapping[str, Mapping[str, float]],
    merged_id: str,
    parent_a: str,
    parent_b: str,
    epsilon: float = 0.0,
) -> list[ParentComparison]:
    """Categorize every task scored for the merged model and both parents."""
    shared = sorted(set(task_scores[merged_id]) & set(task_scores[parent_a]) & set(task_scores[parent_b]))
    out = []
    for task in shared:
        m, a, b = task_scores[merged_id][task], task_scores[parent_a][task], task_scores[parent_b][task]
        out.append(ParentComparison(merged_id, task, categorize_vs_parents(m, a, b, epsilon), a, b, m, epsilon))
    return out


def category_counts(comparisons: Sequence[ParentComparison]) -> dict[str, dict[str, int]]:
    counts: dict[str, dict[str, int]] = {}
    for c in comparisons:
        counts.setdefault(c.merged_model_id, dict.fromkeys(CATEGORIES, 0))[c.category] += 1
    return {m: counts[m] for m in sorted(counts)}


# --------------------------------------------------------------------------- correlation


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise DimensionMismatch(f"need two vectors of equal length, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise InsufficientData(f"need at least 3 paired values, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ConstantInput("correlation is undefined for a constant vector")
    return x, y


def _pearson(x, y):
    dx = x - math.fsum(x) / x.size
    dy = y - math.fsum(y) / y.size
    r = math.fsum(dx * dy) / math.sqrt(math.fsum(dx * dx) * math.fsum(dy * dy))
    return min(1.0, max(-1.0, r))


def pearson(x, y) -> float:
    return _pearson(*_check_pair(x, y))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _check_pair(x, y)
    return _pearson(average_ranks(x), average_ranks(y))


CORRELATIONS = {"pearson": pearson, "spearman": spearman}


@dataclass(frozen=True)
class CorrelationMatrix:
    method: str
    rows: tuple[str, ...]  # phenomena
    columns: tuple[str, ...]  # behavior suites
    values: tuple[tuple[Optional[float], ...], ...]  # None marks an undefined cell
    n: tuple[tuple[int, ...], ...]
    reasons: tuple[tuple[Optional[str], ...], ...]

    def cell(self, row: str, column: str) -> Optional[float]:
        return self.values[self.rows.index(row)][self.columns.index(column)]

    @property
    def fully_defined(self) -> bool:
        return all(v is not None for row in self.values for v in row)

    def to_json_dict(self) -> dict:
        return {
            "kind": "correlation_matrix",
            "method": self.method,
            "rows": list(self.rows),
            "columns": list(self.columns),
            "values": [list(r) for r in self.values],
            "n": [list(r) for r in self.n],
            "undefined_reason": [list(r) for r in self.reasons],
        }

    def long_rows(self):
        header = ["row", "column", "value", "n"]
        rows = []
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.columns):
                v = self.values[i][j]
                rows.append([r, c, "" if v is None else v, self.n[i][j]])
        return header, rows


def correlation_matrix(
    probe_reports: Sequence[ProbeReport],
    behavior_reports: Sequence[BehaviorReport],
    method: str = "pearson",
) -> CorrelationMatrix:
    """Correlate per-model phenomenon means with per-model suite means.

    Each cell pairs the models scored on both the phenomenon and the suite,
    ordered by model id. Cells with fewer than 3 models or a constant side are
    undefined rather than zero.
    """
    if method not in CORRELATIONS:
        raise ValueError(f"unknown correlation method {method!r}")
    corr = CORRELATIONS[method]
    phen = ProbeReport.combine(list(probe_reports)).phenomenon_means()
    suites = BehaviorReport.combine(list(behavior_reports)).suite_means()
    row_labels = sorted({p for by in phen.values() for p in by})
    col_labels = sorted({s for by in suites.values() for s in by})
    values, counts, reasons = [], [], []
    for p in row_labels:
        vrow, nrow, rrow = [], [], []
        for s in col_labels:
            models = sorted(m for m in set(phen) & set(suites) if p in phen[m] and s in suites[m])
            x = [phen[m][p] for m in models]
            y = [suites[m][s] for m in models]
            value, reason = None, None
            try:
                value = corr(x, y)
            except InsufficientData:
                reason = "insufficient_data"
            except ConstantInput:
                reason = "constant_input"
            vrow.append(value)
            nrow.append(len(models))
            rrow.append(reason)
        values.append(tuple(vrow))
        counts.append(tuple(nrow))
        reasons.append(tuple(rrow))
    return CorrelationMatrix(method, tuple(row_labels), tuple(col_labels), tuple(values), tuple(counts), tuple(reasons))
