"""Linear probes on last-hidden-layer representations.

A probe is multinomial logistic regression on standardized features, fit by
full-batch gradient descent from zero, with an L2 penalty on the weights only.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import LabeledDataset, load_dataset
from .errors import DegenerateTask, DimensionMismatch, EmptySplit, IoFailure
from .models import ToyArchitecture, extract_representation, log_softmax

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    learning_rate: float = 0.1
    l2_penalty: float = 1e-4
    # zero initialization and full-batch steps leave nothing random; kept so
    # a config fully names a run
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ProbeTask:
    task_id: str
    phenomenon: str
    train: LabeledDataset
    dev: Optional[LabeledDataset]
    test: LabeledDataset

    @property
    def feature_dim(self) -> int:
        return self.train.input_dim

    def splits(self):
        return {name: getattr(self, name) for name in SPLITS if getattr(self, name) is not None}


@dataclass(frozen=True, eq=False)
class Probe:
    weight: np.ndarray  # [num_classes, feature_dim]
    bias: np.ndarray  # [num_classes]
    mean: np.ndarray  # [feature_dim]
    scale: np.ndarray  # [feature_dim]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def standardize(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise DimensionMismatch(f"probe expects [n, {self.feature_dim}] features, got {x.shape}")
        return (x - self.mean) / self.scale

    def logits(self, features) -> np.ndarray:
        return self.standardize(features) @ self.weight.T + self.bias

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def standardization(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population std; (near-)constant features get std 1."""
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    return mean, np.where(flat, 1.0, std)


def probe_loss_and_grads(weight, bias, z, y, l2_penalty):
    """Mean cross-entropy plus ``0.5 * l2 * ||W||^2`` on standardized features ``z``."""
    n = z.shape[0]
    logp = log_softmax(z @ weight.T + bias)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2_penalty * np.sum(weight * weight)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, delta.T @ z + l2_penalty * weight, delta.sum(axis=0)


def _validate_task(task: ProbeTask):
    dim = task.feature_dim
    for name, split in task.splits().items():
        if split.input_dim != dim:
            raise DimensionMismatch(f"task {task.task_id}: {name} split has dim {split.input_dim}, train {dim}")
    if len(task.train) == 0:
        raise EmptySplit(f"task {task.task_id}: empty train split")
    present = np.unique(task.train.labels)
    num_classes = max(s.num_classes for s in task.splits().values())
    if present.size < 2:
        raise DegenerateTask(f"task {task.task_id}: train split holds a single class")
    if present.size != num_classes:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise DegenerateTask(f"task {task.task_id}: classes {missing} absent from train split")
    return num_classes


def train_probe(task: ProbeTask, config: ProbeConfig = ProbeConfig(), on_epoch=None) -> Probe:
    num_classes = _validate_task(task)
    x = task.train.inputs
    y = task.train.labels
    mean, scale = standardization(x)
    z = (x - mean) / scale
    weight = np.zeros((num_classes, x.shape[1]))
    bias = np.zeros(num_classes)
    for epoch in range(config.epochs):
        loss, gw, gb = probe_loss_and_grads(weight, bias, z, y, config.l2_penalty)
        if on_epoch is not None:
            on_epoch(epoch, float(loss))
        weight = weight - config.learning_rate * gw
        bias = bias - config.learning_rate * gb
    return Probe(weight, bias, mean, scale)


@dataclass(frozen=True)
class ProbeScores:
    accuracy: float
    macro_f1: float


def macro_f1(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from truth and prediction scores 0."""
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def evaluate_probe(probe: Probe, split: LabeledDataset) -> ProbeScores:
    if len(split) == 0:
        raise EmptySplit("cannot evaluate a probe on an empty split")
    pred = probe.predict(split.inputs)
    accuracy = float(np.mean(pred == split.labels))
    num_classes = max(probe.num_classes, split.num_classes)
    return ProbeScores(accuracy, macro_f1(split.labels, pred, num_classes))


# --------------------------------------------------------------------------- reports


@dataclass(frozen=True)
class ProbeRow:
    model_id: str
    task_id: str
    phenomenon: str
    accuracy: float
    macro_f1: float


@dataclass(frozen=True)
class ProbeReport:
    rows: tuple[ProbeRow, ...]

    def __post_init__(self):
        rows = tuple(sorted(self.rows, key=lambda r: (r.model_id, r.task_id)))
        keys = [(r.model_id, r.task_id) for r in rows]
        if len(set(keys)) != len(keys):
            raise ValueError("probe report holds duplicate (model, task) rows")
        object.__setattr__(self, "rows", rows)

    @property
    def models(self) -> list[str]:
        return sorted({r.model_id for r in self.rows})

    def phenomenon_means(self) -> dict[str, dict[str, float]]:
        """model id -> phenomenon -> unweighted mean accuracy over member tasks."""
        grouped: dict[str, dict[str, list[float]]] = {}
        for r in self.rows:
            grouped.setdefault(r.model_id, {}).setdefault(r.phenomenon, []).append(r.accuracy)
        return {
            m: {p: float(np.mean(v)) for p, v in sorted(by_phen.items())}
            for m, by_phen in sorted(grouped.items())
        }

    def task_scores(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for r in self.rows:
            out.setdefault(r.model_id, {})[r.task_id] = r.accuracy
        return out

    def to_json_dict(self) -> dict:
        means = [
            {"model_id": m, "phenomenon": p, "mean_accuracy": v}
            for m, by_phen in self.phenomenon_means().items()
            for p, v in by_phen.items()
        ]
        return {
            "kind": "probe_report",
            "rows": [r.__dict__ for r in self.rows],
            "phenomenon_means": means,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ProbeReport":
        if data.get("kind") != "probe_report":
            raise ValueError("not a probe report")
        return cls(tuple(ProbeRow(**r) for r in data["rows"]))

    def csv_rows(self):
        header = ["model_id", "task_id", "phenomenon", "accuracy", "macro_f1"]
        return header, [[r.model_id, r.task_id, r.phenomenon, r.accuracy, r.macro_f1] for r in self.rows]

    @classmethod
    def combine(cls, reports: Sequence["ProbeReport"]) -> "ProbeReport":
        return cls(tuple(r for rep in reports for r in rep.rows))


def representation_task(task: ProbeTask, model: Checkpoint, arch: ToyArchitecture) -> ProbeTask:
    """Re-express a raw-input task over the model's last-layer representations."""
    reps = {
        name: split.with_inputs(extract_representation(model, arch, split.inputs))
        for name, split in task.splits().items()
    }
    return ProbeTask(task.task_id, task.phenomenon, reps["train"], reps.get("dev"), reps["test"])


def _score_task(task, model, arch, config, model_id):
    rep_task = representation_task(task, model, arch)
    scores = evaluate_probe(train_probe(rep_task, config), rep_task.test)
    return ProbeRow(model_id, task.task_id, task.phenomenon, scores.accuracy, scores.macro_f1)


def run_probe_suite(
    model: Checkpoint,
    arch: ToyArchitecture,
    tasks: Sequence[ProbeTask],
    config: ProbeConfig = ProbeConfig(),
    model_id: str = "model",
    jobs: int = 1,
) -> ProbeReport:
    """Probe every task on ``model``'s representations and score its test split.

    The dev split is carried through but never used for selection.
    """
    if not tasks:
        raise ValueError("run_probe_suite needs at least one task")
    ordered = sorted(tasks, key=lambda t: t.task_id)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda t: _score_task(t, model, arch, config, model_id), ordered))
    else:
        rows = [_score_task(t, model, arch, config, model_id) for t in ordered]
    return ProbeReport(tuple(rows))


# --------------------------------------------------------------------------- task manifests


def load_probe_tasks(path) -> list[ProbeTask]:
    """Read a task manifest: ``{"tasks": [{task_id, phenomenon, train, dev, test}]}``.

    Split paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tasks = []
    for entry in data["tasks"]:
        splits = {
            name: load_dataset(path.parent / entry[name]) if entry.get(name) else None for name in SPLITS
        }
        if splits["train"] is None or splits["test"] is None:
            raise ValueError(f"task {entry.get('task_id')!r} needs train and test splits")
        tasks.append(ProbeTask(entry["task_id"], entry["phenomenon"], splits["train"], splits["dev"], splits["test"]))
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("task ids must be unique")
    return tasks
