"""Labeled datasets, their JSON/CSV files, and seeded synthetic generators."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import DimensionMismatch, IoFailure


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray  # [n, input_dim] float64
    labels: np.ndarray  # [n] int64
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise DimensionMismatch(f"inputs must be a matrix, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise DimensionMismatch(f"{inputs.shape[0]} input rows but labels have shape {labels.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("inputs must be finite")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def with_inputs(self, inputs) -> "LabeledDataset":
        return LabeledDataset(inputs, self.labels, self.num_classes, dict(self.metadata))

    def to_json_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "metadata": self.metadata,
            "inputs": self.inputs.tolist(),
            "labels": self.labels.tolist(),
        }


def save_dataset(ds: LabeledDataset, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        buf = io.StringIO()
        buf.write(f"# num_classes={ds.num_classes}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(ds.input_dim)] + ["label"])
        for row, label in zip(ds.inputs.tolist(), ds.labels.tolist()):
            writer.writerow([repr(v) for v in row] + [label])
        text = buf.getvalue()
    else:
        text = json.dumps(ds.to_json_dict(), sort_keys=True) + "\n"
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _load_csv(text: str) -> LabeledDataset:
    lines = text.splitlines()
    num_classes = None
    while lines and lines[0].startswith("#"):
        key, _, value = lines.pop(0).lstrip("# ").partition("=")
        if key.strip() == "num_classes":
            num_classes = int(value)
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError("CSV dataset must end with a 'label' column")
    dim = len(header) - 1
    inputs = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), dim)
    labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(inputs, labels, num_classes)


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".csv":
        return _load_csv(text)
    data = json.loads(text)
    dim = int(data["input_dim"])
    inputs = np.array(data["inputs"], dtype=np.float64).reshape(len(data["labels"]), dim)
    return LabeledDataset(inputs, data["labels"], int(data["num_classes"]), data.get("metadata", {}))


# --------------------------------------------------------------------------- generators


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit sub-seed for a (seed, label...) combination."""
    msg = json.dumps([int(seed), *labels], separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little") >> 1


class GeneratorSpec(BaseModel):
    """Parameters of a synthetic dataset.

    ``task_seed`` fixes the task itself (blob centers), ``seed`` the sample draw,
    so train and test splits share a task but not points.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["blobs", "xor", "rings"]
    n: int = Field(gt=0)
    input_dim: int = Field(gt=0)
    seed: int = 0
    task_seed: int = 0
    num_classes: int = Field(default=2, ge=2)
    separation: float = 3.0
    spread: float = 1.0
    dims: tuple[int, int] = (0, 1)
    radii: list[float] = Field(default_factory=lambda: [0.7])
    label_noise: float = Field(default=0.0, ge=0.0, lt=1.0)
    splits: Optional[dict[str, int]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("xor", "rings") and max(self.dims) >= self.input_dim:
            raise ValueError(f"dims {list(self.dims)} out of range for input_dim {self.input_dim}")
        if self.kind in ("xor", "rings") and self.dims[0] == self.dims[1]:
            raise ValueError("dims must name two different coordinates")
        if self.kind == "rings" and (not self.radii or sorted(self.radii) != list(self.radii)):
            raise ValueError("radii must be a non-empty ascending list")
        return self

    @property
    def classes(self) -> int:
        if self.kind == "xor":
            return 2
        if self.kind == "rings":
            return len(self.radii) + 1
        return self.num_classes


def _flip_labels(rng, labels, num_classes, noise):
    if noise <= 0:
        return labels
    flip = rng.random(labels.shape[0]) < noise
    shift = rng.integers(1, num_classes, size=labels.shape[0])
    return np.where(flip, (labels + shift) % num_classes, labels)


def generate(spec: GeneratorSpec, seed: Optional[int] = None) -> LabeledDataset:
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n, d = spec.n, spec.input_dim
    if spec.kind == "blobs":
        task_rng = np.random.default_rng(spec.task_seed)
        directions = task_rng.normal(size=(spec.num_classes, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        centers = directions * (spec.separation / 2.0)
        labels = rng.permutation(np.arange(n) % spec.num_classes)
        inputs = centers[labels] + spec.spread * rng.normal(size=(n, d))
    else:
        inputs = rng.uniform(-1.0, 1.0, size=(n, d))
        i, j = spec.dims
        if spec.kind == "xor":
            labels = ((inputs[:, i] > 0) ^ (inputs[:, j] > 0)).astype(np.int64)
        else:
            radius = np.hypot(inputs[:, i], inputs[:, j])
            labels = np.searchsorted(np.asarray(spec.radii), radius, side="right").astype(np.int64)
    labels = _flip_labels(rng, labels, spec.classes, spec.label_noise)
    meta = {"generator": spec.kind, "seed": int(seed), "task_seed": spec.task_seed}
    return LabeledDataset(inputs, labels, spec.classes, meta)


def generate_splits(spec: GeneratorSpec) -> dict[str, LabeledDataset]:
    """One dataset per named split, each drawn from its own derived seed."""
    splits = spec.splits or {"train": spec.n}
    out = {}
    for name in sorted(splits):
        sub = spec.model_copy(update={"n": splits[name], "splits": None})
        ds = generate(sub, derive_seed(spec.seed, "split", name))
        out[name] = LabeledDataset(ds.inputs, ds.labels, ds.num_classes, {**ds.metadata, "split": name})
    return out
