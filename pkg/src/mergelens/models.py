"""Small tanh MLP classifiers stored as checkpoints.

Layer ``i`` holds ``layer{i}.weight`` with shape ``[out, in]`` and
``layer{i}.bias`` with shape ``[out]``; every layer but the last applies tanh.
Forward passes and training run in float64, checkpoints stay float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint
from .data import LabeledDataset
from .errors import ArchitectureMismatch, DimensionMismatch, ParameterOutOfRange

INIT_SCALE = 0.1


@dataclass(frozen=True)
class ToyArchitecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.input_dim < 1 or self.num_classes < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("architecture dimensions must be positive")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    @property
    def representation_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            shapes[f"layer{i}.weight"] = (fan_out, fan_in)
            shapes[f"layer{i}.bias"] = (fan_out,)
        return shapes

    def check(self, model: Checkpoint) -> None:
        expected = self.tensor_shapes()
        actual = model.shapes()
        if actual != expected:
            missing = sorted(set(expected) - set(actual))
            extra = sorted(set(actual) - set(expected))
            wrong = sorted(n for n in set(expected) & set(actual) if expected[n] != actual[n])
            raise ArchitectureMismatch(
                f"checkpoint does not match {self.to_json()}: missing={missing} extra={extra} wrong_shape={wrong}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims), "num_classes": self.num_classes},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, data: dict) -> "ToyArchitecture":
        return cls(int(data["input_dim"]), tuple(data.get("hidden_dims", ())), int(data["num_classes"]))

    @classmethod
    def from_checkpoint(cls, model: Checkpoint) -> "ToyArchitecture":
        """Read the architecture from metadata, or infer it from the weight shapes."""
        if "architecture" in model.metadata:
            return cls.from_dict(json.loads(model.metadata["architecture"]))
        i = 0
        dims = []
        while f"layer{i}.weight" in model:
            fan_out, fan_in = model[f"layer{i}.weight"].shape
            if not dims:
                dims.append(fan_in)
            dims.append(fan_out)
            i += 1
        if len(dims) < 2:
            raise ArchitectureMismatch("checkpoint holds no layer0.weight tensor")
        arch = cls(dims[0], tuple(dims[1:-1]), dims[-1])
        arch.check(model)
        return arch


def init_params(arch: ToyArchitecture, seed: int) -> Checkpoint:
    """Uniform(-0.1, 0.1) initialization, drawn layer by layer (weight, then bias)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for i in range(arch.num_layers):
        w_shape = arch.tensor_shapes()[f"layer{i}.weight"]
        tensors[f"layer{i}.weight"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=w_shape)
        tensors[f"layer{i}.bias"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=w_shape[:1])
    return Checkpoint(tensors, {"architecture": arch.to_json()})


def _params64(model: Checkpoint, arch: ToyArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    arch.check(model)
    return [
        (model[f"layer{i}.weight"].astype(np.float64), model[f"layer{i}.bias"].astype(np.float64))
        for i in range(arch.num_layers)
    ]


def _check_inputs(arch, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"expected inputs of shape [n, {arch.input_dim}], got {x.shape}")
    return x


def _forward(layers, x):
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    w, b = layers[-1]
    return h @ w.T + b, acts


def forward(model: Checkpoint, arch: ToyArchitecture, inputs) -> np.ndarray:
    logits, _ = _forward(_params64(model, arch), _check_inputs(arch, inputs))
    return logits


def extract_representation(model: Checkpoint, arch: ToyArchitecture, inputs) -> np.ndarray:
    """Post-activation output of the last hidden layer (the inputs when there is none)."""
    _, acts = _forward(_params64(model, arch), _check_inputs(arch, inputs))
    return acts[-1]


def predict(model: Checkpoint, arch: ToyArchitecture, inputs) -> np.ndarray:
    # np.argmax resolves ties toward the lowest class index
    return np.argmax(forward(model, arch, inputs), axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grads(layers, x, y):
    """Mean softmax cross-entropy and its gradients for float64 ``(weight, bias)`` pairs."""
    logits, acts = _forward(layers, x)
    n = x.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i:
            delta = (delta @ w) * (1.0 - acts[i] ** 2)
    return loss, grads


def train_toy_model(
    arch: ToyArchitecture,
    data: LabeledDataset,
    epochs: int,
    learning_rate: float,
    seed: int,
    init: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Checkpoint:
    """Full-batch gradient descent on softmax cross-entropy.

    Starts from ``init`` when given (fine-tuning a shared base), otherwise from
    :func:`init_params` with ``seed``. ``on_epoch(epoch, loss)`` receives the
    loss measured before each update.
    """
    if len(data) == 0:
        raise ParameterOutOfRange("training data is empty")
    if epochs < 1:
        raise ParameterOutOfRange(f"epochs must be >= 1, got {epochs}")
    if not learning_rate > 0:
        raise ParameterOutOfRange(f"learning_rate must be > 0, got {learning_rate}")
    if data.num_classes > arch.num_classes:
        raise DimensionMismatch(f"dataset has {data.num_classes} classes, model {arch.num_classes}")
    start = init if init is not None else init_params(arch, seed)
    layers = _params64(start, arch)
    x = _check_inputs(arch, data.inputs)
    y = data.labels
    for epoch in range(epochs):
        loss, grads = loss_and_grads(layers, x, y)
        if on_epoch is not None:
            on_epoch(epoch, float(loss))
        layers = [(w - learning_rate * gw, b - learning_rate * gb) for (w, b), (gw, gb) in zip(layers, grads)]
    tensors = {}
    for i, (w, b) in enumerate(layers):
        tensors[f"layer{i}.weight"] = w
        tensors[f"layer{i}.bias"] = b
    return Checkpoint(tensors, {"architecture": arch.to_json()})


def dataset_loss(model: Checkpoint, arch: ToyArchitecture, data: LabeledDataset) -> float:
    loss, _ = loss_and_grads(_params64(model, arch), _check_inputs(arch, data.inputs), data.labels)
    return float(loss)
