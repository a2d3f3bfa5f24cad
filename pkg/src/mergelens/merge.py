"""Weight-space merging: Linear, SLERP, Task Arithmetic, TIES and DARE-TIES.

Every operator is a pure function of its input checkpoints and hyperparameters.
Tensors are stored as float32; sums and interpolations are accumulated in
float64 and rounded once at the end, which keeps results independent of the
order in which tensors are visited.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, validate_compatibility
from .errors import DegenerateWeights, IncompatibleParents, ParameterOutOfRange

SLERP_EPS = 1e-6


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor difference between a fine-tuned checkpoint and its base.

    Held in float64 so that ``base + (ft - base)`` rounds back to ``ft``.
    """

    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        tensors = {n: np.asarray(self.tensors[n], dtype=np.float64) for n in sorted(self.tensors)}
        object.__setattr__(self, "tensors", tensors)

    def shapes(self):
        return {n: a.shape for n, a in self.tensors.items()}

    def __eq__(self, other):
        if not isinstance(other, TaskVector):
            return NotImplemented
        return list(self.tensors) == list(other.tensors) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    __hash__ = None


# signs are stored as int8 arrays holding +1 / -1
SignVector = dict


def _require_compatible(items: Sequence[Checkpoint], what="parents"):
    report = validate_compatibility(items)
    if not report.compatible:
        first = report.mismatches[0]
        raise IncompatibleParents(
            f"{what} are incompatible: {first.name} ({first.kind}: {first.details})", report
        )


def _require_same_layout(tvs: Sequence[TaskVector]):
    if not tvs:
        raise IncompatibleParents("need at least one task vector")
    ref = tvs[0].shapes()
    for i, tv in enumerate(tvs[1:], start=1):
        if tv.shapes() != ref:
            raise IncompatibleParents(f"task vector {i} does not match task vector 0 in names/shapes")


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- linear


def merge_linear(parents: Sequence[Checkpoint], weights: Sequence[float]) -> Checkpoint:
    """Weighted average ``sum(w_i * theta_i) / sum(w_i)`` per element.

    Per element the weighted terms are sorted before summation, so permuting the
    (parent, weight) pairs cannot change a single bit of the output.
    """
    parents = list(parents)
    weights = [float(w) for w in weights]
    if not parents:
        raise IncompatibleParents("merge_linear needs at least one parent")
    if len(weights) != len(parents):
        raise DegenerateWeights(f"{len(weights)} weights for {len(parents)} parents")
    if any(not math.isfinite(w) or w < 0 for w in weights):
        raise DegenerateWeights(f"weights must be finite and non-negative: {weights}")
    total = math.fsum(weights)
    if total <= 0:
        raise DegenerateWeights("weights must sum to a positive value")
    _require_compatible(parents)

    out = {}
    for name in parents[0]:
        terms = np.stack([w * p[name].astype(np.float64) for p, w in zip(parents, weights)])
        terms.sort(axis=0)
        out[name] = _f32(terms.sum(axis=0) / total)
    normalized = [w / total for w in weights]
    return Checkpoint(out, {"merge.method": "linear", "merge.weights": json.dumps(normalized)})


# --------------------------------------------------------------------------- slerp


def slerp_arrays(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation of two same-shape arrays treated as flat vectors."""
    if t == 0.0:
        return _f32(a).copy()
    if t == 1.0:
        return _f32(b).copy()
    va = a.astype(np.float64).ravel()
    vb = b.astype(np.float64).ravel()
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        sin_omega = 0.0
    else:
        cos_omega = float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))
        omega = math.acos(cos_omega)
        sin_omega = math.sin(omega)
    if abs(sin_omega) < SLERP_EPS:
        out = (1.0 - t) * va + t * vb
    else:
        out = (math.sin((1.0 - t) * omega) / sin_omega) * va + (math.sin(t * omega) / sin_omega) * vb
    return _f32(out.reshape(a.shape))


def merge_slerp(a: Checkpoint, b: Checkpoint, t: float) -> Checkpoint:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ParameterOutOfRange(f"slerp t must lie in [0, 1], got {t}")
    _require_compatible([a, b])
    out = {name: slerp_arrays(a[name], b[name], t) for name in a}
    return Checkpoint(out, {"merge.method": "slerp", "merge.t": _fmt(t)})


# --------------------------------------------------------------------------- task vectors


def compute_task_vector(fine_tuned: Checkpoint, base: Checkpoint) -> TaskVector:
    _require_compatible([base, fine_tuned], "fine-tuned model and base")
    return TaskVector({n: fine_tuned[n].astype(np.float64) - base[n] for n in base})


def apply_task_vector(base: Checkpoint, tv: TaskVector, scale: float = 1.0) -> Checkpoint:
    if tv.shapes() != base.shapes():
        raise IncompatibleParents("task vector does not match the base layout")
    return Checkpoint({n: _f32(base[n].astype(np.float64) + scale * tv.tensors[n].astype(np.float64)) for n in base})


def _check_lambda(lam):
    lam = float(lam)
    if not (math.isfinite(lam) and lam > 0):
        raise ParameterOutOfRange(f"lambda must be > 0, got {lam}")
    return lam


def _task_vectors(base, fine_tuned):
    fine_tuned = list(fine_tuned)
    if not fine_tuned:
        raise IncompatibleParents("need at least one fine-tuned model")
    _require_compatible([base, *fine_tuned], "fine-tuned models and base")
    return [compute_task_vector(ft, base) for ft in fine_tuned]


def _add_scaled(base: Checkpoint, deltas: Mapping[str, np.ndarray], lam: float) -> dict:
    return {n: _f32(base[n].astype(np.float64) + lam * deltas[n]) for n in base}


def merge_task_arithmetic(base: Checkpoint, fine_tuned: Sequence[Checkpoint], lam: float) -> Checkpoint:
    """``base + lam * sum_i (ft_i - base)``."""
    lam = _check_lambda(lam)
    tvs = _task_vectors(base, fine_tuned)
    summed = {n: sum(tv.tensors[n].astype(np.float64) for tv in tvs) for n in base}
    return Checkpoint(
        _add_scaled(base, summed, lam),
        {"merge.method": "task_arithmetic", "merge.lambda": _fmt(lam)},
    )


# --------------------------------------------------------------------------- TIES


def kept_count(density: float, n: int) -> int:
    """``ceil(density * n)``, robust to products like 0.3 * 10 = 3.0000000000000004."""
    return min(n, max(1, math.ceil(round(density * n, 9))))


def _check_density(density):
    density = float(density)
    if not 0.0 < density <= 1.0:
        raise ParameterOutOfRange(f"density must lie in (0, 1], got {density}")
    return density


def trim_rows(rows: np.ndarray, density: float) -> np.ndarray:
    """Keep the ``ceil(density * n)`` largest-magnitude entries of every row.

    Equal magnitudes are resolved in favour of the lower index.
    """
    rows = np.asarray(rows)
    n = rows.shape[-1]
    m = kept_count(density, n)
    if m == n:
        return rows.copy()
    order = np.argsort(-np.abs(rows), axis=-1, kind="stable")
    mask = np.zeros(rows.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :m], True, axis=-1)
    return np.where(mask, rows, np.zeros_like(rows))


def elect_sign_arrays(stack: np.ndarray) -> np.ndarray:
    """Sign of the per-entry sum over axis 0; a zero sum elects +1."""
    total = stack.astype(np.float64).sum(axis=0)
    return np.where(total < 0, -1, 1).astype(np.int8)


def disjoint_mean_arrays(stack: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Mean over the models whose nonzero entry agrees with the elected sign (float64)."""
    stack = stack.astype(np.float64)
    aligned = (np.sign(stack) == signs) & (stack != 0)
    count = aligned.sum(axis=0)
    total = np.where(aligned, stack, 0.0).sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def ties_delta_rows(tv_rows: Sequence[np.ndarray], density: float) -> np.ndarray:
    """Trim, elect and disjoint-merge; every row along the last axis is an independent tensor."""
    trimmed = np.stack([trim_rows(r, density) for r in tv_rows])
    signs = elect_sign_arrays(trimmed)
    return disjoint_mean_arrays(trimmed, signs)


def trim_by_magnitude(tv: TaskVector, density: float) -> TaskVector:
    density = _check_density(density)
    return TaskVector({n: trim_rows(a.ravel(), density).reshape(a.shape) for n, a in tv.tensors.items()})


def elect_sign(tvs: Sequence[TaskVector]) -> SignVector:
    tvs = list(tvs)
    _require_same_layout(tvs)
    return {n: elect_sign_arrays(np.stack([tv.tensors[n] for tv in tvs])) for n in tvs[0].tensors}


def disjoint_merge(tvs: Sequence[TaskVector], signs: SignVector) -> TaskVector:
    tvs = list(tvs)
    _require_same_layout(tvs)
    if {n: np.shape(s) for n, s in signs.items()} != tvs[0].shapes():
        raise IncompatibleParents("sign vector does not match the task vectors")
    return TaskVector(
        {n: disjoint_mean_arrays(np.stack([tv.tensors[n] for tv in tvs]), signs[n]) for n in tvs[0].tensors}
    )


def _ties_from_task_vectors(base, tvs, density, lam):
    deltas = {
        n: ties_delta_rows([tv.tensors[n].ravel() for tv in tvs], density).reshape(base[n].shape)
        for n in base
    }
    return _add_scaled(base, deltas, lam)


def merge_ties(base: Checkpoint, fine_tuned: Sequence[Checkpoint], density: float, lam: float) -> Checkpoint:
    """``base + lam * disjoint_merge(trimmed, elect_sign(trimmed))``."""
    density = _check_density(density)
    lam = _check_lambda(lam)
    tvs = _task_vectors(base, fine_tuned)
    return Checkpoint(
        _ties_from_task_vectors(base, tvs, density, lam),
        {"merge.method": "ties", "merge.density": _fmt(density), "merge.lambda": _fmt(lam)},
    )


# --------------------------------------------------------------------------- DARE


def _philox_key(seed: int, tensor_name: str, model_index: int) -> int:
    msg = json.dumps([int(seed), tensor_name, int(model_index)], separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.sha256(msg).digest()[:16], "little")


def keyed_uniform(seed: int, tensor_name: str, model_index: int, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1) from a Philox stream keyed by (seed, name, index).

    Uses the raw 64-bit counter output, which numpy keeps stable across versions.
    """
    bitgen = np.random.Philox(key=_philox_key(seed, tensor_name, model_index))
    raw = bitgen.random_raw(n)
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _check_drop(p):
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ParameterOutOfRange(f"drop probability must lie in [0, 1), got {p}")
    return p


def dare_array(values: np.ndarray, p: float, seed: int, tensor_name: str, model_index: int) -> np.ndarray:
    if p == 0.0:
        return values.astype(np.float64)
    u = keyed_uniform(seed, tensor_name, model_index, values.size).reshape(values.shape)
    kept = u >= p
    return np.where(kept, values.astype(np.float64) / (1.0 - p), 0.0)


def dare_sparsify(tv: TaskVector, p: float, seed: int, model_index: int = 0) -> TaskVector:
    """Drop each entry with probability ``p`` and rescale survivors by ``1 / (1 - p)``.

    Randomness for tensor ``name`` comes from a stream keyed by
    ``(seed, name, model_index)``, so results do not depend on visiting order.
    """
    p = _check_drop(p)
    return TaskVector({n: dare_array(a, p, seed, n, model_index) for n, a in tv.tensors.items()})


def merge_dare_ties(
    base: Checkpoint,
    fine_tuned: Sequence[Checkpoint],
    p: float,
    density: float,
    lam: float,
    seed: int,
) -> Checkpoint:
    p = _check_drop(p)
    density = _check_density(density)
    lam = _check_lambda(lam)
    tvs = _task_vectors(base, fine_tuned)
    sparse = [dare_sparsify(tv, p, seed, i) for i, tv in enumerate(tvs)]
    return Checkpoint(
        _ties_from_task_vectors(base, sparse, density, lam),
        {
            "merge.method": "dare_ties",
            "merge.drop_prob": _fmt(p),
            "merge.density": _fmt(density),
            "merge.lambda": _fmt(lam),
            "merge.seed": str(int(seed)),
        },
    )


def apply_recipe(recipe, parents: Sequence[Checkpoint], base: Checkpoint | None = None) -> Checkpoint:
    """Run a validated :class:`~mergelens.recipe.MergeRecipe` on loaded checkpoints."""
    recipe = recipe.resolved()
    method = recipe.method
    if method == "linear":
        return merge_linear(parents, recipe.weights)
    if method == "slerp":
        a, b = parents
        return merge_slerp(a, b, recipe.t)
    if base is None:
        raise IncompatibleParents(f"{method} needs a base checkpoint")
    if method == "task_arithmetic":
        return merge_task_arithmetic(base, parents, recipe.lambda_)
    if method == "ties":
        return merge_ties(base, parents, recipe.density, recipe.lambda_)
    if method == "dare_ties":
        return merge_dare_ties(base, parents, recipe.drop_prob, recipe.density, recipe.lambda_, recipe.seed)
    raise ValueError(f"unknown merge method {method!r}")
