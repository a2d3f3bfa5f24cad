"""Fixture builders and independent reference implementations for the tests."""

import itertools
import json
import math
import struct
from fractions import Fraction

import numpy as np

from mergelens.analysis import BehaviorReport, BehaviorRow
from mergelens.checkpoint import Checkpoint
from mergelens.probe import ProbeReport, ProbeRow


def random_checkpoint(rng, shapes=None, scale=1.0):
    if shapes is None:
        shapes = {f"t{i}": tuple(rng.integers(1, 6, size=rng.integers(1, 3))) for i in range(rng.integers(1, 4))}
    return Checkpoint({n: (rng.normal(size=s) * scale).astype(np.float32) for n, s in shapes.items()})


def random_shapes(rng):
    return {f"t{i}": tuple(int(d) for d in rng.integers(1, 6, size=rng.integers(1, 3))) for i in range(rng.integers(1, 4))}


def write_raw_container(path, entries, metadata=None):
    """Serialize ``{name: (dtype_tag, shape, bytes)}`` without going through the library writer."""
    header = {}
    payload = b""
    for name, (tag, shape, data) in entries.items():
        header[name] = {"dtype": tag, "shape": list(shape), "data_offsets": [len(payload), len(payload) + len(data)]}
        payload += data
    if metadata:
        header["__metadata__"] = metadata
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + payload)


# --------------------------------------------------------------------------- TIES brute force


def oracle_trim(values, density):
    """Kept set = first size-m index combination (lexicographic) with maximal total magnitude."""
    n = len(values)
    m = math.ceil(Fraction(str(density)) * n)
    best, best_sum = None, None
    for combo in itertools.combinations(range(n), m):
        total = sum(abs(values[i]) for i in combo)
        if best_sum is None or total > best_sum:
            best, best_sum = combo, total
    return [values[i] if i in best else 0 for i in range(n)]


def oracle_ties_delta(task_vectors, density):
    """Exact (Fraction) merged task vector for integer task vectors."""
    trimmed = [oracle_trim(tv, density) for tv in task_vectors]
    out = []
    for column in zip(*trimmed):
        sign = 1 if sum(column) >= 0 else -1
        aligned = [v for v in column if v != 0 and (v > 0) == (sign > 0)]
        out.append(Fraction(sum(aligned), len(aligned)) if aligned else Fraction(0))
    return out


def oracle_ties(base, fine_tuned, density, lam):
    tvs = [[f - b for f, b in zip(ft, base)] for ft in fine_tuned]
    delta = oracle_ties_delta(tvs, density)
    return np.array([float(b + Fraction(lam) * d) for b, d in zip(base, delta)], dtype=np.float32)


# --------------------------------------------------------------------------- gradients


def central_differences(fn, arrays, h=1e-4):
    """Numerical gradient of scalar ``fn()`` w.r.t. every float64 array in ``arrays`` (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = fn()
            arr[idx] = old - h
            down = fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)


# --------------------------------------------------------------------------- manifests


def small_manifest(recipes=True):
    """Two parents fine-tuned from one base, five recipes, three suites, four probe tasks; seconds to run."""
    gen = lambda **kw: {"generate": {"input_dim": 3, **kw}}
    manifest = {
        "seed": 5,
        "architecture": {"input_dim": 3, "hidden_dims": [6], "num_classes": 2},
        "base": {"id": "base", "train": {"data": gen(kind="blobs", n=80, task_seed=1), "epochs": 60, "learning_rate": 0.5}},
        "parents": [
            {"id": "pa", "train": {"data": gen(kind="xor", n=80, dims=[0, 1]), "epochs": 80, "learning_rate": 0.5}},
            {"id": "pb", "train": {"data": gen(kind="rings", n=80, dims=[1, 2]), "epochs": 80, "learning_rate": 0.5}},
        ],
        "recipes": [
            {"name": "lin", "method": "linear", "parents": ["pa", "pb"]},
            {"name": "sl", "method": "slerp", "parents": ["pa", "pb"], "t": 0.3},
            {"name": "ta", "method": "task_arithmetic", "parents": ["pa", "pb"], "base": "base", "lambda": 0.8},
            {"name": "ti", "method": "ties", "parents": ["pa", "pb"], "base": "base"},
            {"name": "dt", "method": "dare_ties", "parents": ["pa", "pb"], "base": "base", "drop_prob": 0.3},
        ],
        "behavior_suites": [
            {"suite_id": "general", "tasks": [{"task_id": "blobs", "data": gen(kind="blobs", n=60, task_seed=1)}]},
            {"suite_id": "logic", "tasks": [{"task_id": "xor", "data": gen(kind="xor", n=60, dims=[0, 1])}]},
            {"suite_id": "geometry", "tasks": [{"task_id": "rings", "data": gen(kind="rings", n=60, dims=[1, 2])}]},
        ],
        "probe": {"epochs": 30},
        "probe_tasks": [
            {"task_id": f"p{i}", "phenomenon": phen, "generate": {"n": 1, "splits": {"train": 40, "test": 40}, **g["generate"]}}
            for i, (phen, g) in enumerate(
                [
                    ("syntax", gen(kind="xor", dims=[1, 2])),
                    ("syntax", gen(kind="xor", dims=[0, 2])),
                    ("morphology", gen(kind="rings", dims=[0, 1])),
                    ("semantics", gen(kind="blobs", task_seed=3, label_noise=0.1)),
                ]
            )
        ],
    }
    if not recipes:
        manifest["recipes"] = []
    return manifest


def tree_digest(root, exclude=("timings.json",)):
    """sha256 of every file under ``root`` keyed by relative path."""
    import hashlib
    from pathlib import Path

    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


# --------------------------------------------------------------------------- correlation fixture

# Frozen values from an offline 50-digit evaluation of the textbook formulas.
FIVE_PROBE = {"m1": 0.61, "m2": 0.72, "m3": 0.55, "m4": 0.80, "m5": 0.66}
FIVE_BEHAVIOR = {"m1": 0.42, "m2": 0.58, "m3": 0.47, "m4": 0.51, "m5": 0.63}
FIVE_PEARSON = 0.3876322135649812122
FIVE_SPEARMAN = 0.5


def probe_report(scores, phenomenon="syntax"):
    return ProbeReport(tuple(ProbeRow(m, phenomenon, phenomenon, v, v) for m, v in scores.items()))


def behavior_report(scores, suite="bbh"):
    return BehaviorReport(tuple(BehaviorRow(m, suite, suite, v) for m, v in scores.items()))
