"""Deterministic JSON/CSV writers and report loading."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .analysis import BehaviorReport
from .errors import IoFailure
from .probe import ProbeReport


def dumps_json(obj) -> str:
    # allow_nan=False: a NaN reaching an output file is a bug, not data
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, ensure_ascii=False) + "\n"


def write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_json(path, obj) -> None:
    write_text(path, dumps_json(obj))


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text(path, buf.getvalue())


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_report(stem, report) -> None:
    """Write ``stem.json`` and ``stem.csv`` for a probe or behavior report."""
    stem = Path(stem)
    write_json(stem.with_suffix(".json"), report.to_json_dict())
    write_csv(stem.with_suffix(".csv"), *report.csv_rows())


def load_report(path):
    data = read_json(path)
    kind = data.get("kind")
    if kind == "probe_report":
        return ProbeReport.from_json_dict(data)
    if kind == "behavior_report":
        return BehaviorReport.from_json_dict(data)
    raise ValueError(f"{path}: unrecognized report kind {kind!r}")


def write_correlation(out_dir, matrix) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / f"{matrix.method}.json", matrix.to_json_dict())
    write_csv(out_dir / f"{matrix.method}_long.csv", *matrix.long_rows())
