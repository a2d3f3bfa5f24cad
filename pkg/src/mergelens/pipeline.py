"""End-to-end run: parents -> merges -> behavior -> probes -> comparisons -> correlations.

Every stage reads its inputs from and writes its outputs to the run directory,
so any single stage can be rerun on its own. All file names derive from model
ids and stage names, and no absolute path is written into any output; two runs
of one manifest therefore produce identical bytes (``timings.json`` aside).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Optional

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)

from . import __version__
from .analysis import (
    BehaviorReport,
    BehaviorSuite,
    BehaviorTask,
    category_counts,
    compare_to_parents,
    correlation_matrix,
    evaluate_behavior,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import GeneratorSpec, LabeledDataset, derive_seed, generate, generate_splits, load_dataset
from .errors import ManifestError, MergeLensError, StageError
from .merge import apply_recipe
from .models import ToyArchitecture, train_toy_model
from .probe import ProbeConfig, ProbeReport, ProbeTask, load_probe_tasks, run_probe_suite
from .recipe import MergeRecipe, first_error
from .reports import read_json, write_csv, write_correlation, write_json, write_report

log = logging.getLogger(__name__)

STAGES = ("parents", "merge", "behavior", "probe", "compare", "correlate", "report")
FAILURE_MARKER = "FAILED"
ID_PATTERN = r"^[A-Za-z0-9_.\-]+$"

_strict = ConfigDict(extra="forbid")


class DatasetRef(BaseModel):
    model_config = _strict

    path: Optional[str] = None
    generate: Optional[GeneratorSpec] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.generate is None):
            raise ValueError("give exactly one of 'path' or 'generate'")
        return self


class TrainSpec(BaseModel):
    model_config = _strict

    data: DatasetRef
    epochs: int = Field(ge=1)
    learning_rate: float = Field(gt=0)
    seed: Optional[int] = None


class ModelSpec(BaseModel):
    model_config = _strict

    id: str = Field(pattern=ID_PATTERN)
    path: Optional[str] = None
    train: Optional[TrainSpec] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.train is None):
            raise ValueError("give exactly one of 'path' or 'train'")
        return self


class ArchitectureSpec(BaseModel):
    model_config = _strict

    input_dim: int = Field(gt=0)
    hidden_dims: list[int] = Field(default_factory=list)
    num_classes: int = Field(gt=0)

    def build(self) -> ToyArchitecture:
        return ToyArchitecture(self.input_dim, tuple(self.hidden_dims), self.num_classes)


class RecipeEntry(MergeRecipe):
    """A merge recipe whose parent/base references are model ids of the run."""

    name: str = Field(pattern=ID_PATTERN)
    compare_with: Optional[list[str]] = None

    @field_validator("compare_with")
    @classmethod
    def _two(cls, value):
        if value is not None and len(value) != 2:
            raise ValueError("compare_with names exactly two parent ids")
        return value

    def recipe(self) -> MergeRecipe:
        return MergeRecipe.model_validate(self.model_dump(by_alias=True, exclude={"name", "compare_with"}))


class BehaviorTaskSpec(BaseModel):
    model_config = _strict

    task_id: str
    data: DatasetRef


class SuiteSpec(BaseModel):
    model_config = _strict

    suite_id: str
    tasks: list[BehaviorTaskSpec] = Field(min_length=1)


class ProbeTaskSpec(BaseModel):
    model_config = _strict

    task_id: str
    phenomenon: str
    train: Optional[DatasetRef] = None
    dev: Optional[DatasetRef] = None
    test: Optional[DatasetRef] = None
    generate: Optional[GeneratorSpec] = None

    @model_validator(mode="after")
    def _sources(self):
        if self.generate is not None:
            if self.train or self.dev or self.test:
                raise ValueError("use either 'generate' or explicit splits, not both")
            splits = self.generate.splits or {}
            if "train" not in splits or "test" not in splits:
                raise ValueError("generate.splits must include 'train' and 'test'")
        elif self.train is None or self.test is None:
            raise ValueError("explicit probe tasks need 'train' and 'test'")
        return self


class ProbeSettings(BaseModel):
    model_config = _strict

    epochs: int = Field(default=200, ge=0)
    learning_rate: float = Field(default=0.1, gt=0)
    l2_penalty: float = Field(default=1e-4, ge=0)

    def config(self) -> ProbeConfig:
        return ProbeConfig(self.epochs, self.learning_rate, self.l2_penalty)


class RunManifest(BaseModel):
    model_config = _strict

    seed: int = Field(default=0, ge=0)
    output_dir: Optional[str] = None
    architecture: ArchitectureSpec
    base: ModelSpec
    parents: list[ModelSpec] = Field(min_length=1)
    recipes: list[RecipeEntry] = Field(default_factory=list)
    behavior_suites: list[SuiteSpec] = Field(min_length=1)
    probe_tasks: list[ProbeTaskSpec] = Field(default_factory=list)
    probe_manifests: list[str] = Field(default_factory=list)
    probe: ProbeSettings = Field(default_factory=ProbeSettings)
    epsilon: float = Field(default=0.0, ge=0)
    correlation_methods: list[Literal["pearson", "spearman"]] = Field(
        default_factory=lambda: ["pearson", "spearman"]
    )

    # filled in by parse_manifest
    _root: Path = PrivateAttr(default=Path("."))
    _sha256: str = PrivateAttr(default="")

    @property
    def root(self) -> Path:
        return self._root

    @property
    def sha256(self) -> str:
        return self._sha256

    @property
    def parent_ids(self) -> list[str]:
        return [p.id for p in self.parents]

    @property
    def merged_ids(self) -> list[str]:
        return [r.name for r in self.recipes]

    @property
    def evaluated_ids(self) -> list[str]:
        return self.parent_ids + self.merged_ids

    def comparison_parents(self, entry: RecipeEntry) -> Optional[tuple[str, str]]:
        """The two parents a merged model is categorized against, if any."""
        if entry.compare_with:
            return entry.compare_with[0], entry.compare_with[1]
        in_parents = [p for p in entry.parents if p in self.parent_ids]
        if len(entry.parents) == 2 and len(set(in_parents)) == 2:
            return in_parents[0], in_parents[1]
        if len(self.parents) >= 2:
            return self.parents[0].id, self.parents[1].id
        return None


def _cross_check(m: RunManifest) -> None:
    seen = {m.base.id}
    named = [(f"parents[{i}].id", p.id) for i, p in enumerate(m.parents)]
    named += [(f"recipes[{i}].name", r.name) for i, r in enumerate(m.recipes)]
    for field, model_id in named:
        if model_id in seen:
            raise ManifestError(field, f"duplicate model id {model_id!r}")
        seen.add(model_id)

    def need_file(field, rel):
        if not (m.root / rel).is_file():
            raise ManifestError(field, f"file not found: {rel}")

    def need_dataset(field, ref: Optional[DatasetRef]):
        if ref is not None and ref.path is not None:
            need_file(f"{field}.path", ref.path)

    for field, spec in [("base", m.base)] + [(f"parents[{i}]", p) for i, p in enumerate(m.parents)]:
        if spec.path is not None:
            need_file(f"{field}.path", spec.path)
        else:
            need_dataset(f"{field}.train.data", spec.train.data)

    known = {m.base.id, *m.parent_ids}
    for i, r in enumerate(m.recipes):
        for ref in r.parents:
            if ref not in known:
                raise ManifestError(f"recipes[{i}].parents", f"unknown model id {ref!r}")
        if r.base is not None and r.base != m.base.id:
            raise ManifestError(f"recipes[{i}].base", f"base must be {m.base.id!r}, got {r.base!r}")
        for ref in r.compare_with or []:
            if ref not in m.parent_ids:
                raise ManifestError(f"recipes[{i}].compare_with", f"unknown parent id {ref!r}")

    task_ids = set()
    for i, s in enumerate(m.behavior_suites):
        for j, t in enumerate(s.tasks):
            if t.task_id in task_ids:
                raise ManifestError(f"behavior_suites[{i}].tasks[{j}].task_id", f"duplicate task id {t.task_id!r}")
            task_ids.add(t.task_id)
            need_dataset(f"behavior_suites[{i}].tasks[{j}].data", t.data)

    if not m.probe_tasks and not m.probe_manifests:
        raise ManifestError("probe_tasks", "at least one probe task or probe manifest is required")
    for i, t in enumerate(m.probe_tasks):
        for split in ("train", "dev", "test"):
            need_dataset(f"probe_tasks[{i}].{split}", getattr(t, split))
    for i, rel in enumerate(m.probe_manifests):
        need_file(f"probe_manifests[{i}]", rel)


def parse_manifest(data, root=".", sha256="") -> RunManifest:
    try:
        manifest = RunManifest.model_validate(data)
    except ValidationError as exc:
        loc, msg = first_error(exc)
        raise ManifestError(loc, msg) from None
    manifest._root = Path(root)
    manifest._sha256 = sha256
    _cross_check(manifest)
    return manifest


def validate_manifest(path) -> RunManifest:
    """Parse a manifest file and resolve every cross-reference.

    Relative paths inside the manifest are taken relative to its directory.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ManifestError("", f"cannot read manifest {path}: {exc}") from None
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError("", f"manifest is not valid JSON: {exc}") from None
    return parse_manifest(data, path.parent, hashlib.sha256(raw).hexdigest())


# --------------------------------------------------------------------------- execution


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Pipeline:
    def __init__(self, manifest: RunManifest, out_dir, seed: Optional[int] = None, jobs: int = 1):
        self.m = manifest
        self.out = Path(out_dir)
        self.seed = manifest.seed if seed is None else seed
        self.jobs = max(1, jobs)
        self.arch = manifest.architecture.build()
        self.timings: dict[str, float] = {}

    # ---- paths

    def checkpoint_path(self, model_id: str) -> Path:
        return self.out / "checkpoints" / f"{model_id}.safetensors"

    def _load_model(self, model_id: str) -> Checkpoint:
        model = load_checkpoint(self.checkpoint_path(model_id))
        self.arch.check(model)
        return model

    # ---- dataset resolution

    def _dataset(self, ref: DatasetRef, context: str) -> LabeledDataset:
        if ref.path is not None:
            return load_dataset(self.m.root / ref.path)
        spec = ref.generate
        seed = spec.seed if "seed" in spec.model_fields_set else derive_seed(self.seed, "data", context)
        return generate(spec, seed)

    def _suites(self) -> list[BehaviorSuite]:
        return [
            BehaviorSuite(
                s.suite_id,
                tuple(BehaviorTask(t.task_id, self._dataset(t.data, f"behavior/{t.task_id}")) for t in s.tasks),
            )
            for s in self.m.behavior_suites
        ]

    def _probe_tasks(self) -> list[ProbeTask]:
        tasks = []
        for t in self.m.probe_tasks:
            if t.generate is not None:
                spec = t.generate
                if "seed" not in spec.model_fields_set:
                    spec = spec.model_copy(update={"seed": derive_seed(self.seed, "probe", t.task_id)})
                splits = generate_splits(spec)
            else:
                splits = {
                    name: self._dataset(getattr(t, name), f"probe/{t.task_id}/{name}")
                    for name in ("train", "dev", "test")
                    if getattr(t, name) is not None
                }
            tasks.append(ProbeTask(t.task_id, t.phenomenon, splits["train"], splits.get("dev"), splits["test"]))
        for rel in self.m.probe_manifests:
            tasks.extend(load_probe_tasks(self.m.root / rel))
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("probe task ids must be unique across the manifest")
        return sorted(tasks, key=lambda t: t.task_id)

    def _map_models(self, fn, ids):
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                return list(pool.map(fn, ids))
        return [fn(i) for i in ids]

    # ---- stages

    def stage_parents(self):
        arch_json = self.arch.to_json()

        def materialize(spec: ModelSpec, role: str, init: Optional[Checkpoint]) -> Checkpoint:
            if spec.path is not None:
                model = load_checkpoint(self.m.root / spec.path)
                self.arch.check(model)
            else:
                tr = spec.train
                data = self._dataset(tr.data, f"train/{spec.id}")
                seed = tr.seed if tr.seed is not None else derive_seed(self.seed, "init", spec.id)
                model = train_toy_model(self.arch, data, tr.epochs, tr.learning_rate, seed, init=init)
            lineage = {"role": role, "source": "file" if spec.path else "trained"}
            if role == "parent" and spec.train is not None:
                lineage["fine_tuned_from"] = self.m.base.id
            model = model.with_metadata(
                architecture=arch_json, model_id=spec.id, lineage=json.dumps(lineage, sort_keys=True)
            )
            save_checkpoint(model, self.checkpoint_path(spec.id))
            return model

        self.checkpoint_path("x").parent.mkdir(parents=True, exist_ok=True)
        base = materialize(self.m.base, "base", None)
        for spec in self.m.parents:
            materialize(spec, "parent", base)

    def stage_merge(self):
        needed = {ref for r in self.m.recipes for ref in r.parents}
        models = {mid: self._load_model(mid) for mid in sorted(needed | {self.m.base.id})}
        for entry in self.m.recipes:
            recipe = entry.recipe()
            if recipe.method == "dare_ties" and recipe.seed is None:
                recipe = recipe.model_copy(update={"seed": derive_seed(self.seed, "dare", entry.name)})
            parents = [models[p] for p in recipe.parents]
            base = models[self.m.base.id] if recipe.base else None
            merged = apply_recipe(recipe, parents, base)
            lineage = {"role": "merged", "parents": list(recipe.parents), "base": recipe.base}
            merged = merged.with_metadata(
                architecture=self.arch.to_json(),
                model_id=entry.name,
                lineage=json.dumps(lineage, sort_keys=True),
                recipe=recipe.resolved().model_dump_json(by_alias=True, exclude_none=True),
            )
            save_checkpoint(merged, self.checkpoint_path(entry.name))

    def stage_behavior(self):
        suites = self._suites()

        def run(model_id):
            report = evaluate_behavior(self._load_model(model_id), self.arch, suites, model_id)
            write_report(self.out / "behavior" / model_id, report)

        self._map_models(run, self.m.evaluated_ids)

    def stage_probe(self):
        tasks = self._probe_tasks()
        config = self.m.probe.config()

        def run(model_id):
            report = run_probe_suite(self._load_model(model_id), self.arch, tasks, config, model_id)
            write_report(self.out / "probe" / model_id, report)

        self._map_models(run, self.m.evaluated_ids)

    def _reports(self):
        behavior = BehaviorReport.combine(
            [BehaviorReport.from_json_dict(read_json(self.out / "behavior" / f"{i}.json")) for i in self.m.evaluated_ids]
        )
        probe = ProbeReport.combine(
            [ProbeReport.from_json_dict(read_json(self.out / "probe" / f"{i}.json")) for i in self.m.evaluated_ids]
        )
        return behavior, probe

    def stage_compare(self):
        behavior, probe = self._reports()
        models = self.m.evaluated_ids

        suite_means = behavior.suite_means()
        suites = sorted({s for by in suite_means.values() for s in by})
        write_csv(
            self.out / "tables" / "behavior_absolute.csv",
            ["model_id", *suites],
            [[m, *(suite_means[m].get(s, "") for s in suites)] for m in models],
        )
        phen_means = probe.phenomenon_means()
        phens = sorted({p for by in phen_means.values() for p in by})
        write_csv(
            self.out / "tables" / "probe_absolute.csv",
            ["model_id", *phens],
            [[m, *(phen_means[m].get(p, "") for p in phens)] for m in models],
        )

        header = ["merged_model_id", "task_id", "category", "parent_a", "parent_b",
                  "parent_a_score", "parent_b_score", "merged_score", "epsilon"]
        counts_rows = []
        for kind, report in (("behavior", behavior), ("probe", probe)):
            scores = report.task_scores()
            comparisons = []
            rows = []
            for entry in self.m.recipes:
                pair = self.m.comparison_parents(entry)
                if pair is None:
                    continue
                found = compare_to_parents(scores, entry.name, pair[0], pair[1], self.m.epsilon)
                comparisons.extend(found)
                rows.extend(
                    [c.merged_model_id, c.task_id, c.category, pair[0], pair[1],
                     c.parent_a_score, c.parent_b_score, c.merged_score, c.epsilon]
                    for c in found
                )
            write_csv(self.out / "comparisons" / f"{kind}.csv", header, rows)
            write_json(self.out / "comparisons" / f"{kind}.json", [dict(zip(header, r)) for r in rows])
            for model_id, c in category_counts(comparisons).items():
                counts_rows.append([kind, model_id, c["Better"], c["Between"], c["Worse"], sum(c.values())])
        write_csv(
            self.out / "comparisons" / "counts.csv",
            ["kind", "merged_model_id", "Better", "Between", "Worse", "total"],
            counts_rows,
        )

    def stage_correlate(self):
        behavior, probe = self._reports()
        for method in self.m.correlation_methods:
            write_correlation(self.out / "correlation", correlation_matrix([probe], [behavior], method))

    def stage_report(self) -> dict:
        behavior, probe = self._reports()
        comparisons = {k: read_json(self.out / "comparisons" / f"{k}.json") for k in ("behavior", "probe")}
        counts = {}
        for kind, rows in comparisons.items():
            per_model = {}
            for r in rows:
                per_model.setdefault(r["merged_model_id"], {"Better": 0, "Between": 0, "Worse": 0})[r["category"]] += 1
            counts[kind] = per_model
        all_ids = [self.m.base.id, *self.m.evaluated_ids]
        report = {
            "kind": "pipeline_report",
            "models": {"base": self.m.base.id, "parents": self.m.parent_ids, "merged": self.m.merged_ids},
            "recipes": {
                e.name: {
                    "method": e.method,
                    "parents": list(e.parents),
                    "compare_with": list(self.m.comparison_parents(e) or []),
                    "hyperparameters": e.recipe().hyperparameters(),
                }
                for e in self.m.recipes
            },
            "behavior": behavior.to_json_dict(),
            "probe": probe.to_json_dict(),
            "comparisons": {**comparisons, "counts": counts},
            "correlations": {
                method: read_json(self.out / "correlation" / f"{method}.json")
                for method in self.m.correlation_methods
            },
            "provenance": {
                "tool": "mergelens",
                "version": __version__,
                "manifest_sha256": self.m.sha256,
                "seed": self.seed,
                "checkpoint_sha256": {i: _sha256_file(self.checkpoint_path(i)) for i in all_ids},
                "stages": list(STAGES),
                "timings_file": "timings.json",
            },
        }
        write_json(self.out / "report.json", report)
        return report

    # ---- driver

    def run_stage(self, name: str):
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
        start = time.perf_counter()
        try:
            result = getattr(self, f"stage_{name}")()
        except (MergeLensError, ValueError, KeyError, OSError) as exc:
            err = StageError(name, exc)
            write_json(self.out / FAILURE_MARKER, {"stage": name, "error": f"{type(exc).__name__}: {exc}"})
            raise err from exc
        self.timings[name] = time.perf_counter() - start
        log.info("stage %s done in %.2fs", name, self.timings[name])
        return result

    def run(self, stages=STAGES):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / FAILURE_MARKER).unlink(missing_ok=True)
        result = None
        for name in stages:
            result = self.run_stage(name)
        # wall times vary between runs, so they live outside the deterministic report
        write_json(self.out / "timings.json", {k: round(v, 6) for k, v in self.timings.items()})
        return result


def resolve_output_dir(manifest: RunManifest, out=None) -> Path:
    if out is not None:
        return Path(out)
    if manifest.output_dir is None:
        raise ManifestError("output_dir", "no output directory in manifest and none given")
    return manifest.root / manifest.output_dir


def run_pipeline(manifest: RunManifest, out_dir=None, seed: Optional[int] = None, jobs: int = 1) -> dict:
    """Run every stage and return the assembled pipeline report."""
    return Pipeline(manifest, resolve_output_dir(manifest, out_dir), seed, jobs).run()
