import json

import numpy as np
import pytest

from helpers import random_checkpoint, small_manifest, tree_digest
from mergelens.analysis import correlation_matrix, evaluate_behavior, load_suites
from mergelens.checkpoint import load_checkpoint, save_checkpoint
from mergelens.cli import main
from mergelens.data import GeneratorSpec, generate, load_dataset, save_dataset
from mergelens.merge import merge_linear, merge_ties
from mergelens.models import ToyArchitecture, init_params
from mergelens.probe import ProbeConfig, load_probe_tasks, run_probe_suite
from mergelens.reports import load_report, read_json


@pytest.fixture
def parents(tmp_path):
    rng = np.random.default_rng(0)
    shapes = {"a": (3, 2), "b": (4,)}
    paths = []
    for name in ("base", "x", "y"):
        ck = random_checkpoint(rng, shapes)
        save_checkpoint(ck, tmp_path / f"{name}.safetensors")
        paths.append(ck)
    return paths


def test_merge_matches_library(tmp_path, parents):
    _, x, y = parents
    (tmp_path / "r.json").write_text(json.dumps({"method": "linear", "parents": ["x.safetensors", "y.safetensors"], "weights": [1, 2]}))
    assert main(["merge", str(tmp_path / "r.json"), str(tmp_path / "out.safetensors")]) == 0
    assert load_checkpoint(tmp_path / "out.safetensors") == merge_linear([x, y], [1, 2])


def test_merge_with_base(tmp_path, parents):
    base, x, y = parents
    recipe = {"method": "ties", "parents": ["x.safetensors", "y.safetensors"], "base": "base.safetensors", "density": 0.4}
    (tmp_path / "r.json").write_text(json.dumps(recipe))
    assert main(["merge", str(tmp_path / "r.json"), str(tmp_path / "out.safetensors")]) == 0
    assert load_checkpoint(tmp_path / "out.safetensors") == merge_ties(base, [x, y], 0.4, 1.0)


def test_bad_recipe_exit_code(tmp_path, parents, capsys):
    (tmp_path / "r.json").write_text(json.dumps({"method": "slerp", "parents": ["x.safetensors"] * 3}))
    assert main(["merge", str(tmp_path / "r.json"), str(tmp_path / "out")]) == 2
    assert "parents" in capsys.readouterr().err


def test_incompatible_merge_exit_code(tmp_path, parents):
    save_checkpoint(random_checkpoint(np.random.default_rng(1), {"a": (2,)}), tmp_path / "odd.safetensors")
    (tmp_path / "r.json").write_text(json.dumps({"method": "linear", "parents": ["x.safetensors", "odd.safetensors"]}))
    assert main(["merge", str(tmp_path / "r.json"), str(tmp_path / "out")]) == 1


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_gen_data(tmp_path):
    spec = {"kind": "xor", "n": 1, "input_dim": 3, "seed": 4, "splits": {"train": 20, "test": 10}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["gen-data", str(tmp_path / "spec.json"), str(tmp_path / "d"), "--format", ".csv"]) == 0
    assert len(load_dataset(tmp_path / "d" / "train.csv")) == 20
    (tmp_path / "single.json").write_text(json.dumps({"kind": "blobs", "n": 12, "input_dim": 2}))
    assert main(["gen-data", str(tmp_path / "single.json"), str(tmp_path / "s.json")]) == 0
    expected = generate(GeneratorSpec(kind="blobs", n=12, input_dim=2))
    np.testing.assert_array_equal(load_dataset(tmp_path / "s.json").inputs, expected.inputs)
    (tmp_path / "bad.json").write_text(json.dumps({"kind": "blobs", "n": 0, "input_dim": 2}))
    assert main(["gen-data", str(tmp_path / "bad.json"), str(tmp_path / "b.json")]) == 2


@pytest.fixture
def eval_files(tmp_path):
    arch = ToyArchitecture(3, (4,), 2)
    for i in range(3):
        save_checkpoint(init_params(arch, i).with_metadata(model_id=f"m{i}"), tmp_path / f"m{i}.safetensors")
    for i, kind in enumerate(("xor", "blobs")):
        for split, n in (("train", 30), ("test", 20)):
            save_dataset(generate(GeneratorSpec(kind=kind, n=n, input_dim=3, seed=10 * i + n)), tmp_path / f"{kind}_{split}.json")
    (tmp_path / "tasks.json").write_text(
        json.dumps(
            {
                "tasks": [
                    {"task_id": "t_xor", "phenomenon": "syntax", "train": "xor_train.json", "test": "xor_test.json"},
                    {"task_id": "t_blobs", "phenomenon": "semantics", "train": "blobs_train.json", "test": "blobs_test.json"},
                ]
            }
        )
    )
    (tmp_path / "suites.json").write_text(
        json.dumps({"suites": [{"suite_id": "s", "tasks": [{"task_id": "x", "path": "xor_test.json"}, {"task_id": "b", "path": "blobs_test.json"}]}]})
    )
    return tmp_path, arch


def test_probe_and_behave_match_library(eval_files):
    root, arch = eval_files
    assert main(["probe", str(root / "m0.safetensors"), str(root / "tasks.json"), str(root / "p0"), "--epochs", "15"]) == 0
    assert main(["behave", str(root / "m0.safetensors"), str(root / "suites.json"), str(root / "b0.json")]) == 0
    model = load_checkpoint(root / "m0.safetensors")
    probe = run_probe_suite(model, arch, load_probe_tasks(root / "tasks.json"), ProbeConfig(epochs=15), "m0")
    behavior = evaluate_behavior(model, arch, load_suites(root / "suites.json"), "m0")
    assert load_report(root / "p0.json") == probe
    assert load_report(root / "b0.json") == behavior
    assert (root / "p0.csv").exists() and (root / "b0.csv").exists()


def test_correlate_matches_library(eval_files):
    root, _ = eval_files
    reports = []
    for i in range(3):
        model = str(root / f"m{i}.safetensors")
        assert main(["probe", model, str(root / "tasks.json"), str(root / f"p{i}.json"), "--epochs", "15"]) == 0
        assert main(["behave", model, str(root / "suites.json"), str(root / f"b{i}.json")]) == 0
        reports += [root / f"p{i}.json", root / f"b{i}.json"]
    assert main(["correlate", *map(str, reports), "--out", str(root / "corr")]) == 0
    probes = [load_report(root / f"p{i}.json") for i in range(3)]
    behaviors = [load_report(root / f"b{i}.json") for i in range(3)]
    for method in ("pearson", "spearman"):
        expected = json.loads(json.dumps(correlation_matrix(probes, behaviors, method).to_json_dict()))
        assert read_json(root / "corr" / f"{method}.json") == expected
    assert main(["correlate", str(reports[0]), "--out", str(root / "c2")]) == 2


def test_run_and_validate(tmp_path, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps(small_manifest() | {"output_dir": "out"}))
    assert main(["validate", "--manifest", str(manifest)]) == 0
    assert main(["run", "--manifest", str(manifest)]) == 0
    assert (tmp_path / "out" / "report.json").exists()
    assert main(["run", "--manifest", str(manifest), "--out", str(tmp_path / "again"), "--jobs", "2"]) == 0
    assert tree_digest(tmp_path / "out") == tree_digest(tmp_path / "again")
    assert main(["run", "--manifest", str(manifest), "--stage", "report"]) == 0


def test_run_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(small_manifest() | {"unknown": True}))
    assert main(["validate", "--manifest", str(bad)]) == 2
    assert main(["run", "--manifest", str(bad), "--out", str(tmp_path / "o")]) == 2
    good = tmp_path / "good.json"
    good.write_text(json.dumps(small_manifest()))
    # merge before parents exist: a stage failure
    assert main(["run", "--manifest", str(good), "--out", str(tmp_path / "o"), "--stage", "merge"]) == 1
    assert (tmp_path / "o" / "FAILED").exists()
    assert main(["run", "--manifest", str(good)]) == 2
