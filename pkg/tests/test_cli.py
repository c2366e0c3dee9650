import json

import numpy as np
import pytest
from click.testing import CliRunner

from patchproto import (
    load_bank,
    make_synthetic_dataset,
    read_score_map,
    write_to_dir,
)
from patchproto.cli import main


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    manifest, provider = make_synthetic_dataset(
        n_classes=2, n_normals=6, anomalies_per_class=6, height=5, width=5,
        channels=8, seed=21,
    )
    out = tmp_path_factory.mktemp("synthds")
    manifest_path = write_to_dir(manifest, provider, out)
    return manifest_path


@pytest.fixture()
def runner():
    return CliRunner()


def run_ok(runner, args, **kwargs):
    result = runner.invoke(main, args, catch_exceptions=False, **kwargs)
    assert result.exit_code == 0, result.output
    return result


# --- build-bank ---------------------------------------------------------------

def test_build_bank_full_and_coreset(runner, dataset_dir, tmp_path):
    full = tmp_path / "full.ppmb"
    out = run_ok(runner, ["build-bank", "--manifest", str(dataset_dir),
                          "--coreset-fraction", "1.0", "--out", str(full)])
    payload = json.loads(out.stdout)
    # 6 normal grids x 25 patches
    assert payload["size"] == payload["source_count"] == 150
    assert payload["channels"] == 8
    bank = load_bank(full)
    assert len(bank) == 150

    small = tmp_path / "small.ppmb"
    out = run_ok(runner, ["build-bank", "--manifest", str(dataset_dir),
                          "--coreset-fraction", "0.1", "--out", str(small)])
    assert json.loads(out.stdout)["size"] == 15
    assert len(load_bank(small)) == 15


def test_build_bank_is_deterministic(runner, dataset_dir, tmp_path):
    a, b = tmp_path / "a.ppmb", tmp_path / "b.ppmb"
    for path in (a, b):
        run_ok(runner, ["build-bank", "--manifest", str(dataset_dir),
                        "--coreset-fraction", "0.2", "--out", str(path)])
    assert a.read_bytes() == b.read_bytes()


# --- score --------------------------------------------------------------------

def test_score_reports_top_patches_and_dumps_map(runner, dataset_dir, tmp_path):
    dump = tmp_path / "map.ppsm"
    out = run_ok(runner, ["score", "--manifest", str(dataset_dir),
                          "--sample", "class0_000", "--dump-map", str(dump)])
    payload = json.loads(out.stdout)
    assert payload["sample_id"] == "class0_000"
    assert payload["height"] == payload["width"] == 5
    assert payload["raw_max"] >= payload["raw_mean"] >= payload["raw_min"] >= 0
    assert len(payload["top_patches"]) == 5
    weights = [p["weight"] for p in payload["top_patches"]]
    assert weights == sorted(weights, reverse=True)
    sm = read_score_map(dump)
    assert sm.raw.shape == (5, 5)
    assert abs(float(sm.normalized.sum()) - 1.0) <= 1e-6


def test_score_unknown_sample_fails_cleanly(runner, dataset_dir):
    result = CliRunner().invoke(main, ["score", "--manifest", str(dataset_dir),
                                       "--sample", "nope"])
    assert result.exit_code == 1
    assert "nope" in result.output


# --- classify -------------------------------------------------------------------

def test_classify_labels_queries(runner, dataset_dir):
    out = run_ok(runner, [
        "classify", "--manifest", str(dataset_dir),
        "--support", "class0_000", "--support", "class1_000",
        "--query", "class0_001", "--query", "class1_001",
    ])
    payload = json.loads(out.stdout)
    assert [q["sample_id"] for q in payload["queries"]] == ["class0_001", "class1_001"]
    assert [q["predicted_class"] for q in payload["queries"]] == [0, 1]
    assert payload["queries"][0]["predicted_class_name"] == "type_0"
    assert set(payload["queries"][0]["distances"]) == {"0", "1"}


def test_classify_rejects_normal_support(runner, dataset_dir):
    result = CliRunner().invoke(main, [
        "classify", "--manifest", str(dataset_dir),
        "--support", "normal_000", "--query", "class0_001",
    ])
    assert result.exit_code == 1
    assert "normal" in result.output


# --- evaluate -------------------------------------------------------------------

def _evaluate_args(dataset_dir, *extra):
    return ["evaluate", "--manifest", str(dataset_dir), "--episodes", "4",
            "--workers", "2", *extra]


def test_evaluate_reports_all_shot_counts(runner, dataset_dir):
    for shots in ("1", "3", "5"):
        out = run_ok(runner, _evaluate_args(dataset_dir, "--shots", shots))
        payload = json.loads(out.stdout)
        assert payload["shots"] == int(shots)
        assert payload["method"] == "patchproto"
        assert len(payload["per_episode"]) == 4
        for key in ("config", "per_episode", "mean_accuracy", "confusion"):
            assert key in payload
        assert payload["cli"]["command"] == "evaluate"


def test_evaluate_baseline_flag(runner, dataset_dir):
    out = run_ok(runner, _evaluate_args(dataset_dir, "--baseline"))
    assert json.loads(out.stdout)["method"] == "baseline"


def test_evaluate_same_seed_identical_json(runner, dataset_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run_ok(runner, _evaluate_args(dataset_dir, "--seed", "3", "--out", str(a)))
    run_ok(runner, _evaluate_args(dataset_dir, "--seed", "3", "--out", str(b)))
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["seed"] == 3


def test_evaluate_workers_env_override(runner, dataset_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run_ok(runner, ["evaluate", "--manifest", str(dataset_dir), "--episodes", "3",
                    "--out", str(a)], env={"PATCHPROTO_WORKERS": "3"})
    run_ok(runner, ["evaluate", "--manifest", str(dataset_dir), "--episodes", "3",
                    "--workers", "1", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_evaluate_uses_prebuilt_bank(runner, dataset_dir, tmp_path):
    bank_path = tmp_path / "bank.ppmb"
    run_ok(runner, ["build-bank", "--manifest", str(dataset_dir),
                    "--coreset-fraction", "0.1", "--out", str(bank_path)])
    out = run_ok(runner, _evaluate_args(dataset_dir, "--bank", str(bank_path)))
    plain = run_ok(runner, _evaluate_args(dataset_dir))
    assert json.loads(out.stdout)["mean_accuracy"] == \
        json.loads(plain.stdout)["mean_accuracy"]


# --- sweep ----------------------------------------------------------------------

def test_sweep_rows(runner, dataset_dir):
    out = run_ok(runner, ["sweep", "--manifest", str(dataset_dir),
                          "--gammas", "0,0.5,0.5", "--episodes", "3",
                          "--workers", "2"])
    payload = json.loads(out.stdout)
    rows = payload["rows"]
    assert [r["gamma"] for r in rows] == [0.0, 0.5, 0.5]
    assert rows[1] == rows[2]  # identical gamma, identical row
    for r in rows:
        assert 0.0 <= r["mean_accuracy"] <= 1.0


def test_sweep_gamma_zero_equals_evaluate_at_zero(runner, dataset_dir):
    sweep = run_ok(runner, ["sweep", "--manifest", str(dataset_dir),
                            "--gammas", "0", "--episodes", "3"])
    single = run_ok(runner, _evaluate_args(dataset_dir)[:-2] + ["--gamma", "0"])
    row = json.loads(sweep.stdout)["rows"][0]
    report = json.loads(single.stdout)
    assert row["mean_accuracy"] == report["mean_accuracy"]
    assert row["std_accuracy"] == report["std_accuracy"]


def test_sweep_rejects_bad_gammas(runner, dataset_dir):
    for bad in ("0.2,oops", "", "0.5,1.5"):
        result = CliRunner().invoke(main, ["sweep", "--manifest", str(dataset_dir),
                                           "--gammas", bad, "--episodes", "2"])
        assert result.exit_code == 2, bad


# --- error contract -------------------------------------------------------------

def test_usage_error_leaves_no_partial_out_file(runner, dataset_dir, tmp_path):
    out = tmp_path / "report.json"
    result = CliRunner().invoke(main, [
        "evaluate", "--manifest", str(dataset_dir), "--gamma", "1.5",
        "--out", str(out),
    ])
    assert result.exit_code == 2
    assert not out.exists()


def test_runtime_error_leaves_no_partial_out_file(runner, dataset_dir, tmp_path):
    out = tmp_path / "report.json"
    result = CliRunner().invoke(main, [
        "evaluate", "--manifest", str(dataset_dir), "--shots", "50",
        "--out", str(out),
    ])
    assert result.exit_code == 1
    assert "class" in result.output
    assert not out.exists()


def test_missing_manifest_is_usage_error(runner, tmp_path):
    result = CliRunner().invoke(main, ["evaluate", "--manifest",
                                       str(tmp_path / "absent.json")])
    assert result.exit_code == 2


def test_corrupt_manifest_is_runtime_error(runner, tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    result = CliRunner().invoke(main, ["evaluate", "--manifest", str(bad)])
    assert result.exit_code == 1


def test_version_flag(runner):
    out = run_ok(runner, ["--version"])
    assert "patchproto" in out.output
