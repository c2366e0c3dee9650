import json

from click.testing import CliRunner

from feature_exporter.cli import main
from conftest import make_subset


def test_cli_export_runs(data_root, tmp_path, extractor, monkeypatch):
    monkeypatch.setattr("feature_exporter.cli.load_backbone", lambda: extractor)
    out = tmp_path / "out"
    result = CliRunner().invoke(
        main,
        ["export", "--root", str(data_root), "--subset", "carpet",
         "--out", str(out), "--image-size", "64"],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    assert payload["written"] == 14
    assert payload["grid_dims"] == [8, 8, 1536]
    assert payload["errors"] == []
    assert (out / "manifest.json").exists()
    assert "wrote 14 embedding files" in result.stderr


def test_cli_deep_tap(data_root, tmp_path, extractor, monkeypatch):
    monkeypatch.setattr("feature_exporter.cli.load_backbone", lambda: extractor)
    result = CliRunner().invoke(
        main,
        ["export", "--root", str(data_root), "--subset", "tile",
         "--out", str(tmp_path / "deep"), "--image-size", "64", "--deep-tap"],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["grid_dims"] == [4, 4, 3072]


def test_cli_toothbrush_exits_nonzero(data_root, tmp_path, extractor, monkeypatch):
    monkeypatch.setattr("feature_exporter.cli.load_backbone", lambda: extractor)
    result = CliRunner().invoke(
        main,
        ["export", "--root", str(data_root), "--subset", "toothbrush",
         "--out", str(tmp_path / "t")],
    )
    assert result.exit_code == 1
    assert "toothbrush" in result.stderr


def test_cli_unreadable_file_exits_nonzero(tmp_path, extractor, monkeypatch):
    monkeypatch.setattr("feature_exporter.cli.load_backbone", lambda: extractor)
    root = tmp_path / "root"
    make_subset(root, "zipper", n_normals=2, defects=("split",), per_defect=2)
    bad = root / "zipper" / "test" / "split" / "001.png"
    bad.write_bytes(b"broken")
    out = tmp_path / "out"
    result = CliRunner().invoke(
        main,
        ["export", "--root", str(root), "--subset", "zipper",
         "--out", str(out), "--image-size", "64"],
    )
    assert result.exit_code == 1
    assert str(bad) in result.stderr
    # readable files were still exported
    payload = json.loads(result.stdout)
    assert payload["written"] == 3
    assert (out / "manifest.json").exists()


def test_cli_usage_errors(tmp_path):
    result = CliRunner().invoke(main, ["export", "--root", str(tmp_path)])
    assert result.exit_code == 2
    result = CliRunner().invoke(
        main, ["export", "--root", str(tmp_path / "missing"), "--subset", "x",
               "--out", str(tmp_path)],
    )
    assert result.exit_code == 2


def test_cli_version():
    result = CliRunner().invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "feature-exporter" in result.output
