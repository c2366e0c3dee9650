"""Command-line front door: build banks, score samples, classify, evaluate,
and sweep gamma.

Machine-readable JSON goes to stdout (or the --out file, written only after
the full payload is serialized, so a failure never leaves a partial file);
a short human summary goes to stderr. Usage errors exit 2, runtime errors
exit 1.
"""
from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from functools import wraps
from pathlib import Path

import click

from .bank import MemoryBank, load_bank, save_bank
from .errors import ParameterError, PatchProtoError
from .evaluation import (
    METHOD_BASELINE,
    METHOD_PATCHPROTO,
    PipelineConfig,
    evaluate,
    gamma_sweep,
    prepare_bank,
)
from .manifest import DatasetManifest, FileProvider, load_manifest
from .prototypes import build_prototypes, classify as classify_selection
from .scoring import score_grid, softmax_normalize, write_score_map
from .selection import select_anomaly_embeddings


@dataclass(frozen=True)
class CliConfig:
    """Echo of the parsed command line, embedded in every JSON payload."""

    command: str
    manifest: str | None = None
    bank: str | None = None
    gamma: float = 0.9
    m_max: int = 32
    knn_k: int = 1
    coreset_fraction: float = 0.1
    temperature: float = 1.0
    shots: int = 1
    episodes: int = 100
    seed: int = 0
    out: str | None = None
    renorm_weights: bool = False
    baseline: bool = False


def _echo_config(cc: CliConfig) -> dict:
    d = dataclasses.asdict(cc)
    # identical runs must emit identical payloads wherever they are written
    d.pop("out")
    return d


def _pipeline_config(cc: CliConfig) -> PipelineConfig:
    return PipelineConfig(
        gamma=cc.gamma,
        max_patches=cc.m_max,
        k_nearest=cc.knn_k,
        temperature=cc.temperature,
        coreset_fraction=cc.coreset_fraction,
        renorm_weights=cc.renorm_weights,
    )


def _emit(payload: dict, out: str | None, summary: str) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        click.echo(text)
    click.echo(summary, err=True)


def _runtime_errors(fn):
    """Map library/runtime failures to exit code 1 with a clean message."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (PatchProtoError, OSError, ValueError) as e:
            raise click.ClickException(str(e)) from e

    return wrapper


def _load(manifest_path: str) -> tuple[DatasetManifest, FileProvider]:
    manifest = load_manifest(manifest_path, audit_dims=True)
    return manifest, FileProvider(manifest)


def _bank_for(manifest: DatasetManifest, provider: FileProvider,
              bank_path: str | None, coreset_fraction: float) -> MemoryBank:
    if bank_path is None:
        return prepare_bank(manifest, provider, coreset_fraction)
    bank = load_bank(bank_path)
    if manifest.grid_dims is not None and bank.channels != manifest.grid_dims[2]:
        raise ParameterError(
            f"bank channels {bank.channels} do not match manifest grids "
            f"({manifest.grid_dims[2]} channels)"
        )
    return bank


def _workers(value: int | None) -> int | None:
    if value is not None:
        return value
    return os.cpu_count()


_manifest_opt = click.option(
    "--manifest", "manifest_path", required=True,
    type=click.Path(exists=True, dir_okay=False), help="Dataset manifest JSON.")
_bank_opt = click.option(
    "--bank", "bank_path", type=click.Path(exists=True, dir_okay=False),
    default=None, help="Memory bank file; built from the manifest's normals if omitted.")
_gamma_opt = click.option("--gamma", type=click.FloatRange(0.0, 1.0), default=0.9,
                          show_default=True, help="Cumulative-mass selection threshold.")
_mmax_opt = click.option("--m-max", type=click.IntRange(min=1), default=32,
                         show_default=True, help="Upper bound on selected patches.")
_knn_opt = click.option("--knn-k", type=click.IntRange(min=1), default=1,
                        show_default=True, help="k for k-nearest-neighbor scoring.")
_fraction_opt = click.option(
    "--coreset-fraction", type=click.FloatRange(0.0, 1.0, min_open=True), default=0.1,
    show_default=True, help="Coreset fraction when building a bank on the fly.")
_temperature_opt = click.option(
    "--temperature", type=click.FloatRange(0.0, min_open=True), default=1.0,
    show_default=True, help="Softmax temperature for score normalization.")
_renorm_opt = click.option("--renorm-weights", is_flag=True,
                           help="Renormalize query weights over the selected subset.")
_out_opt = click.option("--out", "out_path", type=click.Path(dir_okay=False),
                        default=None, help="Write the JSON payload here instead of stdout.")
_workers_opt = click.option(
    "--workers", type=click.IntRange(min=1), default=None,
    envvar="PATCHPROTO_WORKERS", show_envvar=True,
    help="Episode parallelism; defaults to the machine's core count.")


@click.group()
@click.version_option(package_name="patchproto", prog_name="patchproto")
def main():
    """Few-shot anomaly-type classification over patch-embedding grids."""


@main.command("build-bank")
@_manifest_opt
@_fraction_opt
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Destination bank file.")
@_runtime_errors
def cmd_build_bank(manifest_path, coreset_fraction, out_path):
    """Build a memory bank from the manifest's normal samples."""
    cc = CliConfig(command="build-bank", manifest=manifest_path,
                   coreset_fraction=coreset_fraction, out=out_path)
    manifest, provider = _load(manifest_path)
    bank = prepare_bank(manifest, provider, coreset_fraction)
    save_bank(bank, out_path)
    payload = {
        "config": _echo_config(cc),
        "bank_file": out_path,
        "channels": bank.channels,
        "size": len(bank),
        "source_count": bank.source_count,
        "coreset_fraction": bank.coreset_fraction,
    }
    click.echo(json.dumps(payload, sort_keys=True, indent=2))
    click.echo(
        f"bank: {len(bank)} of {bank.source_count} patch vectors "
        f"({bank.channels} channels) -> {out_path}", err=True)


@main.command("score")
@_manifest_opt
@_bank_opt
@click.option("--sample", "sample_id", required=True, help="Sample id to score.")
@_knn_opt
@_fraction_opt
@_temperature_opt
@click.option("--dump-map", "dump_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the raw+normalized score map as a container file.")
@_out_opt
@_runtime_errors
def cmd_score(manifest_path, bank_path, sample_id, knn_k, coreset_fraction,
              temperature, dump_path, out_path):
    """Score one sample's patches against the memory bank."""
    cc = CliConfig(command="score", manifest=manifest_path, bank=bank_path,
                   knn_k=knn_k, coreset_fraction=coreset_fraction,
                   temperature=temperature, out=out_path)
    manifest, provider = _load(manifest_path)
    bank = _bank_for(manifest, provider, bank_path, coreset_fraction)
    grid = provider.grid(sample_id)
    sm = softmax_normalize(score_grid(grid, bank, k=knn_k), temperature=temperature)
    if dump_path:
        write_score_map(sm, dump_path)
    flat = sm.normalized.ravel()
    top = sorted(range(flat.size), key=lambda i: (-flat[i], i))[:5]
    payload = {
        "config": _echo_config(cc),
        "sample_id": sample_id,
        "height": sm.raw.shape[0],
        "width": sm.raw.shape[1],
        "raw_min": float(sm.raw.min()),
        "raw_max": float(sm.raw.max()),
        "raw_mean": float(sm.raw.mean()),
        "top_patches": [
            {"row": int(i // sm.raw.shape[1]), "col": int(i % sm.raw.shape[1]),
             "raw": float(sm.raw.ravel()[i]), "weight": float(flat[i])}
            for i in top
        ],
        "score_map_file": dump_path,
    }
    _emit(payload, out_path,
          f"{sample_id}: raw scores in [{payload['raw_min']:.4g}, "
          f"{payload['raw_max']:.4g}], top patch at "
          f"({payload['top_patches'][0]['row']}, {payload['top_patches'][0]['col']})")


@main.command("classify")
@_manifest_opt
@_bank_opt
@click.option("--support", "support_ids", multiple=True, required=True,
              help="Support sample id (repeatable); class labels come from the manifest.")
@click.option("--query", "query_ids", multiple=True, required=True,
              help="Query sample id (repeatable).")
@_gamma_opt
@_mmax_opt
@_knn_opt
@_fraction_opt
@_temperature_opt
@_renorm_opt
@_out_opt
@_runtime_errors
def cmd_classify(manifest_path, bank_path, support_ids, query_ids, gamma, m_max,
                 knn_k, coreset_fraction, temperature, renorm_weights, out_path):
    """Classify query samples against prototypes built from support samples."""
    cc = CliConfig(command="classify", manifest=manifest_path, bank=bank_path,
                   gamma=gamma, m_max=m_max, knn_k=knn_k,
                   coreset_fraction=coreset_fraction, temperature=temperature,
                   renorm_weights=renorm_weights, out=out_path)
    manifest, provider = _load(manifest_path)
    bank = _bank_for(manifest, provider, bank_path, coreset_fraction)

    def select(sample_id: str):
        grid = provider.grid(sample_id)
        sm = softmax_normalize(score_grid(grid, bank, k=knn_k), temperature=temperature)
        return select_anomaly_embeddings(grid, sm, gamma=gamma, m=m_max)

    support = []
    for sid in support_ids:
        rec = manifest.sample(sid)
        if rec.class_id < 0:
            raise ParameterError(f"support sample {sid!r} is a normal sample, "
                                 "not an anomaly class example")
        support.append((select(sid), rec.class_id))
    protos = build_prototypes(support)

    results = []
    for qid in query_ids:
        r = classify_selection(select(qid), protos, renorm_weights=renorm_weights)
        results.append({
            "sample_id": qid,
            "predicted_class": r.predicted_class,
            "predicted_class_name": manifest.class_name(r.predicted_class),
            "distances": {str(cid): d for cid, d in sorted(r.distances.items())},
        })
    payload = {
        "config": _echo_config(cc),
        "support": [{"sample_id": sid, "class_id": manifest.sample(sid).class_id}
                    for sid in support_ids],
        "queries": results,
    }
    lines = [f"{r['sample_id']} -> class {r['predicted_class']} "
             f"({r['predicted_class_name']})" for r in results]
    _emit(payload, out_path, "\n".join(lines))


@main.command("evaluate")
@_manifest_opt
@_bank_opt
@click.option("--shots", type=click.IntRange(min=1), default=1, show_default=True,
              help="Support samples per class.")
@click.option("--episodes", type=click.IntRange(min=1), default=100, show_default=True,
              help="Number of episodes.")
@click.option("--seed", type=int, default=0, show_default=True)
@_gamma_opt
@_mmax_opt
@_knn_opt
@_fraction_opt
@_temperature_opt
@_renorm_opt
@click.option("--queries-per-class", type=click.IntRange(min=1), default=None,
              help="Cap queries per class instead of using all remaining samples.")
@click.option("--baseline", is_flag=True,
              help="Run the mean-pool prototype baseline instead of the pipeline.")
@click.option("--keep-predictions", is_flag=True,
              help="Include per-query predictions in the JSON report.")
@_workers_opt
@_out_opt
@_runtime_errors
def cmd_evaluate(manifest_path, bank_path, shots, episodes, seed, gamma, m_max,
                 knn_k, coreset_fraction, temperature, renorm_weights,
                 queries_per_class, baseline, keep_predictions, workers, out_path):
    """Episodic few-shot evaluation; prints the full report as JSON."""
    cc = CliConfig(command="evaluate", manifest=manifest_path, bank=bank_path,
                   gamma=gamma, m_max=m_max, knn_k=knn_k,
                   coreset_fraction=coreset_fraction, temperature=temperature,
                   shots=shots, episodes=episodes, seed=seed, out=out_path,
                   renorm_weights=renorm_weights, baseline=baseline)
    manifest, provider = _load(manifest_path)
    config = _pipeline_config(cc)
    method = METHOD_BASELINE if baseline else METHOD_PATCHPROTO
    bank = None
    if not baseline:
        bank = _bank_for(manifest, provider, bank_path, coreset_fraction)
    report = evaluate(
        manifest, provider, shots=shots, n_episodes=episodes, seed=seed,
        config=config, bank=bank, method=method,
        queries_per_class=queries_per_class, keep_predictions=keep_predictions,
        workers=_workers(workers),
    )
    payload = report.to_dict()
    payload["cli"] = _echo_config(cc)
    _emit(payload, out_path,
          f"{method}: mean accuracy {report.mean_accuracy:.4f} "
          f"(std {report.std_accuracy:.4f}) over {episodes} episodes, "
          f"{len(report.class_ids)}-way {shots}-shot")


@main.command("sweep")
@_manifest_opt
@_bank_opt
@click.option("--gammas", default="0,0.25,0.5,0.75,0.9,1.0", show_default=True,
              help="Comma-separated gamma values.")
@click.option("--shots", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--episodes", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_mmax_opt
@_knn_opt
@_fraction_opt
@_temperature_opt
@_renorm_opt
@click.option("--queries-per-class", type=click.IntRange(min=1), default=None)
@_workers_opt
@_out_opt
@_runtime_errors
def cmd_sweep(manifest_path, bank_path, gammas, shots, episodes, seed, m_max,
              knn_k, coreset_fraction, temperature, renorm_weights,
              queries_per_class, workers, out_path):
    """Mean accuracy per gamma over shared episodes (same seed for every row)."""
    try:
        gamma_values = [float(g) for g in gammas.split(",") if g.strip() != ""]
    except ValueError:
        raise click.UsageError(f"--gammas must be comma-separated numbers, got {gammas!r}")
    if not gamma_values:
        raise click.UsageError("--gammas must list at least one value")
    for g in gamma_values:
        if not 0.0 <= g <= 1.0:
            raise click.UsageError(f"gamma {g} outside [0, 1]")

    cc = CliConfig(command="sweep", manifest=manifest_path, bank=bank_path,
                   m_max=m_max, knn_k=knn_k, coreset_fraction=coreset_fraction,
                   temperature=temperature, shots=shots, episodes=episodes,
                   seed=seed, out=out_path, renorm_weights=renorm_weights)
    manifest, provider = _load(manifest_path)
    config = _pipeline_config(cc)
    bank = _bank_for(manifest, provider, bank_path, coreset_fraction)
    rows = gamma_sweep(
        manifest, provider, gamma_values, shots=shots, n_episodes=episodes,
        seed=seed, config=config, bank=bank,
        queries_per_class=queries_per_class, workers=_workers(workers),
    )
    payload = {
        "config": _echo_config(cc),
        "rows": [
            {"gamma": g, "mean_accuracy": rep.mean_accuracy,
             "std_accuracy": rep.std_accuracy}
            for g, rep in rows
        ],
    }
    summary = "\n".join(
        f"gamma={g:<6g} mean_accuracy={rep.mean_accuracy:.4f}" for g, rep in rows
    )
    _emit(payload, out_path, summary)


if __name__ == "__main__":
    main(sys.argv[1:])
