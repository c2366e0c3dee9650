"""Command-line entry point."""
import json
import sys

import click

from .config import DEEP_TAPS, DEFAULT_TAPS, ExportConfig, ExportError
from .export import export_subset
from .model import load_backbone


@click.group()
@click.version_option(package_name="feature-exporter", prog_name="feature-exporter")
def main():
    """Export pretrained-CNN patch embeddings from an MVTec-AD-layout tree."""


@main.command()
@click.option("--root", required=True,
              type=click.Path(exists=True, file_okay=False), help="Dataset root directory.")
@click.option("--subset", required=True, help="Subset folder name under the root.")
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Output directory for embedding files and manifest.json.")
@click.option("--image-size", default=224, show_default=True,
              type=click.IntRange(min=32), help="Square resize applied to every image.")
@click.option("--deep-tap", is_flag=True,
              help="Tap the two deepest residual stages instead of the mid-level pair.")
def export(root, subset, out, image_size, deep_tap):
    """Export one subset to embedding files plus a manifest."""
    taps = DEEP_TAPS if deep_tap else DEFAULT_TAPS
    try:
        config = ExportConfig(
            root=root, subset=subset, out_dir=out, image_size=image_size, taps=taps
        )
        result = export_subset(config, extractor=load_backbone())
    except ExportError as exc:
        raise click.ClickException(str(exc))
    for source, message in result.errors:
        click.echo(f"error: {source}: {message}", err=True)
    h, w, c = result.grid_dims
    click.echo(
        f"wrote {result.written} embedding files ({h}x{w}x{c}) and "
        f"{result.manifest_path}, {len(result.errors)} errors",
        err=True,
    )
    click.echo(json.dumps(
        {
            "manifest": str(result.manifest_path),
            "written": result.written,
            "grid_dims": list(result.grid_dims),
            "errors": [{"file": f, "error": m} for f, m in result.errors],
        },
        indent=2,
    ))
    if result.errors:
        sys.exit(1)


if __name__ == "__main__":
    main()
