"""Command-line entry points for the clustering pipeline and review service."""

from __future__ import annotations

import json
from pathlib import Path

import click

from fusc import pipeline as pl
from fusc.data import load_manifest
from fusc.evaluate import build_report
from fusc.preprocess import InpaintConfig, preprocess_corpus


@click.group()
def main():
    """Unsupervised semantic clustering of image corpora."""


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--sidecar", type=click.Path(exists=True), default=None, help="OCR text boxes")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--max-iterations", default=2000, show_default=True)
@click.option("--tol", default=0.5, show_default=True, help="convergence tolerance, intensity units")
def preprocess(manifest_path, sidecar, out_dir, max_iterations, tol):
    """Inpaint burned-in text and canonicalize labels from the sidecar."""
    manifest = load_manifest(manifest_path)
    cleaned, rejects = preprocess_corpus(
        manifest, sidecar, out_dir, InpaintConfig(max_iterations, tol)
    )
    click.echo(f"wrote {len(cleaned)} cleaned images to {out_dir} ({len(rejects)} rejected texts)")


def _load_config(config_path: str, run_dir: str | None) -> pl.RunConfig:
    config = pl.RunConfig.from_json_file(config_path)
    if run_dir:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        raw["run_dir"] = run_dir
        config = pl.RunConfig.from_dict(raw)
    return config


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--stages", default=None, help="comma-separated subset of stages")
@click.option("--run-dir", default=None, help="override the config's run directory")
def run(config_path, stages, run_dir):
    """Execute pipeline stages from a run-config JSON file."""
    config = _load_config(config_path, run_dir)
    wanted = stages.split(",") if stages else None
    runner = pl.Run(config)
    runner.execute(wanted)
    click.echo(f"run dir: {runner.run_dir}")
    click.echo(f"executed: {', '.join(runner.executed) or '(nothing)'}")
    click.echo(f"skipped (fresh): {', '.join(runner.skipped) or '(none)'}")


def _stage_command(name: str, help_text: str):
    @main.command(name=name, help=help_text)
    @click.option("--config", "config_path", required=True, type=click.Path(exists=True))
    @click.option("--run-dir", default=None)
    def _cmd(config_path, run_dir):
        config = _load_config(config_path, run_dir)
        runner = pl.Run(config)
        runner.execute([name])
        click.echo(f"{name}: done ({'skipped' if name in runner.skipped else 'executed'})")

    return _cmd


_stage_command("pretrain", "Train the self-supervised encoder on the train split.")
_stage_command("embed", "Embed the full corpus with the trained encoder.")
_stage_command("cluster", "Train the cluster head on mined neighbors.")
_stage_command("selflabel", "Confidence-thresholded self-labeling retraining.")
_stage_command("kmeans", "K-means baseline assignment.")
_stage_command("export", "Export the cluster manifest for review.")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True),
              help="run pipeline mine stage from a run config")
@click.option("--embeddings", "embeddings_dir", default=None, type=click.Path(exists=True),
              help="standalone mode: persisted embeddings directory")
@click.option("--k", default=20, show_default=True, type=int)
@click.option("--out", "out_dir", default=None, type=click.Path(), help="standalone output dir")
@click.option("--run-dir", default=None)
def mine(config_path, embeddings_dir, k, out_dir, run_dir):
    """Mine exact nearest neighbors in embedding space."""
    from fusc.neighbors import mine_neighbors
    from fusc.ssl import EmbeddingMatrix

    if embeddings_dir is not None:
        matrix = EmbeddingMatrix.load(embeddings_dir)
        index = mine_neighbors(matrix, k)
        target = Path(out_dir) if out_dir else Path(embeddings_dir).parent / "neighbors"
        index.save(target)
        click.echo(f"mined {len(index.ids)} x {k} neighbors -> {target}")
        return
    if config_path is None:
        raise click.UsageError("provide either --embeddings or --config")
    config = _load_config(config_path, run_dir)
    if k != config.mine.k:
        raw = json.loads(config.to_json())
        raw["mine"]["k"] = k
        config = pl.RunConfig.from_dict(raw)
    runner = pl.Run(config)
    runner.execute(["mine"])
    click.echo(f"mine: done ({'skipped' if 'mine' in runner.skipped else 'executed'})")


@main.command()
@click.option("--assignment", "assignment_dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--merge", is_flag=True, help="also report superclass-merged metrics")
@click.option("--out", "out_path", default=None, type=click.Path())
def evaluate(assignment_dir, manifest_path, merge, out_path):
    """Evaluate one persisted assignment against a labeled manifest."""
    from fusc.clustering import SoftAssignment

    assignment = SoftAssignment.load(assignment_dir)
    manifest = load_manifest(manifest_path, require_pixels=False)
    known = set(manifest.ids)
    assignment = assignment.subset([i for i in assignment.ids if i in known])
    report = build_report(assignment, manifest, merge=merge, eval_split="all")
    click.echo(report.to_text())
    if out_path:
        Path(out_path).write_text(report.to_json(), encoding="utf-8")
        click.echo(f"wrote {out_path}")


@main.command()
@click.option("--run-dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--exclude-label", "exclude", multiple=True, help="labels to drop (repeatable)")
@click.option("--merge", is_flag=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def generalize(run_dir, manifest_path, exclude, merge, out_path):
    """Frozen-weights clustering evaluation on an external corpus."""
    external = load_manifest(manifest_path)
    report = pl.generalization_eval(run_dir, external, exclude_labels=exclude, merge=merge)
    click.echo(report.to_text())
    if out_path:
        Path(out_path).write_text(report.to_json(), encoding="utf-8")
        click.echo(f"wrote {out_path}")


@main.command()
@click.option("--manifest", "cluster_manifest", required=True, type=click.Path(exists=True),
              help="cluster_manifest.jsonl produced by the export stage")
@click.option("--port", default=8765, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--log", "log_path", default=None, type=click.Path(),
              help="correction log location (default: next to the manifest)")
def serve(cluster_manifest, port, host, log_path):
    """Serve the cluster-review HTTP API."""
    from fusc.review import serve as run_server

    run_server(cluster_manifest, port=port, host=host, log_path=log_path)


if __name__ == "__main__":
    main()
