"""Command-line surface for the whole pipeline.

Configuration precedence is defaults < config file < flags; the resolved
configuration is always echoed into the run manifest written next to every
produced artifact. PIVOT_SEED serves as a global seed fallback.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click
import numpy as np

from . import downstream, figures, manifest, mining, pretrain
from .augment import AugmentConfig
from .corpus import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .downstream import TASK_ALIASES, FinetuneConfig
from .neuralcore import ModelConfig, load_checkpoint
from .pretrain import TrainConfig

PRESETS = {
    "desk": CorpusConfig(),
    "large": CorpusConfig(level_counts=(5, 15, 45), videos_per_leaf=12),
    "transfer": CorpusConfig(level_counts=(2, 4, 8), videos_per_leaf=6,
                             clips_per_video=10, name_prefix="transfer"),
}


def _default_seed() -> int:
    return int(os.environ.get("PIVOT_SEED", "0"))


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _fail(msg: str):
    raise click.ClickException(msg)


@click.group()
def main():
    """Procedural-hierarchical pre-training pipeline."""


@main.command("gen-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk")
@click.option("--name-prefix", default=None, help="Override the corpus name vocabulary.")
@click.option("--noise-scale", type=float, default=None)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
def gen_corpus(out_dir, seed, preset, name_prefix, noise_scale, config_file):
    """Generate a seeded synthetic corpus directory."""
    seed = _default_seed() if seed is None else seed
    cfg_dict = {**PRESETS[preset].__dict__, **_load_config_file(config_file)}
    if name_prefix is not None:
        cfg_dict["name_prefix"] = name_prefix
    if noise_scale is not None:
        cfg_dict["noise_scale"] = noise_scale
    cfg_dict["level_counts"] = tuple(cfg_dict["level_counts"])
    config = CorpusConfig(**cfg_dict)
    try:
        bundle = generate_corpus(config, seed)
        save_corpus(bundle, out_dir)
    except ValueError as exc:
        _fail(str(exc))
    manifest.write_manifest(
        out_dir, "gen-corpus", {**cfg_dict, "level_counts": list(config.level_counts)},
        seed, inputs=[], outputs=[os.path.join(out_dir, f) for f in
                                  ("manifest.json", "steps.json", "tasks.json",
                                   "hierarchy.json", "videos.jsonl")],
        extra={"videos": len(bundle.videos), "steps": len(bundle.steps)},
    )
    click.echo(f"wrote corpus with {len(bundle.videos)} videos to {out_dir}")


@main.command("mine")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--k", type=int, default=1, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def mine_cmd(corpus_dir, k, out_path):
    """Mine pseudo-labels, hierarchy paths, and topic matches."""
    try:
        bundle = load_corpus(corpus_dir)
        labels = mining.mine_corpus(bundle, k=k)
        mining.save_labels(labels, out_path)
    except ValueError as exc:
        _fail(str(exc))
    manifest.write_manifest(
        os.path.dirname(out_path) or ".", "mine", {"k": k}, None,
        inputs=[corpus_dir], outputs=[out_path],
        name=os.path.basename(out_path) + ".manifest.json",
    )
    click.echo(f"mined labels for {len(labels)} videos -> {out_path}")


@main.command("pretrain")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--thresh", is_flag=True, help="Enable the dot-product clip filter.")
@click.option("--in-task", "in_task", is_flag=True, help="Keep only in-topic clips.")
@click.option("--sort", "sort_", is_flag=True, help="Reorder clips by task step order.")
@click.option("--unique", is_flag=True, help="Keep one clip per repeated step.")
@click.option("--swap", is_flag=True, help="Randomly swap neighboring clips each epoch.")
@click.option("--threshold-value", type=float, default=1.0, show_default=True)
@click.option("--swap-prob", type=float, default=0.15, show_default=True)
@click.option("--pool", type=click.Choice(["mean", "tfenc"]), default="mean")
@click.option("--epochs", type=int, default=2000, show_default=True)
@click.option("--batch-size", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--dropout", type=float, default=0.1, show_default=True)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--quiet", is_flag=True)
def pretrain_cmd(corpus_dir, labels_path, out_dir, thresh, in_task, sort_,
                 unique, swap, threshold_value, swap_prob, pool, epochs,
                 batch_size, seed, dropout, config_file, quiet):
    """Joint pre-training: checkpoints, metrics.csv, training-curve figure."""
    seed = _default_seed() if seed is None else seed
    file_cfg = _load_config_file(config_file)
    try:
        bundle = load_corpus(corpus_dir)
        labels = mining.load_labels(labels_path)
        aug = AugmentConfig(
            threshold_enabled=thresh, threshold_value=threshold_value,
            in_task=in_task, sort=sort_, unique=unique, swap=swap,
            swap_prob=swap_prob,
        )
        model = ModelConfig(
            dim=bundle.dim, pool=pool, num_steps=len(bundle.steps),
            level_sizes=tuple(
                sum(1 for n in bundle.hierarchy if n.level == lvl)
                for lvl in range(1, bundle.levels() + 1)
            ),
            dropout=dropout,
        )
        config = TrainConfig(
            epochs=epochs, batch_size=batch_size, seed=seed,
            augment=aug, model=model,
            **{k: v for k, v in file_cfg.items()
               if k in ("lr", "weight_decay", "checkpoint_interval",
                        "holdout_fraction", "poly_degree", "patience")},
        )
        config.validate()

        def progress(rec):
            if not quiet and (rec.epoch % 10 == 0 or rec.epoch == 1):
                click.echo(
                    f"epoch {rec.epoch}: acc={rec.step_acc:.3f} "
                    f"joint={rec.loss_joint:.4f}"
                )

        series, accounting = pretrain.pretrain(
            bundle, labels, config, out_dir, progress=progress
        )
    except ValueError as exc:
        _fail(str(exc))
    figures.render_training_curves(
        series, os.path.join(out_dir, "training_curves.png")
    )
    resolved = {
        "epochs": epochs, "batch_size": batch_size, "lr": config.lr,
        "weight_decay": config.weight_decay,
        "checkpoint_interval": config.checkpoint_interval,
        "pool": pool, "dropout": dropout,
        "augment": aug.__dict__,
    }
    outputs = [os.path.join(out_dir, "metrics.csv"),
               os.path.join(out_dir, "training_curves.png")]
    outputs += [os.path.join(out_dir, f"ckpt_{e}.pivt")
                for e in accounting["checkpoint_epochs"]]
    manifest.write_manifest(
        out_dir, "pretrain", resolved, seed,
        inputs=[corpus_dir, labels_path], outputs=outputs,
        extra={
            "clips_per_epoch": accounting["clips_per_epoch"],
            "checkpoint_epochs": accounting["checkpoint_epochs"],
            "train_videos": accounting["train_videos"],
            "final_path_accuracy": accounting["final_path_accuracy"],
        },
    )
    click.echo(
        f"trained {epochs} epochs ({accounting['clips_per_epoch']} clip "
        f"positions/epoch); final acc {series.records[-1].step_acc:.3f}"
    )


@main.command("analyze-stop")
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True))
@click.option("--degree", type=int, default=10, show_default=True)
@click.option("--patience", type=int, default=50, show_default=True)
@click.option("--ckpt-dir", type=click.Path(exists=True), default=None,
              help="Directory with ckpt_*.pivt files; defaults to --interval grid.")
@click.option("--interval", type=int, default=50, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def analyze_stop_cmd(metrics_path, degree, patience, ckpt_dir, interval, out_path):
    """Fit the accuracy curve and emit stop_analysis.json plus a figure."""
    try:
        series = pretrain.read_metrics_csv(metrics_path)
        if ckpt_dir is not None:
            saved = sorted(
                int(f[len("ckpt_"):-len(".pivt")])
                for f in os.listdir(ckpt_dir)
                if f.startswith("ckpt_") and f.endswith(".pivt")
            )
            if not saved:
                _fail(f"no checkpoints found in {ckpt_dir}")
        else:
            n = len(series)
            saved = sorted({e for e in range(interval, n + 1, interval)} | {n})
        analysis = pretrain.analyze_stop(series, degree, patience, saved)
    except ValueError as exc:
        _fail(str(exc))
    if out_path is None:
        out_path = os.path.join(os.path.dirname(metrics_path) or ".",
                                "stop_analysis.json")
    pretrain.write_stop_analysis(analysis, out_path)
    fig_path = os.path.splitext(out_path)[0] + ".png"
    figures.render_stop_analysis(series, analysis, fig_path)
    manifest.write_manifest(
        os.path.dirname(out_path) or ".", "analyze-stop",
        {"degree": degree, "patience": patience, "saved_epochs": saved},
        None, inputs=[metrics_path], outputs=[out_path, fig_path],
        name=os.path.basename(out_path) + ".manifest.json",
    )
    click.echo(
        f"e_star={analysis.e_star} saturation={analysis.saturation_epoch} "
        f"selected_checkpoint={analysis.selected_checkpoint_epoch}"
    )


@main.command("finetune")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), default=None)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--task", required=True, type=click.Choice(sorted(TASK_ALIASES)))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=1, help="Pseudo-label k for the transfer corpus.")
@click.option("--random-init", is_flag=True,
              help="Baseline: ignore the checkpoint encoder weights.")
@click.option("--pool", type=click.Choice(["mean", "tfenc"]), default="mean",
              help="Model shape when no checkpoint supplies one.")
def finetune_cmd(ckpt_path, corpus_dir, task, out_dir, epochs, batch_size,
                 seed, k, random_init, pool):
    """Fine-tune on a transfer corpus and write the tuned model + report.json."""
    seed = _default_seed() if seed is None else seed
    if ckpt_path is None and not random_init:
        _fail("either --ckpt or --random-init is required")
    try:
        bundle = load_corpus(corpus_dir)
        labels = mining.mine_corpus(bundle, k=k)
        config = FinetuneConfig(
            task=TASK_ALIASES[task], batch_size=batch_size, epochs=epochs,
            seed=seed, random_init=random_init,
        )
        if ckpt_path is not None:
            model_config = None
        else:
            model_config = ModelConfig(
                dim=bundle.dim, pool=pool, num_steps=len(bundle.steps),
                level_sizes=(1,),
            )
        model, report = downstream.finetune(
            ckpt_path, bundle, labels, config, model_config=model_config
        )
    except ValueError as exc:
        _fail(str(exc))
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "tuned_model.pivt")
    report_path = os.path.join(out_dir, "report.json")
    downstream.save_tuned_model(model, model_path)
    downstream.save_report(report, report_path)
    manifest.write_manifest(
        out_dir, "finetune",
        {"task": config.task, "epochs": epochs, "batch_size": batch_size,
         "k": k, "random_init": random_init},
        seed, inputs=[p for p in (ckpt_path, corpus_dir) if p],
        outputs=[model_path, model_path + ".head.json", report_path],
    )
    click.echo(f"{config.task}: accuracy {report.accuracy:.2f}% "
               f"on {report.sample_count} held-out samples")


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--task", required=True, type=click.Choice(sorted(TASK_ALIASES)))
@click.option("--k", type=int, default=1)
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(model_path, corpus_dir, task, k, out_path):
    """Evaluate a tuned model over a whole corpus; writes report.json."""
    try:
        model = downstream.load_tuned_model(model_path)
        if model.task != TASK_ALIASES[task]:
            _fail(f"model was tuned for {model.task}, not {TASK_ALIASES[task]}")
        bundle = load_corpus(corpus_dir)
        labels = mining.mine_corpus(bundle, k=k)
        report = downstream.evaluate(model, bundle, labels)
    except ValueError as exc:
        _fail(str(exc))
    if out_path is None:
        out_path = os.path.join(os.path.dirname(model_path) or ".", "report.json")
    downstream.save_report(report, out_path)
    manifest.write_manifest(
        os.path.dirname(out_path) or ".", "eval",
        {"task": model.task, "k": k}, None,
        inputs=[model_path, corpus_dir], outputs=[out_path],
        name=os.path.basename(out_path) + ".manifest.json",
    )
    click.echo(f"{model.task}: accuracy {report.accuracy:.2f}% "
               f"({report.sample_count} samples)")


TASK_COLUMNS = {"step_forecasting": "SF", "step_recognition": "SR",
                "task_recognition": "TR"}


@main.command("report")
@click.option("--runs", "run_dirs", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", default=".", type=click.Path())
def report_cmd(run_dirs, out_dir):
    """Aggregate report.json files into a CSV, aligned text, and a figure."""
    rows = []
    for run in run_dirs:
        row = {"run": os.path.basename(os.path.normpath(run)),
               "SF": None, "SR": None, "TR": None}
        found = False
        for root, _, files in os.walk(run):
            for f in files:
                if f == "report.json":
                    with open(os.path.join(root, f)) as fh:
                        rep = json.load(fh)
                    col = TASK_COLUMNS.get(rep.get("task"))
                    if col:
                        row[col] = rep["accuracy"]
                        found = True
        if not found:
            _fail(f"no report.json found under {run}")
        rows.append(row)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "summary.csv")
    txt_path = os.path.join(out_dir, "summary.txt")
    fig_path = os.path.join(out_dir, "summary.png")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "SF", "SR", "TR"])
        for r in rows:
            writer.writerow([r["run"]] + [
                "" if r[c] is None else f"{r[c]:.2f}" for c in ("SF", "SR", "TR")
            ])
    width = max(len(r["run"]) for r in rows)
    lines = [f"{'run'.ljust(width)}  {'SF':>7} {'SR':>7} {'TR':>7}"]
    for r in rows:
        cells = " ".join(
            f"{r[c]:7.2f}" if r[c] is not None else f"{'-':>7}"
            for c in ("SF", "SR", "TR")
        )
        lines.append(f"{r['run'].ljust(width)}  {cells}")
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    figures.render_report_table(rows, fig_path)
    manifest.write_manifest(
        out_dir, "report", {"runs": list(run_dirs)}, None,
        inputs=list(run_dirs), outputs=[csv_path, txt_path, fig_path],
        name="summary.manifest.json",
    )
    click.echo("\n".join(lines))


if __name__ == "__main__":
    main()
