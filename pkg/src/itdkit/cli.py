"""Command line entry points.

Subcommands: synth, preprocess, train, detect, eval-only. All paths are
resolved against the --workspace root. Exit codes: 0 success, 1 input
error (bad config, malformed data, mismatched checkpoint), 2 runtime
error. Every command is deterministic given (inputs, config, seed).
"""

from __future__ import annotations

import functools
import json
import os
import sys
from datetime import datetime, timezone

import click
import numpy as np
import yaml

from . import evaluation, ingest, synthgen, training
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, load_run_config
from .evaluation import DegenerateLabels
from .ingest import (ActivityTypeTable, EmptySplit, MalformedRecord,
                     UnknownActivityType)
from .pool import EmptyPool
from .scorer import dump_graph_edges, export_vectors, instance_graph
from .synthgen import InvalidConfig, SynthConfig

INPUT_ERRORS = (
    MalformedRecord, UnknownActivityType, InvalidConfig, ConfigError,
    CheckpointError, EmptySplit, EmptyPool, DegenerateLabels,
    FileNotFoundError, NotADirectoryError, IsADirectoryError,
    yaml.YAMLError,
)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except INPUT_ERRORS as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(1)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - boundary
            click.echo(f"runtime error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(2)
    return wrapper


@click.group()
@click.option("--workspace", default=".", show_default=True,
              help="Root against which relative paths are resolved.")
@click.pass_context
def main(ctx, workspace):
    """Activity-level insider threat detection toolkit."""
    ctx.obj = {"workspace": workspace}


def _path(ctx, p):
    if p is None or os.path.isabs(p):
        return p
    return os.path.join(ctx.obj["workspace"], p)


def _parse_date(text):
    if text is None:
        return None
    dt = datetime.strptime(text, "%Y-%m-%d")
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


@main.command()
@click.option("--config", "config_path", required=True,
              help="YAML synth config.")
@click.option("--out", "out_dir", required=True, help="Output directory.")
@click.pass_context
@guarded
def synth(ctx, config_path, out_dir):
    """Generate CERT-shaped synthetic logs with injected anomalies."""
    config_path = _path(ctx, config_path)
    out_dir = _path(ctx, out_dir)
    with open(config_path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    cfg = SynthConfig.from_dict(data)
    stats = synthgen.generate(cfg, out_dir)
    with open(os.path.join(out_dir, "synth_config.yaml"), "w",
              encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
    click.echo(f"generated {stats.n_normal} normal / {stats.n_abnormal} "
               f"abnormal activities in {stats.n_sessions} sessions")


@main.command()
@click.option("--raw", "raw_dir", required=True,
              help="Directory of per-source csv files.")
@click.option("--table", "table_path", default=None,
              help="Activity type table (defaults to RAW/type_table.txt).")
@click.option("--ground-truth", "gt_path", default=None,
              help="Abnormal event id list (defaults to RAW/ground_truth.txt).")
@click.option("--out", "out_dir", required=True)
@click.option("--config", "config_path", default=None, help="Run config YAML.")
@click.option("--test-start", default=None, help="ISO date, e.g. 2011-01-01.")
@click.option("--test-end", default=None)
@click.option("--val-fraction", type=float, default=None)
@click.pass_context
@guarded
def preprocess(ctx, raw_dir, table_path, gt_path, out_dir, config_path,
               test_start, test_end, val_fraction):
    """Parse, sessionize, encode, dedup, label and split raw logs."""
    raw_dir = _path(ctx, raw_dir)
    out_dir = _path(ctx, out_dir)
    cfg = load_run_config(_path(ctx, config_path), {
        "test_start": test_start,
        "test_end": test_end,
        "val_fraction": val_fraction,
    })
    table_path = _path(ctx, table_path) or os.path.join(raw_dir, "type_table.txt")
    gt_path = _path(ctx, gt_path) or os.path.join(raw_dir, "ground_truth.txt")
    table = ActivityTypeTable.from_file(table_path)
    sessions = ingest.build_sessions(raw_dir, table, gt_path,
                                     hour_offset=cfg.hour_offset)
    split = ingest.split_by_time(
        sessions,
        test_start=_parse_date(cfg.test_start),
        test_end=_parse_date(cfg.test_end),
        val_fraction=cfg.val_fraction,
    )
    os.makedirs(out_dir, exist_ok=True)
    for name, part in (("train", split.train), ("val", split.validation),
                       ("test", split.test)):
        ingest.write_instance_file(os.path.join(out_dir, f"{name}.csv"), part)
    stats = {
        "imbalance_ratio": split.imbalance_ratio,
        "sessions": {"train": len(split.train), "val": len(split.validation),
                     "test": len(split.test)},
        "activities": {
            name: int(sum(len(s) for s in part))
            for name, part in (("train", split.train),
                               ("val", split.validation),
                               ("test", split.test))
        },
        "abnormal": {
            name: int(sum(sum(s.labels) for s in part))
            for name, part in (("train", split.train),
                               ("val", split.validation),
                               ("test", split.test))
        },
        "type_table_sha256": table.sha256(),
    }
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True, indent=2)
        fh.write("\n")
    click.echo(f"split: {stats['activities']} activities, "
               f"IR={split.imbalance_ratio:.1f}")


def _load_split(data_dir):
    train = ingest.read_instance_file(os.path.join(data_dir, "train.csv"))
    val = ingest.read_instance_file(os.path.join(data_dir, "val.csv"))
    test = ingest.read_instance_file(os.path.join(data_dir, "test.csv"))
    return ingest.DatasetSplit(
        train=train, validation=val, test=test,
        imbalance_ratio=ingest.activity_imbalance_ratio(train))


@main.command()
@click.option("--data", "data_dir", required=True,
              help="Preprocessed split directory.")
@click.option("--table", "table_path", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--mode", type=click.Choice(["rt", "ph"]), default="rt",
              show_default=True)
@click.option("--out", "out_path", required=True, help="Checkpoint path.")
@click.option("--log", "log_path", default=None,
              help="Training log CSV (default: OUT.log.csv).")
@click.option("--seed", type=int, default=None)
@click.option("--ablation", default=None,
              help="Letters among GHRSWP to disable.")
@click.option("--lr", default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.pass_context
@guarded
def train(ctx, data_dir, table_path, config_path, mode, out_path, log_path,
          seed, ablation, lr, max_epochs, batch_size):
    """Train a detector and write the best-validation checkpoint."""
    data_dir = _path(ctx, data_dir)
    out_path = _path(ctx, out_path)
    cfg = load_run_config(_path(ctx, config_path), {
        "seed": seed,
        "ablation": ablation,
        "lr": float(lr) if lr not in (None, "auto") else lr,
        "max_epochs": max_epochs,
        "batch_size": batch_size,
    })
    table = ActivityTypeTable.from_file(_path(ctx, table_path))
    split = _load_split(data_dir)
    result = training.train(split, table, cfg, mode=mode)
    save_model(out_path, result.model, table, extra_meta={
        "best_epoch": result.best_epoch,
        "best_val_auc": result.best_val_auc,
        "r_value": result.r_value,
        "lr_value": result.lr_value,
        "diverged": result.diverged,
    })
    log_path = _path(ctx, log_path) or out_path + ".log.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_auc,wall_time\n")
        for row in result.history:
            fh.write(f"{row.epoch},{row.train_loss!r},{row.val_auc!r},"
                     f"{row.wall_time:.3f}\n")
    click.echo(f"trained: best epoch {result.best_epoch}, "
               f"val AUC {result.best_val_auc}, r={result.r_value:.1f}, "
               f"lr={result.lr_value}")


def _write_eval(out_dir, scored, latency):
    report, curve = evaluation.evaluate(scored, latency_ms=latency)
    evaluation.write_scores(os.path.join(out_dir, "scores.csv"), scored)
    evaluation.write_roc(os.path.join(out_dir, "roc.csv"), curve)
    evaluation.write_report(os.path.join(out_dir, "report.txt"), report)
    return report


@main.command()
@click.option("--mode", type=click.Choice(["rt", "ph"]), required=True)
@click.option("--checkpoint", "ckpt_path", required=True)
@click.option("--data", "data_dir", required=True,
              help="Preprocessed split directory (scores test.csv).")
@click.option("--out", "out_dir", required=True)
@click.option("--export-vectors", "export_path", default=None,
              help="Write node-0 enhanced vectors to this .npz file.")
@click.option("--dump-graphs", "dump_n", type=int, default=0,
              help="Dump edge lists for the first N instance graphs.")
@click.pass_context
@guarded
def detect(ctx, mode, ckpt_path, data_dir, out_dir, export_path, dump_n):
    """Score a test split and write scores, ROC points and a report."""
    data_dir = _path(ctx, data_dir)
    out_dir = _path(ctx, out_dir)
    model, table, meta = load_model(_path(ctx, ckpt_path), expected_mode=mode)
    sessions = ingest.read_instance_file(os.path.join(data_dir, "test.csv"))
    vocab = table.vocab_size(posthoc=(mode == "ph"))
    max_code = max(max(s.codes) for s in sessions)
    if max_code >= vocab:
        raise CheckpointError(
            f"test data holds code {max_code} but checkpoint vocabulary is "
            f"{vocab}; type table mismatch")
    os.makedirs(out_dir, exist_ok=True)
    if mode == "rt":
        scored, latency = evaluation.detect_realtime(
            model, sessions, max_len=model.config.max_len)
    else:
        scored, latency = evaluation.detect_posthoc(model, sessions)
    report = _write_eval(out_dir, scored, latency)
    if export_path:
        instances = training.build_instances(
            sessions, mode,
            table.mask_code if mode == "ph" else None, model.config.max_len)
        np.savez(_path(ctx, export_path), **export_vectors(model, instances))
    if dump_n > 0:
        instances = training.build_instances(
            sessions, mode,
            table.mask_code if mode == "ph" else None, model.config.max_len)
        for i, inst in enumerate(instances[:dump_n]):
            _, A = instance_graph(model, inst)
            dump_graph_edges(os.path.join(out_dir, f"graph_{i:04d}.txt"), A)
    click.echo(f"auc={report.auc:.4f} dr={report.dr:.4f} fpr={report.fpr:.4f} "
               f"latency={report.latency_ms:.3f}ms")


@main.command(name="eval-only")
@click.option("--scores", "scores_path", required=True)
@click.option("--out", "out_dir", required=True)
@click.pass_context
@guarded
def eval_only(ctx, scores_path, out_dir):
    """Recompute the report from a stored scores file."""
    scored = evaluation.read_scores(_path(ctx, scores_path))
    out_dir = _path(ctx, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    report = _write_eval(out_dir, scored, latency=0.0)
    click.echo(f"auc={report.auc:.4f} dr={report.dr:.4f} fpr={report.fpr:.4f}")


if __name__ == "__main__":
    main()
