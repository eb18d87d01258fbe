"""Experiment orchestration: data assembly, runs, sweeps and the files they leave behind.

A run directory contains::

    metrics.csv        round,method,global_acc,global_loss,mean_client_acc,wall_ms
    timing.csv         round,wall_ms (measured)
    manifest.json      config snapshot, config hash, seeds, artifact list
    checkpoints/       global.ckpt and client_<k>.ckpt
    bound_report.txt   only when bound evaluation is enabled

``metrics.csv`` writes ``wall_ms`` as 0 so that reruns are byte-identical;
measured timings go to ``timing.csv``.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, resolve_axis
from .datasets import (ClientDataset, LabeledDataset, PartitionSpec, dirichlet_partition,
                       load_idx, make_synthetic_digits, make_toy_concept_shift)
from .divergence import HypothesisClassSpec, format_bound_report, measure_bound
from .federation import Federation, RoundMetrics
from .models import ModelParams

log = logging.getLogger(__name__)

METRICS_HEADER = ("round", "method", "global_acc", "global_loss", "mean_client_acc", "wall_ms")


@dataclass
class ExperimentData:
    clients: list[ClientDataset]
    test: LabeledDataset
    layer_sizes: tuple[int, ...]
    holdout: list[LabeledDataset] | None = None  # per-client held-out sets (toy only)


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    ds, fed = cfg.dataset, cfg.federation
    if ds.kind == "toy":
        clients, test = make_toy_concept_shift(ds.n_per_class, cfg.partition_seed,
                                               n_test_per_class=ds.n_test_per_class,
                                               radius=ds.radius)
        holdout = [test.where_source(k) for k in range(len(clients))]
        return ExperimentData(clients, test, cfg.layer_sizes(2, 2), holdout)
    if ds.kind == "synthetic":
        kw = dict(input_dim=ds.input_dim, n_classes=ds.n_classes,
                  modes_per_class=ds.modes_per_class, noise=ds.noise, spread=ds.spread)
        train = make_synthetic_digits(ds.n_train, ds.data_seed, stream=0, **kw)
        test = make_synthetic_digits(ds.n_test, ds.data_seed, stream=1, **kw)
    else:
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels, n_classes=train.n_classes)
    # dirichlet_partition subsamples to train_fraction itself
    spec = PartitionSpec(fed.K, cfg.partition.alpha, cfg.partition.train_fraction,
                         cfg.partition_seed)
    clients = dirichlet_partition(train, spec)
    return ExperimentData(clients, test, cfg.layer_sizes(train.input_dim, train.n_classes))


# -- file writers ------------------------------------------------------------


def format_metrics(history: Sequence[RoundMetrics], with_timing: bool = False) -> str:
    lines = [",".join(METRICS_HEADER)]
    for m in history:
        wall = m.wall_ms if with_timing else 0
        lines.append(f"{m.round},{m.method},{m.global_accuracy:.6f},{m.global_loss:.6f},"
                     f"{m.mean_client_accuracy:.6f},{wall}")
    return "\n".join(lines) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def save_models(out: Path, global_params: ModelParams, local_params: Sequence[ModelParams]
                ) -> list[str]:
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt / "global.ckpt", global_params.named_arrays())
    names = ["checkpoints/global.ckpt"]
    for k, p in enumerate(local_params):
        save_checkpoint(ckpt / f"client_{k}.ckpt", p.named_arrays())
        names.append(f"checkpoints/client_{k}.ckpt")
    return names


def load_models(out: Path, cfg: ExperimentConfig, layer_sizes) -> tuple[ModelParams, list[ModelParams]]:
    ckpt = Path(out) / "checkpoints"
    if not (ckpt / "global.ckpt").exists():
        raise FileNotFoundError(f"no checkpoints under {ckpt}")
    act = cfg.model.latent_activation
    global_params = ModelParams.from_arrays(load_checkpoint(ckpt / "global.ckpt"), layer_sizes, act)
    locals_ = [ModelParams.from_arrays(load_checkpoint(ckpt / f"client_{k}.ckpt"), layer_sizes, act)
               for k in range(cfg.federation.K)]
    return global_params, locals_


# -- runs --------------------------------------------------------------------


@dataclass
class RunResult:
    config: ExperimentConfig
    history: list[RoundMetrics]
    federation: Federation
    data: ExperimentData
    out_dir: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].global_accuracy


def bound_rows(cfg: ExperimentConfig, data: ExperimentData, global_params: ModelParams,
               local_params: Sequence[ModelParams]):
    b = cfg.bound
    return measure_bound(global_params, local_params,
                         [c.open(-1) for c in data.clients], data.holdout, delta=b.delta,
                         spec=HypothesisClassSpec(kind=b.kind), lambda_budget=b.lambda_budget,
                         seed=cfg.root_seed, m_mode=b.m_mode)


def run(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Execute one experiment; write artifacts if ``out_dir`` is given."""
    data = build_data(cfg)
    fed = Federation(cfg.federation, data.clients, data.test, data.layer_sizes, cfg.sgd,
                     cfg.model.latent_activation)
    history = fed.run()
    result = RunResult(cfg, history, fed, data)
    if out_dir is None:
        return result
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = ["metrics.csv", "timing.csv"]
    write_text(out / "metrics.csv", format_metrics(history))
    write_text(out / "timing.csv",
               "round,wall_ms\n" + "".join(f"{m.round},{m.wall_ms}\n" for m in history))
    artifacts += save_models(out, fed.global_params, fed.locals)
    if cfg.bound.enabled:
        rows = bound_rows(cfg, data, fed.global_params, fed.locals)
        write_text(out / "bound_report.txt",
                   format_bound_report(rows, fed.global_params.num_predictor_params()))
        artifacts.append("bound_report.txt")
    write_manifest(out, cfg, sorted(artifacts + ["manifest.json"]))
    result.out_dir = out
    return result


def write_manifest(out: Path, cfg: ExperimentConfig, artifacts: list[str]) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "seeds": {"root": cfg.root_seed, "partition": cfg.partition_seed},
        "artifacts": artifacts,
        "version": __version__,
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _format_value(v) -> str:
    return str(int(v)) if isinstance(v, (int, float)) and float(v).is_integer() else repr(float(v))


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, out_dir=None
          ) -> list[tuple[object, float]]:
    """One run per value of ``axis``; returns ``(value, final_acc)`` rows."""
    path = resolve_axis(axis)
    rows = []
    for v in values:
        sub_cfg = cfg.with_value(path, v)
        sub_out = None if out_dir is None else Path(out_dir) / f"{path}={_format_value(v)}"
        res = run(sub_cfg, sub_out)
        rows.append((v, res.final_accuracy))
        log.info("sweep %s=%s final_acc=%.4f", path, v, res.final_accuracy)
    if out_dir is not None:
        write_text(Path(out_dir) / "summary.csv", format_summary(rows))
    return rows


def format_summary(rows) -> str:
    return "value,final_acc\n" + "".join(f"{_format_value(v)},{acc:.6f}\n" for v, acc in rows)


# -- plot data ---------------------------------------------------------------


class MetricsFormatError(ValueError):
    pass


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsFormatError("no rows") from None
        missing = {"round", "method", "global_acc"} - set(header)
        if missing:
            raise MetricsFormatError(f"malformed metrics header, missing {sorted(missing)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise MetricsFormatError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
            row = dict(zip(header, rec))
            try:
                row["round"] = int(row["round"])
                row["global_acc"] = float(row["global_acc"])
            except ValueError:
                raise MetricsFormatError(f"line {lineno}: non-numeric round or accuracy") from None
            rows.append(row)
    if not rows:
        raise MetricsFormatError("no rows")
    return rows


def plot_series(rows: list[dict]) -> dict[str, list[tuple[int, float]]]:
    """Per-method ``(round, global_acc)`` series sorted by round."""
    series: dict[str, dict[int, float]] = defaultdict(dict)
    for r in rows:
        if r["round"] in series[r["method"]]:
            raise MetricsFormatError(f"duplicate round {r['round']} for method {r['method']}")
        series[r["method"]][r["round"]] = r["global_acc"]
    return {m: sorted(s.items()) for m, s in sorted(series.items())}


def write_plotdata(metrics_paths: Sequence, out_dir) -> list[Path]:
    rows = []
    for p in metrics_paths:
        rows += read_metrics(p)
    out = Path(out_dir)
    written = []
    for method, points in plot_series(rows).items():
        path = out / f"series_{method}.csv"
        write_text(path, "round,global_acc\n" + "".join(f"{r},{a:.6f}\n" for r, a in points))
        written.append(path)
    return written


# -- partition dump ----------------------------------------------------------


def format_partition(data: ExperimentData) -> str:
    n_classes = data.test.n_classes
    lines = ["client,n," + ",".join(f"class_{c}" for c in range(n_classes))]
    for c in data.clients:
        hist = np.asarray(c.class_histogram, dtype=np.int64)
        lines.append(f"{c.client_id},{int(hist.sum())}," + ",".join(str(int(h)) for h in hist))
    return "\n".join(lines) + "\n"


__all__ = [
    "ExperimentData", "RunResult", "METRICS_HEADER", "MetricsFormatError", "build_data",
    "run", "sweep", "format_metrics", "format_summary", "read_metrics", "plot_series",
    "write_plotdata", "format_partition", "bound_rows", "load_models", "save_models",
]
