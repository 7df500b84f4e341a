"""Experiment assembly, evaluation and on-disk persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import (
    RunResult,
    TrainingSetup,
    run_centralized,
    run_fedavg,
    run_fedbn,
    run_fedcross,
    run_fedcross_dagger,
    run_fedprox,
    run_local,
)
from .config import ExperimentConfig, load_config
from .data import (
    LabeledDataset,
    PartitionPlan,
    dirichlet_partition,
    iid_partition,
    load_manifest,
    load_region_masks,
    make_grid_region_masks,
    make_synthetic_task,
    stratified_folds,
    stratified_partition,
    stratified_split,
)
from .metrics import fairness_gap, global_test, local_test
from .models import ModelSpec, heterogeneous_fleet, load_checkpoint, save_checkpoint
from .protocol import ClientState, SKDSettings, run_fedskd

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("method", "round", "client", "scope", "auc", "fairness_gap", "seed", "fold")
OUT_ENV = "FEDSKD_LAB_OUT"
# smallest client shard that still leaves train and test samples after splitting
MIN_SHARD = 5


def client_shards(cfg: ExperimentConfig) -> list[LabeledDataset]:
    """Per-client datasets before any train/test split."""
    n = cfg.n_clients
    spec = (cfg.in_channels, *cfg.input_size)
    synth = dict(signal=cfg.synth_signal, nuisance=cfg.synth_nuisance, noise=cfg.synth_noise)
    if cfg.dataset != "synthetic":
        ds = load_manifest(cfg.dataset)
        return _partition(cfg, ds).apply(ds)
    if cfg.partitioner == "dirichlet":
        # label skew first, then each client's samples rendered with its own shift
        pool = np.arange(n * cfg.samples_per_client) % cfg.num_classes
        labels_only = LabeledDataset(np.zeros((len(pool), 1), np.float32), pool)
        plan = dirichlet_partition(labels_only, n, cfg.alpha, cfg.seed, min_size=MIN_SHARD)
        counts = [labels_only.subset(plan.indices(k)).class_counts(cfg.num_classes) for k in range(n)]
        return make_synthetic_task(n, cfg.num_classes, cfg.per_client_shift, spec, cfg.seed,
                                   class_counts=counts, **synth)
    if cfg.partitioner == "stratified":
        sites = make_synthetic_task(n * cfg.sites_per_client, cfg.num_classes, cfg.per_client_shift, spec,
                                    cfg.seed, samples_per_client=cfg.samples_per_client // cfg.sites_per_client,
                                    **synth)
        ds = LabeledDataset.concat(sites)
        grouping = {s: s // cfg.sites_per_client for s in range(len(sites))}
        return stratified_partition(ds, grouping).apply(ds)
    pooled = make_synthetic_task(1, cfg.num_classes, cfg.per_client_shift, spec, cfg.seed,
                                 samples_per_client=n * cfg.samples_per_client, **synth)[0]
    return iid_partition(pooled, n, cfg.seed).apply(pooled)


def _partition(cfg: ExperimentConfig, ds: LabeledDataset) -> PartitionPlan:
    if cfg.partitioner == "dirichlet":
        return dirichlet_partition(ds, cfg.n_clients, cfg.alpha, cfg.seed, min_size=MIN_SHARD)
    if cfg.partitioner == "stratified":
        sites = sorted(set(ds.site_labels.tolist())) if ds.site_labels is not None else []
        per = max(1, math.ceil(len(sites) / cfg.n_clients))
        return stratified_partition(ds, {s: i // per for i, s in enumerate(sites)})
    return iid_partition(ds, cfg.n_clients, cfg.seed)


def train_test_shards(cfg: ExperimentConfig, fold: int = 0):
    shards = client_shards(cfg)
    train, test = [], []
    for k, ds in enumerate(shards):
        if cfg.folds > 1:
            tr, te = stratified_folds(ds, cfg.folds, cfg.seed, k)[fold]
        else:
            tr, te = stratified_split(ds, cfg.test_fraction, cfg.seed, k)
        train.append(ds.subset(tr))
        test.append(ds.subset(te))
    return train, test


def fleet_specs(cfg: ExperimentConfig) -> list[ModelSpec]:
    base = ModelSpec(cfg.model_family, cfg.base_width, cfg.num_classes,
                     (cfg.in_channels, *cfg.input_size), tuple(cfg.tap_layers))
    return heterogeneous_fleet(cfg.n_clients, base, cfg.width_step)


def region_masks(cfg: ExperimentConfig):
    if "R" not in cfg.enabled_skd:
        return None
    if cfg.region_masks:
        return load_region_masks(cfg.region_masks)
    return make_grid_region_masks(cfg.input_size, cfg.region_grid)


def make_setup(cfg: ExperimentConfig, fold: int = 0, audit=None) -> TrainingSetup:
    train, test = train_test_shards(cfg, fold)
    return TrainingSetup(fleet_specs(cfg), train, test, cfg.rounds, cfg.resolved_iters(), cfg.lr,
                         cfg.batch_size, cfg.seed, cfg.workers, audit)


def skd_settings(cfg: ExperimentConfig) -> SKDSettings:
    return SKDSettings(cfg.gamma, frozenset(cfg.enabled_skd), region_masks(cfg), cfg.row_eps,
                       cfg.pixel_norm_literal, cfg.skd_start_fraction)


def run_method(cfg: ExperimentConfig, setup: TrainingSetup, hooks=(), on_round=None) -> RunResult:
    """Dispatch on ``cfg.method``.

    ``on_round(t, report, models)`` is called after each FedSKD round; the
    baselines do not report per round.
    """
    if cfg.method == "fedskd":
        clients = [ClientState(i, setup.init_model(i), setup.train[i], setup.test[i], setup.streams[i], setup.lr)
                   for i in range(setup.n)]
        models = [c.dam for c in clients]
        callback = None if on_round is None else (lambda t, report: on_round(t, report, models))
        history = run_fedskd(clients, cfg.rounds, setup.iters, skd_settings(cfg), cfg.seed,
                             cfg.workers, hooks, callback)
        return RunResult(models, history)
    runners = {
        "local": run_local,
        "centralized": run_centralized,
        "fedcross": lambda s: run_fedcross(s, cfg.fedcross_replicas),
        "fedcross_dagger": run_fedcross_dagger,
        "fedavg": run_fedavg,
        "fedprox": lambda s: run_fedprox(s, cfg.mu),
        "fedbn": run_fedbn,
    }
    return runners[cfg.method](setup)


def metric_rows(cfg: ExperimentConfig, models, test_shards, round: int, fold: int = 0) -> list[dict]:
    """One row per (client, scope); the fairness gap sits on the local rows."""
    loc = local_test(models, test_shards)
    glo = global_test(models, test_shards)
    gap = fairness_gap(models, test_shards) if all(d.sensitive_attr is not None for d in test_shards) else None
    rows = []
    for scope, summary in (("local", loc), ("global", glo)):
        for k, value in enumerate(summary.per_client):
            rows.append({
                "method": cfg.method, "round": round, "client": k, "scope": scope, "auc": value,
                "fairness_gap": gap if scope == "local" else None, "seed": cfg.seed, "fold": fold,
            })
    return rows


@dataclass
class ExperimentResult:
    models: list
    history: list
    metrics: list[dict]
    fold: int = 0


def run_experiment(cfg: ExperimentConfig, fold: int = 0, hooks=()) -> ExperimentResult:
    """Train ``cfg.method`` for ``cfg.rounds`` rounds and evaluate the deployed models.

    With ``eval_every = k`` FedSKD runs are also evaluated after every k-th round.
    """
    cfg.validate()
    setup = make_setup(cfg, fold)
    rows: list[dict] = []

    def on_round(t, _report, models):
        if cfg.eval_every and (t + 1) % cfg.eval_every == 0 and t + 1 < cfg.rounds:
            rows.extend(metric_rows(cfg, models, setup.test, t + 1, fold))

    result = run_method(cfg, setup, hooks, on_round)
    rows.extend(metric_rows(cfg, result.models, setup.test, cfg.rounds, fold))
    return ExperimentResult(result.models, result.history, rows, fold)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics_csv(rows: list[dict], path, extra_columns=()) -> None:
    columns = tuple(extra_columns) + METRIC_COLUMNS
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or cfg.output_dir)


def new_run_dir(cfg: ExperimentConfig, root: Path | None = None) -> Path:
    root = root or output_root(cfg)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{cfg.method}-{cfg.digest()}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def run_and_persist(cfg: ExperimentConfig, run_dir: Path | None = None) -> Path:
    """Run every fold and write metrics.csv, rounds.jsonl, checkpoints and config.txt."""
    run_dir = run_dir or new_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    rows = []
    with open(run_dir / "rounds.jsonl", "w") as fh:
        for fold in range(cfg.folds):
            result = run_experiment(cfg, fold)
            for report in result.history:
                fh.write(json.dumps({"method": cfg.method, "fold": fold, **report.to_dict()}) + "\n")
            for k, model in enumerate(result.models):
                save_checkpoint(model, run_dir / "checkpoints" / f"fold{fold}" / f"client{k}.pt",
                                {"client": k, "method": cfg.method, "rounds": cfg.rounds})
            rows.extend(result.metrics)
    write_metrics_csv(rows, run_dir / "metrics.csv")
    return run_dir


def evaluate_run(run_dir, scope: str | None = None) -> list[dict]:
    """Reload a run's final checkpoints and recompute its final-round metrics."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} not found; is {run_dir} a run directory?")
    cfg = load_config(cfg_path)
    rows = []
    for fold in range(cfg.folds):
        ckpt_dir = run_dir / "checkpoints" / f"fold{fold}"
        paths = [ckpt_dir / f"client{k}.pt" for k in range(cfg.n_clients)]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing checkpoint(s): {', '.join(missing)}")
        models = [load_checkpoint(p)[0] for p in paths]
        _, test = train_test_shards(cfg, fold)
        rows.extend(metric_rows(cfg, models, test, cfg.rounds, fold))
    if scope:
        rows = [r for r in rows if r["scope"] == scope]
    return rows


ABLATION_AXES = {
    "components": [(name, {"enabled_skd": frozenset(name)})
                   for name in ("B", "P", "R", "BP", "BR", "PR", "BPR")],
    "layers": [(name, {"tap_layers": tuple(int(x) for x in name.split("-"))})
               for name in ("4", "3-4", "2-3-4", "1-2-3-4")],
    "timing": [(str(f), {"skd_start_fraction": f}) for f in (0.0, 0.25, 0.5, 0.75)],
}


def run_ablation(axis: str, base: ExperimentConfig, out_path=None) -> list[dict]:
    """Run every variant along ``axis`` with FedSKD; returns final-round rows tagged by variant."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    rows = []
    for name, change in ABLATION_AXES[axis]:
        cfg = base.replace(method="fedskd", eval_every=0, **change)
        for fold in range(cfg.folds):
            for row in run_experiment(cfg, fold).metrics:
                rows.append({"axis": axis, "variant": name, **row})
    if out_path is not None:
        write_metrics_csv(rows, out_path, extra_columns=("axis", "variant"))
    return rows
