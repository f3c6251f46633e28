"""Experiment plumbing shared by the CLI and the scripts: datasets on disk, runs, summaries."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from .cbsf import ingest_features, write_features
from .config import RunConfig, load_config
from .context import ContextPartition, context_partition
from .data import SSLData, Split, SyntheticSpec, generate, generate_validation, make_world, split_indices
from .model import CBSAModel
from .train import METRIC_COLUMNS, EpochRecord, NonFiniteLossError, context_accuracy, evaluate, train

log = logging.getLogger(__name__)

TRAIN_FILE, VAL_FILE, MANIFEST_FILE = "train.cbsf", "val.cbsf", "manifest.json"


class PartitionError(ValueError):
    pass


def write_json(path: Union[str, Path], obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class LoadedData:
    spec: SyntheticSpec
    data: SSLData
    manifest: dict

    @property
    def classes(self):
        return make_world(self.spec).classes


def write_dataset(cfg: RunConfig, out_dir: Union[str, Path], seed: Optional[int] = None) -> dict:
    """Generate the train/val pools for ``seed`` and write them as CBSF plus a manifest."""
    spec = cfg.spec(seed)
    spec.validate()
    world = make_world(spec)
    ds = generate(spec, cfg.data.n_total, world)
    val = generate_validation(spec, cfg.data.n_val, world)
    sp = split_indices(len(ds), cfg.data.p, spec.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / TRAIN_FILE, ds.features, ds.labels, spec.C, spec.H, spec.W)
    write_features(out / VAL_FILE, val.features, val.labels, spec.C, spec.H, spec.W)
    manifest = {
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "n_total": len(ds),
        "n_val": len(val),
        "p": cfg.data.p,
        "labeled_indices": sp.labeled.tolist(),
        "unlabeled_indices": sp.unlabeled.tolist(),
        "contexts": ds.contexts.tolist(),
        "val_contexts": val.contexts.tolist(),
    }
    write_json(out / MANIFEST_FILE, manifest)
    return manifest


def load_dataset(data_dir: Union[str, Path]) -> LoadedData:
    d = Path(data_dir)
    manifest = json.loads((d / MANIFEST_FILE).read_text())
    spec = SyntheticSpec(**manifest["spec"])
    tr, va = ingest_features(d / TRAIN_FILE), ingest_features(d / VAL_FILE)
    if not (tr.has_labels and va.has_labels):
        raise ValueError(f"{d}: train and validation files must carry labels")
    sp = Split(np.array(manifest["labeled_indices"], dtype=int), np.array(manifest["unlabeled_indices"], dtype=int))
    data = SSLData(
        tr.features[sp.labeled], tr.labels[sp.labeled], tr.features[sp.unlabeled], tr.labels[sp.unlabeled],
        va.features, va.labels, np.array(manifest["val_contexts"], dtype=int) if "val_contexts" in manifest else None,
    )
    return LoadedData(spec, data, manifest)


def materialize(cfg: RunConfig, seed: int) -> LoadedData:
    """Dataset for one run: read ``paths.data`` when set, otherwise generate for ``seed`` in memory."""
    if cfg.paths.data:
        return load_dataset(cfg.paths.data)
    spec = cfg.spec(seed)
    spec.validate()
    world = make_world(spec)
    ds = generate(spec, cfg.data.n_total, world)
    val = generate_validation(spec, cfg.data.n_val, world)
    sp = split_indices(len(ds), cfg.data.p, seed)
    data = SSLData.from_split(ds, sp, val)
    manifest = {"seed": seed, "spec": spec.to_dict(), "labeled_indices": sp.labeled.tolist()}
    return LoadedData(spec, data, manifest)


def partition_for(cfg: RunConfig, labels_l: np.ndarray, seed: int) -> ContextPartition:
    K, C = cfg.context.K, labels_l.shape[1]
    if not 1 <= K <= C:
        raise PartitionError(f"need 1 <= K <= C, got K={K}, C={C}")
    return context_partition(labels_l, K, seed=seed, literal_only=cfg.context.literal_only)


def write_metrics(path: Union[str, Path], records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


def write_thresholds(path: Union[str, Path], records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "class", "tau_plus", "tau_minus"))
        for r in records:
            if r.tau_plus is None:
                continue
            for k, (tp, tm) in enumerate(zip(r.tau_plus, r.tau_minus)):
                w.writerow((r.epoch, k, repr(float(tp)), repr(float(tm))))


def read_metrics(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_one(cfg: RunConfig, seed: int, out_dir: Union[str, Path], ablation: Optional[str] = None) -> dict:
    """One training run; writes metrics.csv, thresholds.csv, model.npz, config.yaml and final.json.

    ``metrics.csv`` is flushed after every epoch so a run aborted by a
    non-finite loss still leaves its history behind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config(ablation)
    loaded = materialize(cfg, seed)
    data = loaded.data
    model = CBSAModel(mcfg, loaded.classes, seed, cfg.align_config())
    part = None
    if model.ci:
        part = partition_for(cfg, data.labels_l, seed)
        write_json(out / "partition.json", part.to_json())

    resolved = dataclasses.replace(cfg, seed=seed, model=dataclasses.replace(cfg.model, ablation=mcfg.ablation))
    resolved.dump(out / "config.yaml")

    records: list[EpochRecord] = []

    def flush(rec: EpochRecord) -> None:
        records.append(rec)
        write_metrics(out / "metrics.csv", records)

    try:
        result = train(model, data, cfg.train_config(seed), loaded.spec, part, on_epoch=flush)
    except NonFiniteLossError as exc:
        write_metrics(out / "metrics.csv", records + [exc.record])
        write_json(out / "final.json", {"seed": seed, "ablation": mcfg.ablation, "status": "non-finite loss", "message": str(exc)})
        raise
    write_thresholds(out / "thresholds.csv", records)
    np.savez(out / "model.npz", **model.state_dict())
    final = summarize_run(records, seed, mcfg.ablation, result.context_accuracy)
    final["config"] = resolved.to_dict()
    write_json(out / "final.json", final)
    return final


def summarize_run(records: Sequence[EpochRecord], seed: int, ablation: str, ctx_acc: Optional[float]) -> dict:
    post = [r for r in records if not math.isnan(r.pseudo_cf1)]
    last = records[-1]
    return {
        "seed": seed,
        "ablation": ablation,
        "status": "ok",
        "epochs": len(records),
        "map_val": last.map_val,
        "cf1_val": last.cf1_val,
        "pseudo_cf1_first": post[0].pseudo_cf1 if post else None,
        "pseudo_cf1_final": post[-1].pseudo_cf1 if post else None,
        "pseudo_coverage_final": post[-1].pseudo_coverage if post else None,
        "context_accuracy": ctx_acc,
    }


def error_bars(values: Sequence[float]) -> dict:
    """Mean, standard error and a two-sided 95% Student-t interval."""
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    mean = float(x.mean())
    if n < 2:
        return {"n": n, "mean": mean, "stderr": None, "ci95": None}
    se = float(x.std(ddof=1) / math.sqrt(n))
    half = float(stats.t.ppf(0.975, n - 1) * se)
    return {"n": n, "mean": mean, "stderr": se, "ci95": [mean - half, mean + half]}


SUMMARY_KEYS = ("map_val", "cf1_val", "pseudo_cf1_final", "context_accuracy")


def summarize_seeds(runs: Sequence[dict]) -> dict:
    out = {}
    for key in SUMMARY_KEYS:
        vals = [r[key] for r in runs if r.get(key) is not None]
        if vals:
            out[key] = error_bars(vals)
    return out


def run_seeds(cfg: RunConfig, seeds: Sequence[int], out_dir: Union[str, Path], ablation: Optional[str] = None) -> dict:
    """Single seed: files go straight into ``out_dir``. Several: one subdirectory per seed plus a summary."""
    out = Path(out_dir)
    if len(seeds) == 1:
        return run_one(cfg, seeds[0], out, ablation)
    runs = []
    for s in seeds:
        r = run_one(cfg, s, out / f"seed_{s}", ablation)
        r.pop("config", None)
        runs.append(r)
    final = {
        "seeds": list(seeds),
        "ablation": runs[0]["ablation"],
        "runs": runs,
        "summary": summarize_seeds(runs),
        "config": cfg.to_dict(),
    }
    write_json(out / "final.json", final)
    return final


def run_ablation(cfg: RunConfig, modes: Sequence[str], seeds: Sequence[int], out_dir: Union[str, Path]) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, per_mode = [], {}
    for mode in modes:
        runs = []
        for s in seeds:
            r = run_one(cfg, s, out / mode / f"seed_{s}", mode)
            r.pop("config", None)
            runs.append(r)
            log.info("ablation %s seed %d: mAP %.4f", mode, s, r["map_val"])
        per_mode[mode] = {"runs": runs, "summary": summarize_seeds(runs)}
        rows.extend(runs)
    cols = ("ablation", "seed", "map_val", "cf1_val", "pseudo_cf1_first", "pseudo_cf1_final", "context_accuracy")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else r[c] for c in cols])
    result = {"modes": list(modes), "seeds": list(seeds), "results": per_mode, "config": cfg.to_dict()}
    write_json(out / "ablation.json", result)
    return result


def evaluate_run(run_dir: Union[str, Path]) -> dict:
    """Re-score a finished run's checkpoint on its validation pool."""
    run = Path(run_dir)
    cfg = load_config(run / "config.yaml", environ={})
    loaded = materialize(cfg, cfg.seed)
    model = CBSAModel(cfg.model_config(), loaded.classes, cfg.seed, cfg.align_config())
    with np.load(run / "model.npz") as z:
        model.load_state_dict({k: z[k] for k in z.files})
    map_val, cf1_val = evaluate(model, loaded.data.features_val, loaded.data.labels_val)
    out = {"seed": cfg.seed, "ablation": cfg.model.ablation, "map_val": map_val, "cf1_val": cf1_val}
    if model.ci:
        part_path = run / "partition.json"
        assignment = np.array(json.loads(part_path.read_text())["assignment"])
        part = ContextPartition(cfg.context.K, assignment)
        out["context_accuracy"] = context_accuracy(model, loaded.data.features_val, loaded.data.labels_val, part)
    write_json(run / "eval.json", out)
    return out
