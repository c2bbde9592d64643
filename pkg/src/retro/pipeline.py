"""Stage runners shared by the command line and the ablation driver.

A run directory looks like::

    <out>/teacher/   config.txt  run.json  metrics.csv  timing.csv  checkpoint.rtro
                     probe.csv  probe.json  knn.csv  knn.json
    <out>/<mode>/    the same files for a distilled student
    <out>/summary.csv, <out>/curves.csv   written by export_report
"""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from retro import checkpoint
from retro.config import ExperimentConfig, fingerprint, to_text
from retro.data import Dataset, generate_synthetic, load_cifar_binary, split_per_class
from retro.evaluate import EvalReport, knn_eval, linear_probe, semi_supervised_finetune
from retro.nn import Encoder, ModelAssembly, Network, build_assembly, build_network
from retro.train import DistillState, StepMetrics, make_state, pretrain_teacher, run_training

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_HEADER = ("run_id", "mode", "epoch", "step", "loss_total", "loss_dis", "loss_con", "lr",
                  "head_frozen", "wall_ms")
EVAL_HEADER = ("run_id", "mode", "kind", "top1", "top5", "fingerprint", "subset_hash")
TEACHER_DIR = "teacher"
CHECKPOINT = "checkpoint.rtro"


class StageError(RuntimeError):
    """A stage cannot run; the message says what to do about it."""


# --- data ----------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "cifar":
        parts = [load_cifar_binary(p.strip()) for p in d.path.split(",") if p.strip()]
        train = Dataset(np.concatenate([p.images for p in parts]),
                        np.concatenate([p.labels for p in parts]), 10)
        return train, load_cifar_binary(d.test_path)
    full = generate_synthetic(d.classes, d.per_class + d.test_per_class, d.image_size, d.seed)
    return split_per_class(full, d.test_per_class, d.seed)


# --- metrics -------------------------------------------------------------------

class MetricsWriter:
    """Append-only per-step metrics CSV.

    With ``deterministic`` set the wall_ms column holds 0 so reruns are
    byte-identical; measured times then go to a separate timing CSV.
    """

    def __init__(self, path: Path, run_id: str, mode: str, deterministic: bool = True):
        self.run_id, self.mode, self.deterministic = run_id, mode, deterministic
        self._file = open(path, "w", newline="")
        self._timing = open(path.with_name("timing.csv"), "w", newline="")
        self._csv = csv.writer(self._file, lineterminator="\n")
        self._tcsv = csv.writer(self._timing, lineterminator="\n")
        self._csv.writerow(METRICS_HEADER)
        self._tcsv.writerow(("step", "wall_ms"))

    def __call__(self, state: DistillState, m: StepMetrics, wall_ms: float) -> None:
        values = (m.loss_total, m.loss_dis, m.loss_con, m.lr)
        if not all(math.isfinite(v) for v in values):
            raise StageError(f"non-finite metrics at step {state.step}")
        index = state.step - 1  # the step counter has already advanced
        self._csv.writerow((self.run_id, self.mode, state.epoch, index,
                            *(repr(float(v)) for v in values), int(m.head_frozen),
                            0 if self.deterministic else round(wall_ms, 3)))
        self._tcsv.writerow((index, round(wall_ms, 3)))

    def close(self) -> None:
        self._file.close()
        self._timing.close()


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and tuple(rows[0].keys()) != METRICS_HEADER:
        raise StageError(f"{path}: unexpected metrics header {tuple(rows[0].keys())}")
    return rows


# --- run directories -----------------------------------------------------------

def _prepare_run(cfg: ExperimentConfig, run_dir: Path, mode: str) -> str:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(to_text(cfg), encoding="utf-8")
    run_id = fingerprint(cfg, mode)
    (run_dir / "run.json").write_text(json.dumps(
        {"run_id": run_id, "mode": mode, "seed": cfg.seed, "metrics_version": METRICS_VERSION},
        indent=2, sort_keys=True) + "\n")
    return run_id


def run_dir_for(cfg: ExperimentConfig, name: str, out: Optional[str] = None) -> Path:
    return Path(out or cfg.out_dir) / name


def teacher_network(cfg: ExperimentConfig) -> Network:
    return build_network(cfg.teacher.encoder_config(), cfg.teacher.head_hidden, cfg.seed,
                         embed_dim=cfg.embed_dim)


def load_teacher(cfg: ExperimentConfig, out: Optional[str] = None) -> Network:
    path = run_dir_for(cfg, TEACHER_DIR, out) / CHECKPOINT
    if not path.exists():
        raise StageError(f"teacher checkpoint {path} not found: run pretrain first")
    net = teacher_network(cfg)
    net.load_state(checkpoint.load(path))
    return net


# --- stages --------------------------------------------------------------------

def stage_pretrain(cfg: ExperimentConfig, out: Optional[str] = None, deterministic: bool = True,
                   data: Optional[Tuple[Dataset, Dataset]] = None) -> Path:
    run_dir = run_dir_for(cfg, TEACHER_DIR, out)
    run_id = _prepare_run(cfg, run_dir, "teacher")
    train, _ = data or load_datasets(cfg)
    writer = MetricsWriter(run_dir / "metrics.csv", run_id, "teacher", deterministic)
    try:
        net, _ = pretrain_teacher(train, cfg.pretrain, cfg.teacher.encoder_config(),
                                  cfg.teacher.head_hidden, cfg.aug, cfg.embed_dim, on_step=writer)
    finally:
        writer.close()
    checkpoint.save(run_dir / CHECKPOINT, checkpoint.collect(net.state()))
    return run_dir


def build_student(cfg: ExperimentConfig, teacher: Optional[Network]) -> ModelAssembly:
    mode = cfg.train.mode
    return build_assembly(mode, cfg.student.encoder_config(), cfg.seed,
                          adapter_dim=cfg.teacher.encoder_config().representation_dim,
                          head_hidden=cfg.student.head_hidden,
                          teacher=teacher if mode != "baseline_moco" else None,
                          embed_dim=cfg.embed_dim)


def stage_distill(cfg: ExperimentConfig, out: Optional[str] = None, deterministic: bool = True,
                  data: Optional[Tuple[Dataset, Dataset]] = None,
                  teacher: Optional[Network] = None) -> Path:
    mode = cfg.train.mode
    if teacher is None and mode != "baseline_moco":
        teacher = load_teacher(cfg, out)
    assembly = build_student(cfg, teacher)
    run_dir = run_dir_for(cfg, mode, out)
    run_id = _prepare_run(cfg, run_dir, mode)
    train, _ = data or load_datasets(cfg)
    state = make_state(assembly, cfg.train)
    writer = MetricsWriter(run_dir / "metrics.csv", run_id, mode, deterministic)
    try:
        run_training(state, train, cfg.train, cfg.aug, on_step=writer)
    finally:
        writer.close()
    tensors = checkpoint.collect(assembly.student.state(),
                                 banks=(state.bank_v, state.bank_v_prime))
    tensors.update(checkpoint.collect(assembly.mean_student.state(), prefix="mean."))
    checkpoint.save(run_dir / CHECKPOINT, tensors)
    return run_dir


def load_encoder(cfg: ExperimentConfig, run: str, out: Optional[str] = None) -> Encoder:
    """Encoder-only load of a run's checkpoint (name-prefix filtered)."""
    path = run_dir_for(cfg, run, out) / CHECKPOINT
    if not path.exists():
        hint = "pretrain" if run == TEACHER_DIR else f"distill with train.mode = {run}"
        raise StageError(f"checkpoint {path} not found: run {hint} first")
    net = cfg.teacher if run == TEACHER_DIR else cfg.student
    enc = Encoder(net.encoder_config(), np.random.default_rng(0))
    enc.load_state(checkpoint.strip_prefix(checkpoint.load(path, prefix="encoder."), "encoder."))
    return enc


def write_report(report: EvalReport, run_dir: Path, run_id: str, mode: str) -> None:
    name = {"linear_probe": "probe", "knn": "knn", "semi_supervised": "finetune"}[report.kind]
    with open(run_dir / f"{name}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerow((run_id, mode, report.kind, repr(report.top1), repr(report.top5),
                    report.fingerprint, report.subset_hash or ""))
    (run_dir / f"{name}.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def _run_id(run_dir: Path) -> str:
    try:
        return json.loads((run_dir / "run.json").read_text())["run_id"]
    except (OSError, KeyError, ValueError):
        return ""


def stage_eval(cfg: ExperimentConfig, kind: str, run: Optional[str] = None,
               out: Optional[str] = None, data: Optional[Tuple[Dataset, Dataset]] = None,
               fraction: float = 1.0) -> EvalReport:
    run = run or cfg.train.mode
    encoder = load_encoder(cfg, run, out)
    train, test = data or load_datasets(cfg)
    if kind == "probe":
        report = linear_probe(encoder, train, test, cfg.probe)
    elif kind == "knn":
        report = knn_eval(encoder, train, test, cfg.knn_k)
    elif kind == "finetune":
        report = semi_supervised_finetune(encoder, train, test, fraction, cfg.probe, cfg.seed)
    else:
        raise ValueError(f"unknown evaluation kind {kind!r}")
    run_dir = run_dir_for(cfg, run, out)
    write_report(report, run_dir, _run_id(run_dir), run)
    return report


# --- report --------------------------------------------------------------------

RUN_ORDER = ("teacher", "baseline_moco", "disco", "retro")


def export_report(out_dir) -> Tuple[Path, Path]:
    """Summary (one row per run) and per-epoch loss curves as plain CSV."""
    out_dir = Path(out_dir)
    runs = sorted((p for p in out_dir.iterdir() if (p / "metrics.csv").exists()),
                  key=lambda p: (RUN_ORDER.index(p.name) if p.name in RUN_ORDER else 99, p.name)) \
        if out_dir.is_dir() else []
    if not runs:
        raise StageError(f"{out_dir}: no run directories with metrics.csv")
    summary_rows, curve_rows = [], []
    for run in runs:
        metrics = read_metrics(run / "metrics.csv")
        by_epoch: Dict[int, List[dict]] = {}
        for row in metrics:
            by_epoch.setdefault(int(row["epoch"]), []).append(row)
        for epoch, rows in sorted(by_epoch.items()):
            mean = lambda k: sum(float(r[k]) for r in rows) / len(rows)
            curve_rows.append((run.name, epoch, repr(mean("loss_total")), repr(mean("loss_dis")),
                               repr(mean("loss_con"))))
        row = {"mode": run.name, "run_id": _run_id(run),
               "final_loss": repr(float(metrics[-1]["loss_total"])) if metrics else "n/a"}
        for name in ("probe", "knn"):
            path = run / f"{name}.csv"
            if path.exists():
                with open(path, newline="") as f:
                    ev = next(csv.DictReader(f))
                row[f"{name}_top1"], row[f"{name}_top5"] = ev["top1"], ev["top5"]
            else:
                row[f"{name}_top1"] = row[f"{name}_top5"] = "n/a"
        summary_rows.append(row)
    summary, curves = out_dir / "summary.csv", out_dir / "curves.csv"
    fields = ("mode", "run_id", "probe_top1", "probe_top5", "knn_top1", "knn_top5", "final_loss")
    with open(summary, "w", newline="") as f:
        w = csv.DictWriter(f, fields, lineterminator="\n")
        w.writeheader()
        w.writerows(summary_rows)
    with open(curves, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("mode", "epoch", "loss_total", "loss_dis", "loss_con"))
        w.writerows(curve_rows)
    return summary, curves
