"""Strategy comparison: one shared teacher, then baseline / DisCo / RETRO per seed."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from retro.config import ExperimentConfig
from retro.nn import MODES
from retro.pipeline import (TEACHER_DIR, export_report, load_datasets, load_teacher,
                            stage_distill, stage_eval, stage_pretrain)

log = logging.getLogger(__name__)


@dataclass
class AblationResult:
    seeds: List[int]
    top1: Dict[str, List[float]] = field(default_factory=dict)  # mode -> per-seed probe top1
    teacher_top1: float = float("nan")
    seconds: float = 0.0

    def mean(self, mode: str) -> float:
        return float(np.mean(self.top1[mode]))

    def wins(self, better: str, worse: str) -> int:
        return int(sum(a > b for a, b in zip(self.top1[better], self.top1[worse])))

    def table(self) -> str:
        lines = [f"{'mode':<14}" + "".join(f"seed {s:<5}" for s in self.seeds) + "mean"]
        for mode in MODES:
            vals = self.top1.get(mode, [])
            lines.append(f"{mode:<14}" + "".join(f"{v:<10.4f}" for v in vals)
                         + f"{np.mean(vals):.4f}")
        lines.append(f"teacher probe top1 {self.teacher_top1:.4f}; wall time {self.seconds:.0f}s")
        return "\n".join(lines)


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int], out, deterministic: bool = True,
                 modes: Sequence[str] = MODES) -> AblationResult:
    """Pretrain the teacher with ``cfg.seed``, then distill and probe every mode per seed."""
    start = time.perf_counter()
    out = Path(out)
    data = load_datasets(cfg)
    stage_pretrain(cfg, str(out), deterministic, data=data)
    teacher = load_teacher(cfg, str(out))
    result = AblationResult(list(seeds))
    result.teacher_top1 = stage_eval(cfg, "probe", TEACHER_DIR, str(out), data=data).top1
    for seed in seeds:
        seed_out = str(out / f"seed_{seed}")
        for mode in modes:
            run_cfg = cfg.with_seed(seed)
            run_cfg.train = dataclasses.replace(run_cfg.train, mode=mode)
            t0 = time.perf_counter()
            stage_distill(run_cfg, seed_out, deterministic, data=data, teacher=teacher)
            top1 = stage_eval(run_cfg, "probe", mode, seed_out, data=data).top1
            result.top1.setdefault(mode, []).append(top1)
            log.info("seed %d %s: probe top1 %.4f (%.0fs)", seed, mode, top1,
                     time.perf_counter() - t0)
        export_report(seed_out)
    result.seconds = time.perf_counter() - start
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("seed", *modes))
        for i, seed in enumerate(seeds):
            w.writerow((seed, *(repr(result.top1[m][i]) for m in modes)))
    return result
