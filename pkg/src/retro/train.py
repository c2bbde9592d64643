"""Teacher pretraining, baseline/DisCo/RETRO distillation, EMA and head freezing."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from retro.autograd import Tape, Tensor, backward
from retro.data import AugmentationConfig, Dataset, epoch_batches, two_views
from retro.losses import consistency_loss, info_nce, symmetric_info_nce, total_loss
from retro.memory_bank import MemoryBank
from retro.nn import (MODES, ConfigError, EncoderConfig, ModelAssembly, Module, Network,
                      build_network)
from retro.optim import cosine_lr, sgd_step, zero_grad

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class FrozenHeadViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "retro"
    epochs: int = 10
    batch_size: int = 256
    lr: float = 0.06
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.2
    gamma: float = 1.0
    consistency_weight: float = 1.0
    ema_momentum: float = 0.999
    bank_size: int = 1024
    frozen_epochs: Optional[int] = None  # None: head frozen for every epoch
    unfrozen_epochs: int = 0
    seed: int = 0

    @property
    def freeze_schedule(self) -> Tuple[int, int]:
        frozen = self.epochs - self.unfrozen_epochs if self.frozen_epochs is None else self.frozen_epochs
        return frozen, self.unfrozen_epochs

    @property
    def scaled_lr(self) -> float:
        """Base lr is quoted for batch 256 and scaled linearly."""
        return self.lr * self.batch_size / 256

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.gamma < 0 or self.consistency_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 2 or self.bank_size < 1:
            raise ConfigError("epochs >= 1, batch_size >= 2 and bank_size >= 1 required")
        frozen, unfrozen = self.freeze_schedule
        if frozen < 0 or unfrozen < 0 or frozen + unfrozen != self.epochs:
            raise ConfigError(
                f"freeze schedule {frozen}+{unfrozen} must add up to epochs={self.epochs}")


@dataclass
class DistillState:
    assembly: ModelAssembly
    bank_v: MemoryBank
    bank_v_prime: MemoryBank
    epoch: int = 0
    step: int = 0
    head_grad_seen: bool = False


def make_state(assembly: ModelAssembly, cfg: TrainConfig) -> DistillState:
    dim = assembly.student.head.out_dim
    return DistillState(
        assembly,
        MemoryBank(cfg.bank_size, dim, seed=cfg.seed * 2 + 1, view="v"),
        MemoryBank(cfg.bank_size, dim, seed=cfg.seed * 2 + 2, view="v_prime"),
    )


@dataclass
class StepMetrics:
    loss_total: float
    loss_dis: float
    loss_con: float
    lr: float
    head_frozen: bool
    forwards: int
    embeddings: dict = field(default_factory=dict)


# --- EMA ---------------------------------------------------------------------

def _shadow(mean: Module, state: dict) -> dict:
    """f64 copies of the mean network's tensors, resynced if the f32 values moved.

    Accumulating in f64 keeps a long EMA run within f32 rounding of its
    closed form; a checkpoint load or head transplant is picked up because
    the stored f32 values no longer match the shadow.
    """
    shadow = getattr(mean, "_ema_shadow", None)
    if shadow is None or shadow.keys() != state.keys() or any(
            not np.array_equal(shadow[k].astype(np.float32), v) for k, v in state.items()):
        shadow = {k: v.astype(np.float64) for k, v in state.items()}
        mean._ema_shadow = shadow
    return shadow


def ema_update(student: Module, mean: Module, m: float) -> None:
    """theta_mean <- m * theta_mean + (1 - m) * theta_student, buffers included.

    Evaluated as theta_mean + (1 - m) * (theta_student - theta_mean) on f64
    shadow copies, so tensors that already agree (e.g. a frozen transplanted
    head) stay bit-identical; m == 0 is an exact copy.
    """
    src, dst = student.state(), mean.state()
    if src.keys() != dst.keys():
        only_s = sorted(set(src) - set(dst))
        only_m = sorted(set(dst) - set(src))
        raise KeyError(f"EMA name mismatch: student-only {only_s}, mean-only {only_m}")
    if not 0 <= m < 1:
        raise ConfigError(f"EMA momentum must be in [0, 1), got {m}")
    shadow = _shadow(mean, dst)
    for name, target in dst.items():
        acc = shadow[name]
        if m == 0:
            acc[...] = src[name]
        else:
            acc += (1.0 - m) * (src[name].astype(np.float64) - acc)
        target[...] = acc


# --- freezing ----------------------------------------------------------------

def apply_freeze_schedule(state: DistillState, epoch: int, cfg: TrainConfig) -> bool:
    """Set the student head's trainable flag for ``epoch``; returns frozen flag."""
    a = state.assembly
    if a.mode != "retro":
        a.set_head_frozen(False)
        return False
    frozen_epochs, _ = cfg.freeze_schedule
    frozen = epoch < frozen_epochs
    if frozen != a.head_frozen:
        log.info("epoch %d: projection head %s", epoch, "frozen" if frozen else "unfrozen")
    a.set_head_frozen(frozen)
    return frozen


def _check_head_grads(state: DistillState) -> None:
    head = state.assembly.student.head.parameters()
    if state.assembly.head_frozen:
        leaked = [p.name for p in head if p.grad is not None]
        if leaked:
            raise FrozenHeadViolation(f"frozen head received gradient: {leaked}")
    elif any(p.grad is not None for p in head):
        state.head_grad_seen = True


# --- steps -------------------------------------------------------------------

def _finish_step(state: DistillState, tape: Tape, loss: Tensor, cfg: TrainConfig, lr: float) -> None:
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(
            f"non-finite loss {value} at epoch {state.epoch} step {state.step}; "
            f"try a lower lr (current {lr})")
    a = state.assembly
    backward(tape, loss)
    _check_head_grads(state)
    params = a.trainable_parameters()
    sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
    zero_grad(params)
    ema_update(a.student, a.mean_student, cfg.ema_momentum)


def _snap(**tensors) -> dict:
    return {k: v.data.copy() for k, v in tensors.items()}


def distill_step_retro(state: DistillState, views, cfg: TrainConfig, lr: float,
                       keep_embeddings: bool = False) -> StepMetrics:
    """Six forwards: student, teacher and mean student on both views."""
    a = state.assembly
    start = a.forward_count
    v, vp = Tensor(views.v), Tensor(views.v_prime)
    with Tape() as tape:
        e_s = a.forward_student(v)
        e_sp = a.forward_student(vp)
    e_t, e_tp = a.forward_teacher(v), a.forward_teacher(vp)
    e_m, e_mp = a.forward_mean(v), a.forward_mean(vp)
    neg_v, neg_vp = state.bank_v.negatives(), state.bank_v_prime.negatives()
    with tape:
        l_dis = consistency_loss(e_s, e_t, e_sp, e_tp)
        l_con = symmetric_info_nce(e_s, e_sp, e_m, e_mp, state.bank_v, state.bank_v_prime,
                                   cfg.temperature)
        loss = total_loss(l_dis, l_con, cfg.gamma, cfg.consistency_weight)
    kept = {}
    if keep_embeddings:
        kept = _snap(e_s=e_s, e_sp=e_sp, e_t=e_t, e_tp=e_tp, e_m=e_m, e_mp=e_mp)
        kept.update(neg_v=neg_v, neg_vp=neg_vp)
    _finish_step(state, tape, loss, cfg, lr)
    state.bank_v.enqueue(e_m)
    state.bank_v_prime.enqueue(e_mp)
    state.step += 1
    return StepMetrics(loss.item(), l_dis.item(), l_con.item(), lr, a.head_frozen,
                       a.forward_count - start, kept)


def distill_step_disco(state: DistillState, views, cfg: TrainConfig, lr: float,
                       keep_embeddings: bool = False) -> StepMetrics:
    """Consistency on both views plus one-directional InfoNCE (q=E_s, k=E'_m)."""
    a = state.assembly
    start = a.forward_count
    v, vp = Tensor(views.v), Tensor(views.v_prime)
    with Tape() as tape:
        e_s = a.forward_student(v)
        e_sp = a.forward_student(vp)
    e_t, e_tp = a.forward_teacher(v), a.forward_teacher(vp)
    e_mp = a.forward_mean(vp)
    neg = state.bank_v_prime.negatives()
    with tape:
        l_dis = consistency_loss(e_s, e_t, e_sp, e_tp)
        l_con = info_nce(e_s, e_mp, neg, cfg.temperature)
        loss = total_loss(l_dis, l_con, cfg.gamma, cfg.consistency_weight)
    kept = {}
    if keep_embeddings:
        kept = _snap(e_s=e_s, e_sp=e_sp, e_t=e_t, e_tp=e_tp, e_mp=e_mp)
        kept.update(neg_vp=neg)
    _finish_step(state, tape, loss, cfg, lr)
    state.bank_v_prime.enqueue(e_mp)
    state.step += 1
    return StepMetrics(loss.item(), l_dis.item(), l_con.item(), lr, a.head_frozen,
                       a.forward_count - start, kept)


def moco_step(state: DistillState, views, cfg: TrainConfig, lr: float,
              keep_embeddings: bool = False) -> StepMetrics:
    """MoCo-V2: query from the student on v, key from the EMA copy on v'."""
    a = state.assembly
    start = a.forward_count
    v, vp = Tensor(views.v), Tensor(views.v_prime)
    with Tape() as tape:
        q = a.forward_student(v)
    k = a.forward_mean(vp)
    neg = state.bank_v_prime.negatives()
    with tape:
        l_con = info_nce(q, k, neg, cfg.temperature)
        loss = total_loss(Tensor(0.0), l_con, cfg.gamma, 1.0)
    kept = _snap(q=q, k=k) if keep_embeddings else {}
    _finish_step(state, tape, loss, cfg, lr)
    state.bank_v_prime.enqueue(k)
    state.step += 1
    return StepMetrics(loss.item(), 0.0, l_con.item(), lr, a.head_frozen,
                       a.forward_count - start, kept)


STEP_FNS = {"retro": distill_step_retro, "disco": distill_step_disco, "baseline_moco": moco_step}


# --- loops -------------------------------------------------------------------

StepCallback = Callable[[DistillState, StepMetrics, float], None]


def run_training(state: DistillState, ds: Dataset, cfg: TrainConfig, aug: AugmentationConfig,
                 on_step: Optional[StepCallback] = None) -> List[dict]:
    """Train for ``cfg.epochs`` epochs; returns one summary dict per epoch.

    ``on_step`` receives (state, metrics, wall_ms) after every step.
    """
    cfg.validate()
    step_fn = STEP_FNS[state.assembly.mode]
    base_lr = cfg.scaled_lr
    history = []
    for epoch in range(state.epoch, cfg.epochs):
        state.epoch = epoch
        frozen = apply_freeze_schedule(state, epoch, cfg)
        lr = cosine_lr(base_lr, epoch, cfg.epochs)
        totals = np.zeros(3)
        steps = 0
        for idx in epoch_batches(len(ds), cfg.batch_size, cfg.seed, epoch):
            t0 = time.perf_counter()
            views = two_views(ds.images[idx], aug, epoch, state.step)
            metrics = step_fn(state, views, cfg, lr)
            if on_step is not None:
                on_step(state, metrics, (time.perf_counter() - t0) * 1e3)
            totals += (metrics.loss_total, metrics.loss_dis, metrics.loss_con)
            steps += 1
        if steps == 0:
            raise ConfigError(f"dataset of {len(ds)} samples yields no batch of {cfg.batch_size}")
        mean = totals / steps
        history.append(dict(epoch=epoch, step=state.step, loss_total=mean[0], loss_dis=mean[1],
                            loss_con=mean[2], lr=lr, head_frozen=frozen))
        log.info("%s epoch %d: loss %.4f (dis %.4f, con %.4f)", state.assembly.mode, epoch,
                 *mean)
    state.epoch = cfg.epochs
    return history


def pretrain_teacher(ds: Dataset, cfg: TrainConfig, enc_cfg: EncoderConfig, head_hidden: int,
                     aug: AugmentationConfig, embed_dim: int = 128,
                     on_step: Optional[StepCallback] = None) -> Tuple[Network, List[dict]]:
    """MoCo-V2 pretraining of encoder + head; returns the query network."""
    if cfg.mode != "baseline_moco":
        raise ConfigError(f"teacher pretraining runs in baseline_moco mode, not {cfg.mode!r}")
    net = build_network(enc_cfg, head_hidden, cfg.seed, embed_dim=embed_dim)
    assembly = ModelAssembly("baseline_moco", net)
    state = make_state(assembly, cfg)
    history = run_training(state, ds, cfg, aug, on_step)
    return net, history
