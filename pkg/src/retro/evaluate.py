"""Linear probe, kNN and label-fraction fine-tuning of a trained encoder."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from retro import ops
from retro.autograd import Tape, Tensor, backward
from retro.data import Dataset, epoch_batches, label_fraction_subset, subset_hash
from retro.nn import ConfigError, Encoder, Linear
from retro.optim import sgd_step, step_lr, zero_grad

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    epochs: int = 30
    lr: float = 3.0
    lr_drop_milestones: Sequence[float] = (0.6, 0.8)
    drop_factor: float = 10.0
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    finetune_epochs: int = 20
    finetune_lr: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        ms = list(self.lr_drop_milestones)
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing in (0, 1), got {ms}")
        if self.epochs < 1 or self.finetune_epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.finetune_lr <= 0 or self.drop_factor <= 0:
            raise ConfigError("learning rates and drop_factor must be positive")

    def fingerprint(self, *extra: str) -> str:
        d = asdict(self)
        d["lr_drop_milestones"] = list(d["lr_drop_milestones"])
        h = hashlib.sha256(json.dumps(d, sort_keys=True).encode())
        for e in extra:
            h.update(e.encode())
        return h.hexdigest()[:16]


@dataclass
class EvalReport:
    kind: str
    top1: float
    top5: float
    per_class: np.ndarray
    fingerprint: str
    subset_hash: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.top1 <= self.top5 <= 1:
            raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class"] = [float(x) for x in self.per_class]
        return d


def encoder_digest(encoder: Encoder) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(encoder.state().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _check_classes(train_ds: Dataset, test_ds: Dataset) -> None:
    if train_ds.class_count != test_ds.class_count:
        raise ConfigError(
            f"class-count mismatch: train has {train_ds.class_count}, test has {test_ds.class_count}")


def extract_features(encoder: Encoder, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Pooled eval-mode representations [N, D]; never records on a tape."""
    out = []
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start:start + batch_size])
        feats = ops.global_avg_pool(encoder.features(x, bn="eval"), layout="NHWC")
        out.append(feats.data)
    return np.concatenate(out)


def standardize(train_f: np.ndarray, test_f: np.ndarray) -> tuple:
    """Scale every feature to zero mean and unit variance using train statistics only.

    This is a parameter-free batch norm in front of the linear layer: the
    classifier stays linear in the representation, but its step size no
    longer depends on the raw feature scale, which differs widely between
    encoders (a freshly initialised one has a spread near 1e-3).
    """
    mean = train_f.mean(axis=0, dtype=np.float64)
    std = train_f.std(axis=0, dtype=np.float64)
    std = np.where(std > 1e-12, std, 1.0)
    return ((train_f - mean) / std).astype(np.float32), ((test_f - mean) / std).astype(np.float32)


def score(logits: np.ndarray, labels: np.ndarray, class_count: int) -> tuple:
    """(top1, top5, per-class top1); ranking ties go to the smaller class index."""
    order = np.argsort(-logits, axis=1, kind="stable")
    top1_hit = order[:, 0] == labels
    k = min(5, class_count)
    top5_hit = (order[:, :k] == labels[:, None]).any(axis=1)
    per_class = np.array([top1_hit[labels == c].mean() if (labels == c).any() else np.nan
                          for c in range(class_count)])
    return float(top1_hit.mean()), float(top5_hit.mean()), per_class


def _train_linear(feats: np.ndarray, labels: np.ndarray, classes: int, cfg: ProbeConfig) -> Linear:
    rng = np.random.default_rng([cfg.seed, 0x9E0B])
    clf = Linear(feats.shape[1], classes, rng)
    params = clf.parameters()
    for epoch in range(cfg.epochs):
        lr = step_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_drop_milestones, cfg.drop_factor)
        for idx in epoch_batches(len(labels), cfg.batch_size, cfg.seed, epoch, drop_last=False):
            with Tape() as tape:
                loss = ops.cross_entropy(clf(Tensor(feats[idx])), labels[idx])
            backward(tape, loss)
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            zero_grad(params)
    return clf


def linear_probe(encoder: Encoder, train_ds: Dataset, test_ds: Dataset,
                 cfg: ProbeConfig = ProbeConfig()) -> EvalReport:
    """Train a linear classifier on frozen pooled features and score the test set.

    Features are extracted once with eval-mode batch norm, so the encoder
    (weights and running statistics) is read but never written, and then
    standardised with training-set statistics.
    """
    cfg.validate()
    _check_classes(train_ds, test_ds)
    train_f = extract_features(encoder, train_ds.images)
    test_f = extract_features(encoder, test_ds.images)
    train_f, test_f = standardize(train_f, test_f)
    clf = _train_linear(train_f, train_ds.labels, train_ds.class_count, cfg)
    logits = clf(Tensor(test_f)).data
    top1, top5, per_class = score(logits, test_ds.labels, test_ds.class_count)
    return EvalReport("linear_probe", top1, top5, per_class,
                      cfg.fingerprint(encoder_digest(encoder), subset_hash(train_ds)))


def knn_predict_scores(train_f: np.ndarray, train_y: np.ndarray, test_f: np.ndarray,
                       k: int, classes: int) -> np.ndarray:
    """Vote counts [N_test, classes] from the k most cosine-similar train items.

    Neighbours with equal similarity are ordered by train index.
    """
    def unit(a):
        a = a.astype(np.float64)
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.where(n == 0, 1.0, n)
    sims = unit(test_f) @ unit(train_f).T
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = np.zeros((len(test_f), classes))
    np.add.at(votes, (np.arange(len(test_f))[:, None], train_y[nearest]), 1.0)
    return votes


def knn_eval(encoder: Encoder, train_ds: Dataset, test_ds: Dataset, k: int = 20) -> EvalReport:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(train_ds):
        raise ConfigError(f"k={k} exceeds the {len(train_ds)} training samples")
    _check_classes(train_ds, test_ds)
    votes = knn_predict_scores(extract_features(encoder, train_ds.images), train_ds.labels,
                               extract_features(encoder, test_ds.images), k, train_ds.class_count)
    top1, top5, per_class = score(votes, test_ds.labels, test_ds.class_count)
    fp = hashlib.sha256(f"knn:{k}:{encoder_digest(encoder)}".encode()).hexdigest()[:16]
    return EvalReport("knn", top1, top5, per_class, fp, extra={"k": k})


def semi_supervised_finetune(encoder: Encoder, train_ds: Dataset, test_ds: Dataset,
                             fraction: float, cfg: ProbeConfig = ProbeConfig(),
                             seed: int = 0) -> EvalReport:
    """Fine-tune a copy of the encoder plus a linear layer on a labelled fraction."""
    cfg.validate()
    _check_classes(train_ds, test_ds)
    subset = label_fraction_subset(train_ds, fraction, seed)
    enc = copy.deepcopy(encoder)
    enc.set_trainable(True)
    rng = np.random.default_rng([seed, 0xF17E])
    clf = Linear(enc.dim, train_ds.class_count, rng)
    params = enc.parameters() + clf.parameters()
    batch = min(cfg.batch_size, len(subset))
    for epoch in range(cfg.finetune_epochs):
        lr = step_lr(cfg.finetune_lr, epoch, cfg.finetune_epochs, cfg.lr_drop_milestones,
                     cfg.drop_factor)
        for idx in epoch_batches(len(subset), batch, seed, epoch):
            with Tape() as tape:
                feats = ops.global_avg_pool(enc.features(Tensor(subset.images[idx]), bn="train"),
                                            layout="NHWC")
                loss = ops.cross_entropy(clf(feats), subset.labels[idx])
            backward(tape, loss)
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            zero_grad(params)
    logits = clf(Tensor(extract_features(enc, test_ds.images))).data
    top1, top5, per_class = score(logits, test_ds.labels, test_ds.class_count)
    sh = subset_hash(subset)
    return EvalReport("semi_supervised", top1, top5, per_class,
                      cfg.fingerprint(encoder_digest(encoder), sh, str(fraction), str(seed)),
                      subset_hash=sh, extra={"fraction": fraction, "labelled": len(subset)})
