"""Encoders, projection heads, the dimension adapter and the three-network assembly."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from retro import ops
from retro.autograd import DTYPE, Parameter, Tensor

EMBED_DIM = 128

# BN behaviour per forward path:
#   "train" - batch statistics, running buffers updated (student)
#   "batch" - batch statistics, buffers untouched (mean student; buffers move by EMA)
#   "eval"  - running buffers (teacher, probes)
BN_MODES = ("train", "batch", "eval")


class ConfigError(ValueError):
    pass


class Module:
    """Bare container: parameters, buffers and child modules found by attribute scan."""

    _buffer_names: tuple = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def state(self) -> dict:
        """Name -> array for parameters and buffers (live views, not copies)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state(self, tensors: dict, prefix: str = "") -> None:
        own = self.state()
        wanted = {prefix + k for k in own}
        missing = sorted(wanted - set(tensors))
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing}")
        for k, arr in own.items():
            src = np.asarray(tensors[prefix + k], dtype=DTYPE)
            if src.shape != arr.shape:
                raise ValueError(f"{prefix + k}: shape {src.shape} != expected {arr.shape}")
            arr[...] = src


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (d_out, d_in), d_in)
        self.bias = _uniform(rng, (d_out,), d_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight.tensor, self.bias.tensor)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator):
        self.stride, self.padding = stride, padding
        self.weight = _uniform(rng, (c_out, c_in, k, k), c_in * k * k)

    def __call__(self, x: Tensor, layout: str = "NHWC") -> Tensor:
        return ops.conv2d(x, self.weight.tensor, self.stride, self.padding, layout=layout)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int):
        self.weight = Parameter(Tensor(np.ones(channels), requires_grad=True))
        self.bias = Parameter(Tensor(np.zeros(channels), requires_grad=True))
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def __call__(self, x: Tensor, bn: str, channel_axis: int = -1) -> Tensor:
        if bn not in BN_MODES:
            raise ValueError(f"bn mode must be one of {BN_MODES}, got {bn!r}")
        return ops.batchnorm(x, self.weight.tensor, self.bias.tensor,
                             self.running_mean, self.running_var,
                             training=bn != "eval", update_stats=bn == "train",
                             channel_axis=channel_axis)


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        k, pad = EncoderConfig.kernel_for(stride)
        self.conv = Conv2d(c_in, c_out, k, stride, pad, rng)
        self.bn = BatchNorm(c_out)

    def __call__(self, x: Tensor, bn: str) -> Tensor:
        return ops.relu(self.bn(self.conv(x), bn))


@dataclass
class EncoderConfig:
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    strides: List[int] = field(default_factory=lambda: [4, 2, 1])
    in_channels: int = 3

    @property
    def representation_dim(self) -> int:
        return self.widths[-1]

    @staticmethod
    def kernel_for(stride: int) -> tuple:
        """(kernel, padding) giving an exact size/stride output for even sizes."""
        if stride == 1:
            return 3, 1
        return 2 * stride, stride // 2

    def validate(self) -> None:
        if not self.widths:
            raise ConfigError("encoder needs at least one stage")
        if len(self.widths) != len(self.strides):
            raise ConfigError(
                f"encoder widths {self.widths} and strides {self.strides} differ in length")
        if any(w < 1 for w in self.widths) or any(s < 1 for s in self.strides):
            raise ConfigError("encoder widths and strides must be positive")


class Encoder(Module):
    """Stack of conv-BN-ReLU stages.

    Calling it maps [B, C, H, W] to the pre-pool map [B, D, h, w]; the
    channel-last :meth:`features` is what the networks use internally.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.stages = []
        c_in = cfg.in_channels
        for width, stride in zip(cfg.widths, cfg.strides):
            self.stages.append(ConvBNReLU(c_in, width, stride, rng))
            c_in = width

    @property
    def dim(self) -> int:
        return self.cfg.representation_dim

    def features(self, x: Tensor, bn: str = "train") -> Tensor:
        """[B, C, H, W] -> channel-last feature map [B, h, w, D]."""
        x = ops.permute(x, ops.NCHW_TO_NHWC)
        for stage in self.stages:
            x = stage(x, bn)
        return x

    def __call__(self, x: Tensor, bn: str = "train") -> Tensor:
        return ops.permute(self.features(x, bn), ops.NHWC_TO_NCHW)


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    return Encoder(cfg, np.random.default_rng(seed))


class ProjectionHead(Module):
    """Two linear layers with a ReLU between them."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        if d_out >= d_in:
            raise ConfigError(f"projection head must reduce dimension: {d_in} -> {d_out}")
        self.linear1 = Linear(d_in, hidden, rng)
        self.linear2 = Linear(hidden, d_out, rng)

    @property
    def in_dim(self) -> int:
        return self.linear1.weight.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.linear1.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.linear2.weight.shape[0]

    def __call__(self, z: Tensor) -> Tensor:
        return self.linear2(ops.relu(self.linear1(z)))


class Adapter(Module):
    """1x1 conv (D_s -> D_t) + BN + ReLU, applied to the pre-pool feature map."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.conv = Conv2d(d_in, d_out, 1, 1, 0, rng)
        self.bn = BatchNorm(d_out)

    @property
    def out_dim(self) -> int:
        return self.conv.weight.shape[0]

    def __call__(self, x: Tensor, bn: str = "train") -> Tensor:
        """Channel-last [B, h, w, D_s] -> [B, h, w, D_t]."""
        return ops.relu(self.bn(self.conv(x), bn))


class Network(Module):
    """encoder -> [adapter] -> global average pool -> head -> L2 normalise."""

    def __init__(self, encoder: Encoder, head: ProjectionHead, adapter: Optional[Adapter] = None):
        self.encoder = encoder
        if adapter is not None:
            self.adapter = adapter
        self.head = head
        width = adapter.out_dim if adapter is not None else encoder.dim
        if width != head.in_dim:
            raise ConfigError(
                f"head expects {head.in_dim} input channels but receives {width}"
                + ("" if adapter is not None else " (no adapter)"))

    @property
    def adapter_or_none(self) -> Optional[Adapter]:
        return getattr(self, "adapter", None)

    def represent(self, x: Tensor, bn: str = "eval") -> Tensor:
        """Pooled encoder representation (what linear probes see)."""
        return ops.global_avg_pool(self.encoder.features(x, bn), layout="NHWC")

    def embed(self, x: Tensor, bn: str = "train") -> Tensor:
        z = self.encoder.features(x, bn)
        if self.adapter_or_none is not None:
            z = self.adapter(z, bn)
        return ops.l2_normalize(self.head(ops.global_avg_pool(z, layout="NHWC")))


def build_network(enc_cfg: EncoderConfig, head_hidden: int, seed: int,
                  adapter_dim: Optional[int] = None, embed_dim: int = EMBED_DIM) -> Network:
    rng = np.random.default_rng(seed)
    encoder = Encoder(enc_cfg, rng)
    adapter = Adapter(encoder.dim, adapter_dim, rng) if adapter_dim is not None else None
    head_in = adapter_dim if adapter_dim is not None else encoder.dim
    head = ProjectionHead(head_in, head_hidden, embed_dim, rng)
    net = Network(encoder, head, adapter)
    net.assign_names()
    return net


def count_trainable(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters() if p.trainable))


def count_parameters(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters()))


MODES = ("baseline_moco", "disco", "retro")


class ModelAssembly:
    """Student, mean student (EMA copy) and frozen teacher.

    ``forward_count`` tallies network forward passes so the per-step cost
    can be checked.
    """

    def __init__(self, mode: str, student: Network, teacher: Optional[Network] = None):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode != "baseline_moco" and teacher is None:
            raise ConfigError(f"mode {mode!r} needs a teacher")
        self.mode = mode
        self.teacher = teacher
        self.student = student
        if teacher is not None:
            teacher.set_trainable(False)
        if mode == "retro":
            transplant_head(teacher, student)
        self.mean_student = copy.deepcopy(student)
        self.mean_student.set_trainable(False)
        self.forward_count = 0

    # -- forward paths --------------------------------------------------------
    def forward_student(self, v: Tensor) -> Tensor:
        self.forward_count += 1
        return self.student.embed(v, bn="train")

    def forward_teacher(self, v: Tensor) -> Tensor:
        self.forward_count += 1
        return self.teacher.embed(v, bn="eval")

    def forward_mean(self, v: Tensor) -> Tensor:
        self.forward_count += 1
        return self.mean_student.embed(v, bn="batch")

    # -- head freezing --------------------------------------------------------
    @property
    def head_frozen(self) -> bool:
        return not any(p.trainable for p in self.student.head.parameters())

    def set_head_frozen(self, frozen: bool) -> None:
        self.student.head.set_trainable(not frozen)

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.student.parameters() if p.trainable]


def transplant_head(teacher: Network, student: Network, mean_student: Optional[Network] = None,
                    frozen: bool = True) -> None:
    """Copy the teacher head into the student (and mean student) bit-exactly."""
    t_head = teacher.head
    for target in (student, mean_student):
        if target is None:
            continue
        width = target.adapter_or_none.out_dim if target.adapter_or_none else target.encoder.dim
        if width != t_head.in_dim:
            raise ConfigError(
                f"cannot reuse teacher head: it expects {t_head.in_dim} inputs, student provides "
                f"{width}; add an adapter {width}->{t_head.in_dim}")
        src = t_head.state()
        dst = target.head.state()
        if {k: v.shape for k, v in src.items()} != {k: v.shape for k, v in dst.items()}:
            raise ConfigError("student head shape differs from teacher head shape")
        for k in src:
            dst[k][...] = src[k]
    student.head.set_trainable(not frozen)
    if mean_student is not None:
        mean_student.head.set_trainable(False)


def build_assembly(mode: str, student_cfg: EncoderConfig, seed: int, adapter_dim: int,
                   head_hidden: int, teacher: Optional[Network] = None,
                   embed_dim: int = EMBED_DIM) -> ModelAssembly:
    """Build the student as encoder + adapter + head in every mode.

    ``head_hidden`` sizes the student's own head (baseline and disco). In
    retro mode the head takes the teacher head's shape and weights instead,
    so the trainable-parameter difference between disco and retro is
    exactly the student head's parameter count.
    """
    if teacher is not None and (teacher.head.in_dim, teacher.head.out_dim) != (adapter_dim, embed_dim):
        raise ConfigError(
            f"teacher head is {teacher.head.in_dim}->{teacher.head.out_dim}, "
            f"student adapter/embedding is {adapter_dim}->{embed_dim}")
    if mode == "retro" and teacher is not None:
        head_hidden = teacher.head.hidden_dim
    student = build_network(student_cfg, head_hidden, seed, adapter_dim=adapter_dim,
                            embed_dim=embed_dim)
    return ModelAssembly(mode, student, teacher)
