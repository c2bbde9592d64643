"""Contrastive and consistency objectives."""
from __future__ import annotations

import numpy as np

from retro import ops
from retro.autograd import ShapeError, Tensor
from retro.memory_bank import MemoryBank

DEFAULT_TEMPERATURE = 0.2
UNIT_TOL = 1e-4


class LossConfigError(ValueError):
    pass


class UnitNormError(ValueError):
    pass


def _check_unit(name: str, x: np.ndarray) -> None:
    norms = np.sqrt(np.einsum("nd,nd->n", x.astype(np.float64), x))
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if worst > UNIT_TOL:
        raise UnitNormError(f"{name}: rows must be unit-norm (max deviation {worst:.2e})")


def info_nce(q: Tensor, k_pos: Tensor, negatives, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Mean over the batch of -log softmax of the positive among K+1 logits.

    Logit 0 is q.k_pos / tau; logits 1..K are q.n_j / tau for the bank rows.
    """
    if temperature <= 0:
        raise LossConfigError(f"temperature must be positive, got {temperature}")
    neg = negatives if isinstance(negatives, Tensor) else Tensor(negatives)
    if q.shape != k_pos.shape:
        raise ShapeError(f"query {q.shape} and positive key {k_pos.shape} differ")
    if neg.data.ndim != 2 or neg.shape[0] < 1 or neg.shape[1] != q.shape[1]:
        raise ShapeError(f"negatives must be [K>=1, {q.shape[1]}], got {neg.shape}")
    if __debug__:
        _check_unit("q", q.data)
        _check_unit("k_pos", k_pos.data)
        _check_unit("negatives", neg.data)
    pos = ops.rowdot(q, k_pos)
    negl = ops.matmul(q, ops.transpose(neg))
    logits = ops.scale(ops.concat([pos, negl], axis=1), 1.0 / temperature)
    return ops.cross_entropy(logits, np.zeros(q.shape[0], dtype=np.int64))


def symmetric_info_nce(q: Tensor, q_prime: Tensor, k: Tensor, k_prime: Tensor,
                       bank_v: MemoryBank, bank_v_prime: MemoryBank,
                       temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """0.5 * NCE(q, k', bank_v') + 0.5 * NCE(q', k, bank_v).

    ``q``/``q_prime`` come from the student on views v/v'; ``k``/``k_prime``
    from the mean student. Banks are checked by their view tag so they cannot
    be silently swapped.
    """
    if bank_v.view != "v" or bank_v_prime.view != "v_prime":
        raise LossConfigError(
            f"bank views must be ('v', 'v_prime'), got ({bank_v.view!r}, {bank_v_prime.view!r})")
    a = info_nce(q, k_prime, bank_v_prime.negatives(), temperature)
    b = info_nce(q_prime, k, bank_v.negatives(), temperature)
    return ops.scale(ops.add(a, b), 0.5)


def consistency_loss(e_s: Tensor, e_t: Tensor, e_s_prime: Tensor, e_t_prime: Tensor) -> Tensor:
    """Batch-mean squared distance student vs teacher, summed over both views.

    For unit vectors each term equals 2 - 2 cos(angle).
    """
    for a, b in ((e_s, e_t), (e_s_prime, e_t_prime)):
        if a.shape != b.shape:
            raise ShapeError(f"consistency_loss: shapes {a.shape} and {b.shape} differ")
    view1 = ops.mean(ops.sum_squares_rows(ops.sub(e_s, e_t)))
    view2 = ops.mean(ops.sum_squares_rows(ops.sub(e_s_prime, e_t_prime)))
    return ops.add(view1, view2)


def total_loss(l_dis: Tensor, l_con: Tensor, gamma: float = 1.0,
               consistency_weight: float = 1.0) -> Tensor:
    """consistency_weight * L_dis + gamma * L_con (both weights default to 1)."""
    if gamma < 0 or consistency_weight < 0:
        raise LossConfigError("loss weights must be non-negative")
    return ops.add(ops.scale(l_dis, consistency_weight), ops.scale(l_con, gamma))
