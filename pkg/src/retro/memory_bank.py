"""FIFO queues of negative keys, one per augmented view."""
from __future__ import annotations

import numpy as np

from retro.autograd import DTYPE, Tensor

VIEWS = ("v", "v_prime")
UNIT_TOL = 1e-4


class BankContractError(ValueError):
    pass


class MemoryBank:
    """Fixed-capacity ring buffer of L2-normalised keys.

    The bank starts warm (random unit rows, ``filled == capacity``) so the
    contrastive loss is defined from the first step.
    """

    def __init__(self, capacity: int, dim: int = 128, seed: int = 0, view: str = "v"):
        if capacity < 1:
            raise BankContractError(f"bank capacity must be >= 1, got {capacity}")
        if view not in VIEWS:
            raise BankContractError(f"view must be one of {VIEWS}, got {view!r}")
        self.capacity = capacity
        self.dim = dim
        self.view = view
        rng = np.random.default_rng(seed)
        keys = rng.standard_normal((capacity, dim))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        self.keys = keys.astype(DTYPE)
        self.write_ptr = 0
        self.filled = capacity

    def enqueue(self, new_keys) -> None:
        if isinstance(new_keys, Tensor):
            if new_keys.requires_grad:
                raise BankContractError("keys must be detached from the gradient tape")
            new_keys = new_keys.data
        new_keys = np.asarray(new_keys, dtype=DTYPE)
        if new_keys.ndim != 2 or new_keys.shape[1] != self.dim:
            raise BankContractError(f"expected keys of shape [B, {self.dim}], got {new_keys.shape}")
        B = new_keys.shape[0]
        if B == 0:
            return
        norms = np.linalg.norm(new_keys.astype(np.float64), axis=1)
        if np.abs(norms - 1).max() > UNIT_TOL:
            raise BankContractError("keys must be unit-norm")
        K = self.capacity
        if B >= K:
            # only the last K rows survive; row i lands at (ptr + i) mod K
            start = B - K
            idx = (self.write_ptr + start + np.arange(K)) % K
            self.keys[idx] = new_keys[start:]
        else:
            idx = (self.write_ptr + np.arange(B)) % K
            self.keys[idx] = new_keys
        self.write_ptr = (self.write_ptr + B) % K
        self.filled = min(K, self.filled + B)

    def negatives(self) -> np.ndarray:
        """Snapshot copy of all K keys."""
        return self.keys.copy()

    def state(self) -> dict:
        return {"keys": self.keys, "write_ptr": np.array([self.write_ptr], dtype=DTYPE)}

    def load_state(self, keys: np.ndarray, write_ptr: float) -> None:
        keys = np.asarray(keys, dtype=DTYPE)
        if keys.shape != (self.capacity, self.dim):
            raise BankContractError(f"bank shape {keys.shape} != {(self.capacity, self.dim)}")
        self.keys = keys.copy()
        self.write_ptr = int(write_ptr)
        self.filled = self.capacity


def init_bank(K: int, seed: int, dim: int = 128, view: str = "v") -> MemoryBank:
    return MemoryBank(K, dim, seed, view)
