"""Fixed-capacity FIFO queues of unit-norm keys used as contrastive negatives."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import InvalidInputError

NORM_TOL = 1e-4


class KeyQueue:
    """Ring buffer of K keys of dimension D.

    `negatives()` returns the held keys oldest-first as a fresh tensor, so
    later enqueues never alter an earlier snapshot.
    """

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1 or dim < 1:
            raise InvalidInputError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.write_ptr = 0
        self.filled_count = 0

    def __len__(self):
        return self.filled_count

    @torch.no_grad()
    def enqueue_dequeue(self, keys: torch.Tensor) -> "KeyQueue":
        keys = torch.as_tensor(keys)
        if keys.ndim == 1:
            keys = keys[None]
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise InvalidInputError(f"keys must be (n, {self.dim}), got {tuple(keys.shape)}")
        norms = keys.double().norm(dim=1)
        if keys.shape[0] and not torch.all((norms - 1).abs() <= NORM_TOL):
            raise InvalidInputError("queue keys must be L2-normalized")
        keys = keys.detach().to(self.storage.dtype)
        if keys.shape[0] > self.capacity:
            keys = keys[-self.capacity:]
        n = keys.shape[0]
        end = self.write_ptr + n
        if end <= self.capacity:
            self.storage[self.write_ptr:end] = keys
        else:
            first = self.capacity - self.write_ptr
            self.storage[self.write_ptr:] = keys[:first]
            self.storage[:n - first] = keys[first:]
        self.write_ptr = end % self.capacity
        self.filled_count = min(self.capacity, self.filled_count + n)
        return self

    def negatives(self) -> torch.Tensor:
        if self.filled_count < self.capacity:
            return self.storage[:self.filled_count].clone()
        return torch.cat([self.storage[self.write_ptr:], self.storage[:self.write_ptr]])

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "storage": self.storage.clone(),
                "write_ptr": self.write_ptr, "filled_count": self.filled_count}

    def load_state_dict(self, state: dict):
        if state["capacity"] != self.capacity or state["dim"] != self.dim:
            raise InvalidInputError("queue shape mismatch on load")
        self.storage = state["storage"].to(self.storage.dtype).clone()
        self.write_ptr = int(state["write_ptr"])
        self.filled_count = int(state["filled_count"])


def enqueue_dequeue(queue: KeyQueue, keys) -> KeyQueue:
    return queue.enqueue_dequeue(keys)


def negatives(queue: KeyQueue) -> torch.Tensor:
    return queue.negatives()


def mean_patch_keys(k_map: torch.Tensor) -> torch.Tensor:
    """One queue key per image from a (B, D, H, W) teacher patch map.

    Each position is unit-normalized, the positions are averaged, and the
    average is normalized again.
    """
    k = F.normalize(k_map.detach().flatten(2), dim=1)  # B, D, N
    return F.normalize(k.mean(dim=2), dim=1)
