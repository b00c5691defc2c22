"""Momentum twins updated by EMA, and FIFO queues of momentum projections."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

UNIT_TOL = 1e-5


@dataclass
class MomentumPair:
    online: nn.Module
    momentum: nn.Module
    m: float


def init_momentum(online: nn.Module, m: float = 0.995) -> MomentumPair:
    if not 0.0 < m < 1.0:
        raise ValueError(f"momentum coefficient must lie in (0, 1), got {m}")
    twin = copy.deepcopy(online)
    for p in twin.parameters():
        p.requires_grad_(False)
    return MomentumPair(online, twin, m)


@torch.no_grad()
def ema_update(pair: MomentumPair) -> None:
    """momentum <- m * momentum + (1 - m) * online, parameter by parameter."""
    online = dict(pair.online.named_parameters())
    twin = dict(pair.momentum.named_parameters())
    if online.keys() != twin.keys():
        missing = sorted(online.keys() ^ twin.keys())
        raise ValueError(f"parameter names differ between online and momentum: {missing}")
    m = pair.m
    for name, p_m in twin.items():
        p_m.mul_(m).add_(online[name], alpha=1.0 - m)


class QueueState:
    """Ring buffer of the K most recent unit vectors."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.entries = torch.zeros(capacity, dim, dtype=dtype)
        self.write_ptr = 0
        self.filled = 0

    def __repr__(self):
        return f"QueueState(K={self.capacity}, dim={self.dim}, filled={self.filled}, ptr={self.write_ptr})"

    def state_dict(self) -> dict:
        return {
            "entries": self.entries.clone(),
            "write_ptr": self.write_ptr,
            "filled": self.filled,
        }

    def load_state_dict(self, state: dict) -> None:
        entries = state["entries"]
        if tuple(entries.shape) != (self.capacity, self.dim):
            raise ValueError(f"queue shape {tuple(entries.shape)} != {(self.capacity, self.dim)}")
        self.entries = entries.clone().to(self.entries.dtype)
        self.write_ptr = int(state["write_ptr"])
        self.filled = int(state["filled"])


@torch.no_grad()
def enqueue(q: QueueState, batch_vecs: torch.Tensor) -> None:
    vecs = batch_vecs.detach()
    B = vecs.shape[0]
    if B > q.capacity:
        raise ValueError(f"batch of {B} exceeds queue capacity {q.capacity}")
    if vecs.shape[1] != q.dim:
        raise ValueError(f"expected {q.dim}-dim vectors, got {vecs.shape[1]}")
    norms = vecs.double().norm(dim=1)
    if B and (norms - 1).abs().max() > UNIT_TOL:
        raise ValueError("queue entries must be unit vectors")
    idx = (q.write_ptr + torch.arange(B)) % q.capacity
    q.entries[idx] = vecs.to(q.entries.dtype)
    q.write_ptr = (q.write_ptr + B) % q.capacity
    q.filled = min(q.filled + B, q.capacity)


def negatives(q: QueueState) -> torch.Tensor:
    """The filled rows of the queue (storage order), detached."""
    return q.entries[: q.filled].clone()
