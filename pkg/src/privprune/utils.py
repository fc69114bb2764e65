"""Seeding and state-fingerprint helpers."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def seed_all(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from a tuple of integers."""
    h = hashlib.sha256(",".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "big") % (2 ** 63)


def fingerprint_tensors(tensors) -> str:
    """SHA-1 over the raw bytes of a sequence of tensors (bit-exact identity)."""
    h = hashlib.sha1()
    for t in tensors:
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


def fingerprint_module(module: torch.nn.Module) -> str:
    """Fingerprint of all parameters and buffers (normalization stats included)."""
    state = module.state_dict()
    return fingerprint_tensors(state[k] for k in sorted(state))
