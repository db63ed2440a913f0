"""Shared plumbing: seeded RNG construction and image/tensor conversion."""

from __future__ import annotations

import numpy as np
import torch


class ConfigError(ValueError):
    """Raised for invalid configuration values or malformed config files."""


def make_rng(seed: int, *salts: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a seed plus salt integers.

    Every piece of randomness in the library flows through one of these, so a
    fixed (seed, salts) tuple gives the same stream on every run and platform.
    Distinct salts give statistically independent streams, which lets training
    draw augmentation/batch/sampling randomness without cross-contamination.
    """
    ss = np.random.SeedSequence(entropy=(int(seed) & 0xFFFFFFFF, *[int(s) & 0xFFFFFFFF for s in salts]))
    return np.random.Generator(np.random.Philox(ss))


def to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWx3 or NxHxWx3 numpy image(s) in [0,1] -> (N,3,H,W) torch tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (H,W,3) or (N,H,W,3) image array, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """(3,H,W) or (N,3,H,W) tensor -> HxWx3 or NxHxWx3 float32 numpy array."""
    x = t.detach().cpu()
    if x.ndim == 3:
        return x.permute(1, 2, 0).numpy().astype(np.float32)
    return x.permute(0, 2, 3, 1).numpy().astype(np.float32)


def parameter_fingerprint(module: torch.nn.Module) -> bytes:
    """Byte-level hash input over all parameters, for frozen-model assertions."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.digest()
