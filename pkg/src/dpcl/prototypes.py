"""Class and instance prototypes over segmentation features.

Class prototypes are unit-norm EMA-tracked mean features per class; instance
prototypes are per-connected-region means. The bank doubles as a nearest-
prototype classifier at test time and supplies a divergence penalty that keeps
class prototypes spread apart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import torch

from .scenes import IGNORE

log = logging.getLogger(__name__)

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class PrototypeBank:
    """K unit-norm class prototypes with exponential-moving-average updates."""

    def __init__(self, num_classes: int, dim: int, momentum: float = 0.999, temperature: float = 0.1):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.num_classes = num_classes
        self.dim = dim
        self.momentum = momentum
        self.temperature = temperature
        self.P = torch.zeros(num_classes, dim, dtype=torch.float64)
        self.initialized = np.zeros(num_classes, dtype=bool)

    def all_initialized(self) -> bool:
        return bool(self.initialized.all())

    def ema_update(self, batch_protos: dict[int, torch.Tensor]) -> "PrototypeBank":
        """Fold unit-norm batch prototypes into the bank.

        First sighting of a class assigns it directly; afterwards the EMA
        result is re-normalized so every stored row stays unit length.
        Classes absent from the batch are untouched.
        """
        g = self.momentum
        for k, p in batch_protos.items():
            v = p.detach().to(torch.float64).reshape(-1)
            if self.initialized[k]:
                mixed = g * self.P[k] + (1.0 - g) * v
                self.P[k] = mixed / mixed.norm()
            else:
                self.P[k] = v / v.norm()
                self.initialized[k] = True
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "prototypes": self.P.numpy().astype(np.float32),
            "initialized": self.initialized.astype(np.uint8),
        }

    @classmethod
    def from_state(cls, prototypes: np.ndarray, initialized: np.ndarray,
                   momentum: float = 0.999, temperature: float = 0.1) -> "PrototypeBank":
        bank = cls(prototypes.shape[0], prototypes.shape[1], momentum, temperature)
        bank.P = torch.from_numpy(prototypes.astype(np.float64))
        bank.initialized = initialized.astype(bool)
        return bank


@dataclass
class InstancePrototype:
    """Unit-norm mean feature of one connected region of one class."""

    vector: torch.Tensor  # (D,), unit norm, may carry gradient
    class_id: int
    region_size: int

    def __post_init__(self):
        if self.region_size < 1:
            raise ValueError("region_size must be >= 1")


def class_prototypes_from_batch(features: torch.Tensor, masks: np.ndarray) -> dict[int, torch.Tensor]:
    """Masked mean feature per class, unit-normalized.

    features: (B,D,H,W) at feature resolution; masks: (B,H,W) ints with 255 =
    ignore, already downsampled to feature resolution. Classes absent from the
    batch are absent from the result; a class whose features cancel to a
    zero-norm mean is dropped for this batch (its direction is undefined).
    """
    if features.ndim == 3:
        features = features[None]
        masks = masks[None]
    b, d, h, w = features.shape
    if masks.shape != (b, h, w):
        raise ValueError(f"masks {masks.shape} do not match features {(b, h, w)}")
    flat = features.permute(0, 2, 3, 1).reshape(-1, d)
    labels = np.asarray(masks).reshape(-1)
    out: dict[int, torch.Tensor] = {}
    for k in np.unique(labels):
        if k == IGNORE:
            continue
        sel = np.nonzero(labels == k)[0]
        mean = flat[torch.from_numpy(sel)].mean(dim=0)
        norm = mean.norm()
        if float(norm.detach()) < 1e-12:
            log.warning("class %d produced a zero-norm prototype; dropped for this batch", int(k))
            continue
        out[int(k)] = mean / norm
    return out


def connected_regions(class_mask: np.ndarray) -> list[np.ndarray]:
    """Split a binary mask into its 4-connected components.

    The returned boolean masks are pairwise disjoint and their union equals
    the input; an empty mask yields an empty list.
    """
    m = np.asarray(class_mask).astype(bool)
    labeled, n = ndi.label(m, structure=_FOUR_CONN)
    return [labeled == i for i in range(1, n + 1)]


def instance_prototypes(features: torch.Tensor, mask: np.ndarray, min_region_px: int = 2) -> list[InstancePrototype]:
    """One unit-norm prototype per connected region per class of one image.

    features: (D,H,W); mask: (H,W) at feature resolution. Regions smaller than
    min_region_px are discarded.
    """
    d, h, w = features.shape
    if mask.shape != (h, w):
        raise ValueError(f"mask {mask.shape} does not match features {(h, w)}")
    flat = features.permute(1, 2, 0).reshape(-1, d)
    out: list[InstancePrototype] = []
    for k in np.unique(mask):
        if k == IGNORE:
            continue
        for region in connected_regions(mask == k):
            size = int(region.sum())
            if size < min_region_px:
                continue
            sel = np.nonzero(region.reshape(-1))[0]
            mean = flat[torch.from_numpy(sel)].mean(dim=0)
            norm = mean.norm()
            if float(norm.detach()) < 1e-12:
                continue
            out.append(InstancePrototype(vector=mean / norm, class_id=int(k), region_size=size))
    return out


def divergence_from_matrix(protos: torch.Tensor) -> torch.Tensor:
    """Mean positive cosine similarity over all ordered prototype pairs.

    protos: (K,D) unit-norm rows, K >= 2. Differentiable, in [0,1].
    """
    k = protos.shape[0]
    sim = protos @ protos.T
    off = sim - torch.diag(torch.diagonal(sim))
    return off.clamp(min=0.0).sum() / (k * (k - 1))


def divergence_loss(bank: PrototypeBank) -> torch.Tensor:
    """Divergence penalty over the bank's initialized prototypes."""
    idx = np.nonzero(bank.initialized)[0]
    if len(idx) < 2:
        log.warning("divergence_loss needs >= 2 initialized prototypes; returning 0")
        return torch.zeros((), dtype=torch.float64)
    return divergence_from_matrix(bank.P[torch.from_numpy(idx)])


def prototype_predict(features: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Class-probability map from prototype similarities.

    features: (D,H,W) or (B,D,H,W); output has class scores softmaxed over a
    trailing axis of size K, shape (...,H,W,K). Requires a fully initialized
    bank. Pixel features are unit-normalized before the dot products.
    """
    if not bank.all_initialized():
        missing = np.nonzero(~bank.initialized)[0].tolist()
        raise ValueError(f"prototype bank has uninitialized classes: {missing}")
    squeeze = features.ndim == 3
    if squeeze:
        features = features[None]
    b, d, h, w = features.shape
    z = features.permute(0, 2, 3, 1).reshape(-1, d)
    z = z / z.norm(dim=1, keepdim=True).clamp(min=1e-12)
    logits = (z @ bank.P.to(z.dtype).T) / bank.temperature
    probs = torch.softmax(logits, dim=1).reshape(b, h, w, bank.num_classes)
    return probs[0] if squeeze else probs
