"""Desk-scale segmentation model: conv feature extractor plus 1x1 classifier.

The feature map (second-to-last layer, stride 4) feeds every prototype and
contrastive computation; the classifier head maps it to per-pixel logits. Test
time fuses the classifier softmax with the prototype classifier by averaging.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .prototypes import PrototypeBank, prototype_predict
from .scenes import IGNORE

log = logging.getLogger(__name__)


class SegModel(nn.Module):
    """4-block encoder (total stride 4) to `dim` channels, 1x1 conv classifier."""

    FORMAT_VERSION = 1
    STRIDE = 4

    def __init__(self, num_classes: int, dim: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.num_classes = num_classes
        self.dim = dim
        self.features = nn.Sequential(
            nn.Conv2d(3, 24, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(24, 32, 3, stride=1, padding=1), nn.ReLU(),
            nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(48, dim, 3, stride=1, padding=1), nn.ReLU(),
        )
        self.classifier = nn.Conv2d(dim, num_classes, 1)
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (features, logits); input dims must be divisible by 4."""
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != 3 or x.shape[-1] % self.STRIDE or x.shape[-2] % self.STRIDE:
            raise ValueError(f"expected (B,3,H,W) with H,W divisible by {self.STRIDE}, got {tuple(x.shape)}")
        feats = self.features(x.to(next(self.parameters()).dtype))
        return feats, self.classifier(feats)


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor (center-sample) label downsampling; ignore propagates."""
    m = np.asarray(mask)
    if m.shape[-1] % stride or m.shape[-2] % stride:
        raise ValueError(f"mask dims {m.shape} not divisible by stride {stride}")
    off = stride // 2
    return m[..., off::stride, off::stride]


def upsample_labels(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor label upsampling to an integer-multiple resolution."""
    h, w = labels.shape[-2:]
    H, W = shape
    if H % h or W % w:
        raise ValueError(f"target {shape} not an integer multiple of {labels.shape}")
    return np.repeat(np.repeat(labels, H // h, axis=-2), W // w, axis=-1)


def task_loss(logits: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignore positions."""
    if logits.ndim == 3:
        logits = logits[None]
        mask = np.asarray(mask)[None]
    target = torch.from_numpy(np.asarray(mask, dtype=np.int64))
    if target.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValueError(f"mask {target.shape} does not match logits {tuple(logits.shape)}")
    if (target != IGNORE).sum() == 0:
        raise ValueError("all pixels ignored")
    return F.cross_entropy(logits, target, ignore_index=IGNORE)


def fused_probs(model: SegModel, bank: PrototypeBank | None, x: torch.Tensor,
                fusion_weight: float = 0.5) -> torch.Tensor:
    """Differentiable fused class probabilities, shape (B,H',W',K).

    fusion_weight is the classifier share; the prototype classifier gets the
    rest. Falls back to classifier-only (with a warning) when the bank is
    missing or not fully initialized.
    """
    feats, logits = model(x)
    cls_probs = torch.softmax(logits, dim=1).permute(0, 2, 3, 1)
    if bank is None or not bank.all_initialized():
        if bank is not None:
            log.warning("prototype bank not fully initialized; classifier-only prediction")
        return cls_probs
    proto_probs = prototype_predict(feats, bank)
    return fusion_weight * cls_probs + (1.0 - fusion_weight) * proto_probs


def fused_prediction(model: SegModel, bank: PrototypeBank | None, x: torch.Tensor,
                     fusion_weight: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Averaged classifier+prototype prediction at feature resolution.

    Returns (probs (B,H',W',K) float64, labels (B,H',W') int64); argmax ties
    resolve to the lowest class id.
    """
    with torch.no_grad():
        probs = fused_probs(model, bank, x, fusion_weight).to(torch.float64).numpy()
    labels = probs.argmax(axis=-1)
    return probs, labels
