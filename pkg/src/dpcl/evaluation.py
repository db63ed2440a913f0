"""Domain-level prediction and mIoU evaluation."""

from __future__ import annotations

import numpy as np
import torch

from .metrics import ConfusionMatrix, miou
from .projection import ProjectionNet, StyleCenters, project_batch
from .prototypes import PrototypeBank
from .scenes import DomainData
from .segmenter import SegModel, fused_prediction, upsample_labels
from .utils import to_tensor


def predict_domain(
    model: SegModel,
    bank: PrototypeBank | None,
    data: DomainData,
    ssdp: ProjectionNet | None = None,
    centers: StyleCenters | None = None,
    fusion_weight: float = 0.5,
    batch_size: int = 32,
) -> np.ndarray:
    """Predict full-resolution labels for every image of a domain.

    With a projection network given, images are projected toward the source
    domain first. With a bank given, classifier and prototype predictions are
    fused; otherwise the classifier alone decides.
    """
    h, w = data.images.shape[1:3]
    out = np.zeros((len(data), h, w), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            x = to_tensor(data.images[start : start + batch_size])
            if ssdp is not None:
                x = project_batch(ssdp, centers, x)
            _, labels = fused_prediction(model, bank, x, fusion_weight)
            out[start : start + len(labels)] = upsample_labels(labels, (h, w))
    return out


def evaluate_domain(
    model: SegModel,
    bank: PrototypeBank | None,
    data: DomainData,
    ssdp: ProjectionNet | None = None,
    centers: StyleCenters | None = None,
    fusion_weight: float = 0.5,
) -> tuple[np.ndarray, float, ConfusionMatrix]:
    """(per-class IoU, mIoU, confusion matrix) for one domain."""
    preds = predict_domain(model, bank, data, ssdp, centers, fusion_weight)
    cm = ConfusionMatrix(model.num_classes)
    cm.update(preds, data.masks)
    per_class, mean = miou(cm)
    return per_class, mean, cm


def evaluate_targets(
    model: SegModel,
    bank: PrototypeBank | None,
    targets: dict[str, DomainData],
    ssdp: ProjectionNet | None = None,
    centers: StyleCenters | None = None,
    fusion_weight: float = 0.5,
) -> dict[str, float]:
    """Per-target mIoU plus their mean under key ``mean``."""
    scores = {}
    for name, data in sorted(targets.items()):
        _, m, _ = evaluate_domain(model, bank, data, ssdp, centers, fusion_weight)
        scores[name] = m
    scores["mean"] = float(np.mean([v for k, v in scores.items() if k != "mean"]))
    return scores
