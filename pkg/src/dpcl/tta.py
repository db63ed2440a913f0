"""Input-space test-time adaptation.

A target image is first projected toward the source domain, pseudo-labeled by
the fused classifier, and then refined by gradient descent on the image itself
(every network stays frozen): mode "C" descends the pixel-to-pixel contrastive
loss over pixels sampled per pseudo-class, mode "E" descends prediction
entropy, and "C+E" their sum with the contrastive term normalized by the
number of selected pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .contrast import pixel_to_pixel_loss, sample_pixels_uniform
from .metrics import ConfusionMatrix, miou
from .projection import ProjectionNet, StyleCenters, project_batch
from .prototypes import PrototypeBank, prototype_predict
from .scenes import DomainData
from .segmenter import SegModel, upsample_labels
from .utils import make_rng, to_image, to_tensor

log = logging.getLogger(__name__)

MODES = ("none", "C", "E", "C+E")


@dataclass
class TtaConfig:
    mode: str = "C"
    n_iters: int = 1
    step_size: float = 0.05
    n_per_class: int = 1000
    temperature: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("C", "E", "C+E"):
            raise ValueError(f"mode must be C, E or C+E, got {self.mode!r}")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")


def pseudo_label(model: SegModel, bank: PrototypeBank, x_proj) -> np.ndarray:
    """Fused-prediction argmax labels at feature resolution."""
    from .segmenter import fused_prediction

    single = not torch.is_tensor(x_proj) and np.asarray(x_proj).ndim == 3
    x = x_proj if torch.is_tensor(x_proj) else to_tensor(x_proj)
    _, labels = fused_prediction(model, bank, x)
    return labels[0] if single else labels


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-position entropy of a stochastic class-probability map."""
    if (probs < -1e-9).any():
        raise ValueError("negative probabilities")
    sums = probs.sum(dim=-1)
    if (sums - 1.0).abs().max() > 1e-6:
        raise ValueError("probability rows do not sum to 1")
    p = probs.clamp(min=0.0)
    mask = p > 0
    safe = torch.where(mask, p, torch.ones_like(p))
    ent = -(torch.where(mask, p * torch.log(safe), torch.zeros_like(p))).sum(dim=-1)
    return ent.mean()


def _fused_with_graph(model: SegModel, bank: PrototypeBank, x: torch.Tensor):
    feats, logits = model(x)
    cls_probs = torch.softmax(logits, dim=1).permute(0, 2, 3, 1)
    proto_probs = prototype_predict(feats, bank)
    return feats, 0.5 * cls_probs + 0.5 * proto_probs


def _tta_objective(model: SegModel, bank: PrototypeBank, x: torch.Tensor, cfg: TtaConfig,
                   iteration: int) -> torch.Tensor | None:
    feats, fused = _fused_with_graph(model, bank, x)
    pseudo = fused.detach().numpy().argmax(axis=-1)
    loss = None
    if cfg.mode in ("C", "C+E"):
        S = sample_pixels_uniform(feats, pseudo, cfg.n_per_class,
                                  seed=int(make_rng(cfg.seed, 401, iteration).integers(0, 2**31 - 1)),
                                  min_class_px=2)
        if S is None:
            log.warning("every pseudo-class too small for the contrastive objective")
        else:
            pp = pixel_to_pixel_loss(S, cfg.temperature, metric="js", include_diagonal=True)
            loss = pp / len(S.Z) if cfg.mode == "C+E" else pp
    if cfg.mode in ("E", "C+E"):
        ent = entropy_loss(fused)
        loss = ent if loss is None else loss + ent
    return loss


def tta_refine(
    model: SegModel,
    bank: PrototypeBank,
    ssdp: ProjectionNet,
    centers: StyleCenters,
    x_t: np.ndarray,
    cfg: TtaConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Adapt a single target image; parameters are never modified.

    Returns (labels at feature resolution, refined image HxWx3). The image is
    initialized from its source-domain projection and updated by clamped
    gradient steps on the chosen objective.
    """
    from .segmenter import fused_prediction

    x = project_batch(ssdp, centers, to_tensor(x_t))
    for i in range(cfg.n_iters):
        x = x.detach().requires_grad_(True)
        loss = _tta_objective(model, bank, x, cfg, i)
        if loss is None:
            x = x.detach()
            continue
        (grad,) = torch.autograd.grad(loss, x)
        x = (x.detach() - cfg.step_size * grad).clamp(0.0, 1.0)
    x = x.detach()
    _, labels = fused_prediction(model, bank, x)
    return labels[0], to_image(x[0])


def _image_miou(pred_full: np.ndarray, mask: np.ndarray, num_classes: int) -> float:
    cm = ConfusionMatrix(num_classes).update(pred_full, mask)
    return miou(cm)[1]


def tta_sweep(
    model: SegModel,
    bank: PrototypeBank,
    ssdp: ProjectionNet,
    centers: StyleCenters,
    targets: dict[str, DomainData],
    modes=("none", "C"),
    iteration_counts=(1,),
    base_cfg: TtaConfig | None = None,
    max_images: int | None = None,
) -> list[dict]:
    """Per-image and aggregate mIoU over modes x iteration counts.

    Returns rows with keys (mode, n_iters, domain, image, miou); aggregate
    rows use image="all" and a dataset-level confusion matrix, with an extra
    domain="mean" row averaging the per-domain aggregates.
    """
    base_cfg = base_cfg or TtaConfig()
    rows: list[dict] = []
    k = model.num_classes
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown TTA mode {mode!r}")
        counts = [0] if mode == "none" else iteration_counts
        for n_iters in counts:
            domain_scores = []
            for dom, data in sorted(targets.items()):
                n = len(data) if max_images is None else min(max_images, len(data))
                cm = ConfusionMatrix(k)
                h, w = data.images.shape[1:3]
                for i in range(n):
                    if mode == "none":
                        from .evaluation import predict_domain

                        sub = DomainData(images=data.images[i : i + 1], masks=data.masks[i : i + 1])
                        pred = predict_domain(model, bank, sub, ssdp, centers)[0]
                    else:
                        cfg = TtaConfig(mode=mode, n_iters=n_iters, step_size=base_cfg.step_size,
                                        n_per_class=base_cfg.n_per_class,
                                        temperature=base_cfg.temperature, seed=base_cfg.seed + i)
                        labels, _ = tta_refine(model, bank, ssdp, centers, data.images[i], cfg)
                        pred = upsample_labels(labels, (h, w))
                    rows.append({
                        "mode": mode, "n_iters": n_iters, "domain": dom, "image": i,
                        "miou": _image_miou(pred, data.masks[i], k),
                    })
                    cm.update(pred, data.masks[i])
                score = miou(cm)[1]
                domain_scores.append(score)
                rows.append({"mode": mode, "n_iters": n_iters, "domain": dom,
                             "image": "all", "miou": score})
            rows.append({"mode": mode, "n_iters": n_iters, "domain": "mean",
                         "image": "all", "miou": float(np.mean(domain_scores))})
    return rows


def write_tta_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("mode,n_iters,domain,image,miou\n")
        for r in rows:
            fh.write(f"{r['mode']},{r['n_iters']},{r['domain']},{r['image']},{r['miou']:.6f}\n")
