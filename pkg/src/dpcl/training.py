"""Two-stage training: projection pretraining, then segmentation.

Stage 1 trains the projection autoencoder to rebuild originals from augmented
copies and fits the style centers. Stage 2 freezes it, feeds projected
augmented images to the segmentation model, and optimizes the task loss alone
for a warm-up period before adding the contrastive and divergence terms. All
randomness derives from per-purpose Philox streams keyed by (seed, iteration),
so fixed-seed single-threaded runs are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import contrast, prototypes, segmenter
from .projection import ProjectionNet, StyleCenters, StyleStats, fit_style_centers, instance_normalize, project_batch, reconstruct
from .scenes import DEFAULT_IA, AugConfig, DomainData, augment
from .utils import ConfigError, make_rng, to_tensor

_SALT_BATCH = 301
_SALT_AUG_IMG = 302
_SALT_PIXELS = 303
_SALT_TORCH = 304


@dataclass
class TrainConfig:
    """Hyperparameters for both training stages and the loss toggles."""

    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    max_iters: int = 3000
    poly_power: float = 0.9
    warmup_epochs: int = 10
    pp_weight: float = 5.0
    margin: float = 0.5
    temperature: float = 0.1
    ema_momentum: float = 0.999
    n_style_centers: int = 10
    n_per_class: int = 30
    seed: int = 0
    # component toggles / variants
    use_ssdp: bool = True
    use_mlcl: bool = True
    use_pp: bool = True
    use_pc: bool = True
    use_ic: bool = True
    use_div: bool = True
    pp_metric: str = "js"
    pp_include_diagonal: bool = True
    ic_loss: str = "triplet"
    fusion_weight: float = 0.5
    # projection stage
    ssdp_channels: int = 64
    ssdp_lr: float = 1e-3
    ssdp_epochs: int = 12
    ssdp_aug: str = "ia"  # "none" | "ia" | "ia+ga"
    # model / plumbing
    feature_dim: int = 64
    grad_clip: float = 10.0
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    min_region_px: int = 2
    aug: AugConfig = field(default_factory=lambda: replace(DEFAULT_IA))

    def __post_init__(self):
        positive = {
            "lr0": self.lr0, "momentum": self.momentum, "weight_decay": self.weight_decay,
            "batch_size": self.batch_size, "max_iters": self.max_iters,
            "poly_power": self.poly_power,
            "margin": self.margin, "temperature": self.temperature,
            "n_style_centers": self.n_style_centers, "n_per_class": self.n_per_class,
            "ssdp_lr": self.ssdp_lr, "ssdp_epochs": self.ssdp_epochs,
            "feature_dim": self.feature_dim, "ssdp_channels": self.ssdp_channels,
        }
        for name, v in positive.items():
            if v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.pp_weight < 0:
            raise ConfigError("pp_weight must be >= 0")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0 < self.ema_momentum < 1:
            raise ConfigError("ema_momentum must lie in (0,1)")
        if self.pp_metric not in ("js", "ce"):
            raise ConfigError(f"pp_metric must be 'js' or 'ce', got {self.pp_metric!r}")
        if self.ic_loss not in ("triplet", "infonce"):
            raise ConfigError(f"ic_loss must be 'triplet' or 'infonce', got {self.ic_loss!r}")
        if self.ssdp_aug not in ("none", "ia", "ia+ga"):
            raise ConfigError(f"ssdp_aug must be none/ia/ia+ga, got {self.ssdp_aug!r}")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """Polynomial decay: lr0 * (1 - iter/max_iters) ** poly_power."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration >= cfg.max_iters:
        return 0.0
    return cfg.lr0 * (1.0 - iteration / cfg.max_iters) ** cfg.poly_power


def _derive_seed(seed: int, *salts: int) -> int:
    return int(make_rng(seed, *salts).integers(0, 2**31 - 1))


@dataclass
class SsdpTrainResult:
    net: ProjectionNet
    centers: StyleCenters
    epoch_losses: list[float]


def _ssdp_pair(image: np.ndarray, cfg: TrainConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(reconstruction target, network input) for one training image."""
    if cfg.ssdp_aug == "none":
        return image, image
    if cfg.ssdp_aug == "ia":
        return image, augment(image, cfg.aug.photometric_only(), seed)
    # "ia+ga": geometric ops define the target; photometric noise rides on top
    target = augment(image, cfg.aug.geometric_only(), seed)
    return target, augment(target, cfg.aug.photometric_only(), seed + 1)


def train_ssdp(data: DomainData, cfg: TrainConfig, out_dir: Path | None = None) -> SsdpTrainResult:
    """Stage 1: projection pretraining plus style-center fitting."""
    torch.set_num_threads(1)
    torch.manual_seed(_derive_seed(cfg.seed, _SALT_TORCH, 0))
    net = ProjectionNet(channels=cfg.ssdp_channels)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.ssdp_lr)
    n = len(data)
    steps = max(1, n // cfg.batch_size)
    epoch_losses = []
    for epoch in range(cfg.ssdp_epochs):
        order = make_rng(cfg.seed, _SALT_BATCH, epoch).permutation(n)
        losses = []
        for step in range(steps):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if len(idx) == 0:
                break
            pairs = [
                _ssdp_pair(data.images[i], cfg, _derive_seed(cfg.seed, _SALT_AUG_IMG, epoch, step, j))
                for j, i in enumerate(idx)
            ]
            x = to_tensor(np.stack([p[0] for p in pairs]))
            x_a = to_tensor(np.stack([p[1] for p in pairs]))
            _, loss = reconstruct(net, x, x_a)
            if not torch.isfinite(loss):
                raise RuntimeError(f"projection training diverged at epoch {epoch} step {step}: loss={loss}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(losses)))
    centers = fit_centers_over(net, data, cfg.n_style_centers, cfg.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ssdp_metrics.csv", "w") as fh:
            fh.write("epoch,mean_recon_loss\n")
            for e, l in enumerate(epoch_losses):
                fh.write(f"{e},{l:.10g}\n")
        save_ssdp_checkpoint(out_dir / "ssdp.ckpt", net, centers, cfg)
    return SsdpTrainResult(net=net, centers=centers, epoch_losses=epoch_losses)


def fit_centers_over(net: ProjectionNet, data: DomainData, q: int, seed: int) -> StyleCenters:
    """Cluster the encoder style statistics of a whole split into q centers."""
    stats: list[StyleStats] = []
    with torch.no_grad():
        for start in range(0, len(data), 64):
            f = net.encode(to_tensor(data.images[start : start + 64]))
            _, s = instance_normalize(f)
            for b in range(len(f)):
                stats.append(StyleStats(mu=s.mu[b], sigma=s.sigma[b]))
    return fit_style_centers(stats, q, seed)


def save_ssdp_checkpoint(path, net: ProjectionNet, centers: StyleCenters, cfg: TrainConfig | None = None) -> None:
    from .container import save_container

    state = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    meta = {
        "kind": "projection",
        "model_version": ProjectionNet.FORMAT_VERSION,
        "channels": net.channels,
        "layer_shapes": {k: list(v.shape) for k, v in state.items()},
        "config": _config_echo(cfg) if cfg else None,
    }
    sections = {f"param.{k}": v for k, v in state.items()}
    sections["style_centers.mu"] = centers.mu_centers.astype(np.float32)
    sections["style_centers.sigma"] = centers.sigma_centers.astype(np.float32)
    save_container(path, meta, sections)


def load_ssdp_checkpoint(path) -> tuple[ProjectionNet, StyleCenters]:
    from .container import load_container

    meta, sections = load_container(path)
    if meta.get("kind") != "projection":
        raise ValueError(f"{path} is not a projection checkpoint")
    net = ProjectionNet(channels=meta["channels"])
    ref = net.state_dict()
    net.load_state_dict({k[len("param."):]: torch.from_numpy(v).to(ref[k[len("param."):]].dtype)
                         for k, v in sections.items() if k.startswith("param.")})
    centers = StyleCenters(
        mu_centers=sections["style_centers.mu"].astype(np.float64),
        sigma_centers=sections["style_centers.sigma"].astype(np.float64),
    )
    return net, centers


def save_seg_checkpoint(path, model: segmenter.SegModel, bank: prototypes.PrototypeBank,
                        cfg: TrainConfig | None = None) -> None:
    from .container import save_container

    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "kind": "segmentation",
        "model_version": segmenter.SegModel.FORMAT_VERSION,
        "num_classes": model.num_classes,
        "dim": model.dim,
        "layer_shapes": {k: list(v.shape) for k, v in state.items()},
        "bank": {"momentum": bank.momentum, "temperature": bank.temperature},
        "config": _config_echo(cfg) if cfg else None,
    }
    sections = {f"param.{k}": v for k, v in state.items()}
    for name, arr in bank.state_arrays().items():
        sections[f"bank.{name}"] = arr
    save_container(path, meta, sections)


def load_seg_checkpoint(path) -> tuple[segmenter.SegModel, prototypes.PrototypeBank, dict]:
    from .container import load_container

    meta, sections = load_container(path)
    if meta.get("kind") != "segmentation":
        raise ValueError(f"{path} is not a segmentation checkpoint")
    model = segmenter.SegModel(num_classes=meta["num_classes"], dim=meta["dim"])
    ref = model.state_dict()
    model.load_state_dict({k[len("param."):]: torch.from_numpy(v).to(ref[k[len("param."):]].dtype)
                           for k, v in sections.items() if k.startswith("param.")})
    bank = prototypes.PrototypeBank.from_state(
        sections["bank.prototypes"], sections["bank.initialized"],
        momentum=meta["bank"]["momentum"], temperature=meta["bank"]["temperature"],
    )
    return model, bank, meta


def _config_echo(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return d


@dataclass
class SegTrainResult:
    model: segmenter.SegModel
    bank: prototypes.PrototypeBank
    metrics_rows: list[dict]


def _augment_batch(images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                   iteration: int) -> tuple[np.ndarray, np.ndarray]:
    out_i = np.empty_like(images)
    out_m = masks
    geometric = cfg.aug.scale is not None or cfg.aug.crop is not None or cfg.aug.flip
    if geometric:
        out_m = np.empty_like(masks)
    for j in range(len(images)):
        seed = _derive_seed(cfg.seed, _SALT_AUG_IMG, iteration, j)
        if geometric:
            out_i[j], out_m[j] = augment(images[j], cfg.aug, seed, mask=masks[j])
        else:
            out_i[j] = augment(images[j], cfg.aug, seed)
    return out_i, out_m


def _divergence_with_batch(bank: prototypes.PrototypeBank,
                           batch_protos: dict[int, torch.Tensor]) -> torch.Tensor:
    """Divergence over post-update prototypes, differentiable through the batch.

    Classes in the batch contribute their EMA-updated (re-normalized) rows with
    gradients flowing through the batch prototypes; other initialized classes
    contribute their stored rows as constants.
    """
    g = bank.momentum
    rows = []
    dtype = next(iter(batch_protos.values())).dtype if batch_protos else torch.float64
    for k in range(bank.num_classes):
        if k in batch_protos:
            p = batch_protos[k]
            if bank.initialized[k]:
                mixed = g * bank.P[k].to(p.dtype) + (1 - g) * p
                rows.append(mixed / mixed.norm())
            else:
                rows.append(p)
        elif bank.initialized[k]:
            rows.append(bank.P[k].to(dtype))
    if len(rows) < 2:
        return torch.zeros((), dtype=dtype)
    return prototypes.divergence_from_matrix(torch.stack(rows))


def train_segmentation(
    train_data: DomainData,
    val_data: DomainData | None,
    num_classes: int,
    ssdp: ProjectionNet | None,
    centers: StyleCenters | None,
    cfg: TrainConfig,
    out_dir: Path | None = None,
) -> SegTrainResult:
    """Stage 2: segmentation training on projected augmented images.

    The projection network is used read-only; with ``cfg.use_ssdp`` false (or
    no network given) images are fed directly. Losses beyond the task term
    activate only after the warm-up epochs, and the prototype bank is
    EMA-updated from ground-truth masks every step regardless.
    """
    if cfg.use_ssdp and (ssdp is None or centers is None):
        raise ConfigError("use_ssdp is set but no projection network/centers were given")
    torch.set_num_threads(1)
    torch.manual_seed(_derive_seed(cfg.seed, _SALT_TORCH, 1))
    model = segmenter.SegModel(num_classes=num_classes, dim=cfg.feature_dim)
    bank = prototypes.PrototypeBank(num_classes, cfg.feature_dim,
                                    momentum=cfg.ema_momentum, temperature=cfg.temperature)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr0,
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(train_data)
    iters_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    warmup_iters = cfg.warmup_epochs * iters_per_epoch
    rows: list[dict] = []

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(_config_echo(cfg), indent=2, default=_json_default))

    for it in range(cfg.max_iters):
        lr = poly_lr(it, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = make_rng(cfg.seed, _SALT_BATCH, it).choice(n, size=min(cfg.batch_size, n), replace=False)
        images, masks = _augment_batch(train_data.images[idx], train_data.masks[idx], cfg, it)
        x = to_tensor(images)
        if cfg.use_ssdp:
            x = project_batch(ssdp, centers, x)
        feats, logits = model(x)
        ds_masks = segmenter.downsample_mask(masks, segmenter.SegModel.STRIDE)
        loss_task = segmenter.task_loss(logits, ds_masks)

        batch_protos = prototypes.class_prototypes_from_batch(feats, ds_masks)
        in_warmup = it < warmup_iters
        zero = torch.zeros((), dtype=feats.dtype)
        loss_pp = loss_pc = loss_ic = loss_div = zero
        if cfg.use_mlcl and not in_warmup:
            if cfg.use_pp:
                preds = logits.detach().argmax(dim=1).numpy()
                S = contrast.sample_pixels(feats, ds_masks, preds, cfg.n_per_class,
                                           seed=_derive_seed(cfg.seed, _SALT_PIXELS, it))
                loss_pp = contrast.pixel_to_pixel_loss(S, cfg.temperature, cfg.pp_metric,
                                                       cfg.pp_include_diagonal)
            if cfg.use_pc and bank.initialized.any():
                loss_pc = contrast.pixel_to_class_loss(feats, ds_masks, bank, cfg.temperature)
            if cfg.use_ic:
                instances = []
                for b in range(len(feats)):
                    instances.extend(prototypes.instance_prototypes(feats[b], ds_masks[b],
                                                                    cfg.min_region_px))
                if cfg.ic_loss == "triplet":
                    loss_ic = contrast.instance_to_class_loss(instances, bank, cfg.margin)
                else:
                    loss_ic = contrast.instance_to_class_infonce(instances, bank, cfg.temperature)
        if cfg.use_div and not in_warmup:
            loss_div = _divergence_with_batch(bank, batch_protos)

        mlcl = contrast.mlcl_loss(loss_pp, loss_pc, loss_ic, cfg.pp_weight)
        total = loss_task + mlcl.total + loss_div
        if not torch.isfinite(total):
            raise RuntimeError(f"training diverged at iteration {it}: loss={float(total.detach())}")
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        bank.ema_update({k: v.detach() for k, v in batch_protos.items()})

        row = {
            "iter": it,
            "lr": lr,
            "loss_task": float(loss_task.detach()),
            "loss_pp": float(loss_pp.detach()),
            "loss_pc": float(loss_pc.detach()),
            "loss_ic": float(loss_ic.detach()),
            "loss_div": float(loss_div.detach()),
            "val_miou": "",
        }
        # logged total is the exact recombination of the logged components
        row["loss_total"] = (row["loss_task"] + cfg.pp_weight * row["loss_pp"]
                             + row["loss_pc"] + row["loss_ic"] + row["loss_div"])
        last = it == cfg.max_iters - 1
        if val_data is not None and ((it + 1) % cfg.eval_interval == 0 or last):
            from .evaluation import evaluate_domain

            fused = cfg.use_mlcl and bank.all_initialized()
            _, val_miou, _ = evaluate_domain(model, bank if fused else None, val_data,
                                             fusion_weight=cfg.fusion_weight)
            row["val_miou"] = f"{val_miou:.6f}"
        rows.append(row)
        if out_dir is not None and ((it + 1) % cfg.checkpoint_interval == 0 or last):
            save_seg_checkpoint(out_dir / f"checkpoint_{it + 1:06d}.ckpt", model, bank, cfg)

    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", rows)
    return SegTrainResult(model=model, bank=bank, metrics_rows=rows)


def write_metrics_csv(path, rows: list[dict]) -> None:
    cols = ["iter", "lr", "loss_task", "loss_pp", "loss_pc", "loss_ic", "loss_div", "loss_total", "val_miou"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _json_default(o):
    if isinstance(o, tuple):
        return list(o)
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
