"""Source-domain projection autoencoder.

A small convolutional encoder/decoder trained to reconstruct an original image
from an augmented copy: the augmented features are instance-normalized (style
stripped) and re-normalized with the channel statistics of the original image
(style injected) before decoding. At test time, paired statistics are replaced
by the nearest of q clustered style centers fitted over the training set, which
lets the network pull unseen-domain inputs back toward the source distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .utils import make_rng, to_image, to_tensor

EPS = 1e-5  # added to channel stds before division


@dataclass
class StyleStats:
    """Channel-wise (mean, std) of a feature map; std includes the EPS guard."""

    mu: torch.Tensor  # (C,) or (B,C)
    sigma: torch.Tensor  # same shape, elementwise >= EPS


@dataclass
class StyleCenters:
    """q clustered style centers; means and stds are clustered independently."""

    mu_centers: np.ndarray  # (q, C)
    sigma_centers: np.ndarray  # (q, C)

    def __post_init__(self):
        self.mu_centers = np.asarray(self.mu_centers, dtype=np.float64)
        self.sigma_centers = np.asarray(self.sigma_centers, dtype=np.float64)
        if self.mu_centers.ndim != 2 or self.mu_centers.shape != self.sigma_centers.shape:
            raise ValueError("mu/sigma center arrays must be 2-D with equal shapes")
        if len(self.mu_centers) < 1:
            raise ValueError("need at least one center")
        if not (np.isfinite(self.mu_centers).all() and np.isfinite(self.sigma_centers).all()):
            raise ValueError("non-finite style centers")

    @property
    def q(self) -> int:
        return len(self.mu_centers)


class ProjectionNet(nn.Module):
    """3-stage strided conv encoder to `channels` feature maps, mirrored decoder.

    Input spatial dims must be divisible by 8 (three stride-2 stages).
    """

    FORMAT_VERSION = 1

    def __init__(self, channels: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        c = channels
        self.channels = c
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c // 4, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 4, c // 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c // 2, c // 4, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c // 4, 3, 4, stride=2, padding=1),
        )
        self.to(dtype)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError(f"input dims {tuple(x.shape[-2:])} must be divisible by 8")
        return self.encoder(x)

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return self.decoder(f)


def instance_normalize(f: torch.Tensor) -> tuple[torch.Tensor, StyleStats]:
    """Remove per-channel spatial mean/std from a feature map.

    Accepts (C,H,W) or (B,C,H,W). The returned stats hold the removed mean and
    the EPS-guarded std, so re-applying them restores the input exactly.
    """
    if f.ndim not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got {tuple(f.shape)}")
    if f.shape[-1] * f.shape[-2] < 2:
        raise ValueError("feature map needs at least 2 spatial positions")
    if not torch.isfinite(f).all():
        raise ValueError("non-finite feature map")
    mu = f.mean(dim=(-2, -1))
    sigma = f.std(dim=(-2, -1), unbiased=False) + EPS
    f_hat = (f - mu[..., None, None]) / sigma[..., None, None]
    return f_hat, StyleStats(mu=mu, sigma=sigma)


def adain_renormalize(f_hat: torch.Tensor, style: StyleStats) -> torch.Tensor:
    """Scale and shift a normalized feature map into the given style."""
    mu, sigma = style.mu, style.sigma
    if not torch.is_tensor(mu):
        mu = torch.as_tensor(np.asarray(mu), dtype=f_hat.dtype)
        sigma = torch.as_tensor(np.asarray(sigma), dtype=f_hat.dtype)
    if mu.shape[-1] != f_hat.shape[-3]:
        raise ValueError(f"style has {mu.shape[-1]} channels, features have {f_hat.shape[-3]}")
    mu = mu.to(f_hat.dtype)
    sigma = sigma.to(f_hat.dtype)
    return sigma[..., None, None] * f_hat + mu[..., None, None]


def reconstruct(net: ProjectionNet, x: torch.Tensor, x_a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Training forward pass: rebuild x from its augmented copy x_a.

    Returns (x_tilde, loss) where loss is the mean absolute reconstruction
    error over all pixels and channels; both stay on the autograd graph.
    """
    if x.shape != x_a.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_a.shape)}")
    f_x = net.encode(x)
    f_a = net.encode(x_a)
    f_hat, _ = instance_normalize(f_a)
    _, style_x = instance_normalize(f_x)
    x_tilde = net.decode(adain_renormalize(f_hat, style_x))
    loss = (x - x_tilde).abs().mean()
    return x_tilde, loss


def _lloyd(points: np.ndarray, q: int, seed: int, max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Plain Lloyd k-means with seeded random-point init.

    Empty clusters keep their previous center; iteration stops when inertia
    improves by less than tol.
    """
    n = len(points)
    rng = make_rng(seed, 7)
    centers = points[rng.choice(n, size=q, replace=False)].copy()
    prev_inertia = np.inf
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        inertia = d2[np.arange(n), assign].sum()
        for j in range(q):
            sel = assign == j
            if sel.any():
                centers[j] = points[sel].mean(axis=0)
        if prev_inertia - inertia < tol:
            break
        prev_inertia = inertia
    return centers


def fit_style_centers(stats_list: list[StyleStats], q: int, seed: int) -> StyleCenters:
    """Cluster the style statistics of a dataset into q (mu, sigma) centers."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if len(stats_list) < q:
        raise ValueError(f"need at least q={q} stats, got {len(stats_list)}")
    mus = np.stack([np.asarray(s.mu.detach().cpu(), dtype=np.float64).reshape(-1) for s in stats_list])
    sigmas = np.stack([np.asarray(s.sigma.detach().cpu(), dtype=np.float64).reshape(-1) for s in stats_list])
    return StyleCenters(
        mu_centers=_lloyd(mus, q, seed),
        sigma_centers=_lloyd(sigmas, q, seed + 1),
    )


def nearest_center(stats: StyleStats, centers: StyleCenters) -> StyleStats:
    """Pick the L2-closest mu center and sigma center (independent argmins)."""
    mu = np.asarray(stats.mu.detach().cpu(), dtype=np.float64).reshape(-1)
    sigma = np.asarray(stats.sigma.detach().cpu(), dtype=np.float64).reshape(-1)
    if mu.shape[0] != centers.mu_centers.shape[1]:
        raise ValueError("stats/centers channel mismatch")
    i = int(((centers.mu_centers - mu) ** 2).sum(axis=1).argmin())
    j = int(((centers.sigma_centers - sigma) ** 2).sum(axis=1).argmin())
    return StyleStats(
        mu=torch.from_numpy(centers.mu_centers[i].copy()),
        sigma=torch.from_numpy(centers.sigma_centers[j].copy()),
    )


def project_batch(net: ProjectionNet, centers: StyleCenters, x: torch.Tensor) -> torch.Tensor:
    """Project a (B,3,H,W) batch toward the source domain, clamped to [0,1]."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        f = net.encode(x.to(dtype))
        f_hat, stats = instance_normalize(f)
        mu_c = torch.from_numpy(centers.mu_centers).to(dtype)
        sig_c = torch.from_numpy(centers.sigma_centers).to(dtype)
        mi = torch.cdist(stats.mu, mu_c).argmin(dim=1)
        si = torch.cdist(stats.sigma, sig_c).argmin(dim=1)
        style = StyleStats(mu=mu_c[mi], sigma=sig_c[si])
        out = net.decode(adain_renormalize(f_hat, style))
        return out.clamp(0.0, 1.0)


def project(net: ProjectionNet, centers: StyleCenters, x_t: np.ndarray) -> np.ndarray:
    """Project an HxWx3 image toward the source domain (numpy in, numpy out)."""
    out = project_batch(net, centers, to_tensor(x_t, next(net.parameters()).dtype))
    return to_image(out[0])
