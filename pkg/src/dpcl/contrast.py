"""Multi-level contrastive losses over sampled pixel features.

Pixel-to-pixel contrast is phrased as transition-probability-matrix matching:
the row-normalized similarity matrix of sampled features is pulled toward the
row-normalized label-agreement matrix under a distribution metric (JS
divergence by default, cross-entropy as a variant). Pixel-to-class contrast is
a prototype-softmax classification loss, and instance-to-class contrast is a
margin triplet over connected-region prototypes. All losses are differentiable
torch functions of their feature inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .prototypes import InstancePrototype, PrototypeBank
from .scenes import IGNORE
from .utils import make_rng

log = logging.getLogger(__name__)

_SALT_SAMPLE = 201


@dataclass
class SampledPixelSet:
    """Unit-norm sampled pixel features with their class labels."""

    Z: torch.Tensor  # (N,D), rows unit norm, may carry gradient
    y: np.ndarray  # (N,) int class labels
    per_class_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.Z.ndim != 2 or len(self.Z) != len(self.y):
            raise ValueError("Z must be (N,D) with one label per row")
        if len(self.Z) < 2:
            raise ValueError("need at least 2 sampled pixels")
        if not self.per_class_counts:
            vals, cnt = np.unique(self.y, return_counts=True)
            self.per_class_counts = {int(v): int(c) for v, c in zip(vals, cnt)}


def normalize_rows(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def sample_pixels(
    features: torch.Tensor,
    labels: np.ndarray,
    predictions: np.ndarray,
    n_per_class: int = 30,
    seed: int = 0,
) -> SampledPixelSet:
    """Sample up to n_per_class pixel features per class from a batch.

    Per class the target mix is half incorrectly-predicted and half correctly-
    predicted pixels (uniform, without replacement); when one pool is short
    the shortfall is taken from the other. features is (B,D,H,W) or (D,H,W);
    labels/predictions are integer maps at the same resolution, 255 = ignore.
    """
    if features.ndim == 3:
        features = features[None]
        labels = np.asarray(labels)[None]
        predictions = np.asarray(predictions)[None]
    b, d, h, w = features.shape
    labels = np.asarray(labels).reshape(-1)
    predictions = np.asarray(predictions).reshape(-1)
    if labels.shape != predictions.shape or labels.size != b * h * w:
        raise ValueError("labels/predictions must match the feature resolution")
    valid = labels != IGNORE
    if not valid.any():
        raise ValueError("batch contains no labeled pixels")
    rng = make_rng(seed, _SALT_SAMPLE)
    flat = features.permute(0, 2, 3, 1).reshape(-1, d)
    picks: list[np.ndarray] = []
    for k in np.unique(labels[valid]):
        in_class = valid & (labels == k)
        correct = np.nonzero(in_class & (predictions == labels))[0]
        incorrect = np.nonzero(in_class & (predictions != labels))[0]
        n_inc = min(len(incorrect), n_per_class // 2)
        n_cor = min(len(correct), n_per_class - n_per_class // 2)
        leftover = n_per_class - n_inc - n_cor
        if leftover > 0:
            extra = min(len(correct) - n_cor, leftover)
            n_cor += extra
            leftover -= extra
            n_inc += min(len(incorrect) - n_inc, leftover)
        take = []
        if n_inc:
            take.append(rng.choice(incorrect, size=n_inc, replace=False))
        if n_cor:
            take.append(rng.choice(correct, size=n_cor, replace=False))
        picks.append(np.sort(np.concatenate(take)))
    idx = np.concatenate(picks)
    z = normalize_rows(flat[torch.from_numpy(idx)])
    return SampledPixelSet(Z=z, y=labels[idx])


def sample_pixels_uniform(
    features: torch.Tensor, labels: np.ndarray, n_per_class: int, seed: int, min_class_px: int = 1
) -> SampledPixelSet | None:
    """Uniform per-class sampling without a correctness split (test-time use).

    Classes with fewer than min_class_px pixels are skipped. Returns None when
    fewer than 2 pixels survive in total.
    """
    if features.ndim == 3:
        features = features[None]
        labels = np.asarray(labels)[None]
    b, d, h, w = features.shape
    labels = np.asarray(labels).reshape(-1)
    rng = make_rng(seed, _SALT_SAMPLE, 1)
    flat = features.permute(0, 2, 3, 1).reshape(-1, d)
    picks = []
    for k in np.unique(labels[labels != IGNORE]):
        pool = np.nonzero(labels == k)[0]
        if len(pool) < min_class_px:
            continue
        n = min(len(pool), n_per_class)
        picks.append(np.sort(rng.choice(pool, size=n, replace=False)))
    if not picks:
        return None
    idx = np.concatenate(picks)
    if len(idx) < 2:
        return None
    z = normalize_rows(flat[torch.from_numpy(idx)])
    return SampledPixelSet(Z=z, y=labels[idx])


@dataclass
class TransitionMatrices:
    """Similarity/label matrices and their row-stochastic forms.

    Rows flagged False in valid_rows (label singletons under diagonal masking)
    carry no distribution and are excluded from losses.
    """

    W: torch.Tensor
    L: torch.Tensor
    W_tilde: torch.Tensor
    L_tilde: torch.Tensor
    valid_rows: np.ndarray
    temperature: float


def build_transition_matrices(S: SampledPixelSet, temperature: float, include_diagonal: bool = True) -> TransitionMatrices:
    """Exponentiated-similarity and label-agreement matrices, row-normalized."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = S.Z
    n = len(z)
    w = torch.exp(z @ z.T / temperature)
    same = torch.from_numpy((S.y[:, None] == S.y[None, :])).to(z.dtype)
    l = same.clone()
    if not include_diagonal:
        eye = torch.eye(n, dtype=z.dtype)
        w = w * (1.0 - eye)
        l = l * (1.0 - eye)
    w_sum = w.sum(dim=1, keepdim=True)
    l_sum = l.sum(dim=1, keepdim=True)
    valid = (l_sum.detach().numpy().reshape(-1) > 0)
    if not valid.all():
        log.warning("%d singleton rows excluded from transition matrices", int((~valid).sum()))
    w_tilde = w / w_sum
    l_tilde = l / l_sum.clamp(min=1.0)
    return TransitionMatrices(W=w, L=l, W_tilde=w_tilde, L_tilde=l_tilde,
                              valid_rows=valid, temperature=temperature)


def _check_distribution(p: torch.Tensor, name: str) -> None:
    if (p < 0).any():
        raise ValueError(f"{name} has negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"{name} sums to {total}, not 1")


def js_divergence(p, q) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) between two distributions.

    Symmetric, bounded by ln 2, with 0*log(0/.) taken as 0.
    """
    p = torch.as_tensor(np.asarray(p, dtype=np.float64)) if not torch.is_tensor(p) else p
    q = torch.as_tensor(np.asarray(q, dtype=np.float64)) if not torch.is_tensor(q) else q
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = (p + q) / 2
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def _kl(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    mask = p > 0
    safe_m = torch.where(mask, m, torch.ones_like(m))
    safe_p = torch.where(mask, p, torch.ones_like(p))
    return (torch.where(mask, p * torch.log(safe_p / safe_m), torch.zeros_like(p))).sum()


def _row_distance(w_row: torch.Tensor, l_row: torch.Tensor, metric: str) -> torch.Tensor:
    if metric == "js":
        m = (w_row + l_row) / 2
        return 0.5 * _kl(w_row, m) + 0.5 * _kl(l_row, m)
    if metric == "ce":
        mask = l_row > 0
        safe_w = torch.where(mask, w_row, torch.ones_like(w_row))
        return -(torch.where(mask, l_row * torch.log(safe_w), torch.zeros_like(w_row))).sum()
    raise ValueError(f"unknown metric {metric!r} (expected 'js' or 'ce')")


def pixel_to_pixel_loss(
    S: SampledPixelSet,
    temperature: float = 0.1,
    metric: str = "js",
    include_diagonal: bool = True,
) -> torch.Tensor:
    """Mean row-wise distribution distance between W-tilde and L-tilde.

    The average runs over retained rows only; singleton rows excluded under
    diagonal masking shrink the denominator.
    """
    tm = build_transition_matrices(S, temperature, include_diagonal)
    rows = np.nonzero(tm.valid_rows)[0]
    if len(rows) == 0:
        log.warning("pixel_to_pixel_loss: no valid rows; returning 0")
        return torch.zeros((), dtype=S.Z.dtype)
    terms = [
        _row_distance(tm.W_tilde[i], tm.L_tilde[i], metric)
        for i in rows
    ]
    return torch.stack(terms).mean()


def pixel_to_class_loss(
    features: torch.Tensor,
    masks: np.ndarray,
    bank: PrototypeBank,
    temperature: float = 0.1,
) -> torch.Tensor:
    """Prototype-softmax cross-entropy over every labeled position.

    Uses the bank as-is (caller passes the pre-update state). Positions whose
    class has no initialized prototype are skipped and logged.
    """
    if features.ndim == 3:
        features = features[None]
        masks = np.asarray(masks)[None]
    b, d, h, w = features.shape
    labels = np.asarray(masks).reshape(-1)
    init_classes = np.nonzero(bank.initialized)[0]
    if len(init_classes) == 0:
        raise ValueError("no initialized prototypes")
    col_of = -np.ones(bank.num_classes, dtype=np.int64)
    col_of[init_classes] = np.arange(len(init_classes))
    scorable = (labels != IGNORE) & np.isin(labels, init_classes)
    skipped = int(((labels != IGNORE) & ~np.isin(labels, init_classes)).sum())
    if skipped:
        log.warning("pixel_to_class_loss: %d positions skipped (uninitialized class)", skipped)
    if not scorable.any():
        raise ValueError("no scorable positions")
    idx = np.nonzero(scorable)[0]
    z = normalize_rows(features.permute(0, 2, 3, 1).reshape(-1, d)[torch.from_numpy(idx)])
    protos = bank.P[torch.from_numpy(init_classes)].to(z.dtype)
    logits = (z @ protos.T) / temperature
    logp = torch.log_softmax(logits, dim=1)
    cols = torch.from_numpy(col_of[labels[idx]])
    return -logp[torch.arange(len(idx)), cols].mean()


def instance_to_class_loss(
    instances: list[InstancePrototype],
    bank: PrototypeBank,
    margin: float = 0.5,
) -> torch.Tensor:
    """Margin triplet over instance prototypes.

    For each class, every (own-instance, other-class-instance) pair is pushed
    to satisfy d(own, P_k) + margin <= d(other, P_k); class terms are averaged
    over their pair counts, then over classes with at least one pair.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    dtype = instances[0].vector.dtype if instances else torch.float64
    by_class: dict[int, list[torch.Tensor]] = {}
    for ins in instances:
        by_class.setdefault(ins.class_id, []).append(ins.vector)
    class_terms = []
    for k, own in sorted(by_class.items()):
        if not bank.initialized[k]:
            continue
        others = [v for kk, vs in by_class.items() if kk != k for v in vs]
        if not others:
            continue
        pk = bank.P[k].to(dtype)
        pos = torch.stack(own)
        neg = torch.stack(others)
        d_pos = (pos - pk).norm(dim=1)
        d_neg = (neg - pk).norm(dim=1)
        terms = (d_pos[:, None] + margin - d_neg[None, :]).clamp(min=0.0)
        class_terms.append(terms.mean())
    if not class_terms:
        log.warning("instance_to_class_loss: no valid instance pairs; returning 0")
        return torch.zeros((), dtype=dtype)
    return torch.stack(class_terms).mean()


def instance_to_class_infonce(
    instances: list[InstancePrototype],
    bank: PrototypeBank,
    temperature: float = 0.1,
) -> torch.Tensor:
    """InfoNCE alternative: classify each instance prototype against the bank."""
    init_classes = np.nonzero(bank.initialized)[0]
    usable = [ins for ins in instances if bank.initialized[ins.class_id]]
    if not usable:
        log.warning("instance_to_class_infonce: no usable instances; returning 0")
        return torch.zeros((), dtype=torch.float64)
    dtype = usable[0].vector.dtype
    col_of = -np.ones(bank.num_classes, dtype=np.int64)
    col_of[init_classes] = np.arange(len(init_classes))
    z = torch.stack([ins.vector for ins in usable])
    protos = bank.P[torch.from_numpy(init_classes)].to(dtype)
    logp = torch.log_softmax((z @ protos.T) / temperature, dim=1)
    cols = torch.from_numpy(np.array([col_of[ins.class_id] for ins in usable]))
    return -logp[torch.arange(len(usable)), cols].mean()


@dataclass
class MlclLoss:
    """Combined multi-level contrastive loss with its components."""

    total: torch.Tensor
    pixel_to_pixel: torch.Tensor
    pixel_to_class: torch.Tensor
    instance_to_class: torch.Tensor


def mlcl_loss(pp, pc, ic, pp_weight: float = 5.0) -> MlclLoss:
    """Weighted combination: pp_weight * L_pp + L_pc + L_ic."""
    if pp_weight < 0:
        raise ValueError("pp_weight must be >= 0")
    pp = torch.as_tensor(pp)
    pc = torch.as_tensor(pc)
    ic = torch.as_tensor(ic)
    return MlclLoss(
        total=pp_weight * pp + pc + ic,
        pixel_to_pixel=pp,
        pixel_to_class=pc,
        instance_to_class=ic,
    )


def supervised_contrastive_loss(S: SampledPixelSet, temperature: float = 0.1) -> torch.Tensor:
    """Standard supervised contrastive loss (sum over anchors).

    Anchors with no positive in the set are excluded and logged. Identity:
    this equals pixel_to_pixel_loss(metric="ce", include_diagonal=False)
    times the number of retained anchors.
    """
    z, y = S.Z, S.y
    n = len(z)
    sim = z @ z.T / temperature
    same = torch.from_numpy(y[:, None] == y[None, :])
    eye = torch.eye(n, dtype=torch.bool)
    pos = same & ~eye
    n_pos = pos.sum(dim=1)
    anchors = np.nonzero(n_pos.numpy() > 0)[0]
    if len(anchors) < n:
        log.warning("supervised_contrastive_loss: %d anchors without positives excluded", n - len(anchors))
    if len(anchors) == 0:
        return torch.zeros((), dtype=z.dtype)
    total = torch.zeros((), dtype=z.dtype)
    for i in anchors:
        denom = torch.logsumexp(sim[i][~eye[i]], dim=0)
        logprobs = sim[i][pos[i]] - denom
        total = total - logprobs.mean()
    return total


@dataclass
class LandscapeSummary:
    l_star: float
    argmin: tuple[float, float]
    sublevel_count: int
    high_similarity_ratio: float


@dataclass
class LandscapeReport:
    """Grid evaluation of the two anchor/positive/negative closed-form losses."""

    s_values: np.ndarray
    sup_grid: np.ndarray
    ppce_grid: np.ndarray
    sup: LandscapeSummary
    ppce: LandscapeSummary
    temperature: float
    delta: float


def _landscape_summary(grid: np.ndarray, sp: np.ndarray, sn: np.ndarray, delta: float) -> LandscapeSummary:
    l_star = float(grid.min())
    i, j = np.unravel_index(int(grid.argmin()), grid.shape)
    sub = grid <= l_star + delta
    ratio = float((sub & (sp > 0.8)).sum() / sub.sum())
    return LandscapeSummary(
        l_star=l_star,
        argmin=(float(sp[i, j]), float(sn[i, j])),
        sublevel_count=int(sub.sum()),
        high_similarity_ratio=ratio,
    )


def loss_landscape(temperature: float = 0.1, delta: float = 1.0, grid_n: int = 512) -> LandscapeReport:
    """Evaluate both 3-sample losses over an (s+, s-) grid in [-1,1]^2.

    For an anchor with one positive (similarity s+) and one negative (s-), the
    supervised-contrastive loss is -log(e^{s+/t}/(e^{s+/t}+e^{s-/t})); the
    TPM cross-entropy variant adds the anchor itself as a positive. The report
    carries each loss's minimum, the sublevel set within `delta` of it, and
    the fraction of that set with s+ > 0.8.
    """
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    s = np.linspace(-1.0, 1.0, grid_n)
    sp, sn = np.meshgrid(s, s, indexing="ij")
    t = temperature
    denom2 = np.logaddexp(sp / t, sn / t)
    sup = -(sp / t - denom2)
    denom3 = np.logaddexp(1.0 / t, denom2)
    ppce = -0.5 * ((1.0 / t - denom3) + (sp / t - denom3))
    return LandscapeReport(
        s_values=s,
        sup_grid=sup,
        ppce_grid=ppce,
        sup=_landscape_summary(sup, sp, sn, delta),
        ppce=_landscape_summary(ppce, sp, sn, delta),
        temperature=t,
        delta=delta,
    )


def write_landscape(report: LandscapeReport, csv_path, json_path) -> None:
    """Emit the grid as CSV and the per-loss summaries as JSON."""
    import json as _json
    from pathlib import Path

    n = len(report.s_values)
    sp, sn = np.meshgrid(report.s_values, report.s_values, indexing="ij")
    rows = np.column_stack([
        sp.reshape(-1), sn.reshape(-1),
        report.sup_grid.reshape(-1), report.ppce_grid.reshape(-1),
    ])
    with open(csv_path, "w") as fh:
        fh.write("s_plus,s_minus,l_sup,l_ppce\n")
        for r in rows:
            fh.write(f"{r[0]:.10g},{r[1]:.10g},{r[2]:.10g},{r[3]:.10g}\n")
    summary = {
        "temperature": report.temperature,
        "delta": report.delta,
        "grid_n": n,
        "supervised_contrastive": {
            "l_star": report.sup.l_star,
            "argmin": list(report.sup.argmin),
            "sublevel_count": report.sup.sublevel_count,
            "high_similarity_ratio": report.sup.high_similarity_ratio,
        },
        "tpm_cross_entropy": {
            "l_star": report.ppce.l_star,
            "argmin": list(report.ppce.argmin),
            "sublevel_count": report.ppce.sublevel_count,
            "high_similarity_ratio": report.ppce.high_similarity_ratio,
        },
    }
    Path(json_path).write_text(_json.dumps(summary, indent=2))
