"""Ablation/sweep harness over the synthetic multi-domain benchmark.

Each sweep row is a set of config overrides; every row is trained and
evaluated with a shared seed list, and datasets plus projection networks are
cached within a run so rows that share them do not retrain stage 1. Reports
come out as CSV plus an aligned text table of mean-over-targets mIoU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import evaluate_domain, evaluate_targets
from .scenes import build_benchmark
from .training import SsdpTrainResult, fit_centers_over, train_segmentation, train_ssdp
from .utils import ConfigError

# sweep rows named after what they toggle, not after any table
NAMED_SWEEPS: dict[str, dict] = {
    "toggles": {
        "rows": [
            {"name": "baseline", "overrides": {"train.use_ssdp": False, "train.use_mlcl": False, "train.use_div": False}},
            {"name": "+projection", "overrides": {"train.use_ssdp": True, "train.use_mlcl": False, "train.use_div": False}},
            {"name": "+projection+contrast", "overrides": {"train.use_ssdp": True, "train.use_mlcl": True, "train.use_div": False}},
            {"name": "+projection+contrast+div", "overrides": {"train.use_ssdp": True, "train.use_mlcl": True, "train.use_div": True}},
        ]
    },
    "pp-variants": {
        "rows": [
            {"name": "ce-nodiag", "overrides": {"train.pp_metric": "ce", "train.pp_include_diagonal": False}},
            {"name": "js-nodiag", "overrides": {"train.pp_metric": "js", "train.pp_include_diagonal": False}},
            {"name": "ce-diag", "overrides": {"train.pp_metric": "ce", "train.pp_include_diagonal": True}},
            {"name": "js-diag", "overrides": {"train.pp_metric": "js", "train.pp_include_diagonal": True}},
        ]
    },
    "mlcl-components": {
        "rows": [
            {"name": "no-pixel-to-pixel", "overrides": {"train.use_pp": False}},
            {"name": "no-pixel-to-class", "overrides": {"train.use_pc": False}},
            {"name": "no-instance-to-class", "overrides": {"train.use_ic": False}},
            {"name": "full", "overrides": {}},
        ]
    },
    "ic-loss": {"key": "train.ic_loss", "values": ["infonce", "triplet"]},
    "ssdp-aug": {"key": "train.ssdp_aug", "values": ["none", "ia", "ia+ga"]},
    "pp-weight": {"key": "train.pp_weight", "values": [3, 4, 5, 6, 7]},
    "margin": {"key": "train.margin", "values": [0.1, 0.3, 0.5, 0.7, 0.9]},
    "temperature": {"key": "train.temperature", "values": [0.05, 0.1, 0.2, 0.3, 0.5]},
    "style-centers": {"key": "train.n_style_centers", "values": [5, 10, 20, 30]},
}


@dataclass
class SweepRow:
    name: str
    overrides: dict
    seed_scores: list[float] = field(default_factory=list)  # mean-target mIoU per seed
    per_domain: dict[str, list[float]] = field(default_factory=dict)
    source_val: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.seed_scores))


@dataclass
class SweepReport:
    rows: list[SweepRow]
    seeds: list[int]

    def to_csv(self) -> str:
        domains = sorted(self.rows[0].per_domain) if self.rows else []
        header = ["row", "mean_target_miou"] + [f"seed{s}" for s in self.seeds]
        header += [f"target_{d}" for d in domains] + ["source_val"]
        lines = [",".join(header)]
        for r in self.rows:
            vals = [r.name, f"{r.mean:.6f}"]
            vals += [f"{v:.6f}" for v in r.seed_scores]
            vals += [f"{np.mean(r.per_domain[d]):.6f}" for d in domains]
            vals += [f"{np.mean(r.source_val):.6f}"]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        domains = sorted(self.rows[0].per_domain) if self.rows else []
        headers = ["row", "mean"] + [f"s{s}" for s in self.seeds] + domains + ["val"]
        table = [headers]
        for r in self.rows:
            table.append(
                [r.name, f"{100 * r.mean:.2f}"]
                + [f"{100 * v:.2f}" for v in r.seed_scores]
                + [f"{100 * np.mean(r.per_domain[d]):.2f}" for d in domains]
                + [f"{100 * np.mean(r.source_val):.2f}"]
            )
        widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
        out = []
        for j, row in enumerate(table):
            out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
            if j == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.csv").write_text(self.to_csv())
        (out_dir / "sweep.txt").write_text(self.to_text())


def normalize_sweep(sweep_spec: dict | None) -> list[dict]:
    """Expand a sweep spec into [{name, overrides}] rows; {} -> one base row."""
    if not sweep_spec:
        return [{"name": "base", "overrides": {}}]
    if "rows" in sweep_spec:
        rows = []
        for r in sweep_spec["rows"]:
            if "overrides" not in r:
                raise ConfigError(f"sweep row {r} lacks 'overrides'")
            rows.append({"name": r.get("name", json.dumps(r["overrides"])), "overrides": r["overrides"]})
        return rows
    if "key" in sweep_spec and "values" in sweep_spec:
        key = sweep_spec["key"]
        return [{"name": f"{key.split('.')[-1]}={v}", "overrides": {key: v}} for v in sweep_spec["values"]]
    raise ConfigError(f"sweep spec needs 'rows' or 'key'+'values', got keys {sorted(sweep_spec)}")


# config fields that change what stage-1 training produces
_SSDP_KEYS = ("ssdp_channels", "ssdp_lr", "ssdp_epochs", "ssdp_aug", "batch_size", "seed", "aug")


class _Caches:
    def __init__(self):
        self.datasets: dict = {}
        self.ssdp: dict[str, SsdpTrainResult] = {}
        self.centers: dict = {}


def _dataset_for(cfg: RunConfig, cache: _Caches):
    key = json.dumps(cfg.to_dict()["data"], sort_keys=True)
    if key not in cache.datasets:
        cache.datasets[key] = build_benchmark(cfg.data)
    return cache.datasets[key]


def _ssdp_for(cfg: RunConfig, data, cache: _Caches):
    t = cfg.to_dict()["train"]
    key = json.dumps({k: t[k] for k in _SSDP_KEYS}, sort_keys=True)
    key += json.dumps(cfg.to_dict()["data"], sort_keys=True)
    if key not in cache.ssdp:
        cache.ssdp[key] = train_ssdp(data["source_train"], cfg.train)
    result = cache.ssdp[key]
    ckey = (key, cfg.train.n_style_centers)
    if ckey not in cache.centers:
        if cfg.train.n_style_centers == result.centers.q:
            cache.centers[ckey] = result.centers
        else:
            cache.centers[ckey] = fit_centers_over(result.net, data["source_train"],
                                                   cfg.train.n_style_centers, cfg.train.seed)
    return result.net, cache.centers[ckey]


def run_cell(cfg: RunConfig, cache: _Caches | None = None) -> dict:
    """Train and evaluate one configuration; returns mIoU scores."""
    cache = cache or _Caches()
    data = _dataset_for(cfg, cache)
    net = centers = None
    if cfg.train.use_ssdp:
        net, centers = _ssdp_for(cfg, data, cache)
    result = train_segmentation(
        data["source_train"], None, cfg.data.spec.num_classes, net, centers, cfg.train
    )
    # prototype fusion belongs to the full method's test procedure; cells
    # without the contrastive stage predict with the classifier alone
    bank = result.bank if (cfg.train.use_mlcl and result.bank.all_initialized()) else None
    eval_ssdp = net if cfg.train.use_ssdp else None
    eval_centers = centers if cfg.train.use_ssdp else None
    targets = evaluate_targets(result.model, bank, data["targets"], eval_ssdp, eval_centers,
                               cfg.train.fusion_weight)
    _, val_miou, _ = evaluate_domain(result.model, bank, data["source_val"],
                                     eval_ssdp, eval_centers, cfg.train.fusion_weight)
    return {
        "targets": targets,
        "mean_target": targets["mean"],
        "source_val": val_miou,
        "model": result.model,
        "bank": result.bank,
        "ssdp": net,
        "centers": centers,
    }


def run_sweep(base: RunConfig, sweep_spec: dict | None, seeds=(0, 1, 2),
              out_dir=None, keep_models: bool = False) -> SweepReport:
    """Run every sweep row for every seed and aggregate mean-target mIoU.

    Every override is validated against the config schema before any cell
    trains. Datasets and stage-1 networks are shared across rows per seed.
    """
    rows_spec = normalize_sweep(sweep_spec)
    for r in rows_spec:  # fail fast on unknown keys
        base.with_overrides(r["overrides"])
    cache = _Caches()
    report = SweepReport(rows=[], seeds=list(seeds))
    for r in rows_spec:
        row = SweepRow(name=r["name"], overrides=r["overrides"])
        for seed in seeds:
            cfg = base.with_overrides(r["overrides"])
            cfg = cfg.with_overrides({"data.seed": int(seed), "train.seed": int(seed)})
            cell = run_cell(cfg, cache)
            row.seed_scores.append(cell["mean_target"])
            row.source_val.append(cell["source_val"])
            for dom, v in cell["targets"].items():
                if dom != "mean":
                    row.per_domain.setdefault(dom, []).append(v)
            if keep_models:
                row.__dict__.setdefault("cells", []).append(cell)
        report.rows.append(row)
    if out_dir is not None:
        report.write(out_dir)
    return report
