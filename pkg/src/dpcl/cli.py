"""Command-line surface: dataset generation, training, evaluation, TTA, sweeps.

Every subcommand accepts ``--config FILE`` (a RunConfig JSON) plus repeated
``--set section.key=value`` overrides; outputs land under ``--out``, which the
DPCL_OUTPUT_ROOT environment variable can re-root.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, resolve_output
from .utils import ConfigError


def _parse_set(values: list[str]) -> dict:
    overrides = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.with_overrides(_parse_set(args.set))


def _load_benchmark_dir(path: Path):
    from .scenes import load_benchmark, load_domain

    path = Path(path)
    if (path / "manifest.json").exists():
        return load_benchmark(path)
    if (path / "images").exists():
        return {"source_train": None, "source_val": None, "targets": {path.name: load_domain(path)}}, None
    raise FileNotFoundError(f"{path} is neither a dataset root (manifest.json) nor a domain directory")


def cmd_generate_data(args) -> int:
    from .scenes import build_benchmark, save_benchmark

    cfg = _load_config(args)
    out = resolve_output(args.out)
    data = build_benchmark(cfg.data)
    save_benchmark(out, cfg.data, data)
    n_targets = len(data["targets"])
    print(f"wrote {cfg.data.n_train}+{cfg.data.n_val} source and {n_targets}x{cfg.data.n_target} target images to {out}")
    return 0


def cmd_train_ssdp(args) -> int:
    from .scenes import load_benchmark
    from .training import train_ssdp

    cfg = _load_config(args)
    data, _ = load_benchmark(Path(args.data))
    out = resolve_output(args.out)
    result = train_ssdp(data["source_train"], cfg.train, out_dir=out)
    cfg.save(Path(out) / "config.json")
    print(f"projection training done: first-epoch loss {result.epoch_losses[0]:.4f}, "
          f"last-epoch loss {result.epoch_losses[-1]:.4f}; checkpoint at {out}/ssdp.ckpt")
    return 0


def cmd_train_seg(args) -> int:
    from .scenes import load_benchmark
    from .training import load_ssdp_checkpoint, save_seg_checkpoint, train_segmentation

    cfg = _load_config(args)
    data, manifest = load_benchmark(Path(args.data))
    net = centers = None
    if cfg.train.use_ssdp:
        if not args.ssdp:
            raise ConfigError("train.use_ssdp is set: pass --ssdp with a projection checkpoint")
        net, centers = load_ssdp_checkpoint(args.ssdp)
    out = resolve_output(args.out)
    num_classes = manifest["spec"]["num_classes"]
    result = train_segmentation(data["source_train"], data["source_val"], num_classes,
                                net, centers, cfg.train, out_dir=out)
    save_seg_checkpoint(Path(out) / "seg.ckpt", result.model, result.bank, cfg.train)
    cfg.save(Path(out) / "config.json")
    final_val = [r["val_miou"] for r in result.metrics_rows if r["val_miou"] != ""]
    print(f"segmentation training done ({cfg.train.max_iters} iters); "
          f"final source-val mIoU {final_val[-1] if final_val else 'n/a'}; outputs in {out}")
    return 0


def _print_scores(title: str, per_class: np.ndarray, mean: float) -> None:
    classes = " ".join(f"{v:.3f}" if np.isfinite(v) else "  -  " for v in per_class)
    print(f"{title}: mIoU {mean:.4f}  per-class [{classes}]")


def cmd_eval(args) -> int:
    from .metrics import ConfusionMatrix, miou

    if args.pred_masks:
        if not args.true_masks:
            raise ConfigError("--pred-masks requires --true-masks")
        from PIL import Image

        pred_dir, true_dir = Path(args.pred_masks), Path(args.true_masks)
        cm = ConfusionMatrix(args.classes)
        files = sorted(pred_dir.glob("*.png"))
        if not files:
            raise FileNotFoundError(f"no PNG masks in {pred_dir}")
        for p in files:
            pred = np.asarray(Image.open(p), dtype=np.int64)
            true = np.asarray(Image.open(true_dir / p.name), dtype=np.int64)
            cm.update(pred, true)
        per_class, mean = miou(cm)
        _print_scores(f"{pred_dir}", per_class, mean)
        return 0

    from .evaluation import evaluate_domain
    from .training import load_seg_checkpoint, load_ssdp_checkpoint

    if not args.checkpoint or not args.data:
        raise ConfigError("eval needs either --pred-masks/--true-masks or --checkpoint/--data")
    model, bank, _ = load_seg_checkpoint(args.checkpoint)
    net = centers = None
    if args.ssdp:
        net, centers = load_ssdp_checkpoint(args.ssdp)
    data, _ = _load_benchmark_dir(Path(args.data))
    use_bank = None if args.classifier_only else (bank if bank.all_initialized() else None)
    domains = {}
    if data["source_val"] is not None:
        domains["source_val"] = data["source_val"]
    domains.update({f"target_{k}": v for k, v in data["targets"].items()})
    target_means = []
    for name, dom in domains.items():
        per_class, mean, _ = evaluate_domain(model, use_bank, dom, net, centers)
        _print_scores(name, per_class, mean)
        if name.startswith("target_"):
            target_means.append(mean)
    if target_means:
        print(f"mean over targets: {np.mean(target_means):.4f}")
    return 0


def cmd_tta(args) -> int:
    from .training import load_seg_checkpoint, load_ssdp_checkpoint
    from .tta import tta_sweep, write_tta_csv

    cfg = _load_config(args)
    model, bank, _ = load_seg_checkpoint(args.checkpoint)
    if not bank.all_initialized():
        raise ConfigError("TTA needs a fully initialized prototype bank")
    net, centers = load_ssdp_checkpoint(args.ssdp)
    data, _ = _load_benchmark_dir(Path(args.data))
    modes = args.modes.split(",")
    iters = [int(v) for v in args.iters.split(",")]
    rows = tta_sweep(model, bank, net, centers, data["targets"], modes, iters,
                     base_cfg=cfg.tta, max_images=args.max_images)
    out = resolve_output(args.out)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_tta_csv(out, rows)
    for r in rows:
        if r["image"] == "all" and r["domain"] == "mean":
            print(f"mode={r['mode']} iters={r['n_iters']}: mean-target mIoU {r['miou']:.4f}")
    print(f"per-image results in {out}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import NAMED_SWEEPS, run_sweep

    cfg = _load_config(args)
    if args.sweep in NAMED_SWEEPS:
        sweep = NAMED_SWEEPS[args.sweep]
    elif Path(args.sweep).exists():
        sweep = json.loads(Path(args.sweep).read_text())
    elif args.sweep == "base":
        sweep = {}
    else:
        raise ConfigError(f"unknown sweep {args.sweep!r}; named sweeps: {sorted(NAMED_SWEEPS)} or a JSON file")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = resolve_output(args.out)
    report = run_sweep(cfg, sweep, seeds=seeds, out_dir=out)
    print(report.to_text())
    print(f"report written to {out}/sweep.csv and {out}/sweep.txt")
    return 0


def cmd_landscape(args) -> int:
    from .contrast import loss_landscape, write_landscape

    report = loss_landscape(temperature=args.temperature, delta=args.delta, grid_n=args.grid_n)
    out = resolve_output(args.out)
    Path(out).mkdir(parents=True, exist_ok=True)
    write_landscape(report, Path(out) / "landscape.csv", Path(out) / "landscape.json")
    print(f"supervised-contrastive: min {report.sup.l_star:.6f} at {report.sup.argmin}, "
          f"high-similarity ratio {report.sup.high_similarity_ratio:.4f}")
    print(f"tpm cross-entropy:      min {report.ppce.l_star:.6f} at {report.ppce.argmin}, "
          f"high-similarity ratio {report.ppce.high_similarity_ratio:.4f}")
    print(f"grid written to {out}/landscape.csv, summary to {out}/landscape.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpcl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.max_iters=500")

    sp = sub.add_parser("generate-data", help="write the synthetic multi-domain dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("train-ssdp", help="stage 1: train the projection network")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_ssdp)

    sp = sub.add_parser("train-seg", help="stage 2: train the segmentation model")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ssdp", help="projection checkpoint from train-ssdp")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_seg)

    sp = sub.add_parser("eval", help="evaluate a checkpoint or a prediction directory")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--ssdp")
    sp.add_argument("--classifier-only", action="store_true")
    sp.add_argument("--pred-masks", help="directory of predicted mask PNGs")
    sp.add_argument("--true-masks", help="directory of ground-truth mask PNGs")
    sp.add_argument("--classes", type=int, default=8)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("tta", help="test-time adaptation sweep over modes and iteration counts")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ssdp", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="CSV output path")
    sp.add_argument("--modes", default="none,C")
    sp.add_argument("--iters", default="1")
    sp.add_argument("--max-images", type=int)
    sp.set_defaults(func=cmd_tta)

    sp = sub.add_parser("ablate", help="train/evaluate a sweep of configurations")
    common(sp)
    sp.add_argument("--sweep", required=True, help=f"named sweep ({', '.join(sorted(NAMED_SWEEPS_KEYS))}) or JSON file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", default="0,1,2")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("landscape", help="grid evaluation of the two contrastive losses")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--temperature", type=float, default=0.1)
    sp.add_argument("--delta", type=float, default=1.0)
    sp.add_argument("--grid-n", type=int, default=512)
    sp.set_defaults(func=cmd_landscape)

    return p


NAMED_SWEEPS_KEYS = (
    "toggles", "pp-variants", "mlcl-components", "ic-loss", "ssdp-aug",
    "pp-weight", "margin", "temperature", "style-centers",
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
