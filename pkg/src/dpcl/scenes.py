"""Procedural multi-domain scene generation.

Produces labeled images (geometric shapes over a textured background) for one
source domain plus any number of style-shifted target domains, along with the
photometric/geometric augmentations used during training. Generation is a pure
function of (spec, seed) backed by a counter-based Philox generator, so every
image is bit-reproducible.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .utils import ConfigError, make_rng

IGNORE = 255

# salt constants keep the per-purpose Philox streams disjoint
_SALT_SCENE = 101
_SALT_STYLE = 102
_SALT_AUG = 103


@dataclass
class SceneSpec:
    """Geometry and appearance parameters for procedural scenes.

    Class 0 is the background; classes 1..K-1 are shapes (rectangles, disks,
    triangles) painted in random order. Each class has a base color and a
    per-class texture (stripe pattern plus pixel noise) so classes are
    separable mainly by color but not trivially constant.
    """

    height: int = 64
    width: int = 64
    num_classes: int = 8
    shapes_per_image: tuple[int, int] = (5, 9)
    shape_size: tuple[int, int] = (12, 28)
    class_palette: np.ndarray | None = None  # (K,3) floats in [0,1]
    texture_params: list[dict] | None = None  # per class: noise/stripe settings

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"scene size {self.height}x{self.width} too small (min 32)")
        if not (3 <= self.num_classes <= 16):
            raise ConfigError(f"num_classes={self.num_classes} outside [3, 16]")
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad shapes_per_image range {self.shapes_per_image}")
        if self.class_palette is None:
            self.class_palette = _default_palette(self.num_classes)
        self.class_palette = np.asarray(self.class_palette, dtype=np.float64)
        if self.class_palette.shape != (self.num_classes, 3):
            raise ConfigError(f"palette shape {self.class_palette.shape} != ({self.num_classes}, 3)")
        if self.texture_params is None:
            self.texture_params = [_default_texture(c) for c in range(self.num_classes)]
        if len(self.texture_params) != self.num_classes:
            raise ConfigError("texture_params must have one entry per class")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_palette"] = self.class_palette.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        from dataclasses import fields

        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scene spec key(s): {sorted(unknown)}")
        if "shapes_per_image" in d:
            d["shapes_per_image"] = tuple(d["shapes_per_image"])
        if "shape_size" in d:
            d["shape_size"] = tuple(d["shape_size"])
        if d.get("class_palette") is not None:
            d["class_palette"] = np.asarray(d["class_palette"], dtype=np.float64)
        return cls(**d)


def _default_palette(k: int) -> np.ndarray:
    # background is a dull gray; shape classes sit on an HSV wheel
    pal = np.zeros((k, 3))
    pal[0] = (0.28, 0.28, 0.30)
    for c in range(1, k):
        h = (c - 1) / max(k - 1, 1)
        pal[c] = colorsys.hsv_to_rgb(h, 0.62, 0.78)
    return pal


def _default_texture(c: int) -> dict:
    return {
        "noise": 0.02 + 0.01 * (c % 3),
        "stripe_amp": 0.03 + 0.015 * (c % 3),
        "stripe_period": 6.0 + 3.0 * (c % 4),
        "stripe_angle": 0.7 * c,
    }


@dataclass
class DomainStyle:
    """Photometric transform defining a domain shift; never touches labels."""

    brightness_shift: float = 0.0
    contrast_gain: float = 1.0
    hue_rotation: float = 0.0  # radians, rotation of RGB about the gray axis
    saturation_gain: float = 1.0
    noise_std: float = 0.0
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    def is_identity(self) -> bool:
        return (
            self.brightness_shift == 0.0
            and self.contrast_gain == 1.0
            and self.hue_rotation == 0.0
            and self.saturation_gain == 1.0
            and self.noise_std == 0.0
            and tuple(self.tint) == (0.0, 0.0, 0.0)
        )


@dataclass
class LabeledImage:
    """HxWx3 float image in [0,1] plus an HxW integer class mask."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} / mask {self.mask.shape} disagree")


def generate_scene(spec: SceneSpec, seed: int) -> LabeledImage:
    """Draw one labeled scene. Deterministic in (spec, seed).

    Guarantees at least two classes appear (background plus one shape);
    re-draws with a salted stream in the astronomically unlikely case the
    background is fully covered.
    """
    for attempt in range(10):
        rng = make_rng(seed, _SALT_SCENE, attempt)
        mask = _draw_mask(spec, rng)
        if len(np.unique(mask)) >= 2:
            image = _render(spec, mask, rng)
            return LabeledImage(image=image, mask=mask)
    raise RuntimeError("failed to generate a scene with >= 2 classes")


def _draw_mask(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, k = spec.height, spec.width, spec.num_classes
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, k))
        size = int(rng.integers(spec.shape_size[0], spec.shape_size[1] + 1))
        cy = float(rng.uniform(size / 2, h - size / 2))
        cx = float(rng.uniform(size / 2, w - size / 2))
        kind = int(rng.integers(0, 3))
        if kind == 0:  # axis-aligned rectangle, mildly anisotropic
            ar = float(rng.uniform(0.6, 1.6))
            hh, hw = size / 2, size * ar / 2
            region = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        elif kind == 1:  # disk
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2) ** 2
        else:  # isoceles triangle pointing up
            top, bot = cy - size / 2, cy + size / 2
            frac = np.clip((yy - top) / max(bot - top, 1e-9), 0, 1)
            region = (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= frac * size / 2)
        mask[region] = cls
    return mask


def _render(spec: SceneSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    image = spec.class_palette[mask].astype(np.float64)
    for c in range(spec.num_classes):
        sel = mask == c
        if not sel.any():
            continue
        tp = spec.texture_params[c]
        phase = float(rng.uniform(0, 2 * np.pi))
        ang, period = tp["stripe_angle"], tp["stripe_period"]
        stripes = tp["stripe_amp"] * np.sin(
            2 * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) / period + phase
        )
        image[sel] += stripes[sel, None]
        image[sel] += rng.normal(0.0, tp["noise"], size=(int(sel.sum()), 3))
    return np.clip(image, 0.0, 1.0).astype(np.float32)


# gray-axis luminance weights for the saturation transform
_LUMA = np.array([0.299, 0.587, 0.114])


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    # Rodrigues rotation about the (1,1,1)/sqrt(3) axis
    axis = np.ones(3) / np.sqrt(3.0)
    kmat = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(theta) * kmat + (1 - np.cos(theta)) * (kmat @ kmat)


def _apply_photometric(
    img: np.ndarray,
    rng: np.random.Generator | None,
    brightness: float = 0.0,
    contrast: float = 1.0,
    hue: float = 0.0,
    saturation: float = 1.0,
    noise_std: float = 0.0,
    tint=(0.0, 0.0, 0.0),
) -> np.ndarray:
    """Shared photometric pipeline for domain styles and image augmentation.

    Stage order: contrast, saturation, hue rotation, brightness, tint, noise,
    clamp. Each stage is skipped at its identity parameter so a fully-identity
    call returns the input bit-exactly.
    """
    out = img.astype(np.float64, copy=True)
    if contrast != 1.0:
        out = 0.5 + contrast * (out - 0.5)
    if saturation != 1.0:
        gray = out @ _LUMA
        out = gray[..., None] + saturation * (out - gray[..., None])
    if hue != 0.0:
        out = out @ _hue_rotation_matrix(hue).T
    if brightness != 0.0:
        out = out + brightness
    if any(t != 0.0 for t in tint):
        out = out + np.asarray(tint, dtype=np.float64)
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("noise requested but no rng supplied")
        out = out + rng.normal(0.0, noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_domain_style(x: LabeledImage, style: DomainStyle, seed: int) -> LabeledImage:
    """Shift an image into another domain; the label mask is untouched."""
    rng = make_rng(seed, _SALT_STYLE)
    img = _apply_photometric(
        x.image,
        rng,
        brightness=style.brightness_shift,
        contrast=style.contrast_gain,
        hue=style.hue_rotation,
        saturation=style.saturation_gain,
        noise_std=style.noise_std,
        tint=style.tint,
    )
    return LabeledImage(image=img, mask=x.mask.copy())


@dataclass
class AugConfig:
    """Training-time augmentation: photometric ranges plus geometric ops.

    Photometric fields are (low, high) sampling ranges, or None to disable.
    Geometric ops (scale jitter, random crop, horizontal flip) move image and
    mask jointly. An all-disabled config is the identity.
    """

    brightness: tuple[float, float] | None = None
    contrast: tuple[float, float] | None = None
    hue: tuple[float, float] | None = None
    saturation: tuple[float, float] | None = None
    noise_std: tuple[float, float] | None = None
    flip: bool = False
    scale: tuple[float, float] | None = None
    crop: int | None = None

    def photometric_only(self) -> "AugConfig":
        return AugConfig(
            brightness=self.brightness,
            contrast=self.contrast,
            hue=self.hue,
            saturation=self.saturation,
            noise_std=self.noise_std,
        )

    def geometric_only(self) -> "AugConfig":
        return AugConfig(flip=self.flip, scale=self.scale, crop=self.crop)

    def is_identity(self) -> bool:
        return (
            self.brightness is None
            and self.contrast is None
            and self.hue is None
            and self.saturation is None
            and self.noise_std is None
            and not self.flip
            and self.scale is None
            and self.crop is None
        )


# ranges for the default photometric training augmentation; target-domain
# styles in default_benchmark() sit strictly outside these
DEFAULT_IA = AugConfig(
    brightness=(-0.15, 0.15),
    contrast=(0.80, 1.25),
    hue=(-0.45, 0.45),
    saturation=(0.70, 1.30),
    noise_std=(0.0, 0.04),
)


def hflip(image: np.ndarray, mask: np.ndarray | None = None):
    """Deterministic horizontal flip of an image and optionally its mask."""
    fi = image[:, ::-1].copy()
    if mask is None:
        return fi
    return fi, mask[:, ::-1].copy()


def _scale_jitter(image, mask, factor, rng):
    """Resize by `factor` then randomly crop/pad back to the original size."""
    h, w = image.shape[:2]
    nh, nw = max(8, round(h * factor)), max(8, round(w * factor))
    img = ndi.zoom(image, (nh / h, nw / w, 1.0), order=1)
    msk = None
    if mask is not None:
        # nearest-neighbor keeps the label set intact
        ri = np.floor((np.arange(nh) + 0.5) * h / nh).astype(int)
        ci = np.floor((np.arange(nw) + 0.5) * w / nw).astype(int)
        msk = mask[np.ix_(ri, ci)]
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    if nh >= h:
        oy = int(rng.integers(0, nh - h + 1))
        ox = int(rng.integers(0, nw - w + 1))
        img = img[oy : oy + h, ox : ox + w]
        if msk is not None:
            msk = msk[oy : oy + h, ox : ox + w]
    else:
        py, px = h - nh, w - nw
        oy = int(rng.integers(0, py + 1))
        ox = int(rng.integers(0, px + 1))
        canvas = np.zeros((h, w, 3), dtype=np.float32)
        canvas[oy : oy + nh, ox : ox + nw] = img
        img = canvas
        if msk is not None:
            mcanvas = np.full((h, w), IGNORE, dtype=msk.dtype)
            mcanvas[oy : oy + nh, ox : ox + nw] = msk
            msk = mcanvas
    return img, msk


def augment(image: np.ndarray, cfg: AugConfig, seed: int, mask: np.ndarray | None = None):
    """Apply geometric then photometric augmentation, seeded.

    Returns the augmented image, or an (image, mask) pair when a mask is
    passed. Photometric-only configs leave any mask untouched by construction.
    """
    rng = make_rng(seed, _SALT_AUG)
    img = image
    msk = mask
    mask_in = mask is not None

    if cfg.crop is not None:
        h, w = img.shape[:2]
        if cfg.crop > h or cfg.crop > w:
            raise ConfigError(f"crop {cfg.crop} exceeds image size {h}x{w}")
        oy = int(rng.integers(0, h - cfg.crop + 1))
        ox = int(rng.integers(0, w - cfg.crop + 1))
        img = img[oy : oy + cfg.crop, ox : ox + cfg.crop].copy()
        if msk is not None:
            msk = msk[oy : oy + cfg.crop, ox : ox + cfg.crop].copy()
    if cfg.scale is not None:
        factor = float(rng.uniform(*cfg.scale))
        img, msk = _scale_jitter(img, msk, factor, rng)
    if cfg.flip and rng.random() < 0.5:
        if msk is not None:
            img, msk = hflip(img, msk)
        else:
            img = hflip(img)

    kwargs = {}
    if cfg.contrast is not None:
        kwargs["contrast"] = float(rng.uniform(*cfg.contrast))
    if cfg.saturation is not None:
        kwargs["saturation"] = float(rng.uniform(*cfg.saturation))
    if cfg.hue is not None:
        kwargs["hue"] = float(rng.uniform(*cfg.hue))
    if cfg.brightness is not None:
        kwargs["brightness"] = float(rng.uniform(*cfg.brightness))
    if cfg.noise_std is not None:
        kwargs["noise_std"] = float(rng.uniform(*cfg.noise_std))
    if kwargs:
        img = _apply_photometric(img, rng, **kwargs)
    elif img is image:
        img = image.copy()

    if mask_in:
        return img, msk
    return img


@dataclass
class DomainData:
    """A stack of labeled images from one domain split."""

    images: np.ndarray  # (N,H,W,3) float32 in [0,1]
    masks: np.ndarray  # (N,H,W) uint8, 255 = ignore

    def __len__(self):
        return len(self.images)


@dataclass
class BenchmarkConfig:
    """Desk-scale multi-domain benchmark: one source, >=2 unseen targets."""

    spec: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 400
    n_val: int = 100
    n_target: int = 100
    seed: int = 0
    target_styles: dict = field(default_factory=lambda: default_target_styles())


def default_target_styles() -> dict[str, DomainStyle]:
    """Two held-out domain shifts, parameter-wise disjoint from DEFAULT_IA."""
    return {
        "shift_a": DomainStyle(
            brightness_shift=0.25,
            contrast_gain=0.65,
            hue_rotation=0.90,
            saturation_gain=0.55,
            noise_std=0.05,
            tint=(0.08, -0.04, -0.08),
        ),
        "shift_b": DomainStyle(
            brightness_shift=-0.22,
            contrast_gain=1.50,
            hue_rotation=-1.00,
            saturation_gain=1.65,
            noise_std=0.06,
            tint=(-0.06, 0.02, 0.09),
        ),
    }


def _make_split(spec: SceneSpec, n: int, seed: int, salt: int, style: DomainStyle | None = None) -> DomainData:
    images = np.zeros((n, spec.height, spec.width, 3), dtype=np.float32)
    masks = np.zeros((n, spec.height, spec.width), dtype=np.uint8)
    for i in range(n):
        scene_seed = int(make_rng(seed, salt, i).integers(0, 2**31 - 1))
        scene = generate_scene(spec, scene_seed)
        if style is not None:
            scene = apply_domain_style(scene, style, seed=scene_seed + 1)
        images[i] = scene.image
        masks[i] = scene.mask
    return DomainData(images=images, masks=masks)


def build_benchmark(cfg: BenchmarkConfig) -> dict:
    """Generate all splits in memory.

    Returns {"source_train": DomainData, "source_val": DomainData,
    "targets": {name: DomainData}}. Target scenes use fresh seeds so target
    content differs from the training set, and target styles are never applied
    during training.
    """
    out = {
        "source_train": _make_split(cfg.spec, cfg.n_train, cfg.seed, salt=1),
        "source_val": _make_split(cfg.spec, cfg.n_val, cfg.seed, salt=2),
        "targets": {},
    }
    for j, (name, style) in enumerate(sorted(cfg.target_styles.items())):
        out["targets"][name] = _make_split(cfg.spec, cfg.n_target, cfg.seed, salt=10 + j, style=style)
    return out


def save_domain(root: Path, data: DomainData) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(len(data)):
        img8 = np.clip(np.rint(data.images[i] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"{i:04d}.png")
        Image.fromarray(data.masks[i], mode="L").save(root / "masks" / f"{i:04d}.png")


def load_domain(root: Path) -> DomainData:
    root = Path(root)
    img_paths = sorted((root / "images").glob("*.png"))
    if not img_paths:
        raise FileNotFoundError(f"no images under {root}")
    images, masks = [], []
    for p in img_paths:
        images.append(np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0)
        masks.append(np.asarray(Image.open(root / "masks" / p.name), dtype=np.uint8))
    return DomainData(images=np.stack(images), masks=np.stack(masks))


def save_benchmark(root: Path, cfg: BenchmarkConfig, data: dict) -> None:
    """Write the dataset layout: per-domain image/mask PNGs plus manifest.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_domain(root / "source_train", data["source_train"])
    save_domain(root / "source_val", data["source_val"])
    for name, d in data["targets"].items():
        save_domain(root / f"target_{name}", d)
    manifest = {
        "format_version": 1,
        "seed": cfg.seed,
        "spec": cfg.spec.to_json(),
        "counts": {"train": cfg.n_train, "val": cfg.n_val, "target": cfg.n_target},
        "target_styles": {k: asdict(v) for k, v in cfg.target_styles.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_benchmark(root: Path) -> tuple[dict, dict]:
    """Read a saved dataset; returns (data dict, manifest dict)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    data = {
        "source_train": load_domain(root / "source_train"),
        "source_val": load_domain(root / "source_val"),
        "targets": {},
    }
    for name in sorted(manifest["target_styles"]):
        data["targets"][name] = load_domain(root / f"target_{name}")
    return data, manifest
