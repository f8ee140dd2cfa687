"""Synthetic eye phantoms standing in for surgical frames.

Each sample is a set of concentric ellipses (sclera, iris annulus, pupil)
with an optional low-contrast lens inside the pupil and, for the
instrument class, a bright bar entering from the border.  Noise, blur and
specular blobs reproduce the usual nuisances: low contrast, soft edges,
reflections.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from recalnet.imageio import read_sample, write_sample
from recalnet.tensor import ConfigError, Tensor

CLASSES = ("pupil", "iris", "lens", "instrument")
SPLITS = ("train", "val", "test")
AUGMENTATIONS = ("motion_blur", "median_blur", "brightness_contrast", "shift", "scale", "rotate")


@dataclass
class PhantomSpec:
    image_size: tuple[int, int] = (64, 64)
    cls: str = "pupil"
    center_jitter: float = 0.08         # fraction of min(H, W)
    cornea_radius: tuple[float, float] = (0.30, 0.42)   # fraction of min(H, W)
    pupil_ratio: tuple[float, float] = (0.35, 0.6)      # pupil radius / cornea radius
    eccentricity: tuple[float, float] = (0.0, 0.25)     # 1 - minor/major
    lens_ratio: tuple[float, float] = (0.6, 0.85)       # lens radius / pupil radius
    instrument_width: tuple[float, float] = (2.0, 5.0)  # pixels
    instrument_angle: tuple[float, float] = (0.0, 360.0)
    sclera_rgb: tuple[float, float, float] = (0.88, 0.84, 0.80)
    iris_rgb: tuple[float, float, float] = (0.45, 0.32, 0.22)
    pupil_rgb: tuple[float, float, float] = (0.55, 0.18, 0.10)
    lens_contrast: float = 0.06
    instrument_rgb: tuple[float, float, float] = (0.92, 0.92, 0.95)
    intensity_jitter: float = 0.05
    noise_sigma: float = 0.03
    blur_sigma: tuple[float, float] = (0.0, 1.0)
    highlight_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.validate()

    def validate(self) -> None:
        if self.cls not in CLASSES:
            raise ConfigError(f"unknown class {self.cls!r}; choose from {CLASSES}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigError(f"image_size {self.image_size} too small")
        for name in ("cornea_radius", "pupil_ratio", "eccentricity", "lens_ratio",
                     "instrument_width", "instrument_angle", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.cornea_radius[1] + self.center_jitter > 0.5:
            raise ConfigError("cornea radius plus centre jitter does not fit inside the image")
        if self.cornea_radius[0] <= 0 or self.pupil_ratio[0] <= 0 or self.lens_ratio[0] <= 0:
            raise ConfigError("radii must be positive")
        if self.pupil_ratio[1] >= 1.0 or self.lens_ratio[1] > 1.0:
            raise ConfigError("pupil must sit strictly inside the cornea and lens inside the pupil")
        if not (0.0 <= self.eccentricity[0] and self.eccentricity[1] < 1.0):
            raise ConfigError("eccentricity must lie in [0, 1)")
        smallest = self.cornea_radius[0] * self.pupil_ratio[0] * self.lens_ratio[0] * min(h, w)
        if smallest < 1.0:
            raise ConfigError(f"smallest lens radius is {smallest:.2f} px; needs at least 1")


@dataclass
class SampleBatch:
    images: np.ndarray            # (N, 3, H, W) in [0, 1]
    masks: np.ndarray             # (N, 1, H, W) in {0, 1}
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> SampleBatch:
        index = np.asarray(index, dtype=np.intp)
        return SampleBatch(self.images[index], self.masks[index], [self.ids[i] for i in index])

    def image_tensor(self) -> Tensor:
        return Tensor(self.images)

    def mask_tensor(self) -> Tensor:
        return Tensor(self.masks)


def ellipse_mask(shape, center, radii, angle: float) -> np.ndarray:
    """Pixels whose centres fall inside a rotated ellipse (angle in radians)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0


def bar_mask(shape, start, direction, length: float, width: float) -> np.ndarray:
    """Pixels within width/2 of the segment start + t * direction, t in [0, length]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    py, px = yy - start[0], xx - start[1]
    t = np.clip(py * direction[0] + px * direction[1], 0.0, length)
    dist2 = (py - t * direction[0]) ** 2 + (px - t * direction[1]) ** 2
    return dist2 <= (width / 2.0) ** 2


def _stream(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split), index]))


def sample_geometry(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    h, w = spec.image_size
    side = min(h, w)
    cy = (h - 1) / 2 + rng.uniform(-1, 1) * spec.center_jitter * side
    cx = (w - 1) / 2 + rng.uniform(-1, 1) * spec.center_jitter * side
    r_cornea = rng.uniform(*spec.cornea_radius) * side
    r_pupil = rng.uniform(*spec.pupil_ratio) * r_cornea
    ecc = rng.uniform(*spec.eccentricity)
    angle = rng.uniform(0, np.pi)
    r_lens = rng.uniform(*spec.lens_ratio) * r_pupil
    geo = {
        "center": (cy, cx),
        "cornea": (r_cornea, r_cornea * (1 - 0.5 * ecc)),
        "pupil": (r_pupil, r_pupil * (1 - ecc)),
        "lens": (r_lens, r_lens * (1 - ecc)),
        "angle": angle,
    }
    theta = np.deg2rad(rng.uniform(*spec.instrument_angle))
    direction = (np.sin(theta), np.cos(theta))
    # enter from the border opposite the pointing direction, stop near the pupil centre
    reach = 0.5 * np.hypot(h, w)
    start = (cy - direction[0] * reach, cx - direction[1] * reach)
    geo["bar"] = (start, direction, reach + rng.uniform(0.0, 0.5) * r_pupil,
                  rng.uniform(*spec.instrument_width))
    return geo


def class_masks(spec: PhantomSpec, geo: dict) -> dict[str, np.ndarray]:
    shape = spec.image_size
    cornea = ellipse_mask(shape, geo["center"], geo["cornea"], geo["angle"])
    pupil = ellipse_mask(shape, geo["center"], geo["pupil"], geo["angle"])
    lens = ellipse_mask(shape, geo["center"], geo["lens"], geo["angle"]) & pupil
    return {
        "cornea": cornea,
        "pupil": pupil,
        # the pupil region is convex, so it is its own convex hull
        "iris": cornea & ~pupil,
        "lens": lens,
        "instrument": bar_mask(shape, *geo["bar"]),
    }


def render_sample(spec: PhantomSpec, index: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    rng = _stream(spec.seed, split, index)
    geo = sample_geometry(spec, rng)
    masks = class_masks(spec, geo)
    h, w = spec.image_size

    def jitter(rgb):
        return np.clip(np.asarray(rgb) + rng.uniform(-1, 1, 3) * spec.intensity_jitter, 0.0, 1.0)

    img = np.empty((3, h, w))
    img[:] = jitter(spec.sclera_rgb)[:, None, None]
    for region, rgb in (("cornea", spec.iris_rgb), ("pupil", spec.pupil_rgb)):
        img[:, masks[region]] = jitter(rgb)[:, None]
    img[:, masks["lens"]] += spec.lens_contrast
    if spec.cls == "instrument":
        img[:, masks["instrument"]] = jitter(spec.instrument_rgb)[:, None]

    sigma = rng.uniform(*spec.blur_sigma)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")
    if rng.uniform() < spec.highlight_prob:
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(1.0, 3.0)
            yy, xx = np.mgrid[0:h, 0:w]
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad ** 2))
            img += 0.6 * blob[None]
    img += rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), masks[spec.cls].astype(np.float64)


def generate(spec: PhantomSpec, count: int, split: str = "train", start: int = 0) -> SampleBatch:
    """Render ``count`` samples; sample ``i`` depends only on (seed, split, i)."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; choose from {SPLITS}")
    spec.validate()
    h, w = spec.image_size
    images = np.empty((count, 3, h, w))
    masks = np.empty((count, 1, h, w))
    ids = []
    for k in range(count):
        idx = start + k
        images[k], masks[k, 0] = render_sample(spec, idx, split)
        ids.append(f"{spec.cls}-{split}-{idx:05d}")
    return SampleBatch(images, masks, ids)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    rotate_deg: tuple[float, float] = (-20.0, 20.0)
    shift_frac: tuple[float, float] = (-0.08, 0.08)
    scale: tuple[float, float] = (0.9, 1.1)
    brightness: tuple[float, float] = (-0.1, 0.1)
    contrast: tuple[float, float] = (0.8, 1.2)
    motion_length: tuple[int, int] = (3, 7)
    median_size: tuple[int, int] = (3, 5)


def _affine(img: np.ndarray, mask: np.ndarray, angle_deg: float, shift, scale: float):
    h, w = mask.shape
    if scale == 1.0 and shift == (0.0, 0.0) and angle_deg % 90 == 0 and h == w:
        k = int(angle_deg // 90) % 4
        return np.rot90(img, k, axes=(1, 2)).copy(), np.rot90(mask, k).copy()
    a = np.deg2rad(angle_deg)
    # output->input map: rotate by -a and shrink by scale about the centre
    inv = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - inv @ (centre + np.asarray(shift))
    out_img = np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant")
                        for ch in img])
    out_mask = ndimage.affine_transform(mask, inv, offset=offset, order=0, mode="constant")
    return out_img, out_mask


def _motion_kernel(length: int, direction: int) -> np.ndarray:
    k = np.zeros((length, length))
    mid = length // 2
    if direction == 0:
        k[mid, :] = 1
    elif direction == 1:
        k[:, mid] = 1
    elif direction == 2:
        np.fill_diagonal(k, 1)
    else:
        np.fill_diagonal(np.fliplr(k), 1)
    return k / k.sum()


def augment(batch: SampleBatch, ops, seed: int, config: AugmentConfig | None = None) -> SampleBatch:
    """Apply the named transforms per sample with parameters drawn from ``seed``.

    Geometric ops move image and mask together (mask resampled nearest
    neighbour, so it stays binary); photometric ops touch the image only.
    """
    ops = list(ops)
    if not ops:
        raise ConfigError("augment needs at least one op")
    unknown = [o for o in ops if o not in AUGMENTATIONS]
    if unknown:
        raise ConfigError(f"unknown augmentation(s) {unknown}; choose from {AUGMENTATIONS}")
    cfg = config or AugmentConfig()
    images = batch.images.copy()
    masks = batch.masks.copy()
    h, w = masks.shape[2:]
    for i in range(len(batch)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img, mask = images[i], masks[i, 0]
        if {"shift", "scale", "rotate"} & set(ops):
            angle = rng.uniform(*cfg.rotate_deg) if "rotate" in ops else 0.0
            scale = rng.uniform(*cfg.scale) if "scale" in ops else 1.0
            shift = ((rng.uniform(*cfg.shift_frac) * h, rng.uniform(*cfg.shift_frac) * w)
                     if "shift" in ops else (0.0, 0.0))
            img, mask = _affine(img, mask, angle, (float(shift[0]), float(shift[1])), scale)
        if "motion_blur" in ops:
            length = int(rng.integers(cfg.motion_length[0], cfg.motion_length[1] + 1)) | 1
            kern = _motion_kernel(length, int(rng.integers(0, 4)))
            img = np.stack([ndimage.convolve(ch, kern, mode="reflect") for ch in img])
        if "median_blur" in ops:
            size = int(rng.integers(cfg.median_size[0], cfg.median_size[1] + 1)) | 1
            img = ndimage.median_filter(img, size=(1, size, size), mode="reflect")
        if "brightness_contrast" in ops:
            alpha = rng.uniform(*cfg.contrast)
            beta = rng.uniform(*cfg.brightness)
            img = np.clip((img - 0.5) * alpha + 0.5 + beta, 0.0, 1.0)
        images[i], masks[i, 0] = img, mask
    return SampleBatch(images, masks, list(batch.ids))


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<class>/<split>/<id>_img.png + <id>_mask.png, manifest.csv


MANIFEST_FIELDS = ("id", "class", "split", "seed")


def write_dataset(root, spec: PhantomSpec, counts: dict[str, int]) -> Path:
    root = Path(root)
    rows = []
    for split, count in counts.items():
        batch = generate(spec, count, split)
        directory = root / spec.cls / split
        for sid, img, mask in zip(batch.ids, batch.images, batch.masks):
            write_sample(directory, sid, img, mask)
            rows.append({"id": sid, "class": spec.cls, "split": split, "seed": spec.seed})
    manifest = root / "manifest.csv"
    existing = []
    if manifest.exists():
        with open(manifest, newline="") as fh:
            existing = [r for r in csv.DictReader(fh) if r["class"] != spec.cls]
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(existing + rows)
    return manifest


def load_dataset(root, cls: str, split: str) -> SampleBatch:
    root = Path(root)
    with open(root / "manifest.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["class"] == cls and r["split"] == split]
    if not rows:
        raise ConfigError(f"no {cls}/{split} samples listed in {root / 'manifest.csv'}")
    images, masks = [], []
    for r in rows:
        d = root / cls / split
        img, mask = read_sample(d / f"{r['id']}_img.png", d / f"{r['id']}_mask.png")
        images.append(img)
        masks.append(mask[None])
    return SampleBatch(np.stack(images), np.stack(masks), [r["id"] for r in rows])
