"""Datasets on disk, synthetic scene generation, and augmentation recipes.

Disk layout: ``root/images/<id>.png`` (8-bit RGB) and ``root/labels/<id>.png``
(8-bit single channel of class indices, 255 = ignore). Images travel through
the pipeline as float32 [3,H,W] arrays in [0,1]; labels as uint8 [H,W].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from hrseg.layers import interp_matrix

IGNORE = 255


@dataclass
class Sample:
    image: np.ndarray  # float32 [3,H,W], values in [0,1]
    label: "np.ndarray | int | None"  # uint8 [H,W], class index, or None (unlabeled)
    id: str


@dataclass
class AugmentConfig:
    crop: int = 768
    scale_range: tuple = (0.5, 2.0)
    hflip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    classification_resize_range: tuple = (256, 480)
    classification_crop: int = 224

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo > hi or lo <= 0:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.crop <= 0 or self.classification_crop <= 0:
            raise ValueError("crop sizes must be positive")

    @classmethod
    def identity(cls, crop: int) -> "AugmentConfig":
        """Degenerate config: no scaling, no flip, no jitter."""
        return cls(crop=crop, scale_range=(1.0, 1.0), hflip_prob=0.0,
                   brightness=0.0, contrast=0.0, saturation=0.0)


def validate_label_map(label: np.ndarray, num_classes: int, ident: str = "?"):
    bad = (label != IGNORE) & (label >= num_classes)
    if bad.any():
        worst = int(label[bad].max())
        raise ValueError(f"label {ident!r} contains value {worst} >= num_classes {num_classes}")


class Dataset:
    """Indexed sample collection, ordered lexicographically by id."""

    def __init__(self, ids, fetch, num_classes=None):
        self.ids = list(ids)
        self._fetch = fetch
        self.num_classes = num_classes

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return self._fetch(self.ids[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_samples(cls, samples, num_classes=None):
        by_id = {s.id: s for s in samples}
        if len(by_id) != len(samples):
            raise ValueError("duplicate sample ids")
        return cls(sorted(by_id), by_id.__getitem__, num_classes=num_classes)

    def subset(self, indices) -> "Dataset":
        ids = [self.ids[i] for i in indices]
        return Dataset(ids, self._fetch, num_classes=self.num_classes)

    def save(self, root):
        write_dataset(self, root)
        return self


def _load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _load_label(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def _save_image(img: np.ndarray, path):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def _save_label(label: np.ndarray, path):
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


def load_dataset(root, num_classes=None) -> Dataset:
    """Open a labeled dataset directory, validating pairs up front.

    Labels are scanned once for range errors; image pixels stay lazy.
    """
    img_dir = os.path.join(root, "images")
    lab_dir = os.path.join(root, "labels")
    if not os.path.isdir(img_dir) or not os.path.isdir(lab_dir):
        raise ValueError(f"{root} must contain images/ and labels/")
    img_ids = {os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".png")}
    lab_ids = {os.path.splitext(f)[0] for f in os.listdir(lab_dir) if f.endswith(".png")}
    if img_ids != lab_ids:
        missing = sorted(img_ids ^ lab_ids)[:5]
        raise ValueError(f"unpaired ids between images/ and labels/: {missing}")
    ids = sorted(img_ids)
    if not ids:
        raise ValueError(f"no samples found under {root}")

    for ident in ids:
        with Image.open(os.path.join(img_dir, ident + ".png")) as im:
            img_size = im.size
        label = _load_label(os.path.join(lab_dir, ident + ".png"))
        if (img_size[1], img_size[0]) != label.shape:
            raise ValueError(
                f"sample {ident!r}: image is {img_size[1]}x{img_size[0]} "
                f"but label is {label.shape[0]}x{label.shape[1]}"
            )
        if num_classes is not None:
            validate_label_map(label, num_classes, ident)

    def fetch(ident):
        return Sample(
            image=_load_image(os.path.join(img_dir, ident + ".png")),
            label=_load_label(os.path.join(lab_dir, ident + ".png")),
            id=ident,
        )

    return Dataset(ids, fetch, num_classes=num_classes)


def load_unlabeled(root) -> Dataset:
    """Open a directory with images/ only (labels absent or ignored)."""
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise ValueError(f"{root} must contain images/")
    ids = sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".png"))
    if not ids:
        raise ValueError(f"no images found under {root}")

    def fetch(ident):
        return Sample(image=_load_image(os.path.join(img_dir, ident + ".png")), label=None, id=ident)

    return Dataset(ids, fetch)


def write_dataset(ds: Dataset, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    for s in ds:
        _save_image(s.image, os.path.join(root, "images", s.id + ".png"))
        if isinstance(s.label, np.ndarray):
            _save_label(s.label, os.path.join(root, "labels", s.id + ".png"))


# --- synthetic scenes ------------------------------------------------------------


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _class_color(c: int, num_classes: int, rng) -> np.ndarray:
    """Saturated hue family per class; the background stays near-gray."""
    hue = (c - 1) / max(num_classes - 1, 1)
    base = np.array(_hsv_to_rgb(hue, 0.85, 0.9), dtype=np.float32)
    return np.clip(base + rng.uniform(-0.06, 0.06, size=3).astype(np.float32), 0.05, 0.95)


def _paint_shape(rng, h, w, num_classes):
    """Random rect/disk/bar mask with its class index."""
    c = int(rng.integers(1, num_classes))
    kind = rng.choice(["rect", "disk", "bar"])
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        sh = int(rng.integers(h // 6, h // 2))
        sw = int(rng.integers(w // 6, w // 2))
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        mask = (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    elif kind == "disk":
        r = int(rng.integers(h // 8, h // 3))
        cy = int(rng.integers(r, h - r + 1))
        cx = int(rng.integers(r, w - r + 1))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:  # bar: long and thin, axis-aligned
        thick = int(rng.integers(max(2, h // 16), max(3, h // 8)))
        if rng.uniform() < 0.5:
            y0 = int(rng.integers(0, h - thick + 1))
            mask = (yy >= y0) & (yy < y0 + thick)
        else:
            x0 = int(rng.integers(0, w - thick + 1))
            mask = (xx >= x0) & (xx < x0 + thick)
    return mask, c


def synth_sample(seed: int, index: int, h: int, w: int, num_classes: int) -> Sample:
    """One deterministic scene: textured background plus 3..6 colored shapes."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
    gray = rng.uniform(0.35, 0.65)
    image = np.full((3, h, w), gray, dtype=np.float32)
    image += rng.uniform(-0.08, 0.08, size=(3, h, w)).astype(np.float32)
    label = np.zeros((h, w), dtype=np.uint8)
    for _ in range(int(rng.integers(3, 7))):
        mask, c = _paint_shape(rng, h, w, num_classes)
        color = _class_color(c, num_classes, rng)
        noise = rng.uniform(-0.04, 0.04, size=(3, h, w)).astype(np.float32)
        image[:, mask] = color[:, None] + noise[:, mask]
        label[mask] = c
    image = np.clip(image, 0.0, 1.0)
    return Sample(image=image, label=label, id=f"synth_{index:05d}")


def synth_generate(seed: int, n: int, h: int, w: int, num_classes: int) -> Dataset:
    """Deterministic in-memory dataset of n synthetic scenes."""
    if h % 32 or w % 32:
        raise ValueError(f"sizes must be divisible by 32, got {h}x{w}")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if n < 1:
        raise ValueError("need at least 1 sample")
    samples = [synth_sample(seed, i, h, w, num_classes) for i in range(n)]
    return Dataset.from_samples(samples, num_classes=num_classes)


def dominant_class(label: np.ndarray, num_classes: int) -> int:
    """Most frequent non-background class (ties to the lowest); 0 if none.

    This is how a segmentation label map doubles as a classification target.
    """
    counts = np.bincount(label[label != IGNORE].ravel(), minlength=num_classes)
    if counts[1:].sum() == 0:
        return 0
    return int(np.argmax(counts[1:]) + 1)


# --- geometric and photometric transforms ------------------------------------------


def _resize_image(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    _, h, w = img.shape
    ry = interp_matrix(h, nh, img.dtype)
    rx = interp_matrix(w, nw, img.dtype)
    return np.ascontiguousarray(ry @ img @ rx.T)


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    return np.clip(np.round(coords), 0, src - 1).astype(np.int64)


def resize_label_nearest(label: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = label.shape
    return label[_nearest_indices(h, nh)][:, _nearest_indices(w, nw)]


def _pad_to(img, label, min_h, min_w):
    _, h, w = img.shape
    ph, pw = max(0, min_h - h), max(0, min_w - w)
    if ph == 0 and pw == 0:
        return img, label
    top, left = ph // 2, pw // 2
    img = np.pad(img, ((0, 0), (top, ph - top), (left, pw - left)))
    if label is not None:
        label = np.pad(label, ((top, ph - top), (left, pw - left)), constant_values=IGNORE)
    return img, label


def _color_jitter(img, rng, cfg: AugmentConfig):
    # rng draws happen unconditionally so the stream stays aligned across
    # configs; the arithmetic is skipped at factor 1 to keep the degenerate
    # config bit-exact.
    bf = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
    cf = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
    sf = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
    if bf != 1.0:
        img = img * np.float32(bf)
    if cf != 1.0:
        mean = img.mean(dtype=np.float32)
        img = (img - mean) * np.float32(cf) + mean
    if sf != 1.0:
        gray = img.mean(axis=0, keepdims=True)
        img = (img - gray) * np.float32(sf) + gray
    if bf == 1.0 and cf == 1.0 and sf == 1.0:
        return np.ascontiguousarray(img, dtype=np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_segmentation(s: Sample, cfg: AugmentConfig, rng_seed: int) -> Sample:
    """Random scale, pad, crop, horizontal flip, color jitter; deterministic
    per (sample, cfg, rng_seed). Labels move with nearest-neighbor and pad 255."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    img, label = s.image, s.label
    _, h, w = img.shape

    factor = rng.uniform(*cfg.scale_range)
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    if (nh, nw) != (h, w):
        img = _resize_image(img, nh, nw)
        label = resize_label_nearest(label, nh, nw)

    img, label = _pad_to(img, label, cfg.crop, cfg.crop)
    _, ph, pw = img.shape
    y0 = int(rng.integers(0, ph - cfg.crop + 1))
    x0 = int(rng.integers(0, pw - cfg.crop + 1))
    img = img[:, y0 : y0 + cfg.crop, x0 : x0 + cfg.crop]
    label = label[y0 : y0 + cfg.crop, x0 : x0 + cfg.crop]

    if rng.uniform() < cfg.hflip_prob:
        img = img[:, :, ::-1]
        label = label[:, ::-1]

    img = _color_jitter(np.ascontiguousarray(img), rng, cfg)
    return Sample(image=img, label=np.ascontiguousarray(label), id=s.id)


def augment_classification(s: Sample, cfg: AugmentConfig, rng_seed: int) -> Sample:
    """Shorter-side resize into the configured range, square crop, flip, jitter."""
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    img = s.image
    _, h, w = img.shape

    lo, hi = cfg.classification_resize_range
    target = int(rng.integers(lo, hi + 1))
    if h <= w:
        nh, nw = target, max(1, round(w * target / h))
    else:
        nh, nw = max(1, round(h * target / w)), target
    if (nh, nw) != (h, w):
        img = _resize_image(img, nh, nw)

    crop = cfg.classification_crop
    img, _ = _pad_to(img, None, crop, crop)
    _, ph, pw = img.shape
    y0 = int(rng.integers(0, ph - crop + 1))
    x0 = int(rng.integers(0, pw - crop + 1))
    img = img[:, y0 : y0 + crop, x0 : x0 + crop]

    if rng.uniform() < cfg.hflip_prob:
        img = img[:, :, ::-1]

    img = _color_jitter(np.ascontiguousarray(img), rng, cfg)
    return Sample(image=img, label=s.label, id=s.id)
