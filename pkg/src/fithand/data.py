"""Dataset ingestion, offline augmentation, splitting and synthetic data.

On-disk layout: ``root/<subject>/<class>/<image>.{png,ppm,pgm}``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, IngestionError, InputError

IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm")
AUGMENT_ANGLES = (-45, -30, -15, 15, 30, 45)
AUGMENT_NAMES = (
    "orig",
    *(f"rot{a:+d}" for a in AUGMENT_ANGLES),
    "flip",
    "histeq",
    "flip_histeq",
)
SD_TRAIN_FRACTION = 0.8
_LUMA = np.array([0.299, 0.587, 0.114])


# -- image io --------------------------------------------------------------


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit grayscale (h, w) or RGB (h, w, 3) image."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_EXTENSIONS:
        raise IngestionError(f"unsupported image extension: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("1", "L"):
                im = im.convert("L")
            elif im.mode in ("RGB", "RGBA", "P"):
                im = im.convert("RGB")
            else:
                raise IngestionError(f"{path}: mode {im.mode} is not 8-bit grayscale or RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise IngestionError(f"cannot decode {path}: {exc}") from None


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Binary P5 writer; used for synthetic data and activation maps."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    path = Path(path)
    if img.ndim == 2 and path.suffix.lower() == ".pgm":
        write_pgm(path, img)
        return
    fmt = "PNG" if path.suffix.lower() == ".png" else "PPM"
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(path, format=fmt)


# -- samples and datasets --------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    label: int
    subject: str
    path: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    classes: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def channels(self) -> int:
        return 1 if self.samples[0].image.ndim == 2 else 3

    def subjects(self) -> list[str]:
        return sorted({s.subject for s in self.samples})

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.classes)

    def tensors(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Stack every image as a float32 (n, c, size, size) array plus labels."""
        if not self.samples:
            return np.zeros((0, 1, size, size), np.float32), np.zeros(0, np.int64)
        x = np.stack([resize_and_normalize(s.image, size) for s in self.samples])
        return x, self.labels()


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    entries = []
    for subject_dir in sorted(root.iterdir()):
        if not subject_dir.is_dir():
            raise IngestionError(f"unexpected file {subject_dir} (expected root/<subject>/<class>/<image>)")
        for class_dir in sorted(subject_dir.iterdir()):
            if not class_dir.is_dir():
                raise IngestionError(f"unexpected file {class_dir} (expected root/<subject>/<class>/<image>)")
            for f in sorted(class_dir.iterdir()):
                if f.is_dir() or f.suffix.lower() not in IMAGE_EXTENSIONS:
                    raise IngestionError(f"unsupported entry {f}; allowed extensions {IMAGE_EXTENSIONS}")
                entries.append((subject_dir.name, class_dir.name, f))
    if not entries:
        raise IngestionError(f"no images found under {root}")
    classes = sorted({c for _, c, _ in entries})
    index = {c: i for i, c in enumerate(classes)}
    samples = [Sample(read_image(f), index[c], s, str(f)) for s, c, f in entries]
    chans = {s.image.ndim for s in samples}
    if len(chans) > 1:
        raise IngestionError(f"{root} mixes grayscale and RGB images")
    return Dataset(samples, classes)


# -- pixel transforms ------------------------------------------------------


def histogram_equalize(img: np.ndarray) -> np.ndarray:
    """Classic CDF remapping of a single-channel uint8 image.

    ``out(v) = round((cdf(v) - cdf_min) / (N - cdf_min) * 255)``; a constant
    image is returned unchanged.
    """
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise InputError(f"histogram_equalize expects uint8, got {img.dtype}")
    cdf = np.cumsum(np.bincount(img.ravel(), minlength=256))
    total = img.size
    cdf_min = cdf[img.min()]
    if cdf_min == total:
        return img.copy()
    lut = np.round((cdf - cdf_min) / (total - cdf_min) * 255.0)
    return np.clip(lut, 0, 255).astype(np.uint8)[img]


def equalize(img: np.ndarray) -> np.ndarray:
    """Equalise grayscale directly; RGB through its BT.601 luminance."""
    if img.ndim == 2:
        return histogram_equalize(img)
    luma = np.clip(np.round(img.astype(np.float64) @ _LUMA), 0, 255).astype(np.uint8)
    eq = histogram_equalize(luma).astype(np.float64)
    ratio = np.divide(eq, luma, out=np.ones_like(eq), where=luma > 0)
    out = img.astype(np.float64) * ratio[..., None]
    out[luma == 0] = eq[luma == 0, None]
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre, counter-clockwise, black fill."""
    fill = 0 if img.ndim == 2 else (0, 0, 0)
    out = Image.fromarray(img).rotate(degrees, resample=Image.BILINEAR, expand=False, fillcolor=fill)
    return np.asarray(out, dtype=np.uint8).copy()


def augment(img: np.ndarray) -> list[np.ndarray]:
    """The ten offline variants of one image, in :data:`AUGMENT_NAMES` order."""
    img = np.asarray(img, dtype=np.uint8)
    flipped = flip_horizontal(img)
    return [img.copy(), *(rotate(img, a) for a in AUGMENT_ANGLES), flipped, equalize(img), equalize(flipped)]


def augment_dataset(src: str | os.PathLike, dst: str | os.PathLike) -> int:
    """Augment every image of a dataset tree into a parallel tree; returns files written."""
    ds = load_dataset(src)
    src, dst = Path(src), Path(dst)
    written = 0
    for s in ds.samples:
        rel = Path(s.path).relative_to(src)
        out_dir = dst / rel.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        ext = ".pgm" if s.image.ndim == 2 else ".ppm"
        for name, im in zip(AUGMENT_NAMES, augment(s.image)):
            write_image(out_dir / f"{rel.stem}_{name}{ext}", im)
            written += 1
    return written


def resize_and_normalize(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear (half-pixel centres) resize to target x target, scaled to [0, 1], (c, h, w)."""
    if target < 1:
        raise ConfigError(f"target size must be positive, got {target}")
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    h, w = a.shape[:2]

    def axis(n_in):
        pos = (np.arange(target) + 0.5) * (n_in / target) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return (out / 255.0).transpose(2, 0, 1).astype(np.float32)


# -- splits ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    mode: str = "SD"
    train_subjects: tuple[str, ...] = ()
    seed: int = 0
    fraction: float = field(default=SD_TRAIN_FRACTION, repr=False)

    def __post_init__(self):
        if self.mode.upper() not in ("SD", "SI"):
            raise ConfigError(f"split mode must be SD or SI, got {self.mode!r}")
        object.__setattr__(self, "mode", self.mode.upper())
        if self.fraction != SD_TRAIN_FRACTION:
            raise ConfigError(f"SD train fraction is fixed at {SD_TRAIN_FRACTION}")


def split(ds: Dataset, plan: SplitPlan) -> tuple[Dataset, Dataset]:
    if plan.mode == "SD":
        order = np.random.default_rng(plan.seed).permutation(len(ds))
        n_train = int(np.floor(plan.fraction * len(ds)))
        return ds.subset(sorted(order[:n_train])), ds.subset(sorted(order[n_train:]))
    subjects = ds.subjects()
    if len(subjects) < 2:
        raise ConfigError(f"subject-independent split needs >= 2 subjects, dataset has {subjects}")
    if not plan.train_subjects:
        raise ConfigError("subject-independent split needs at least one training subject")
    missing = sorted(set(plan.train_subjects) - set(subjects))
    if missing:
        raise InputError(f"training subjects {missing} not in dataset (have {subjects})")
    chosen = set(plan.train_subjects)
    train = [i for i, s in enumerate(ds.samples) if s.subject in chosen]
    test = [i for i, s in enumerate(ds.samples) if s.subject not in chosen]
    return ds.subset(train), ds.subset(test)


# -- synthetic gestures ----------------------------------------------------

SYNTH_SUBJECTS = ("A", "B")


def stroke_count(label: int) -> int:
    """Number of finger strokes drawn for a synthetic class."""
    return label % 5 + 1


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def render_gesture(label: int, size: int, rng: np.random.Generator, style: int = 0) -> np.ndarray:
    """Palm blob plus ``stroke_count(label)`` finger strokes with random jitter.

    Classes beyond five reuse stroke counts but rotate the whole hand by a
    class-dependent offset.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size / 64.0
    cy = size * 0.62 + rng.uniform(-3, 3) * s
    cx = size * 0.5 + rng.uniform(-4, 4) * s + (2.5 * s if style else 0.0)
    palm = (11.0 + 1.5 * style) * s * rng.uniform(0.9, 1.1)
    base = -np.pi / 2 + rng.normal(0, 0.12) + (label // 5) * 0.6
    fingers = stroke_count(label)
    spread = np.deg2rad(24.0)
    canvas = np.clip(palm - np.hypot((yy - cy) / 0.85, xx - cx) + 0.5, 0, 1)
    for i in range(fingers):
        ang = base + (i - (fingers - 1) / 2) * spread + rng.normal(0, 0.05)
        length = (18.0 + rng.uniform(-2, 2)) * s
        p0 = np.array([cy, cx]) + 0.6 * palm * np.array([np.sin(ang), np.cos(ang)])
        p1 = np.array([cy, cx]) + (palm + length) * np.array([np.sin(ang), np.cos(ang)])
        width = (2.6 + 0.4 * style) * s
        canvas = np.maximum(canvas, np.clip(width - _segment_distance(yy, xx, p0, p1) + 0.5, 0, 1))
    fg = 200.0 + 30.0 * style * 0.5
    img = 20.0 + canvas * (fg - 20.0) + rng.normal(0, 6.0, canvas.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synth_dataset(
    root: str | os.PathLike,
    classes: int,
    per_class: int,
    size: int = 64,
    seed: int = 0,
    subjects: Sequence[str] = SYNTH_SUBJECTS,
) -> Path:
    """Write ``classes * per_class`` PGM images for each synthetic subject."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1 or size < 8:
        raise ConfigError(f"per_class must be >= 1 and size >= 8, got {per_class}, {size}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    width = len(str(classes - 1))
    for si, subject in enumerate(subjects):
        for label in range(classes):
            d = root / subject / f"c{label:0{width}d}"
            d.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                write_pgm(d / f"{i:04d}.pgm", render_gesture(label, size, rng, style=si))
    return root
