"""Seeded domain-shift datasets: rendered shapes, rotated two-moons, and an
image-folder ingestion hook."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SHAPE_CLASSES = ("rectangle", "ellipse", "cross", "triangle")
IMAGE_SIZE = 16
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".pgm", ".ppm"}


@dataclass(frozen=True)
class ShiftSpec:
    """Target-domain rendering changes relative to the source domain.

    Attributes:
        brightness: constant added to every target pixel.
        noise: extra standard deviation of additive Gaussian pixel noise.
        thickness: change of stroke width in pixels (may be negative).
    """

    brightness: float = 0.0
    noise: float = 0.0
    thickness: float = 0.0

    def __post_init__(self):
        for name in ("brightness", "noise", "thickness"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"shift.{name} must be finite")
        if not -1.0 <= self.brightness <= 1.0:
            raise ValueError(f"shift.brightness must lie in [-1, 1], got {self.brightness}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"shift.noise must lie in [0, 1], got {self.noise}")
        if not -SOURCE_STYLE["thickness"] < self.thickness <= 4.0:
            raise ValueError(f"shift.thickness leaves no stroke or exceeds 4 px: {self.thickness}")

    @property
    def is_null(self) -> bool:
        return self.brightness == 0 and self.noise == 0 and self.thickness == 0


SOURCE_STYLE = {"thickness": 1.2, "noise": 0.05, "brightness": 0.0}
DEFAULT_SHIFT = ShiftSpec(brightness=0.4, noise=0.15, thickness=1.0)


@dataclass(frozen=True)
class DomainPairDataset:
    """Labeled source domain plus unlabeled target domain.

    Target labels are kept private; training code reads ``target_x`` only and
    evaluation goes through :meth:`target_eval`.
    """

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    _target_y: np.ndarray = field(repr=False)
    num_classes: int = 2
    input_shape: tuple = ()
    name: str = ""
    class_names: tuple = ()

    @property
    def n_source(self) -> int:
        return len(self.source_x)

    @property
    def n_target(self) -> int:
        return len(self.target_x)

    def target_eval(self) -> tuple[np.ndarray, np.ndarray]:
        return self.target_x, self._target_y


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n % k:
        raise ValueError(f"sample count {n} is not divisible by {k} classes")
    return rng.permutation(np.repeat(np.arange(k), n // k))


def _segments(kind: str, cx, cy, size, angle, rng) -> np.ndarray:
    """Outline of one shape as an ``(n, 4)`` array of segment endpoints."""
    if kind == "rectangle":
        a, b = size, size * rng.uniform(0.55, 0.9)
        pts = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
        closed = True
    elif kind == "ellipse":
        t = np.linspace(0, 2 * np.pi, 20, endpoint=False)
        pts = np.stack([size * np.cos(t), size * rng.uniform(0.6, 0.9) * np.sin(t)], 1)
        closed = True
    elif kind == "triangle":
        t = np.deg2rad([90, 210, 330])
        pts = np.stack([size * np.cos(t), size * np.sin(t)], 1)
        closed = True
    elif kind == "cross":
        pts = np.array([[-size, 0], [size, 0], [0, -size], [0, size]], dtype=float)
        closed = False
    else:
        raise ValueError(kind)
    c, s = np.cos(angle), np.sin(angle)
    pts = pts @ np.array([[c, s], [-s, c]]) + [cx, cy]
    if closed:
        return np.concatenate([pts, np.roll(pts, -1, axis=0)], 1)
    return np.concatenate([pts[0::2], pts[1::2]], 1)


_GRID = np.stack(np.meshgrid(np.arange(IMAGE_SIZE) + 0.5, np.arange(IMAGE_SIZE) + 0.5, indexing="xy"), -1)


def _stroke(segments: np.ndarray, thickness: float) -> np.ndarray:
    p = _GRID.reshape(-1, 1, 2)
    a, b = segments[None, :, :2], segments[None, :, 2:]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0, 1)
    d = np.linalg.norm(p - (a + t[..., None] * ab), axis=-1).min(1)
    return np.clip(thickness / 2 + 0.5 - d, 0, 1).reshape(IMAGE_SIZE, IMAGE_SIZE)


def render_shapes(labels, rng, thickness, noise, brightness) -> np.ndarray:
    out = np.empty((len(labels), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for n, k in enumerate(labels):
        kind = SHAPE_CLASSES[k]
        size = rng.uniform(3.5, 6.0)
        cx, cy = rng.uniform(5.5, 10.5, size=2)
        angle = np.deg2rad(rng.uniform(-20, 20))
        img = _stroke(_segments(kind, cx, cy, size, angle, rng), thickness)
        img = img + brightness + noise * rng.standard_normal(img.shape)
        out[n, 0] = img
    return out


def make_shapes_dataset(seed: int, n_s: int, n_t: int, shift: Optional[ShiftSpec] = None) -> DomainPairDataset:
    """16x16 grayscale outlines of four shape classes; the target domain is
    rendered with the stroke, brightness and noise changes of ``shift``."""
    shift = DEFAULT_SHIFT if shift is None else shift
    k = len(SHAPE_CLASSES)
    if n_s < 4 * k or n_t < 4 * k:
        raise ValueError(f"need at least {4 * k} samples per domain")
    rng_s, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    ys = _balanced_labels(n_s, k, rng_s)
    yt = _balanced_labels(n_t, k, rng_t)
    base = SOURCE_STYLE
    xs = render_shapes(ys, rng_s, base["thickness"], base["noise"], base["brightness"])
    xt = render_shapes(
        yt,
        rng_t,
        base["thickness"] + shift.thickness,
        math.hypot(base["noise"], shift.noise),
        base["brightness"] + shift.brightness,
    )
    return DomainPairDataset(xs, ys, xt, yt, k, (1, IMAGE_SIZE, IMAGE_SIZE), "shapes", SHAPE_CLASSES)


def _moons(labels, rng, noise):
    t = rng.uniform(0, np.pi, size=len(labels))
    upper = np.stack([np.cos(t), np.sin(t)], 1)
    lower = np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1)
    x = np.where(labels[:, None] == 0, upper, lower)
    return x + noise * rng.standard_normal(x.shape)


def make_twomoons_dataset(seed: int, n_s: int, n_t: int, rotation_degrees: float = 30.0,
                          noise: float = 0.1) -> DomainPairDataset:
    """Interleaved half-circles; the target is rotated about the data centre."""
    if not 0.0 <= rotation_degrees <= 90.0:
        raise ValueError(f"rotation must lie in [0, 90] degrees, got {rotation_degrees}")
    rng_s, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    ys = _balanced_labels(n_s, 2, rng_s)
    yt = _balanced_labels(n_t, 2, rng_t)
    xs = _moons(ys, rng_s, noise)
    xt = _moons(yt, rng_t, noise)
    centre = np.array([0.5, 0.25])
    a = np.deg2rad(rotation_degrees)
    rot = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
    xt = (xt - centre) @ rot + centre
    return DomainPairDataset(
        xs.astype(np.float32), ys, xt.astype(np.float32), yt, 2, (2,), "twomoons", ("upper", "lower")
    )


def load_image_folder(path, input_shape=(1, IMAGE_SIZE, IMAGE_SIZE), class_names=None):
    """Read a ``<class>/<image>`` tree into ``(x, y, class_names)``.

    Images are converted to grayscale or RGB to match ``input_shape[0]``,
    resized to its spatial size and scaled to ``[0, 1]``.
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder not found: {root}")
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise ValueError(f"no class subdirectories in {root}")
    c, h, w = input_shape
    if c not in (1, 3):
        raise ValueError("image folders support 1 or 3 channels")
    xs, ys = [], []
    for k, name in enumerate(class_names):
        cdir = root / name
        files = sorted(f for f in cdir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) if cdir.is_dir() else []
        for f in files:
            with Image.open(f) as im:
                im = im.convert("L" if c == 1 else "RGB").resize((w, h), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            xs.append(arr[None] if c == 1 else arr.transpose(2, 0, 1))
            ys.append(k)
    if not xs:
        raise ValueError(f"no images found under {root}")
    return np.stack(xs), np.asarray(ys, dtype=np.int64), tuple(class_names)


def make_folder_dataset(path, input_shape=(1, IMAGE_SIZE, IMAGE_SIZE)) -> DomainPairDataset:
    """Domain pair from ``<path>/source/<class>/*`` and ``<path>/target/<class>/*``."""
    root = Path(path)
    xs, ys, names = load_image_folder(root / "source", input_shape)
    xt, yt, _ = load_image_folder(root / "target", input_shape, class_names=names)
    return DomainPairDataset(xs, ys, xt, yt, len(names), tuple(input_shape), f"folder:{root}", names)


def save_dataset(ds: DomainPairDataset, path):
    np.savez_compressed(
        path,
        source_x=ds.source_x,
        source_y=ds.source_y,
        target_x=ds.target_x,
        target_y=ds._target_y,
        class_names=np.asarray(ds.class_names),
        input_shape=np.asarray(ds.input_shape),
    )


def load_dataset(path) -> DomainPairDataset:
    with np.load(path) as z:
        names = tuple(str(s) for s in z["class_names"])
        return DomainPairDataset(
            z["source_x"], z["source_y"], z["target_x"], z["target_y"],
            len(names), tuple(int(v) for v in z["input_shape"]), f"file:{path}", names,
        )
