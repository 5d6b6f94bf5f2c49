"""Image datasets: a synthetic CIFAR-shaped generator and real-archive adapters.

Images are float32 arrays in NCHW layout with values in [0, 1].
"""
from __future__ import annotations

import hashlib
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_CLASSES = (
    "disk", "square", "triangle", "plus", "ring",
    "hstripes", "vstripes", "xcross", "checker", "diamond",
)


@dataclass
class ImageSet:
    images: np.ndarray  # [n, c, h, w] float32 in [0, 1]
    labels: np.ndarray | None  # [n] int64, or None for unlabeled data
    source: str = "synthetic"

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return ImageSet(self.images[idx], labels, self.source)

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def checksum(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


def _shape_mask(cls: int, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    rad = np.sqrt(dx**2 + dy**2)
    w = max(1.5, r / 3.5)
    if cls == 0:
        return rad <= r
    if cls == 1:
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if cls == 2:
        return (v <= r * 0.7) & (v >= -r + 2.0 * np.abs(u))
    if cls == 3:
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if cls == 4:
        return (rad <= r) & (rad >= r * 0.55)
    if cls == 5:
        return (np.abs(u) <= r) & (np.abs(v) <= r) & (np.mod(v + r, 2 * w) < w)
    if cls == 6:
        return (np.abs(u) <= r) & (np.abs(v) <= r) & (np.mod(u + r, 2 * w) < w)
    if cls == 7:
        d1 = np.abs(u - v) / np.sqrt(2)
        d2 = np.abs(u + v) / np.sqrt(2)
        return ((d1 <= w * 0.8) | (d2 <= w * 0.8)) & (rad <= r * 1.1)
    if cls == 8:
        cell = max(2.0, r / 2.5)
        par = (np.floor((u + r) / cell) + np.floor((v + r) / cell)) % 2 == 0
        return (np.abs(u) <= r) & (np.abs(v) <= r) & par
    if cls == 9:
        l1 = np.abs(u) + np.abs(v)
        return (l1 <= r * 1.15) & (l1 >= r * 0.6)
    raise ValueError(cls)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def make_synthetic(n: int, seed: int, size: int = 32, num_classes: int = 10,
                   hue_jitter: float = 0.06) -> ImageSet:
    """Labeled synthetic images: one geometric shape per class on a noisy background.

    Every class has a characteristic foreground and background hue (jittered
    per sample) in addition to its shape, the way natural image classes come
    with typical colors. Placement, scale, rotation, saturation and value are
    random per sample. Classes are balanced.
    """
    if not 2 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPE_CLASSES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    out = np.empty((n, 3, size, size), dtype=np.float32)
    s = size / 32.0
    for i in range(n):
        c = int(labels[i])
        fh = (c / num_classes + rng.normal(0, hue_jitter)) % 1.0
        bh = (c * 3 / num_classes + 0.5 + rng.normal(0, hue_jitter)) % 1.0
        fg = _hsv_to_rgb(fh, rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.0))
        bg = _hsv_to_rgb(bh, rng.uniform(0.2, 0.7), rng.uniform(0.15, 0.55))
        # smooth background gradient
        gdir = rng.normal(size=2)
        grad = (gdir[0] * (yy / size - 0.5) + gdir[1] * (xx / size - 0.5)) * 0.25
        img = bg[:, None, None] + grad[None]
        cy = size / 2 + rng.uniform(-4, 4) * s
        cx = size / 2 + rng.uniform(-4, 4) * s
        r = rng.uniform(7, 11) * s
        mask = _shape_mask(c, yy, xx, cy, cx, r, rng.uniform(-0.4, 0.4))
        img = np.where(mask[None], fg[:, None, None], img)
        img = img + rng.normal(0, 0.04, img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
    return ImageSet(out, labels.astype(np.int64), "synthetic")


def load_cifar10_batches(root: str | os.PathLike, train: bool = True) -> ImageSet:
    """Read the packed python batches of CIFAR-10 (``data_batch_*``/``test_batch``)."""
    root = Path(root)
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise FileNotFoundError(path)
        with open(path, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        xs.append(np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch[b"labels"], dtype=np.int64))
    images = np.concatenate(xs).astype(np.float32) / 255.0
    return ImageSet(images, np.concatenate(ys), "cifar10")


def load_image_folder(root: str | os.PathLike, size: int = 32) -> ImageSet:
    """Directory-per-class layout; images are resized to ``size`` x ``size``."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    xs, ys = [], []
    for ci, cname in enumerate(classes):
        for path in sorted((root / cname).iterdir()):
            if path.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            with Image.open(path) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                xs.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            ys.append(ci)
    return ImageSet(np.stack(xs), np.asarray(ys, dtype=np.int64), f"folder:{root.name}")


def cifar10_root() -> Path | None:
    """Location of real CIFAR-10 batches, if any (``SSLMARK_CIFAR10`` env var)."""
    env = os.environ.get("SSLMARK_CIFAR10")
    if env and (Path(env) / "data_batch_1").exists():
        return Path(env)
    return None


def load_dataset(name: str, n: int, seed: int, split: str = "train") -> ImageSet:
    """Dataset factory used by the harness.

    ``name`` is ``synthetic``, ``cifar10`` or ``folder:<path>``. For real
    datasets a seeded random subset of size ``n`` is drawn.
    """
    if name == "synthetic":
        # train and test draw from disjoint generator streams
        offset = {"train": 0, "test": 1_000_003, "aux": 2_000_003}[split]
        return make_synthetic(n, seed + offset)
    if name == "cifar10":
        root = cifar10_root()
        if root is None:
            raise FileNotFoundError("set SSLMARK_CIFAR10 to a directory holding CIFAR-10 batches")
        full = load_cifar10_batches(root, train=(split != "test"))
    elif name.startswith("folder:"):
        full = load_image_folder(name.split(":", 1)[1])
    else:
        raise ValueError(f"unknown dataset {name!r}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(full), min(n, len(full)), replace=False))
    return full.subset(idx)
