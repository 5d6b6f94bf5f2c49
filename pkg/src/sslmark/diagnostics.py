"""Statistics that separate a dense out-of-distribution watermark cluster
from an entangled one: intra-watermark similarity, prediction bias and
PCA scatter exports. Everything here is read-only on the models."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import stats
from .models import encode


@dataclass(frozen=True)
class ClusterStats:
    mean_pairwise_cos: float
    clean_reference_cos: float
    delta: float
    n_used: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BiasStats:
    top_class_fraction: float
    mad: float
    class_histogram: tuple

    @property
    def total(self) -> int:
        return int(sum(self.class_histogram))

    def to_dict(self):
        d = asdict(self)
        d["class_histogram"] = list(self.class_histogram)
        return d


def mean_pairwise_cosine(reps: np.ndarray) -> tuple:
    """Mean cosine over all unordered pairs of rows, skipping zero rows.

    Returns (mean, rows used).
    """
    R = np.asarray(reps, dtype=np.float64)
    norms = np.linalg.norm(R, axis=1)
    keep = norms > 0
    U = R[keep] / norms[keep, None]
    n = len(U)
    if n < 2:
        raise ValueError("need at least 2 nonzero representations")
    s = U.sum(axis=0)
    # sum over i != j of u_i.u_j = |sum u|^2 - sum |u_i|^2
    total = float(s @ s) - n
    return float(np.clip(total / (n * (n - 1)), -1.0, 1.0)), n


def intra_watermark_similarity(encoder, shadow) -> ClusterStats:
    """Mean pairwise cosine among watermark-sample representations, with the
    same statistic over the paired clean samples as reference."""
    if shadow.S < 2:
        raise ValueError("need at least 2 probing pairs")
    wm, n = mean_pairwise_cosine(encode(encoder, shadow.triggered))
    ref, _ = mean_pairwise_cosine(encode(encoder, shadow.clean))
    return ClusterStats(wm, ref, wm - ref, n)


def bias_from_predictions(pred: np.ndarray, num_classes: int) -> BiasStats:
    hist = np.bincount(np.asarray(pred, dtype=np.int64), minlength=num_classes)
    mad = float(np.median(np.abs(hist - np.median(hist))))
    return BiasStats(float(hist.max() / hist.sum()), mad, tuple(int(v) for v in hist))


def prediction_bias(model, triggered_samples: np.ndarray) -> BiasStats:
    """Histogram of the downstream model's argmax predictions on triggered inputs.

    MAD is the median absolute deviation of the per-class counts.
    """
    if len(triggered_samples) < 20:
        raise ValueError("prediction bias needs at least 20 triggered samples")
    probs = model.predict_proba(np.asarray(triggered_samples, dtype=np.float32))
    return bias_from_predictions(probs.argmax(axis=1), probs.shape[1])


def export_pca_scatter(encoder, clean_batch: np.ndarray, shadow, path) -> tuple:
    """Project clean and watermark representations to 2-D and write
    ``<path>.csv`` (columns x, y, label) and ``<path>.png``."""
    path = Path(path)
    if len(clean_batch) == 0:
        raise ValueError("clean batch is empty")
    rc = encode(encoder, clean_batch)
    wm = shadow.triggered if shadow is not None else np.zeros((0,) + clean_batch.shape[1:], np.float32)
    rw = encode(encoder, wm) if len(wm) else np.zeros((0, rc.shape[1]))
    R = np.concatenate([rc, rw])
    xy = stats.pca_project(R, 2) if len(R) >= 2 else np.zeros((len(R), 2))
    labels = ["clean"] * len(rc) + ["watermark"] * len(rw)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(xy, labels):
            w.writerow([repr(float(x)), repr(float(y)), lab])
    png_path = path.with_suffix(".png")
    _plot_scatter(xy, labels, png_path)
    return csv_path, png_path


def load_scatter(csv_path) -> tuple:
    """Read an exported scatter back as (xy [n, 2], labels)."""
    xs, labels = [], []
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            xs.append((float(row["x"]), float(row["y"])))
            labels.append(row["label"])
    return np.asarray(xs, dtype=np.float64).reshape(-1, 2), np.asarray(labels)


def mean_pairwise_distance(points: np.ndarray) -> float:
    P = np.asarray(points, dtype=np.float64)
    n = len(P)
    if n < 2:
        return 0.0
    d = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(-1))
    return float(d.sum() / (n * (n - 1)))


def _plot_scatter(xy, labels, png_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(4, 4))
    for lab, color, size in (("clean", "tab:blue", 6), ("watermark", "tab:red", 10)):
        m = labels == lab
        if m.any():
            ax.scatter(xy[m, 0], xy[m, 1], s=size, c=color, label=lab, alpha=0.6, linewidths=0)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def write_json(obj: dict, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
