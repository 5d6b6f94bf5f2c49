"""Trigger patterns, source-cluster selection, probing pairs and anchors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stats
from .models import encode

S_SMALL = 200  # probing pairs for CIFAR-10 / Imagenette-sized pretraining sets
S_LARGE = 500  # probing pairs for full ImageNet pretraining


def default_shadow_size(dataset: str) -> int:
    return S_LARGE if dataset.lower() == "imagenet" else S_SMALL


@dataclass(frozen=True)
class TriggerPattern:
    patch: np.ndarray  # [h, w, c] in [0, 1]
    position: tuple  # (row, col) of the top-left corner
    blend: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.patch, dtype=np.float32)
        if p.ndim != 3:
            raise ValueError("patch must be [h, w, c]")
        if p.min() < 0 or p.max() > 1:
            raise ValueError("patch values must lie in [0, 1]")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")
        object.__setattr__(self, "patch", p)
        object.__setattr__(self, "position", tuple(int(v) for v in self.position))

    def footprint(self, height: int, width: int) -> tuple:
        r, c = self.position
        h, w, _ = self.patch.shape
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise ValueError(f"trigger footprint {(r, c, h, w)} exceeds image {height}x{width}")
        return slice(r, r + h), slice(c, c + w)

    def to_dict(self) -> dict:
        return {"patch": self.patch.tolist(), "position": list(self.position), "blend": self.blend}

    @classmethod
    def from_dict(cls, d) -> "TriggerPattern":
        return cls(np.asarray(d["patch"], dtype=np.float32), tuple(d["position"]), float(d["blend"]))


def default_trigger(image_size: int = 32, channels: int = 3, value: float = 1.0,
                    blend: float = 1.0) -> TriggerPattern:
    """Solid patch in the bottom-right corner: 6x6 at 32px, 24x24 at 224px."""
    side = 24 if image_size >= 224 else max(1, round(6 * image_size / 32))
    patch = np.full((side, side, channels), value, dtype=np.float32)
    return TriggerPattern(patch, (image_size - side, image_size - side), blend)


def apply_trigger(images, trigger: TriggerPattern) -> np.ndarray:
    """Composite the trigger onto one image [c,h,w] or a batch [n,c,h,w]."""
    x = np.asarray(images, dtype=np.float32)
    if x.min(initial=0.0) < 0 or x.max(initial=0.0) > 1:
        raise ValueError("image values must lie in [0, 1]")
    rs, cs = trigger.footprint(x.shape[-2], x.shape[-1])
    if trigger.patch.shape[2] != x.shape[-3]:
        raise ValueError("trigger channel count does not match image")
    out = x.copy()
    if trigger.blend == 0.0:
        return out
    patch = np.moveaxis(trigger.patch, -1, 0)  # [c, h, w]
    region = out[..., :, rs, cs]
    out[..., :, rs, cs] = np.clip((1 - trigger.blend) * region + trigger.blend * patch, 0.0, 1.0)
    return out


# ------------------------------------------------------------- source cluster

@dataclass
class SourceSelection:
    cluster_id: int
    member_indices: np.ndarray  # dataset indices in the chosen cluster
    member_distances: np.ndarray  # distance of each member to its center
    sample_indices: np.ndarray  # dataset indices that were clustered
    labels: np.ndarray  # cluster label per clustered sample
    centers: np.ndarray  # [k, d] in normalized representation space
    reps: np.ndarray  # raw representations of the clustered samples
    k: int
    seed: int


def _unit(a):
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)


def select_source_class(encoder, images: np.ndarray, k_clusters: int = 10, seed: int = 0,
                        subsample: int | None = 4000, min_size: int = 1) -> SourceSelection:
    """Cluster encoder representations and pick one cluster at random.

    Clustering runs on L2-normalized representations. A drawn cluster that
    holds fewer than ``min_size`` members is redrawn among the large-enough
    ones.
    """
    if k_clusters < 2:
        raise ValueError("k_clusters must be >= 2")
    rng = np.random.default_rng(seed)
    n = len(images)
    if subsample is not None and subsample < n:
        sample = np.sort(rng.choice(n, subsample, replace=False))
    else:
        sample = np.arange(n)
    reps = encode(encoder, images[sample])
    Z = _unit(reps)
    km = stats.kmeans(Z, k_clusters, seed=seed)
    counts = np.bincount(km.labels, minlength=k_clusters)
    if counts.max() <= 1:
        raise ValueError("clustering produced only singleton clusters; lower k_clusters")
    cid = int(rng.integers(k_clusters))
    if counts[cid] < max(min_size, 1):
        ok = np.flatnonzero(counts >= max(min_size, 1))
        if ok.size == 0:
            raise ValueError(f"no cluster has at least {min_size} members")
        cid = int(rng.choice(ok))
    members = np.flatnonzero(km.labels == cid)
    dist = np.linalg.norm(Z[members] - km.centers[cid], axis=1)
    return SourceSelection(cid, sample[members], dist, sample, km.labels, km.centers, reps,
                           k_clusters, seed)


# ------------------------------------------------------------- shadow dataset

@dataclass
class ShadowDataset:
    clean: np.ndarray  # [S, c, h, w]
    triggered: np.ndarray  # [S, c, h, w]
    source_indices: np.ndarray  # dataset index of every clean sample
    source_cluster_id: int
    trigger: TriggerPattern
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return len(self.clean)

    def __len__(self):
        return self.S

    def head(self, k: int) -> "ShadowDataset":
        return ShadowDataset(self.clean[:k], self.triggered[:k], self.source_indices[:k],
                             self.source_cluster_id, self.trigger, self.seed, dict(self.meta))

    def permuted(self, perm) -> "ShadowDataset":
        perm = np.asarray(perm)
        return ShadowDataset(self.clean[perm], self.triggered[perm], self.source_indices[perm],
                             self.source_cluster_id, self.trigger, self.seed, dict(self.meta))

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path / "pairs.npz", clean=self.clean, triggered=self.triggered,
                            source_indices=self.source_indices)
        manifest = {
            "S": self.S,
            "seed": self.seed,
            "source_cluster_id": self.source_cluster_id,
            "pair_order": [int(i) for i in self.source_indices],
            "trigger": self.trigger.to_dict(),
            **self.meta,
        }
        (path / "shadow.json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "ShadowDataset":
        path = Path(path)
        m = json.loads((path / "shadow.json").read_text())
        with np.load(path / "pairs.npz") as z:
            clean, trig, idx = z["clean"], z["triggered"], z["source_indices"]
        meta = {k: v for k, v in m.items()
                if k not in {"S", "seed", "source_cluster_id", "pair_order", "trigger"}}
        return cls(clean, trig, idx, int(m["source_cluster_id"]), TriggerPattern.from_dict(m["trigger"]),
                   int(m["seed"]), meta)


def build_shadow_dataset(selection: SourceSelection, images: np.ndarray, trigger: TriggerPattern,
                         S: int = 200, seed: int = 0) -> ShadowDataset:
    """Take the S members closest to the source-cluster center and trigger them."""
    members = selection.member_indices
    if S > len(members):
        raise ValueError(f"S={S} exceeds the {len(members)} members of the source cluster")
    order = np.lexsort((members, selection.member_distances))
    chosen = members[order[:S]]
    clean = np.ascontiguousarray(images[chosen], dtype=np.float32)
    return ShadowDataset(clean, apply_trigger(clean, trigger), chosen, selection.cluster_id,
                         trigger, seed)


# -------------------------------------------------------------------- anchors

@dataclass
class AnchorSet:
    anchors: np.ndarray  # [A, d]
    assignment: np.ndarray  # [S] anchor index per watermark sample
    anchor_sources: np.ndarray  # dataset index of the sample behind each anchor
    anchor_clusters: np.ndarray  # cluster id of each anchor

    @property
    def A(self) -> int:
        return len(self.anchors)

    def assigned(self) -> np.ndarray:
        """[S, d] anchor vector for every watermark sample."""
        return self.anchors[self.assignment]

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "anchors.npy", self.anchors)
        manifest = {
            "A": self.A,
            "assignment": [int(v) for v in self.assignment],
            "anchor_sources": [int(v) for v in self.anchor_sources],
            "anchor_clusters": [int(v) for v in self.anchor_clusters],
        }
        (path / "anchors.json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "AnchorSet":
        path = Path(path)
        m = json.loads((path / "anchors.json").read_text())
        return cls(np.load(path / "anchors.npy"), np.asarray(m["assignment"]),
                   np.asarray(m["anchor_sources"]), np.asarray(m["anchor_clusters"]))


def compute_anchors(encoder, images: np.ndarray, selection: SourceSelection, A: int = 4,
                    S: int = 200, seed: int = 0) -> AnchorSet:
    """Anchors are representations of the samples nearest to A non-source centers.

    The non-source clusters are drawn at random from the seed; watermark
    sample i is assigned to anchor i mod A.
    """
    others = [c for c in range(selection.k) if c != selection.cluster_id
              and np.any(selection.labels == c)]
    if A < 1 or A > len(others):
        raise ValueError(f"need {A} non-source clusters, only {len(others)} available")
    rng = np.random.default_rng(seed + 1)
    picked = np.sort(rng.choice(others, A, replace=False))
    Z = _unit(selection.reps)
    sources, vecs = [], []
    for c in picked:
        members = np.flatnonzero(selection.labels == c)
        d = np.linalg.norm(Z[members] - selection.centers[c], axis=1)
        best = members[np.lexsort((members, d))[0]]
        sources.append(selection.sample_indices[best])
    sources = np.asarray(sources)
    # recompute from the images so anchors are exact encoder outputs
    vecs = encode(encoder, images[sources])
    return AnchorSet(vecs, np.arange(S) % A, sources, picked)
