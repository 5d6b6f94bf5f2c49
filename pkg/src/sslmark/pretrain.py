"""Desk-scale SimCLR pretraining, the negative-suspect factory and utility probes."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import ConvEncoder, encode, param_checksum

log = logging.getLogger(__name__)


class CollapseError(RuntimeError):
    """Raised when pretraining collapses all representations to a point."""


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize every layer from a private generator (PyTorch default schemes)."""
    g = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
            if m.bias is not None:
                fan_in = m.weight[0].numel()
                bound = 1 / math.sqrt(fan_in)
                nn.init.uniform_(m.bias, -bound, bound, generator=g)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
    return module


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.2, 1.0)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_p: float = 0.2


def _gray(x):
    return (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])


def augment(x: torch.Tensor, g: torch.Generator, cfg: AugmentConfig = AugmentConfig()) -> torch.Tensor:
    """Batched SimCLR view: crop-resize, flip, color jitter, grayscale.

    No Gaussian blur. Output stays in [0, 1].
    """
    n = x.shape[0]
    u = lambda *s: torch.rand(*s, generator=g)
    lo, hi = cfg.crop_scale
    area = lo + (hi - lo) * u(n)
    logr = math.log(3 / 4) + (math.log(4 / 3) - math.log(3 / 4)) * u(n)
    ratio = torch.exp(logr)
    w = torch.sqrt(area * ratio).clamp(max=1.0)
    h = torch.sqrt(area / ratio).clamp(max=1.0)
    cx = (1 - w) * (2 * u(n) - 1)
    cy = (1 - h) * (2 * u(n) - 1)
    flip = torch.where(u(n) < cfg.flip_p, -1.0, 1.0)
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0] = w * flip
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)

    jit = (u(n) < cfg.jitter_p).float()[:, None, None, None]
    b = 1 + cfg.brightness * (2 * u(n) - 1)
    c = 1 + cfg.contrast * (2 * u(n) - 1)
    s = 1 + cfg.saturation * (2 * u(n) - 1)
    hue = cfg.hue * (2 * u(n) - 1) * 2 * math.pi
    y = out * b[:, None, None, None]
    m = _gray(y).mean(dim=(2, 3), keepdim=True)
    y = (y - m) * c[:, None, None, None] + m
    gy = _gray(y)
    y = (y - gy) * s[:, None, None, None] + gy
    # hue rotation in YIQ space
    yiq = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    rgb = torch.linalg.inv(yiq)
    q = torch.einsum("ij,njhw->nihw", yiq, y.clamp(0, 1))
    cos, sin = torch.cos(hue)[:, None, None], torch.sin(hue)[:, None, None]
    i2 = q[:, 1] * cos - q[:, 2] * sin
    q2 = q[:, 1] * sin + q[:, 2] * cos
    y = torch.einsum("ij,njhw->nihw", rgb, torch.stack([q[:, 0], i2, q2], dim=1))
    out = jit * y.clamp(0, 1) + (1 - jit) * out

    gray = (u(n) < cfg.gray_p).float()[:, None, None, None]
    out = gray * _gray(out).expand_as(out) + (1 - gray) * out
    return out.clamp(0.0, 1.0)


# -------------------------------------------------------------------- SimCLR

def nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Normalized-temperature cross entropy over 2n views."""
    n = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.t() / temperature
    sim.fill_diagonal_(float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, target)


@dataclass(frozen=True)
class PretrainConfig:
    dataset: str = "synthetic"
    subset_size: int = 10000
    arch: str = "conv4-small"
    batch_size: int = 256
    temperature: float = 0.5
    proj_dim: int = 64
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-6
    seed: int = 0
    data_seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self):
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            a = dict(d["augment"])
            a["crop_scale"] = tuple(a.get("crop_scale", (0.2, 1.0)))
            d["augment"] = AugmentConfig(**a)
        return cls(**d)


class SSLMethod:
    """Interface for self-supervised objectives; only SimCLR ships."""

    name = "base"

    def build(self, encoder: nn.Module, cfg: PretrainConfig) -> nn.Module:
        raise NotImplementedError

    def loss(self, head: nn.Module, encoder, x: torch.Tensor, g, cfg) -> torch.Tensor:
        raise NotImplementedError


class SimCLR(SSLMethod):
    name = "simclr"

    def build(self, encoder, cfg):
        return nn.Sequential(
            nn.Linear(encoder.dim, encoder.dim), nn.ReLU(inplace=True), nn.Linear(encoder.dim, cfg.proj_dim)
        )

    def loss(self, head, encoder, x, g, cfg):
        v1 = augment(x, g, cfg.augment)
        v2 = augment(x, g, cfg.augment)
        z = head(encoder(torch.cat([v1, v2])))
        return nt_xent(z[: len(x)], z[len(x):], cfg.temperature)


def pretrain_simclr(cfg: PretrainConfig, images: np.ndarray, method: SSLMethod | None = None,
                    log_every: int = 5):
    """Train a clean encoder from scratch; returns (encoder, history dict)."""
    if cfg.temperature <= 0:
        raise ValueError("temperature must be positive")
    if cfg.subset_size > len(images):
        raise ValueError(f"subset_size {cfg.subset_size} exceeds dataset size {len(images)}")
    method = method or SimCLR()
    images = images[: cfg.subset_size]
    encoder = init_params(ConvEncoder(cfg.arch, "clean"), cfg.seed)
    head = init_params(method.build(encoder, cfg), cfg.seed + 1)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(cfg.seed + 2)
    data = torch.as_tensor(images)
    n = len(data)
    history = {"loss": [], "seconds": []}
    encoder.train()
    head.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=g)
        total, count = 0.0, 0
        for i in range(0, n - 1, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = method.loss(head, encoder, data[idx], g, cfg)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite contrastive loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history["loss"].append(total / max(count, 1))
        history["seconds"].append(time.perf_counter() - t0)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("pretrain epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history["loss"][-1])
    encoder.eval()
    reps = encode(encoder, images[: min(512, n)])
    if reps.var(axis=0).sum() < 1e-6:
        raise CollapseError("representation variance below 1e-6 after pretraining")
    return encoder, history


# ----------------------------------------------------------------- negatives

@dataclass(frozen=True)
class NegativeVariantSpec:
    variant: str  # v1 | v2 | v3 | v4
    temperature_scale: float = 2.0
    lr_scale: float = 0.5
    data_offset: int = 7919
    seed_offset: int = 104729

    def apply(self, base: PretrainConfig) -> PretrainConfig:
        if self.variant not in {"v1", "v2", "v3", "v4"}:
            raise ValueError(f"unknown negative variant {self.variant!r}")
        cfg = replace(base, seed=base.seed + self.seed_offset + int(self.variant[1]))
        if self.variant in {"v1", "v4"}:
            cfg = replace(cfg, data_seed=base.data_seed + self.data_offset)
        if self.variant in {"v2", "v4"}:
            cfg = replace(cfg, temperature=base.temperature * self.temperature_scale,
                          lr=base.lr * self.lr_scale)
        return cfg


def make_negatives(base_cfg: PretrainConfig, specs, data_for):
    """Train one independent encoder per spec.

    ``data_for(cfg)`` returns the pretraining images for a config, so
    variants that change the data draw a different subset.
    """
    out = []
    for spec in specs:
        cfg = spec.apply(base_cfg)
        enc, hist = pretrain_simclr(cfg, data_for(cfg))
        enc.provenance = f"negative-{spec.variant}"
        out.append((spec, cfg, enc, hist))
    return out


# -------------------------------------------------------------------- probes

def fit_linear_head(features: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
                    epochs: int = 60, lr: float = 5e-3, weight_decay: float = 1e-5,
                    batch_size: int = 256, seed: int = 0) -> nn.Linear:
    """Softmax regression on frozen features with Adam."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least 2 classes")
    num_classes = num_classes or int(labels.max()) + 1
    X = torch.as_tensor(features, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    head = init_params(nn.Linear(X.shape[1], num_classes), seed)
    opt = torch.optim.Adam(head.parameters(), lr=lr, weight_decay=weight_decay)
    g = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(len(X), generator=g)
        for i in range(0, len(X), batch_size):
            idx = perm[i : i + batch_size]
            loss = F.cross_entropy(head(X[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return head


def knn_accuracy(train_feats, train_labels, test_feats, test_labels, k: int = 20) -> float:
    def unit(a):
        a = np.asarray(a, dtype=np.float64)
        return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)

    tr, te = unit(train_feats), unit(test_feats)
    train_labels = np.asarray(train_labels)
    C = int(max(train_labels.max(), np.max(test_labels))) + 1
    correct = 0
    for i in range(0, len(te), 1024):
        sim = te[i : i + 1024] @ tr.T
        nn_idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(nn_idx), C))
        for j in range(k):
            np.add.at(votes, (np.arange(len(nn_idx)), train_labels[nn_idx[:, j]]),
                      1.0 + 1e-6 * sim[np.arange(len(nn_idx)), nn_idx[:, j]])
        correct += int(np.sum(votes.argmax(1) == test_labels[i : i + 1024]))
    return correct / len(te)


def linear_probe_accuracy(encoder, train, test, knn: bool = False, seed: int = 0, **head_kw) -> float:
    """Frozen-encoder accuracy on ``test`` after fitting on ``train`` (ImageSets)."""
    if len(np.unique(train.labels)) < 2:
        raise ValueError("need at least 2 classes")
    ftr = encode(encoder, train.images)
    fte = encode(encoder, test.images)
    if knn:
        return knn_accuracy(ftr, train.labels, fte, test.labels)
    head = fit_linear_head(ftr, train.labels, max(train.num_classes, test.num_classes), seed=seed, **head_kw)
    with torch.no_grad():
        pred = head(torch.as_tensor(fte, dtype=torch.float32)).argmax(1).numpy()
    return float(np.mean(pred == test.labels))


def lineage(encoder) -> dict:
    return {"content_hash": param_checksum(encoder), "provenance": encoder.provenance}
