"""Encoder backbones, downstream classifiers and checkpoint persistence."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHITECTURES = {
    # name: stage widths of the 4-stage conv backbone
    "conv4-small": (16, 32, 64, 128),
    "conv4": (32, 64, 128, 128),
}


def _stage(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ConvEncoder(nn.Module):
    """Four conv-BN-ReLU stages with max pooling between them and global
    average pooling at the end. Output dimension is the last stage width."""

    def __init__(self, arch: str = "conv4", provenance: str = "clean"):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        w = ARCHITECTURES[arch]
        self.arch = arch
        self.provenance = provenance
        self.features = nn.Sequential(
            _stage(3, w[0]), nn.MaxPool2d(2),
            _stage(w[0], w[1]), nn.MaxPool2d(2),
            _stage(w[1], w[2]), nn.MaxPool2d(2),
            _stage(w[2], w[3]),
        )
        self.dim = w[3]

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


class ToyEncoder(nn.Module):
    """Two-layer tanh MLP on flattened inputs; used for gradient checks."""

    def __init__(self, in_dim: int = 6, hidden: int = 8, dim: int = 6, provenance: str = "clean"):
        super().__init__()
        self.arch = f"toy-{in_dim}-{hidden}-{dim}"
        self.provenance = provenance
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, dim))
        self.dim = dim

    def forward(self, x):
        return self.net(x.flatten(1))


class DownstreamModel(nn.Module):
    """softmax(head(encoder(x))): an encoder with a linear classification head."""

    def __init__(self, encoder: nn.Module, num_classes: int, task: str = "task"):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.dim, num_classes)
        self.task = task

    def forward(self, x):
        return self.head(self.encoder(x))

    @torch.no_grad()
    def predict_proba(self, images, batch_size: int = 512) -> np.ndarray:
        self.eval()
        out = []
        for i in range(0, len(images), batch_size):
            xb = torch.as_tensor(images[i : i + batch_size])
            out.append(torch.softmax(self(xb).double(), dim=1).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.head.out_features))


def clone(module: nn.Module, provenance: str | None = None) -> nn.Module:
    m = copy.deepcopy(module)
    if provenance is not None:
        if isinstance(m, DownstreamModel):
            m.encoder.provenance = provenance
        else:
            m.provenance = provenance
    return m


@torch.no_grad()
def encode(encoder: nn.Module, images, batch_size: int = 512) -> np.ndarray:
    """Evaluation-mode representations as float64 numpy."""
    was_training = encoder.training
    encoder.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(encoder(torch.as_tensor(images[i : i + batch_size])).double().numpy())
    encoder.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, encoder.dim))


def param_checksum(module: nn.Module) -> str:
    """Content hash over parameters and buffers in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(module: nn.Module, path, manifest: dict | None = None) -> Path:
    """Write ``<path>/model.pt`` plus ``<path>/manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path / "model.pt")
    enc = module.encoder if isinstance(module, DownstreamModel) else module
    meta = {
        "kind": "downstream" if isinstance(module, DownstreamModel) else "encoder",
        "architecture": enc.arch,
        "dim": enc.dim,
        "provenance": enc.provenance,
        "content_hash": param_checksum(module),
    }
    if isinstance(module, DownstreamModel):
        meta["num_classes"] = module.head.out_features
        meta["task"] = module.task
    meta.update(manifest or {})
    (path / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> nn.Module:
    path = Path(path)
    meta = json.loads((path / "manifest.json").read_text())
    enc = ConvEncoder(meta["architecture"], meta["provenance"])
    if meta["kind"] == "downstream":
        module = DownstreamModel(enc, meta["num_classes"], meta.get("task", "task"))
    else:
        module = enc
    module.load_state_dict(torch.load(path / "model.pt", weights_only=True))
    module.eval()
    return module
