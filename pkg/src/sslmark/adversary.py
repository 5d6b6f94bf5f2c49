"""Attacks that produce suspect models from a (watermarked) encoder.

Every attack works on a copy; the input model is never modified.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embed import EmbeddingError, ref_term, wm_term
from .models import DownstreamModel, clone, encode
from .pretrain import fit_linear_head
from .shadow import ShadowDataset, TriggerPattern, apply_trigger

log = logging.getLogger(__name__)

ATTACK_KINDS = ("DT", "FT", "PRUNE", "OVERWRITE", "UNLEARN", "ADAPTIVE")


@dataclass
class AttackConfig:
    kind: str = "DT"
    r: float = 0.0  # pruning fraction
    psi: float = 0.0  # removal weight of the adaptive attack
    epochs: int = 10
    lr: float = 1e-3
    decay: float = 1e-6
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("pruning fraction must lie in [0, 1]")
        if self.psi < 0:
            raise ValueError("psi must be non-negative")

    def params_string(self) -> str:
        if self.kind == "PRUNE":
            return f"r={self.r:g}"
        if self.kind == "ADAPTIVE":
            return f"psi={self.psi:g}"
        if self.kind in ("FT", "OVERWRITE", "UNLEARN"):
            return f"epochs={self.epochs};lr={self.lr:g}"
        return ""

    def to_dict(self):
        return asdict(self)


def _batches(n, batch_size, g):
    perm = torch.randperm(n, generator=g)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def transfer_downstream(encoder, task, epochs: int = 60, lr: float = 5e-3, seed: int = 0,
                        task_id: str = "task") -> DownstreamModel:
    """Direct theft: copy the encoder, freeze it, and train a linear head."""
    if task.labels is None or len(np.unique(task.labels)) < 2:
        raise ValueError("downstream data needs at least 2 classes")
    enc = clone(encoder)
    enc.eval()
    feats = encode(enc, task.images)
    head = fit_linear_head(feats, task.labels, task.num_classes, epochs=epochs, lr=lr, seed=seed)
    model = DownstreamModel(enc, task.num_classes, task_id)
    model.head.load_state_dict(head.state_dict())
    model.eval()
    return model


def accuracy(model: DownstreamModel, data) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(model.predict_proba(data.images).argmax(1) == data.labels))


def attack_finetune(model: DownstreamModel, task, lr: float = 1e-3, decay: float = 1e-6,
                    max_epochs: int = 100, patience: int = 5, batch_size: int = 128,
                    momentum: float = 0.9, val_fraction: float = 0.1, seed: int = 0):
    """Fine-tune every layer on the downstream task.

    SGD whose rate decays as lr / (1 + decay * iteration). Stops when the
    validation loss has not improved for ``patience`` epochs or at
    ``max_epochs``. Returns (model, history).
    """
    ft = clone(model)
    history = {"train_loss": [], "val_loss": []}
    if max_epochs <= 0:
        ft.eval()
        return ft, history
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(task))
    n_val = max(1, int(len(task) * val_fraction))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    X = torch.as_tensor(task.images)
    y = torch.as_tensor(task.labels)
    Xtr, ytr, Xval, yval = X[tr_idx], y[tr_idx], X[val_idx], y[val_idx]
    opt = torch.optim.SGD(ft.parameters(), lr=lr, momentum=momentum)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: 1.0 / (1.0 + decay * it))
    g = torch.Generator().manual_seed(seed)
    best, stale = float("inf"), 0
    for epoch in range(max_epochs):
        ft.train()
        tot = 0.0
        for idx in _batches(len(Xtr), batch_size, g):
            loss = F.cross_entropy(ft(Xtr[idx]), ytr[idx])
            if not torch.isfinite(loss):
                raise EmbeddingError(f"fine-tuning diverged at epoch {epoch}", history)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            tot += loss.item() * len(idx)
        ft.eval()
        with torch.no_grad():
            vl = F.cross_entropy(ft(Xval), yval).item()
        history["train_loss"].append(tot / len(Xtr))
        history["val_loss"].append(vl)
        if vl < best - 1e-4:
            best, stale = vl, 0
        else:
            stale += 1
            if stale >= patience:
                break
    ft.eval()
    return ft, history


def prunable_weights(module: nn.Module) -> list:
    return [m.weight for m in module.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]


def prune_mask_order(module: nn.Module) -> np.ndarray:
    """Global ascending-magnitude order over all prunable weights (stable)."""
    flat = torch.cat([w.detach().abs().flatten() for w in prunable_weights(module)]).numpy()
    return np.argsort(flat, kind="stable")


def attack_prune(model: DownstreamModel, r: float) -> DownstreamModel:
    """Global unstructured magnitude pruning of the encoder's conv/linear weights.

    The round(r * N) smallest-magnitude weights are set to zero; the head
    is untouched.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError("r must lie in [0, 1]")
    pruned = clone(model)
    weights = prunable_weights(pruned.encoder)
    order = prune_mask_order(pruned.encoder)
    k = int(round(r * len(order)))
    mask = np.ones(len(order), dtype=bool)
    mask[order[:k]] = False
    offset = 0
    with torch.no_grad():
        for w in weights:
            n = w.numel()
            w.mul_(torch.as_tensor(mask[offset : offset + n]).view_as(w).to(w.dtype))
            offset += n
    pruned.encoder.provenance = "attacked-PRUNE"
    pruned.eval()
    return pruned


def _utility_step(enc, ref_enc, x):
    with torch.no_grad():
        r_ref = ref_enc(x)
    return ref_term(enc(x), r_ref)


def attack_overwrite(encoder, trigger: TriggerPattern, aux, target_class_pair=(8, 9),
                     epochs: int = 20, lr: float = 0.01, batch_size: int = 64,
                     success_target: float = 0.8, eval_every: int = 25, seed: int = 0):
    """Plant a pseudo-watermark with the known trigger (BadEncoder-style, simplified).

    Triggered aux samples are pulled toward the representation center of the
    target class while clean aux samples keep their original representations.
    Success is the fraction of triggered source-class aux samples that a
    linear classifier, fit on the attacked encoder's clean aux features,
    assigns to the target class. Training stops as soon as the success rate
    exceeds ``success_target``, checked every ``eval_every`` steps.
    Returns (encoder, info).
    """
    src, tgt = target_class_pair
    if aux.labels is None:
        raise ValueError("overwriting needs labeled auxiliary data")
    ref = clone(encoder)
    ref.eval()
    enc = clone(encoder, provenance="attacked-OVERWRITE")
    enc.eval()
    info = {"success_rate": 0.0, "epochs": 0, "steps": 0, "reached": False}
    if epochs <= 0:
        return enc, info
    reps = encode(ref, aux.images)
    unit = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    centers = np.stack([unit[aux.labels == c].mean(0) for c in range(aux.num_classes)])
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    center_t = torch.as_tensor(centers[tgt], dtype=torch.float32)
    probe = apply_trigger(aux.images[aux.labels == src], trigger)
    X = torch.as_tensor(aux.images)
    Xt = torch.as_tensor(apply_trigger(aux.images, trigger))
    opt = torch.optim.SGD(enc.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)

    def success():
        head = fit_linear_head(encode(enc, aux.images), aux.labels, aux.num_classes, epochs=30, seed=seed)
        with torch.no_grad():
            logits = head(torch.as_tensor(encode(enc, probe), dtype=torch.float32))
        return float(np.mean(logits.argmax(1).numpy() == tgt))

    for epoch in range(epochs):
        for idx in _batches(len(X), batch_size, g):
            l_util = _utility_step(enc, ref, X[idx])
            l_bd = (1.0 - F.cosine_similarity(enc(Xt[idx]), center_t[None], dim=1)).mean()
            loss = l_util + l_bd
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            info["steps"] += 1
            if info["steps"] % eval_every == 0:
                info["success_rate"] = success()
                if info["success_rate"] > success_target:
                    info["reached"] = True
                    break
        info["epochs"] = epoch + 1
        if info["reached"]:
            break
    if not info["reached"]:
        log.warning("overwrite reached only %.2f success", info["success_rate"])
    enc.eval()
    return enc, info


def default_unlearn_trigger(image_size: int = 32) -> TriggerPattern:
    """A checkerboard patch in the top-left corner, unlike the owner's trigger."""
    side = max(2, round(6 * image_size / 32))
    yy, xx = np.mgrid[0:side, 0:side]
    patch = np.repeat(((yy + xx) % 2).astype(np.float32)[:, :, None], 3, axis=2)
    return TriggerPattern(patch, (0, 0), 1.0)


def guess_watermark_samples(shadow: ShadowDataset, aux_images: np.ndarray, overlap: float = 1.0,
                            seed: int = 0) -> np.ndarray:
    """The attacker's guess of the watermark samples: a fraction ``overlap``
    of the true clean probing samples, topped up with random aux images."""
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = int(round(overlap * shadow.S))
    true_part = shadow.clean[np.sort(rng.choice(shadow.S, k, replace=False))]
    filler = aux_images[rng.choice(len(aux_images), shadow.S - k, replace=False)]
    return np.concatenate([true_part, filler]).astype(np.float32)


def attack_unlearn(encoder, clean_guess: np.ndarray, new_trigger: TriggerPattern | None = None,
                   epochs: int = 10, lr: float = 0.01, batch_size: int = 64, seed: int = 0):
    """Maximize cos(e(x), e(x + new_trigger)) over the guessed watermark samples."""
    enc = clone(encoder, provenance="attacked-UNLEARN")
    enc.eval()
    if epochs <= 0:
        return enc
    new_trigger = new_trigger or default_unlearn_trigger(clean_guess.shape[-1])
    Xc = torch.as_tensor(clean_guess)
    Xt = torch.as_tensor(apply_trigger(clean_guess, new_trigger))
    opt = torch.optim.SGD(enc.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        for idx in _batches(len(Xc), batch_size, g):
            loss = 1.0 - F.cosine_similarity(enc(Xc[idx]), enc(Xt[idx]), dim=1).mean()
            if not torch.isfinite(loss):
                raise EmbeddingError(f"unlearning diverged at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    enc.eval()
    return enc


def attack_adaptive_remove(encoder, true_shadow: ShadowDataset, psi: float, aux_images: np.ndarray,
                           epochs: int = 10, lr: float = 0.05, batch_size: int = 64,
                           shadow_batch: int = 64, utility_weight: float = 1.0, seed: int = 0):
    """Full-knowledge removal: minimize w * L_util - psi * L_wm(true shadow).

    L_util keeps aux representations close to the stolen encoder's; the
    second term drives probing-pair cosine similarity back toward 1.
    """
    if psi < 0:
        raise ValueError("psi must be non-negative")
    ref = clone(encoder)
    ref.eval()
    enc = clone(encoder, provenance="attacked-ADAPTIVE")
    enc.eval()
    if epochs <= 0:
        return enc
    X = torch.as_tensor(aux_images)
    Xc = torch.as_tensor(true_shadow.clean)
    Xw = torch.as_tensor(true_shadow.triggered)
    opt = torch.optim.SGD(enc.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        for idx in _batches(len(X), batch_size, g):
            loss = utility_weight * _utility_step(enc, ref, X[idx])
            if psi > 0:
                j = torch.randperm(len(Xc), generator=g)[:shadow_batch]
                loss = loss - psi * wm_term(enc(Xc[j]), enc(Xw[j]))
            if not torch.isfinite(loss):
                raise EmbeddingError(f"adaptive removal diverged at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    enc.eval()
    return enc
