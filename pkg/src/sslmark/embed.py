"""Watermark embedding by reference-guided fine-tuning of a clean encoder."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import stats
from .models import clone
from .shadow import AnchorSet, ShadowDataset, TriggerPattern, default_trigger

log = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


# --------------------------------------------------------------- loss terms
# The *_terms functions work on representations; the loss_* wrappers run the
# encoders first. Representations of e_c never carry gradient.

def _check_norms(*reps):
    for r in reps:
        if torch.any(r.detach().norm(dim=1) == 0):
            raise ValueError("zero-norm representation")


def ref_term(r_wm: torch.Tensor, r_c: torch.Tensor) -> torch.Tensor:
    _check_norms(r_wm, r_c)
    return 1.0 - F.cosine_similarity(r_wm, r_c.detach(), dim=1, eps=0.0).mean()


def wm_term(r_clean: torch.Tensor, r_trig: torch.Tensor) -> torch.Tensor:
    _check_norms(r_clean, r_trig)
    return F.cosine_similarity(r_clean, r_trig, dim=1, eps=0.0).abs().mean()


def entgl_term(r_trig: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    _check_norms(r_trig, anchors)
    return (1.0 - F.cosine_similarity(r_trig, anchors, dim=1, eps=0.0)).mean()


def swd_term(x: torch.Tensor, y: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """Differentiable twin of :func:`sslmark.stats.sliced_wasserstein`."""
    if x.shape[0] != y.shape[0]:
        raise ValueError("batches must have equal size")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[1] != y.shape[1] or directions.shape[1] != x.shape[1]:
        raise ValueError("dimension mismatch")
    n = x.shape[0]
    px = torch.sort(x @ directions.t(), dim=0).values
    py = torch.sort(y @ directions.t(), dim=0).values
    per_dir = torch.sqrt(((px - py) ** 2).sum(dim=0) + 1e-24) / math.sqrt(n)
    return torch.sqrt(per_dir.mean() + 1e-24)


def _dis_inputs(r_x: torch.Tensor, r_trig: torch.Tensor, seed: int):
    n, m = len(r_x), len(r_trig)
    if n == m:
        return r_x, r_trig
    rng = np.random.default_rng(seed)
    if n > m:
        return r_x[torch.as_tensor(np.sort(rng.choice(n, m, replace=False)))], r_trig
    return r_x, r_trig[torch.as_tensor(np.sort(rng.choice(m, n, replace=False)))]


def dis_term(r_x: torch.Tensor, r_trig: torch.Tensor, P: stats.ProjectionSet, seed: int = 0):
    a, b = _dis_inputs(r_x, r_trig, seed)
    return swd_term(a, b, torch.as_tensor(P.directions, dtype=r_x.dtype))


def _trigger_t(x: torch.Tensor, trigger: TriggerPattern) -> torch.Tensor:
    rs, cs = trigger.footprint(x.shape[-2], x.shape[-1])
    out = x.clone()
    patch = torch.as_tensor(np.moveaxis(trigger.patch, -1, 0), dtype=x.dtype)
    out[..., :, rs, cs] = ((1 - trigger.blend) * out[..., :, rs, cs] + trigger.blend * patch).clamp(0, 1)
    return out


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float32))


def loss_ref(e_wm, e_c, batch) -> torch.Tensor:
    x = _t(batch)
    with torch.no_grad():
        r_c = e_c(x)
    return ref_term(e_wm(x), r_c)


def loss_wm(e_wm, shadow: ShadowDataset) -> torch.Tensor:
    return wm_term(e_wm(_t(shadow.clean)), e_wm(_t(shadow.triggered)))


def loss_entgl(e_wm, shadow: ShadowDataset, anchors: AnchorSet) -> torch.Tensor:
    if len(anchors.assignment) < shadow.S:
        raise ValueError("anchor assignment does not cover every watermark sample")
    target = torch.as_tensor(anchors.assigned()[: shadow.S], dtype=torch.float32)
    return entgl_term(e_wm(_t(shadow.triggered)), target)


def loss_dis(e_wm, clean_batch, shadow: ShadowDataset, P: stats.ProjectionSet, seed: int = 0):
    return dis_term(e_wm(_t(clean_batch)), e_wm(_t(shadow.triggered)), P, seed)


# ----------------------------------------------------------------- embedding

@dataclass
class WatermarkConfig:
    alpha: float = 1.0
    beta: float = 1.0
    warm_epochs: int = 5
    total_epochs: int = 30
    lr: float = 0.05
    J: int = 64
    A: int = 4
    S: int = 200
    seed: int = 0
    batch_size: int = 64  # clean pretraining samples per step
    shadow_batch: int = 64  # probing pairs per step
    steps_per_epoch: int = 16
    momentum: float = 0.0
    ref_on_shadow: bool = True  # shadow clean samples also enter L_ref
    ref_on_triggered: bool = False  # triggered copies of the clean batch also enter L_ref
    trigger: TriggerPattern = field(default_factory=default_trigger)

    def validate(self):
        for name in ("alpha", "beta", "lr"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.warm_epochs <= self.total_epochs:
            raise ValueError("warm_epochs must lie in [0, total_epochs]")
        if min(self.J, self.A, self.S, self.batch_size, self.shadow_batch, self.steps_per_epoch) < 1:
            raise ValueError("counts must be positive")

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "trigger"}
        d["trigger"] = self.trigger.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "trigger" in d and isinstance(d["trigger"], dict):
            d["trigger"] = TriggerPattern.from_dict(d["trigger"])
        return cls(**d)


COLUMNS = ("epoch", "L_ref", "L_wm", "L_entgl", "L_dis", "L_total", "seconds")


@dataclass
class EmbeddingTrace:
    rows: list = field(default_factory=list)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=COLUMNS)
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path):
        with open(path) as f:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()}
                    for r in csv.DictReader(f)]
        return cls(rows)


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step) % (2**31 - 1)


def _step_batches(n_clean, S, cfg, epoch):
    """Deterministic (clean indices, shadow indices) per step of one epoch."""
    rng = np.random.default_rng([cfg.seed, epoch])
    clean = rng.permutation(n_clean)
    shadow = rng.permutation(S)
    for step in range(cfg.steps_per_epoch):
        ci = np.take(clean, np.arange(step * cfg.batch_size, (step + 1) * cfg.batch_size), mode="wrap")
        si = np.take(shadow, np.arange(step * cfg.shadow_batch, (step + 1) * cfg.shadow_batch), mode="wrap")
        yield step, np.unique(ci), np.unique(si)


def embed_watermark(e_c, pretrain_images: np.ndarray, shadow: ShadowDataset, anchors: AnchorSet,
                    cfg: WatermarkConfig):
    """Fine-tune a copy of ``e_c`` into the watermarked encoder.

    Epochs up to ``warm_epochs`` optimize L_ref + alpha*L_wm; later epochs add
    beta*(L_entgl + L_dis). Plain SGD with a fixed rate; BatchNorm statistics
    stay frozen (evaluation mode). Returns (e_wm, EmbeddingTrace).
    """
    cfg.validate()
    if anchors.anchors.shape[1] != e_c.dim:
        raise ValueError(f"anchor dimension {anchors.anchors.shape[1]} != encoder dimension {e_c.dim}")
    if len(anchors.assignment) < shadow.S:
        raise ValueError("anchor assignment does not cover every watermark sample")
    e_wm = clone(e_c, provenance="watermarked")
    e_c.eval()
    e_wm.eval()
    for p in e_c.parameters():
        p.requires_grad_(False)
    opt = torch.optim.SGD(e_wm.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    data = torch.as_tensor(pretrain_images)
    xc_all = _t(shadow.clean)
    xw_all = _t(shadow.triggered)
    anchor_t = torch.as_tensor(anchors.assigned()[: shadow.S], dtype=torch.float32)
    with torch.no_grad():
        r_c_shadow = e_c(xc_all)
    trace = EmbeddingTrace()
    step_global = 0
    try:
        for epoch in range(1, cfg.total_epochs + 1):
            t0 = time.perf_counter()
            sums = dict.fromkeys(COLUMNS[1:6], 0.0)
            for step, ci, si in _step_batches(len(data), shadow.S, cfg, epoch):
                x = data[ci]
                n_x, n_s = len(ci), len(si)
                parts = [x, xc_all[si], xw_all[si]]
                if cfg.ref_on_triggered:
                    parts.append(_trigger_t(x, shadow.trigger))
                with torch.no_grad():
                    r_cx = e_c(x if not cfg.ref_on_triggered else torch.cat([x, parts[3]]))
                reps = e_wm(torch.cat(parts))
                r_wx, r_c, r_w = reps[:n_x], reps[n_x : n_x + n_s], reps[n_x + n_s : n_x + 2 * n_s]
                ref_wm, ref_c = [r_wx], [r_cx]
                if cfg.ref_on_triggered:
                    ref_wm.append(reps[n_x + 2 * n_s :])
                if cfg.ref_on_shadow:
                    ref_wm.append(r_c)
                    ref_c.append(r_c_shadow[si])
                l_ref = ref_term(torch.cat(ref_wm), torch.cat(ref_c))
                l_wm = wm_term(r_c, r_w)
                warm = epoch <= cfg.warm_epochs
                P = stats.make_projections(cfg.J, e_wm.dim, seed=_step_seed(cfg.seed, step_global))
                if warm:
                    with torch.no_grad():
                        l_ent = entgl_term(r_w, anchor_t[si])
                        l_dis = dis_term(r_wx, r_w, P, seed=cfg.seed + step_global)
                    total = l_ref + cfg.alpha * l_wm
                else:
                    l_ent = entgl_term(r_w, anchor_t[si])
                    l_dis = dis_term(r_wx, r_w, P, seed=cfg.seed + step_global)
                    total = l_ref + cfg.alpha * l_wm + cfg.beta * (l_ent + l_dis)
                if not torch.isfinite(total):
                    raise EmbeddingError(f"non-finite loss at epoch {epoch} step {step}", trace)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                step_global += 1
                for k, v in zip(COLUMNS[1:6], (l_ref, l_wm, l_ent, l_dis, total)):
                    sums[k] += float(v.detach())
            row = {"epoch": epoch, **{k: v / cfg.steps_per_epoch for k, v in sums.items()},
                   "seconds": time.perf_counter() - t0}
            trace.rows.append(row)
            log.info("embed epoch %d: ref %.4f wm %.4f entgl %.4f dis %.4f", epoch,
                     row["L_ref"], row["L_wm"], row["L_entgl"], row["L_dis"])
    finally:
        for p in e_c.parameters():
            p.requires_grad_(True)
    e_wm.eval()
    return e_wm, trace


def embed_baseline_cluster(e_c, pretrain_images: np.ndarray, shadow: ShadowDataset,
                           cfg: WatermarkConfig, momentum: float = 0.9):
    """Naive cluster-forcing watermark for contrast.

    Representations of trigger-carrying inputs (the shadow watermark samples
    plus triggered copies of each clean batch) are pulled toward the running
    mean direction of those representations, while L_ref keeps clean outputs
    close to ``e_c``. This produces the dense out-of-distribution cluster
    that the entangled watermark avoids.
    """
    cfg.validate()
    e_wm = clone(e_c, provenance="baseline-cluster")
    e_c.eval()
    e_wm.eval()
    opt = torch.optim.SGD(e_wm.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    data = torch.as_tensor(pretrain_images)
    xw_all = _t(shadow.triggered)
    center = None
    trace = EmbeddingTrace()
    for epoch in range(1, cfg.total_epochs + 1):
        t0 = time.perf_counter()
        s_ref = s_pull = 0.0
        for step, ci, si in _step_batches(len(data), shadow.S, cfg, epoch):
            x = data[ci]
            xt = _trigger_t(x, shadow.trigger)
            with torch.no_grad():
                r_cx = e_c(x)
            reps = e_wm(torch.cat([x, xw_all[si], xt]))
            r_wx, r_trig = reps[: len(ci)], reps[len(ci):]
            u = F.normalize(r_trig, dim=1)
            batch_mean = F.normalize(u.detach().mean(0), dim=0)
            center = batch_mean if center is None else F.normalize(momentum * center + (1 - momentum) * batch_mean, dim=0)
            l_pull = (1.0 - u @ center).mean()
            l_ref = ref_term(r_wx, r_cx)
            total = l_ref + cfg.alpha * l_pull
            if not torch.isfinite(total):
                raise EmbeddingError(f"non-finite loss at epoch {epoch}", trace)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            s_ref += float(l_ref.detach())
            s_pull += float(l_pull.detach())
        k = cfg.steps_per_epoch
        trace.rows.append({"epoch": epoch, "L_ref": s_ref / k, "L_wm": s_pull / k, "L_entgl": 0.0,
                           "L_dis": 0.0, "L_total": (s_ref + cfg.alpha * s_pull) / k,
                           "seconds": time.perf_counter() - t0})
    e_wm.eval()
    return e_wm, trace
