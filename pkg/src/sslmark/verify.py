"""Black-box ownership verification against encoder and classifier services.

Suspects are reached only through ``query(images) -> ndarray``; nothing in
this module reads model parameters.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .shadow import ShadowDataset
from .stats import TestResult, paired_t_test_greater

log = logging.getLogger(__name__)

LAMBDA = 0.05
TAU_SMALL = 0.15  # 32px-class pretraining
TAU_LARGE = 0.2  # 224px-class pretraining
MU = 0.3


class VerificationError(RuntimeError):
    pass


class SuspectEaaS(Protocol):
    def query(self, images: np.ndarray) -> np.ndarray:
        """[n, c, h, w] images -> [n, d] feature vectors."""


class SuspectMLaaS(Protocol):
    def query(self, images: np.ndarray) -> np.ndarray:
        """[n, c, h, w] images -> [n, classes] probability vectors."""


class EncoderService:
    """Expose a local encoder as an EaaS endpoint."""

    def __init__(self, encoder, batch_size: int = 512):
        self._encoder = encoder
        self._bs = batch_size

    def query(self, images):
        from .models import encode

        return encode(self._encoder, np.asarray(images, dtype=np.float32), self._bs)


class ClassifierService:
    """Expose a local downstream model as an MLaaS endpoint."""

    def __init__(self, model, batch_size: int = 512):
        self._model = model
        self._bs = batch_size

    def query(self, images):
        return self._model.predict_proba(np.asarray(images, dtype=np.float32), self._bs)


@dataclass
class VerificationReport:
    scenario: str  # EaaS | MLaaS
    per_pair_stats: list
    test: TestResult
    lam: float
    margin: float
    n_pairs: int
    skipped: int = 0
    per_pair_columns: tuple = field(default=())

    @property
    def p_value(self) -> float:
        return self.test.p_value

    @property
    def decision(self) -> str:
        return decide(self.test.p_value, self.lam)

    @property
    def pirated(self) -> bool:
        return self.decision == "pirated"

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "lambda": self.lam,
            "margin": self.margin,
            "n": self.n_pairs,
            "skipped": self.skipped,
            "t": self.test.t_statistic,
            "p": self.test.p_value,
            "degenerate": self.test.degenerate,
            "decision": self.decision,
        }

    def to_json(self, per_pair_path: str | None = None) -> str:
        d = self.summary()
        d["per_pair_table"] = per_pair_path
        return json.dumps(d, indent=2)

    def write_per_pair(self, path):
        with open(path, "w") as f:
            f.write(",".join(self.per_pair_columns) + "\n")
            for row in self.per_pair_stats:
                f.write(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v)
                                 for v in row) + "\n")


def decide(p_value: float, lam: float = LAMBDA) -> str:
    return "pirated" if p_value <= lam else "not_pirated"


def _check_unit_interval(name, v):
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {v}")


def verify_eaas(suspect: SuspectEaaS, shadow: ShadowDataset, mu: float = MU,
                lam: float = LAMBDA) -> VerificationReport:
    """Test whether mean(1 - |cos(e(x_c), e(x_wm))|) exceeds mu."""
    _check_unit_interval("mu", mu)
    _check_unit_interval("lambda", lam)
    if shadow.S == 0:
        raise ValueError("empty shadow dataset")
    rc = np.asarray(suspect.query(shadow.clean), dtype=np.float64)
    rw = np.asarray(suspect.query(shadow.triggered), dtype=np.float64)
    nc = np.linalg.norm(rc, axis=1)
    nw = np.linalg.norm(rw, axis=1)
    ok = (nc > 0) & (nw > 0) & np.all(np.isfinite(rc), axis=1) & np.all(np.isfinite(rw), axis=1)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("skipping %d probing pairs with degenerate suspect responses", skipped)
    if ok.sum() < 2:
        raise VerificationError("fewer than 2 usable probing pairs")
    M = np.abs(np.sum(rc[ok] * rw[ok], axis=1) / (nc[ok] * nw[ok])).clip(0.0, 1.0)
    test = paired_t_test_greater(1.0 - M, np.zeros_like(M), margin=mu)
    rows = [(int(i), float(m)) for i, m in zip(np.flatnonzero(ok), M)]
    return VerificationReport("EaaS", rows, test, lam, mu, int(ok.sum()), skipped, ("pair", "abs_cos"))


def confidence_pairs(probs_clean: np.ndarray, probs_trig: np.ndarray):
    """Top-1 confidence of each clean sample and the triggered sample's
    confidence in that same class."""
    cls = np.argmax(probs_clean, axis=1)
    idx = np.arange(len(cls))
    return probs_clean[idx, cls], probs_trig[idx, cls], cls


def _check_probs(p):
    if p.ndim != 2 or np.any(p < -1e-9) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("suspect returned non-normalized probability vectors")


def verify_mlaas(suspect: SuspectMLaaS, shadow: ShadowDataset, tau: float = TAU_SMALL,
                 lam: float = LAMBDA) -> VerificationReport:
    """Test whether the clean top-1 confidence exceeds the triggered
    same-class confidence by more than tau."""
    _check_unit_interval("tau", tau)
    _check_unit_interval("lambda", lam)
    if shadow.S == 0:
        raise ValueError("empty shadow dataset")
    pc = np.asarray(suspect.query(shadow.clean), dtype=np.float64)
    pw = np.asarray(suspect.query(shadow.triggered), dtype=np.float64)
    _check_probs(pc)
    _check_probs(pw)
    a, b, cls = confidence_pairs(pc, pw)
    test = paired_t_test_greater(a, b, margin=tau)
    rows = [(i, int(c), float(x), float(y)) for i, (c, x, y) in enumerate(zip(cls, a, b))]
    return VerificationReport("MLaaS", rows, test, lam, tau, shadow.S, 0,
                              ("pair", "class", "p_clean", "p_triggered"))


def probing_pair_sweep(suspect, shadow: ShadowDataset, sizes: Sequence[int], scenario: str = "MLaaS",
                       **kw) -> list:
    """(k, p-value) for verification on the first k pairs, for every k."""
    if max(sizes) > shadow.S:
        raise ValueError(f"largest size {max(sizes)} exceeds S={shadow.S}")
    fn = verify_mlaas if scenario == "MLaaS" else verify_eaas
    return [(int(k), fn(suspect, shadow.head(k), **kw).p_value) for k in sizes]
