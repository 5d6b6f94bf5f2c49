import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from sslmark.data import make_synthetic
from sslmark.models import ConvEncoder, ToyEncoder
from sslmark.pretrain import init_params
from sslmark.shadow import (build_shadow_dataset, compute_anchors, default_trigger,
                            select_source_class)

settings.register_profile("sslmark", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sslmark")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_images():
    return make_synthetic(240, seed=11, size=16)


@pytest.fixture(scope="session")
def small_encoder():
    torch.manual_seed(0)
    return init_params(ConvEncoder("conv4-small"), seed=3).eval()


@pytest.fixture(scope="session")
def toy_encoder():
    return init_params(ToyEncoder(in_dim=6, hidden=8, dim=6), seed=5).double()


@pytest.fixture(scope="session")
def tiny_shadow(small_encoder, tiny_images):
    """Shadow set and anchors built on 16px synthetic images."""
    trig = default_trigger(16)
    sel = select_source_class(small_encoder, tiny_images.images, k_clusters=4, seed=2, subsample=None,
                              min_size=12)
    sh = build_shadow_dataset(sel, tiny_images.images, trig, S=12, seed=2)
    anchors = compute_anchors(small_encoder, tiny_images.images, sel, A=2, S=12, seed=2)
    return sel, sh, anchors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ desk-scale runs

ACCEPTANCE_LINES = []

DESK_PRESETS = ("tableII-desk", "tableV-desk", "tableVI-desk", "fig2-desk", "psi-sweep", "pairs-sweep")


def record(criterion: int, ok: bool, detail: str) -> str:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Every desk preset, run through the stage cache.

    The cache root comes from SSLMARK_CACHE (default ~/.cache/sslmark); a
    warm cache makes this fixture take seconds, a cold one several hours of
    CPU time.
    """
    from sslmark import harness

    out = tmp_path_factory.mktemp("desk")
    plans, tables = {}, {}
    for name in DESK_PRESETS:
        plans[name] = harness.build_preset(name, out_dir=out / name)
        tables[name] = harness.run_plan(plans[name])
    return plans, tables


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
