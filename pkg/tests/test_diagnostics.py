import itertools

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from shapely.geometry import MultiPoint

from sslmark import diagnostics
from sslmark.models import DownstreamModel
from sslmark.shadow import ShadowDataset


def pairwise_cos_oracle(R):
    R = [r for r in R if np.linalg.norm(r) > 0]
    vals = [a @ b / np.linalg.norm(a) / np.linalg.norm(b) for a, b in itertools.combinations(R, 2)]
    return float(np.mean(vals))


def hull_overlap(xy, labels):
    a = MultiPoint([tuple(p) for p in xy[labels == "clean"]]).convex_hull
    b = MultiPoint([tuple(p) for p in xy[labels == "watermark"]]).convex_hull
    return a.intersection(b).area


@given(arrays(np.float64, (7, 3), elements=st.floats(-5, 5)))
def test_mean_pairwise_cosine_oracle(R):
    norms = np.linalg.norm(R, axis=1)
    assume(np.all((norms == 0) | (norms > 1e-6)) and (norms > 0).sum() >= 2)
    got, n = diagnostics.mean_pairwise_cosine(R)
    assert got == pytest.approx(pairwise_cos_oracle(R), abs=1e-9)
    assert -1 <= got <= 1


def test_mean_pairwise_cosine_edges():
    assert diagnostics.mean_pairwise_cosine(np.ones((4, 2)))[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        diagnostics.mean_pairwise_cosine(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_intra_similarity_permutation_invariant(small_encoder, tiny_shadow):
    _, sh, _ = tiny_shadow
    a = diagnostics.intra_watermark_similarity(small_encoder, sh)
    b = diagnostics.intra_watermark_similarity(small_encoder, sh.permuted(np.arange(sh.S)[::-1]))
    assert a.mean_pairwise_cos == pytest.approx(b.mean_pairwise_cos, abs=1e-12)
    assert a.delta == pytest.approx(a.mean_pairwise_cos - a.clean_reference_cos)
    assert all(-1 <= v <= 1 for v in (a.mean_pairwise_cos, a.clean_reference_cos))
    with pytest.raises(ValueError):
        diagnostics.intra_watermark_similarity(small_encoder, sh.head(1))


def test_bias_uniform_and_skewed():
    uniform = diagnostics.bias_from_predictions(np.repeat(np.arange(10), 7), 10)
    assert uniform.mad == 0.0 and uniform.top_class_fraction == pytest.approx(0.1)
    assert uniform.total == 70
    skew = diagnostics.bias_from_predictions(np.array([3] * 90 + list(range(10))), 10)
    assert skew.top_class_fraction == pytest.approx(0.91)
    assert skew.to_dict()["class_histogram"][3] == 91


@given(st.lists(st.integers(0, 9), min_size=1, max_size=200))
def test_bias_properties(pred):
    b = diagnostics.bias_from_predictions(np.array(pred), 10)
    assert b.top_class_fraction >= 1 / 10
    assert sum(b.class_histogram) == len(pred)


def test_prediction_bias_on_model(small_encoder, tiny_images):
    model = DownstreamModel(small_encoder, 10)
    b = diagnostics.prediction_bias(model, tiny_images.images[:40])
    assert b.total == 40
    with pytest.raises(ValueError):
        diagnostics.prediction_bias(model, tiny_images.images[:5])


def test_scatter_roundtrip_and_files(small_encoder, tiny_images, tiny_shadow, tmp_path):
    _, sh, _ = tiny_shadow
    csv_path, png = diagnostics.export_pca_scatter(small_encoder, tiny_images.images[:30], sh, tmp_path / "pca")
    assert csv_path.exists() and png.exists() and png.stat().st_size > 0
    xy, labels = diagnostics.load_scatter(csv_path)
    assert (labels == "clean").sum() == 30 and (labels == "watermark").sum() == sh.S
    d1 = diagnostics.mean_pairwise_distance(xy[labels == "watermark"])
    # refit from the representations and compare the statistic
    from sslmark import stats
    from sslmark.models import encode

    R = np.concatenate([encode(small_encoder, tiny_images.images[:30]), encode(small_encoder, sh.triggered)])
    xy2 = stats.pca_project(R, 2)
    assert diagnostics.mean_pairwise_distance(xy2[30:]) == pytest.approx(d1, abs=1e-9)


def test_scatter_empty_watermark_set(small_encoder, tiny_images, tiny_shadow, tmp_path):
    _, sh, _ = tiny_shadow
    empty = ShadowDataset(sh.clean[:0], sh.triggered[:0], sh.source_indices[:0], 0, sh.trigger, 0)
    csv_path, png = diagnostics.export_pca_scatter(small_encoder, tiny_images.images[:10], empty, tmp_path / "e")
    xy, labels = diagnostics.load_scatter(csv_path)
    assert len(xy) == 10 and set(labels) == {"clean"} and png.exists()
    with pytest.raises(ValueError):
        diagnostics.export_pca_scatter(small_encoder, tiny_images.images[:0], sh, tmp_path / "x")


def test_geometric_oracles_on_constructed_scatter():
    g = np.random.default_rng(0)
    clean = g.normal(size=(200, 2))
    tight = g.normal(size=(50, 2)) * 0.05 + [4, 4]
    spread = g.normal(size=(50, 2))
    labels = np.array(["clean"] * 200 + ["watermark"] * 50)
    assert diagnostics.mean_pairwise_distance(tight) < 0.3 * diagnostics.mean_pairwise_distance(clean)
    assert hull_overlap(np.vstack([clean, spread]), labels) > 0
    assert hull_overlap(np.vstack([clean, tight + 10]), labels) == 0
    assert diagnostics.mean_pairwise_distance(clean[:1]) == 0.0


def test_write_json(tmp_path):
    diagnostics.write_json({"b": 1, "a": [1, 2]}, tmp_path / "d.json")
    assert (tmp_path / "d.json").read_text().index('"a"') < (tmp_path / "d.json").read_text().index('"b"')
