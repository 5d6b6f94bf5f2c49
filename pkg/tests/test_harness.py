import json
import logging
from pathlib import Path

import numpy as np
import pytest
import yaml

from sslmark import harness
from sslmark.harness import ExperimentPlan, ResultsTable, Stage

TINY = Path(__file__).parent / "configs" / "tiny.yaml"


def tiny_cfg():
    return yaml.safe_load(TINY.read_text())


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """tableII-desk at toy size, executed once into a module-private cache."""
    base = tmp_path_factory.mktemp("tiny")
    plan = harness.build_preset("tableII-desk", tiny_cfg(), out_dir=base / "run")
    table = harness.run_plan(plan, root=base / "cache")
    return base, plan, table


# ----------------------------------------------------------------- config

def test_load_config_layers(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("watermark: {alpha: 0.7}\n# comment\nseed: 5\n")
    cfg = harness.load_config(p, {"seed": 9})
    assert cfg["watermark"]["alpha"] == 0.7 and cfg["watermark"]["beta"] == 0.1
    assert cfg["seed"] == 9
    assert harness.DESK_DEFAULTS["watermark"]["alpha"] == 0.1


def test_seeds_and_hashes():
    assert harness.derive_seed(0, "embed") == harness.derive_seed(0, "embed")
    assert harness.derive_seed(0, "embed") != harness.derive_seed(1, "embed")
    assert 0 <= harness.derive_seed(3, "x") < 2**31 - 1
    assert harness.canonical_hash({"a": 1, "b": 2}) == harness.canonical_hash({"b": 2, "a": 1})


def test_cache_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(harness.CACHE_ENV, str(tmp_path))
    assert harness.cache_root() == tmp_path
    assert harness.cache_root(tmp_path / "x") == tmp_path / "x"


# ------------------------------------------------------------------ plans

def test_plan_validation():
    with pytest.raises(ValueError):
        Stage("a", "bogus", {})
    bad = ExperimentPlan([Stage("b", "transfer", {}, ("a",)), Stage("a", "pretrain", {})])
    with pytest.raises(ValueError):
        bad.validate()
    dup = ExperimentPlan([Stage("a", "pretrain", {}), Stage("a", "pretrain", {})])
    with pytest.raises(ValueError):
        dup.validate()


def test_empty_plan_empty_table(tmp_path):
    t = harness.run_plan(ExperimentPlan([], out_dir=str(tmp_path / "out")), root=tmp_path / "c")
    assert len(t) == 0
    assert (tmp_path / "out" / "results.csv").read_text().strip() == ",".join(harness.RESULTS_HEADER)


def test_unknown_preset():
    with pytest.raises(ValueError):
        harness.build_preset("tableIX")


@pytest.mark.parametrize("name", harness.PRESETS)
def test_presets_build_valid_graphs(name):
    plan = harness.build_preset(name, tiny_cfg())
    plan.validate()
    kinds = {s.kind for s in plan.stages}
    assert {"pretrain", "shadow", "embed", "transfer"} <= kinds
    assert kinds & {"verify", "sweep"}


def test_stage_hash_sensitivity():
    plan = harness.build_preset("tableV-desk", tiny_cfg())
    cfg2 = tiny_cfg()
    cfg2["watermark"]["alpha"] = 0.2
    plan2 = harness.build_preset("tableV-desk", cfg2)

    def hashes(p):
        h = {}
        for st in p.stages:
            h[st.name] = harness.stage_hash(st, h, p.data)
        return h

    a, b = hashes(plan), hashes(plan2)
    assert a["pretrain/victim"] == b["pretrain/victim"] and a["shadow"] == b["shadow"]
    assert a["embed"] != b["embed"] and a["transfer/wm"] != b["transfer/wm"]
    assert a["transfer/clean"] == b["transfer/clean"]


# ---------------------------------------------------------------- results

def test_results_table_csv(tmp_path):
    t = ResultsTable()
    t.add("wm", "MLaaS", 0.9, 1e-30, "PRUNE", "r=0.6")
    t.add("clean", "EaaS", 0.91, 0.999)
    t.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "suspect,scenario,acc,p_value,decision,attack,params"
    back = ResultsTable.from_csv(tmp_path / "r.csv")
    assert back.rows == t.rows
    assert back.lookup("wm")["decision"] == "pirated"
    assert back.select(scenario="EaaS")[0]["decision"] == "not_pirated"
    with pytest.raises(KeyError):
        back.lookup("nobody")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        ResultsTable.from_csv(tmp_path / "bad.csv")
    t.rows[0]["decision"] = "not_pirated"
    with pytest.raises(ValueError):
        t.check()


def test_emit_plots_empty(tmp_path):
    assert harness.emit_plots(ResultsTable(), tmp_path / "plots") == []
    assert not (tmp_path / "plots").exists()


# -------------------------------------------------------------- execution

def test_tiny_tableII_shape(tiny_run):
    _, plan, table = tiny_run
    suspects = {(r["suspect"], r["scenario"]) for r in table.rows}
    expected = {(s, sc) for s in ("clean", "wm", "neg-v1", "neg-v2", "neg-v3", "neg-v4")
                for sc in ("MLaaS", "EaaS")}
    assert suspects == expected
    assert all(r["decision"] in ("pirated", "not_pirated") for r in table.rows)
    assert all(0 <= r["p_value"] <= 1 and 0 <= r["acc"] <= 1 for r in table.rows)


def test_rerun_hits_cache_and_is_identical(tiny_run, caplog):
    base, plan, table = tiny_run
    with caplog.at_level(logging.INFO, logger="sslmark.harness"):
        again = harness.run_plan(plan, root=base / "cache")
    assert again.rows == table.rows
    assert not [r for r in caplog.records if r.getMessage().startswith("running")]
    assert len([r for r in caplog.records if "cache hit" in r.getMessage()]) == len(plan.stages)


def test_fresh_root_bit_identical(tiny_run, tmp_path):
    _, plan, table = tiny_run
    again = harness.run_plan(plan, root=tmp_path / "cache2", jobs=2)
    assert again.rows == table.rows
    for name in ("pretrain/victim", "embed", "transfer/wm"):
        a = json.loads((table.artifacts[name] / "model" / "manifest.json").read_text())["content_hash"]
        b = json.loads((again.artifacts[name] / "model" / "manifest.json").read_text())["content_hash"]
        assert a == b


def test_manifests_and_lineage(tiny_run):
    base, plan, table = tiny_run
    hashes = {}
    for st in plan.stages:
        hashes[st.name] = harness.stage_hash(st, hashes, plan.data)
    for st in plan.stages:
        art = table.artifacts[st.name]
        m = json.loads((art / "stage.json").read_text())
        assert m["config_hash"] == hashes[st.name] == art.name
        assert set(m["parents"]) == set(st.parents)
        assert "seed" in m
        chain = harness.resolve_lineage(art, base / "cache")
        roots = [c for c in chain if not c["parents"]]
        assert roots and all(c["kind"] == "pretrain" for c in roots)
    run = base / "run"
    assert (run / "results.csv").exists() and (run / "stages.json").exists()
    saved = yaml.safe_load((run / "plan.yaml").read_text())
    rebuilt = harness.build_preset("tableII-desk", saved["config"])
    assert [s.config for s in rebuilt.stages] == [s.config for s in plan.stages]


def test_broken_lineage_detected(tiny_run, tmp_path):
    _, _, table = tiny_run
    with pytest.raises(FileNotFoundError):
        harness.resolve_lineage(table.artifacts["embed"], tmp_path / "elsewhere")


def test_load_run_and_plots(tiny_run, tmp_path):
    base, _, table = tiny_run
    loaded = harness.load_run(base / "run")
    assert loaded.rows == table.rows
    files = harness.emit_plots(loaded, tmp_path / "plots")
    assert (tmp_path / "plots" / "overhead.png") in files
    frac = json.loads((tmp_path / "plots" / "overhead.json").read_text())["fraction"]
    assert np.isfinite(frac) and frac > 0


def test_failed_stage_leaves_no_artifact(tmp_path):
    cfg = tiny_cfg()
    cfg["shadow"]["S"] = 100_000  # larger than any cluster
    plan = harness.build_preset("pairs-sweep", cfg, out_dir=tmp_path / "run")
    with pytest.raises(harness.StageError):
        harness.run_plan(plan, root=tmp_path / "cache")
    assert not list((tmp_path / "cache" / "shadow").glob("*/DONE"))
    assert list((tmp_path / "cache" / "pretrain").glob("*/DONE"))
