"""Experiment orchestration: stage graph, artifact cache, result tables, plots.

A plan is an ordered list of stages. Each stage's artifact directory lives
under the cache root at ``<kind>/<config hash>``; the hash covers the stage
config and its parents' hashes, so unchanged stages are reused across runs.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import yaml

from . import adversary, diagnostics, verify
from .data import ImageSet, load_dataset
from .embed import WatermarkConfig, embed_baseline_cluster, embed_watermark
from .models import DownstreamModel, load_checkpoint, param_checksum, save_checkpoint
from .pretrain import NegativeVariantSpec, PretrainConfig, linear_probe_accuracy, pretrain_simclr
from .shadow import (AnchorSet, ShadowDataset, TriggerPattern, apply_trigger, build_shadow_dataset,
                     compute_anchors, default_trigger, select_source_class)

log = logging.getLogger(__name__)

CACHE_ENV = "SSLMARK_CACHE"
CODE_VERSION = "1"
# bump a kind's entry when its runner changes behavior; only that kind and
# its descendants are then recomputed
STAGE_CODE_VERSIONS: dict = {}
RESULTS_HEADER = ("suspect", "scenario", "acc", "p_value", "decision", "attack", "params")
PRESETS = ("tableII-desk", "tableV-desk", "tableVI-desk", "fig2-desk", "psi-sweep", "pairs-sweep")

DESK_DEFAULTS = {
    "run_id": "desk",
    "seed": 0,
    "deterministic": True,
    "lambda": verify.LAMBDA,
    "tau": verify.TAU_SMALL,
    "mu": verify.MU,
    "data": {"name": "synthetic", "train_n": 10000, "task_n": 5000, "test_n": 2000, "aux_n": 2000},
    "pretrain": {"arch": "conv4-small", "epochs": 20, "batch_size": 256, "temperature": 0.5,
                 "proj_dim": 64, "lr": 1e-3, "weight_decay": 1e-6},
    "shadow": {"k_clusters": 10, "S": 200, "subsample": 4000},
    "watermark": {"alpha": 0.1, "beta": 0.1, "warm_epochs": 5, "total_epochs": 30, "lr": 0.05,
                  "J": 64, "A": 9, "batch_size": 64, "shadow_batch": 64, "steps_per_epoch": 16},
    "baseline": {"alpha": 3.0, "warm_epochs": 0, "total_epochs": 30, "lr": 0.05, "batch_size": 64,
                 "shadow_batch": 64, "steps_per_epoch": 16, "momentum_center": 0.9},
    "transfer": {"epochs": 60, "lr": 5e-3},
    "negatives": {"variants": ["v1", "v2", "v3", "v4"], "temperature_scale": 2.0, "lr_scale": 0.5},
    "attacks": {
        "finetune": {"lr": 1e-3, "decay": 1e-6, "max_epochs": 100, "patience": 5},
        "prune": {"ratios": [0.15, 0.6, 0.99]},
        "overwrite": {"target_class_pair": [8, 9], "epochs": 20, "lr": 0.01, "success_target": 0.8},
        "unlearn": {"epochs": 10, "lr": 0.01, "overlap": 1.0},
        "adaptive": {"psi": [0.0, 0.1, 0.5], "epochs": 10, "lr": 0.05, "utility_weight": 1.0},
    },
    "pairs_sweep": {"sizes": [20, 50, 100, 200]},
    "diagnose": {"n_clean": 500},
}


def deep_merge(base: dict, over: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Desk defaults, updated by a YAML file, then by explicit overrides."""
    cfg = copy.deepcopy(DESK_DEFAULTS)
    if path is not None:
        cfg = deep_merge(cfg, yaml.safe_load(Path(path).read_text()) or {})
    return deep_merge(cfg, overrides)


def derive_seed(root: int, tag: str) -> int:
    return int(hashlib.sha256(f"{root}:{tag}".encode()).hexdigest()[:8], 16) % (2**31 - 1)


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def cache_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "sslmark"))


def set_deterministic(flag: bool = True):
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


# ------------------------------------------------------------------ plan types

STAGE_KINDS = ("pretrain", "shadow", "embed", "baseline", "transfer", "attack", "verify", "sweep",
               "diagnose")


@dataclass
class Stage:
    name: str
    kind: str
    config: dict
    parents: tuple = ()

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        self.parents = tuple(self.parents)


@dataclass
class ExperimentPlan:
    stages: list
    run_id: str = "run"
    root_seed: int = 0
    out_dir: str = "runs/run"
    data: dict = field(default_factory=lambda: dict(DESK_DEFAULTS["data"]))
    deterministic: bool = True
    root_config: dict = field(default_factory=dict)

    def validate(self):
        seen = set()
        for st in self.stages:
            if st.name in seen:
                raise ValueError(f"duplicate stage name {st.name!r}")
            for p in st.parents:
                if p not in seen:
                    raise ValueError(f"stage {st.name!r} depends on {p!r}, which is not an earlier stage")
            seen.add(st.name)

    def by_name(self) -> dict:
        return {st.name: st for st in self.stages}


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    lam: float = verify.LAMBDA
    artifacts: dict = field(default_factory=dict)  # stage name -> artifact dir

    def add(self, suspect, scenario, acc, p_value, attack="DT", params=""):
        self.rows.append({"suspect": suspect, "scenario": scenario, "acc": float(acc),
                          "p_value": float(p_value), "decision": verify.decide(p_value, self.lam),
                          "attack": attack, "params": params})

    def check(self):
        for r in self.rows:
            if r["decision"] != verify.decide(r["p_value"], self.lam):
                raise ValueError(f"decision inconsistent with p-value in row {r}")

    def lookup(self, suspect, scenario=None, params=None) -> dict:
        for r in self.rows:
            if r["suspect"] == suspect and scenario in (None, r["scenario"]) and params in (None, r["params"]):
                return r
        raise KeyError((suspect, scenario, params))

    def select(self, **kw) -> list:
        return [r for r in self.rows if all(r[k] == v for k, v in kw.items())]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=RESULTS_HEADER, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "acc": repr(r["acc"]), "p_value": repr(r["p_value"])})

    @classmethod
    def from_csv(cls, path, lam: float = verify.LAMBDA) -> "ResultsTable":
        t = cls(lam=lam)
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != RESULTS_HEADER:
                raise ValueError(f"unexpected header {reader.fieldnames}")
            for r in reader:
                t.rows.append({**r, "acc": float(r["acc"]), "p_value": float(r["p_value"])})
        return t

    def __len__(self):
        return len(self.rows)


# --------------------------------------------------------------- data helpers

@lru_cache(maxsize=16)
def _dataset(name: str, n: int, seed: int, split: str) -> ImageSet:
    return load_dataset(name, n, seed, split)


def task_data(data: dict):
    s = int(data.get("seed", 0))
    return (_dataset(data["name"], int(data["task_n"]), s, "train"),
            _dataset(data["name"], int(data["test_n"]), s, "test"))


def aux_data(data: dict) -> ImageSet:
    return _dataset(data["name"], int(data["aux_n"]), int(data.get("seed", 0)), "aux")


def pretrain_images(pcfg: PretrainConfig) -> np.ndarray:
    return _dataset(pcfg.dataset, pcfg.subset_size, pcfg.data_seed, "train").images


# ------------------------------------------------------------- stage runners

def _load_model(art: Path):
    return load_checkpoint(art / "model")


def _manifest(art: Path) -> dict:
    return json.loads((art / "stage.json").read_text())


def _parent_of_kind(parents: dict, kind: str) -> Path:
    for art in parents.values():
        if _manifest(art)["kind"] == kind:
            return art
    raise ValueError(f"no parent stage of kind {kind!r}")


def _victim_images(parents: dict) -> np.ndarray:
    cfg = PretrainConfig.from_dict(_manifest(_parent_of_kind(parents, "pretrain"))["config"]["pretrain"])
    return pretrain_images(cfg)


def _run_pretrain(st, parents, out, data):
    cfg = PretrainConfig.from_dict(st.config["pretrain"])
    enc, hist = pretrain_simclr(cfg, pretrain_images(cfg))
    enc.provenance = st.config.get("role", "clean")
    save_checkpoint(enc, out / "model", {"config": cfg.to_dict()})
    (out / "history.json").write_text(json.dumps(hist))
    return {"train_seconds": float(sum(hist["seconds"])), "final_loss": hist["loss"][-1]}


def _run_shadow(st, parents, out, data):
    c = st.config
    art = _parent_of_kind(parents, "pretrain")
    enc = _load_model(art)
    images = _victim_images(parents)
    trig = TriggerPattern.from_dict(c["trigger"]) if c.get("trigger") else default_trigger(images.shape[-1])
    sel = select_source_class(enc, images, c["k_clusters"], seed=c["seed"], subsample=c.get("subsample"),
                              min_size=c["S"])
    sh = build_shadow_dataset(sel, images, trig, c["S"], seed=c["seed"])
    sh.meta["cluster_size"] = int(len(sel.member_indices))
    sh.save(out / "shadow")
    anchors = compute_anchors(enc, images, sel, c["A"], c["S"], seed=c["seed"])
    anchors.save(out / "anchors")
    return {"source_cluster": sel.cluster_id, "cluster_size": int(len(sel.member_indices))}


def _load_shadow(parents) -> tuple:
    art = _parent_of_kind(parents, "shadow")
    return ShadowDataset.load(art / "shadow"), AnchorSet.load(art / "anchors")


def _run_embed(st, parents, out, data):
    enc = _load_model(_parent_of_kind(parents, "pretrain"))
    sh, anchors = _load_shadow(parents)
    cfg = WatermarkConfig.from_dict({**st.config["watermark"], "trigger": sh.trigger.to_dict()})
    t0 = time.perf_counter()
    e_wm, trace = embed_watermark(enc, _victim_images(parents), sh, anchors, cfg)
    secs = time.perf_counter() - t0
    save_checkpoint(e_wm, out / "model", {"config": cfg.to_dict()})
    trace.to_csv(out / "trace.csv")
    return {"embed_seconds": secs, "final": trace.rows[-1] if trace.rows else {}}


def _run_baseline(st, parents, out, data):
    enc = _load_model(_parent_of_kind(parents, "pretrain"))
    sh, _ = _load_shadow(parents)
    c = dict(st.config["baseline"])
    momentum = c.pop("momentum_center", 0.9)
    cfg = WatermarkConfig.from_dict({**c, "trigger": sh.trigger.to_dict()})
    e_b, trace = embed_baseline_cluster(enc, _victim_images(parents), sh, cfg, momentum=momentum)
    save_checkpoint(e_b, out / "model", {"config": cfg.to_dict()})
    trace.to_csv(out / "trace.csv")
    return {}


def _run_transfer(st, parents, out, data):
    (art,) = parents.values()
    enc = _load_model(art)
    task, test = task_data(data)
    c = st.config
    model = adversary.transfer_downstream(enc, task, epochs=c["epochs"], lr=c["lr"], seed=c["seed"],
                                          task_id=data["name"])
    save_checkpoint(model, out / "model", {"config": c})
    return {"acc": adversary.accuracy(model, test)}


def _run_attack(st, parents, out, data):
    c = dict(st.config)
    kind = c["kind"]
    model_art = next(a for a in parents.values() if _manifest(a)["kind"] != "shadow")
    model = _load_model(model_art)
    task, test = task_data(data)
    info = {}
    if kind == "FT":
        res, hist = adversary.attack_finetune(model, task, lr=c["lr"], decay=c["decay"],
                                              max_epochs=c["max_epochs"], patience=c["patience"],
                                              seed=c["seed"])
        res.encoder.provenance = "attacked-FT"
        info["epochs_run"] = len(hist["val_loss"])
    elif kind == "PRUNE":
        res = adversary.attack_prune(model, c["r"])
    elif kind == "OVERWRITE":
        sh, _ = _load_shadow(parents)
        res, info = adversary.attack_overwrite(model, sh.trigger, aux_data(data),
                                               tuple(c["target_class_pair"]), epochs=c["epochs"],
                                               lr=c["lr"], success_target=c["success_target"], seed=c["seed"])
    elif kind == "UNLEARN":
        sh, _ = _load_shadow(parents)
        guess = adversary.guess_watermark_samples(sh, aux_data(data).images, c["overlap"], seed=c["seed"])
        res = adversary.attack_unlearn(model, guess, epochs=c["epochs"], lr=c["lr"], seed=c["seed"])
    elif kind == "ADAPTIVE":
        sh, _ = _load_shadow(parents)
        res = adversary.attack_adaptive_remove(model, sh, c["psi"], aux_data(data).images, epochs=c["epochs"],
                                               lr=c["lr"], utility_weight=c["utility_weight"], seed=c["seed"])
    else:
        raise ValueError(f"attack kind {kind!r} has no stage runner")
    save_checkpoint(res, out / "model", {"attack_config": c, "source_hash": param_checksum(model)})
    if isinstance(res, DownstreamModel):
        info["acc"] = adversary.accuracy(res, test)
    return info


def _suspect_and_acc(art: Path, data: dict, seed: int):
    model = _load_model(art)
    task, test = task_data(data)
    if isinstance(model, DownstreamModel):
        return model, adversary.accuracy(model, test)
    return model, linear_probe_accuracy(model, task, test, seed=seed)


def _verify(model, sh, scenario, c):
    if scenario == "MLaaS":
        if not isinstance(model, DownstreamModel):
            raise ValueError("MLaaS verification needs a downstream model")
        return verify.verify_mlaas(verify.ClassifierService(model), sh, tau=c["tau"], lam=c["lambda"])
    enc = model.encoder if isinstance(model, DownstreamModel) else model
    return verify.verify_eaas(verify.EncoderService(enc), sh, mu=c["mu"], lam=c["lambda"])


def _run_verify(st, parents, out, data):
    c = st.config
    sh, _ = _load_shadow(parents)
    art = next(a for a in parents.values() if _manifest(a)["kind"] != "shadow")
    model, acc = _suspect_and_acc(art, data, c["seed"])
    rep = _verify(model, sh, c["scenario"], c)
    rep.write_per_pair(out / "pairs.csv")
    (out / "report.json").write_text(rep.to_json(str(out / "pairs.csv")))
    table = ResultsTable(lam=c["lambda"])
    table.add(c["suspect"], c["scenario"], acc, rep.p_value, c.get("attack", "DT"), c.get("params", ""))
    table.to_csv(out / "rows.csv")
    return {"p_value": rep.p_value, "acc": acc}


def _run_sweep(st, parents, out, data):
    c = st.config
    sh, _ = _load_shadow(parents)
    art = next(a for a in parents.values() if _manifest(a)["kind"] != "shadow")
    model, acc = _suspect_and_acc(art, data, c["seed"])
    table = ResultsTable(lam=c["lambda"])
    for k in c["sizes"]:
        rep = _verify(model, sh.head(int(k)), c["scenario"], c)
        table.add(c["suspect"], c["scenario"], acc, rep.p_value, c.get("attack", "DT"), f"pairs={int(k)}")
    table.to_csv(out / "rows.csv")
    return {}


def _run_diagnose(st, parents, out, data):
    c = st.config
    sh, _ = _load_shadow(parents)
    enc_art = next(a for a in parents.values() if _manifest(a)["kind"] in ("pretrain", "embed", "baseline"))
    ds_art = next(a for a in parents.values() if _manifest(a)["kind"] == "transfer")
    enc, model = _load_model(enc_art), _load_model(ds_art)
    _, test = task_data(data)
    n = min(c["n_clean"], len(test))
    cluster = diagnostics.intra_watermark_similarity(enc, sh)
    bias = diagnostics.prediction_bias(model, apply_trigger(test.images[:n], sh.trigger))
    diagnostics.export_pca_scatter(enc, test.images[:n], sh, out / "pca")
    res = {"suspect": c["suspect"], "cluster": cluster.to_dict(), "bias": bias.to_dict()}
    diagnostics.write_json(res, out / "diagnostics.json")
    return res


RUNNERS = {
    "pretrain": _run_pretrain, "shadow": _run_shadow, "embed": _run_embed, "baseline": _run_baseline,
    "transfer": _run_transfer, "attack": _run_attack, "verify": _run_verify, "sweep": _run_sweep,
    "diagnose": _run_diagnose,
}
# stages that read the plan-level data spec
_USES_DATA = {"transfer", "attack", "verify", "sweep", "diagnose"}


# ---------------------------------------------------------------- execution

class StageError(RuntimeError):
    pass


def stage_hash(st: Stage, parent_hashes: dict, data: dict) -> str:
    key = {"kind": st.kind, "config": st.config, "parents": [parent_hashes[p] for p in st.parents],
           "code": STAGE_CODE_VERSIONS.get(st.kind, CODE_VERSION)}
    if st.kind in _USES_DATA:
        key["data"] = data
    return canonical_hash(key)[:20]


def _execute(st: Stage, h: str, parents: dict, root: Path, plan: ExperimentPlan) -> Path:
    final = root / st.kind / h
    if (final / "DONE").exists():
        log.info("cache hit %s (%s)", st.name, h)
        return final
    log.info("running %s (%s)", st.name, h)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{h}-", dir=final.parent))
    t0 = time.perf_counter()
    try:
        outputs = RUNNERS[st.kind](st, parents, tmp, plan.data)
    except Exception as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise StageError(f"stage {st.name!r} failed: {exc}") from exc
    manifest = {
        "stage": st.name,
        "kind": st.kind,
        "config": st.config,
        "config_hash": h,
        "parents": {p: parents[p].name for p in st.parents},
        "parent_kinds": {p: _manifest(parents[p])["kind"] for p in st.parents},
        "data": plan.data if st.kind in _USES_DATA else None,
        "seed": st.config.get("seed"),
        "seconds": time.perf_counter() - t0,
        "outputs": outputs,
    }
    (tmp / "stage.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    (tmp / "DONE").write_text("ok\n")
    if final.exists():  # stale partial directory from an interrupted run
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def run_plan(plan: ExperimentPlan, root=None, jobs: int = 1) -> ResultsTable:
    """Execute the plan's stages, reusing cached artifacts, and collect the
    rows of every verify/sweep stage into a ResultsTable."""
    plan.validate()
    root = cache_root(root)
    root.mkdir(parents=True, exist_ok=True)
    if plan.deterministic:
        set_deterministic(True)
    hashes, arts = {}, {}
    for st in plan.stages:
        hashes[st.name] = stage_hash(st, hashes, plan.data)

    pending = list(plan.stages)
    if jobs <= 1:
        for st in pending:
            arts[st.name] = _execute(st, hashes[st.name], {p: arts[p] for p in st.parents}, root, plan)
    else:
        running = {}
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            while pending or running:
                for st in [s for s in pending if all(p in arts for p in s.parents)]:
                    pending.remove(st)
                    fut = pool.submit(_execute, st, hashes[st.name], {p: arts[p] for p in st.parents}, root, plan)
                    running[fut] = st
                if not running:
                    raise StageError("unsatisfiable stage dependencies")
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in done:
                    st = running.pop(fut)
                    arts[st.name] = fut.result()

    table = ResultsTable(lam=plan.root_config.get("lambda", verify.LAMBDA))
    for st in plan.stages:
        if st.kind in ("verify", "sweep"):
            table.rows.extend(ResultsTable.from_csv(arts[st.name] / "rows.csv", table.lam).rows)
    table.check()
    table.artifacts = dict(arts)
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.yaml").write_text(yaml.safe_dump({"run_id": plan.run_id, "root_seed": plan.root_seed,
                                                    "data": plan.data, "config": plan.root_config},
                                                   sort_keys=True))
    lineage = {st.name: {"kind": st.kind, "hash": hashes[st.name], "dir": str(arts[st.name]),
                         "parents": list(st.parents)} for st in plan.stages}
    (out / "stages.json").write_text(json.dumps(lineage, indent=2))
    table.to_csv(out / "results.csv")
    return table


def resolve_lineage(artifact: Path, root=None) -> list:
    """Walk manifest parent links from one artifact to the root stages.

    Returns the manifests in walk order; raises if a link is broken.
    """
    root = cache_root(root)
    out, todo = [], [Path(artifact)]
    while todo:
        art = todo.pop()
        m = _manifest(art)
        out.append(m)
        for pname, h in m["parents"].items():
            kind = m["parent_kinds"][pname]
            parent = root / kind / h
            if not (parent / "DONE").exists():
                raise FileNotFoundError(f"broken lineage link {pname} -> {parent}")
            todo.append(parent)
    return out


# ------------------------------------------------------------------- presets

def _pretrain_cfg(cfg: dict, data: dict, seed: int, data_seed: int) -> dict:
    return PretrainConfig.from_dict({**cfg["pretrain"], "dataset": data["name"],
                                     "subset_size": int(data["train_n"]), "seed": seed,
                                     "data_seed": data_seed}).to_dict()


class _Builder:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = int(cfg["seed"])
        self.stages = []
        self.names = set()
        self.vcfg = {"lambda": cfg["lambda"], "tau": cfg["tau"], "mu": cfg["mu"]}

    def seed(self, tag):
        return derive_seed(self.root, tag)

    def add(self, name, kind, config, parents=()):
        if name not in self.names:
            self.stages.append(Stage(name, kind, config, tuple(parents)))
            self.names.add(name)
        return name

    def core(self):
        cfg, data = self.cfg, self.cfg["data"]
        pre = self.add("pretrain/victim", "pretrain",
                       {"role": "clean", "pretrain": _pretrain_cfg(cfg, data, self.seed("pretrain"),
                                                                   int(data.get("seed", 0)))})
        sh_seed = self.seed("shadow")
        self.add("shadow", "shadow", {**cfg["shadow"], "A": cfg["watermark"]["A"], "seed": sh_seed,
                                      "trigger": None}, [pre])
        self.add("embed", "embed", {"watermark": {**cfg["watermark"], "S": cfg["shadow"]["S"],
                                                  "seed": self.seed("embed")}}, [pre, "shadow"])
        self.transfer("clean", pre)
        self.transfer("wm", "embed")

    def transfer(self, sid, parent):
        return self.add(f"transfer/{sid}", "transfer",
                        {**self.cfg["transfer"], "seed": self.seed("transfer")}, [parent])

    def verify(self, sid, scenario, model_stage, attack="DT", params=""):
        return self.add(f"verify/{scenario}/{sid}", "verify",
                        {**self.vcfg, "scenario": scenario, "suspect": sid, "attack": attack,
                         "params": params, "seed": self.seed("probe")}, [model_stage, "shadow"])

    def attack(self, sid, kind, parent, extra, shadow=False):
        c = {"kind": kind, "seed": self.seed(f"attack/{kind}"), **extra}
        parents = [parent] + (["shadow"] if shadow else [])
        return self.add(f"attack/{sid}", "attack", c, parents)


def _fmt(v) -> str:
    return f"{v:g}"


def build_preset(name: str, cfg: dict | None = None, out_dir=None) -> ExperimentPlan:
    """Build the stage graph for one of the named desk-scale presets."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    cfg = deep_merge(DESK_DEFAULTS, cfg)
    b = _Builder(cfg)
    b.core()
    atk = cfg["attacks"]
    if name == "tableII-desk":
        for sid in ("clean", "wm"):
            b.verify(sid, "MLaaS", f"transfer/{sid}")
        for sid, st in (("clean", "pretrain/victim"), ("wm", "embed")):
            b.verify(sid, "EaaS", st)
        neg = cfg["negatives"]
        base = PretrainConfig.from_dict(b.stages[0].config["pretrain"])
        for v in neg["variants"]:
            spec = NegativeVariantSpec(v, temperature_scale=neg["temperature_scale"], lr_scale=neg["lr_scale"])
            sid = f"neg-{v}"
            pre = b.add(f"pretrain/{sid}", "pretrain", {"role": f"negative-{v}",
                                                        "pretrain": spec.apply(base).to_dict()})
            b.transfer(sid, pre)
            b.verify(sid, "MLaaS", f"transfer/{sid}")
            b.verify(sid, "EaaS", pre)
    elif name == "tableV-desk":
        for sid in ("clean", "wm"):
            b.verify(sid, "MLaaS", f"transfer/{sid}")
        ft = b.attack("wm+FT", "FT", "transfer/wm", atk["finetune"])
        b.verify("wm+FT", "MLaaS", ft, "FT", f"lr={_fmt(atk['finetune']['lr'])}")
        for r in atk["prune"]["ratios"]:
            sid = f"wm+PR-{_fmt(r)}"
            st = b.attack(sid, "PRUNE", "transfer/wm", {"r": float(r)})
            b.verify(sid, "MLaaS", st, "PRUNE", f"r={_fmt(r)}")
    elif name == "tableVI-desk":
        b.verify("wm", "MLaaS", "transfer/wm")
        ow = dict(atk["overwrite"])
        st = b.attack("wm+OW", "OVERWRITE", "embed", ow, shadow=True)
        b.verify("wm+OW", "MLaaS", b.transfer("wm+OW", st), "OVERWRITE",
                 f"pair={ow['target_class_pair'][0]}-{ow['target_class_pair'][1]}")
        ul = dict(atk["unlearn"])
        st = b.attack("wm+UL", "UNLEARN", "embed", ul, shadow=True)
        b.verify("wm+UL", "MLaaS", b.transfer("wm+UL", st), "UNLEARN", f"overlap={_fmt(ul['overlap'])}")
    elif name == "psi-sweep":
        ad = dict(atk["adaptive"])
        for psi in ad.pop("psi"):
            sid = f"wm+ADAPT-{_fmt(psi)}"
            st = b.attack(sid, "ADAPTIVE", "embed", {**ad, "psi": float(psi)}, shadow=True)
            b.verify(sid, "MLaaS", b.transfer(sid, st), "ADAPTIVE", f"psi={_fmt(psi)}")
    elif name == "pairs-sweep":
        for sid in ("clean", "wm"):
            b.add(f"sweep/MLaaS/{sid}", "sweep",
                  {**b.vcfg, "scenario": "MLaaS", "suspect": sid, "sizes": list(cfg["pairs_sweep"]["sizes"]),
                   "seed": b.seed("probe")}, [f"transfer/{sid}", "shadow"])
    elif name == "fig2-desk":
        b.add("baseline", "baseline", {"baseline": {**cfg["baseline"], "S": cfg["shadow"]["S"],
                                                    "seed": b.seed("baseline")}}, ["pretrain/victim", "shadow"])
        b.transfer("baseline", "baseline")
        for sid, enc in (("clean", "pretrain/victim"), ("wm", "embed"), ("baseline", "baseline")):
            b.verify(sid, "MLaaS", f"transfer/{sid}")
            b.add(f"diagnose/{sid}", "diagnose", {**cfg["diagnose"], "suspect": sid},
                  [enc, "shadow", f"transfer/{sid}"])
    out_dir = out_dir or Path("runs") / f"{cfg['run_id']}-{name}-s{b.root}"
    data = {**cfg["data"], "seed": int(cfg["data"].get("seed", 0))}
    return ExperimentPlan(b.stages, run_id=f"{cfg['run_id']}-{name}", root_seed=b.root, out_dir=str(out_dir),
                          data=data, deterministic=bool(cfg["deterministic"]), root_config=cfg)


# --------------------------------------------------------------------- plots

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def emit_plots(results: ResultsTable, out_dir) -> list:
    """Render the figure shapes the results support; returns written paths."""
    out_dir = Path(out_dir)
    files = []
    arts = results.artifacts or {}
    if not results.rows and not arts:
        return files
    out_dir.mkdir(parents=True, exist_ok=True)
    plt = _plt()

    for name, art in sorted(arts.items()):
        pca_csv = Path(art) / "pca.csv"
        if name.startswith("diagnose/") and pca_csv.exists():
            xy, labels = diagnostics.load_scatter(pca_csv)
            path = out_dir / f"pca_{name.split('/', 1)[1]}.png"
            diagnostics._plot_scatter(xy, labels, path)
            files.append(path)

    if "pretrain/victim" in arts and "embed" in arts:
        pre = _manifest(Path(arts["pretrain/victim"]))["outputs"]["train_seconds"]
        emb = _manifest(Path(arts["embed"]))["outputs"]["embed_seconds"]
        frac = emb / pre
        fig, ax = plt.subplots(figsize=(3.5, 3))
        ax.bar(["pretraining", "embedding"], [100.0, 100.0 * frac], color=["tab:gray", "tab:red"])
        ax.set_ylabel("% of pretraining wall-clock")
        ax.set_title(f"embedding overhead {100 * frac:.1f}%")
        fig.tight_layout()
        path = out_dir / "overhead.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        (out_dir / "overhead.json").write_text(json.dumps({"pretrain_seconds": pre, "embed_seconds": emb,
                                                           "fraction": frac}, indent=2))
        files.append(path)

    psi_rows = sorted((float(r["params"].split("=")[1]), r) for r in results.rows if r["attack"] == "ADAPTIVE")
    if psi_rows:
        fig, ax = plt.subplots(figsize=(4, 3))
        xs = [p for p, _ in psi_rows]
        ax.plot(xs, [r["acc"] for _, r in psi_rows], "o-", color="tab:blue")
        ax.set_xlabel("psi")
        ax.set_ylabel("accuracy", color="tab:blue")
        ax2 = ax.twinx()
        ax2.semilogy(xs, [max(r["p_value"], 1e-300) for _, r in psi_rows], "s--", color="tab:red")
        ax2.set_ylabel("p-value", color="tab:red")
        fig.tight_layout()
        path = out_dir / "psi_sweep.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        files.append(path)

    pair_rows = [r for r in results.rows if r["params"].startswith("pairs=")]
    if pair_rows:
        fig, ax = plt.subplots(figsize=(4, 3))
        for sid in sorted({r["suspect"] for r in pair_rows}):
            rows = sorted((int(r["params"].split("=")[1]), r["p_value"]) for r in pair_rows if r["suspect"] == sid)
            ax.semilogy([k for k, _ in rows], [max(p, 1e-300) for _, p in rows], "o-", label=sid)
        ax.axhline(results.lam, color="k", lw=0.8, ls=":")
        ax.set_xlabel("probing pairs")
        ax.set_ylabel("p-value")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / "pairs_sweep.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        files.append(path)
    return files


def load_run(run_dir) -> ResultsTable:
    """ResultsTable of a finished run directory, with its artifact map."""
    run_dir = Path(run_dir)
    plan = yaml.safe_load((run_dir / "plan.yaml").read_text())
    table = ResultsTable.from_csv(run_dir / "results.csv", plan.get("config", {}).get("lambda", verify.LAMBDA))
    stages = json.loads((run_dir / "stages.json").read_text())
    table.artifacts = {k: Path(v["dir"]) for k, v in stages.items()}
    return table

