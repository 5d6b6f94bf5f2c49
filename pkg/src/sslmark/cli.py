"""Command-line entry point.

Every subcommand works standalone on checkpoint directories; ``run-plan``
executes a whole preset or YAML plan through the cached stage graph.
Verification subcommands exit with 0 (not pirated), 2 (pirated) or 1 (error).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import adversary, diagnostics, harness, verify
from .embed import WatermarkConfig, embed_watermark
from .models import DownstreamModel, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, linear_probe_accuracy, pretrain_simclr
from .shadow import (ShadowDataset, apply_trigger, build_shadow_dataset, compute_anchors,
                     default_trigger, select_source_class)

EXIT_NOT_PIRATED, EXIT_ERROR, EXIT_PIRATED = 0, 1, 2

log = logging.getLogger("sslmark")


def _cfg(args) -> dict:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    return harness.load_config(args.config, over)


def _data(cfg):
    d = cfg["data"]
    return {**d, "seed": int(d.get("seed", 0))}


def _victim_images(cfg, enc_dir: Path):
    manifest = json.loads((enc_dir / "manifest.json").read_text())
    if "config" in manifest and "data_seed" in manifest["config"]:
        pcfg = PretrainConfig.from_dict(manifest["config"])
    else:
        d = _data(cfg)
        pcfg = PretrainConfig(dataset=d["name"], subset_size=d["train_n"], data_seed=d["seed"])
    return harness.pretrain_images(pcfg)


# ------------------------------------------------------------------ commands

def cmd_pretrain(args):
    cfg = _cfg(args)
    d = _data(cfg)
    over = {k: v for k, v in (("epochs", args.epochs), ("arch", args.arch)) if v is not None}
    pcfg = PretrainConfig.from_dict({**cfg["pretrain"], **over, "dataset": d["name"],
                                     "subset_size": d["train_n"], "seed": cfg["seed"], "data_seed": d["seed"]})
    enc, hist = pretrain_simclr(pcfg, harness.pretrain_images(pcfg))
    save_checkpoint(enc, args.out, {"config": pcfg.to_dict(), "train_seconds": sum(hist["seconds"])})
    task, test = harness.task_data(d)
    print(json.dumps({"out": str(args.out), "probe_acc": linear_probe_accuracy(enc, task, test)}))
    return 0


def cmd_embed(args):
    cfg = _cfg(args)
    enc = load_checkpoint(args.encoder)
    images = _victim_images(cfg, Path(args.encoder))
    sc, wc = cfg["shadow"], cfg["watermark"]
    trig = default_trigger(images.shape[-1])
    sel = select_source_class(enc, images, sc["k_clusters"], seed=cfg["seed"], subsample=sc["subsample"],
                              min_size=sc["S"])
    sh = build_shadow_dataset(sel, images, trig, sc["S"], seed=cfg["seed"])
    anchors = compute_anchors(enc, images, sel, wc["A"], sc["S"], seed=cfg["seed"])
    wcfg = WatermarkConfig.from_dict({**wc, "S": sc["S"], "seed": cfg["seed"], "trigger": trig.to_dict()})
    e_wm, trace = embed_watermark(enc, images, sh, anchors, wcfg)
    out = Path(args.out)
    save_checkpoint(e_wm, out / "encoder", {"config": wcfg.to_dict()})
    sh.save(out / "shadow")
    anchors.save(out / "anchors")
    trace.to_csv(out / "trace.csv")
    print(json.dumps({"encoder": str(out / "encoder"), "shadow": str(out / "shadow")}))
    return 0


def cmd_transfer(args):
    cfg = _cfg(args)
    task, test = harness.task_data(_data(cfg))
    model = adversary.transfer_downstream(load_checkpoint(args.encoder), task, epochs=cfg["transfer"]["epochs"],
                                          lr=cfg["transfer"]["lr"], seed=cfg["seed"])
    save_checkpoint(model, args.out, {"config": cfg["transfer"]})
    print(json.dumps({"out": str(args.out), "acc": adversary.accuracy(model, test)}))
    return 0


def cmd_attack(args):
    cfg = _cfg(args)
    d = _data(cfg)
    model = load_checkpoint(args.model)
    acfg = cfg["attacks"]
    kind = args.kind
    info = {}
    shadow = ShadowDataset.load(args.shadow) if args.shadow else None
    if kind in ("UNLEARN", "ADAPTIVE") and shadow is None:
        raise SystemExit(f"--shadow is required for {kind}")
    if kind == "FT":
        task, _ = harness.task_data(d)
        res, _ = adversary.attack_finetune(model, task, **{k: acfg["finetune"][k] for k in
                                                          ("lr", "decay", "max_epochs", "patience")})
    elif kind == "PRUNE":
        res = adversary.attack_prune(model, args.r)
    elif kind == "OVERWRITE":
        trig = shadow.trigger if shadow else default_trigger()
        o = acfg["overwrite"]
        res, info = adversary.attack_overwrite(model, trig, harness.aux_data(d), tuple(o["target_class_pair"]),
                                               epochs=o["epochs"], lr=o["lr"], success_target=o["success_target"])
    elif kind == "UNLEARN":
        u = acfg["unlearn"]
        guess = adversary.guess_watermark_samples(shadow, harness.aux_data(d).images, u["overlap"], seed=cfg["seed"])
        res = adversary.attack_unlearn(model, guess, epochs=u["epochs"], lr=u["lr"])
    else:
        a = acfg["adaptive"]
        res = adversary.attack_adaptive_remove(model, shadow, args.psi, harness.aux_data(d).images,
                                               epochs=a["epochs"], lr=a["lr"], utility_weight=a["utility_weight"])
    save_checkpoint(res, args.out, {"attack_config": {"kind": kind, "r": args.r, "psi": args.psi}})
    print(json.dumps({"out": str(args.out), **info}))
    return 0


def _report(rep, args):
    print(rep.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rep.write_per_pair(out / "pairs.csv")
        (out / "report.json").write_text(rep.to_json(str(out / "pairs.csv")))
    return EXIT_PIRATED if rep.pirated else EXIT_NOT_PIRATED


def cmd_verify_eaas(args):
    enc = load_checkpoint(args.encoder)
    if isinstance(enc, DownstreamModel):
        enc = enc.encoder
    rep = verify.verify_eaas(verify.EncoderService(enc), ShadowDataset.load(args.shadow), mu=args.mu, lam=args.lam)
    return _report(rep, args)


def cmd_verify_mlaas(args):
    model = load_checkpoint(args.model)
    if not isinstance(model, DownstreamModel):
        raise ValueError("verify-mlaas needs a downstream model checkpoint")
    rep = verify.verify_mlaas(verify.ClassifierService(model), ShadowDataset.load(args.shadow), tau=args.tau,
                              lam=args.lam)
    return _report(rep, args)


def cmd_diagnose(args):
    cfg = _cfg(args)
    enc = load_checkpoint(args.encoder)
    sh = ShadowDataset.load(args.shadow)
    _, test = harness.task_data(_data(cfg))
    n = cfg["diagnose"]["n_clean"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = {"cluster": diagnostics.intra_watermark_similarity(enc, sh).to_dict()}
    if args.model:
        model = load_checkpoint(args.model)
        res["bias"] = diagnostics.prediction_bias(model, apply_trigger(test.images[:n], sh.trigger)).to_dict()
    diagnostics.export_pca_scatter(enc, test.images[:n], sh, out / "pca")
    diagnostics.write_json(res, out / "diagnostics.json")
    print(json.dumps(res))
    return 0


def cmd_sweep(args):
    model = load_checkpoint(args.model)
    sh = ShadowDataset.load(args.shadow)
    sizes = [int(s) for s in args.sizes.split(",")]
    if args.scenario == "MLaaS":
        svc = verify.ClassifierService(model)
    else:
        svc = verify.EncoderService(model.encoder if isinstance(model, DownstreamModel) else model)
    for k, p in verify.probing_pair_sweep(svc, sh, sizes, args.scenario):
        print(f"{k},{p!r}")
    return 0


def cmd_plot(args):
    table = harness.load_run(args.run)
    out = Path(args.out) if args.out else Path(args.run) / "plots"
    for f in harness.emit_plots(table, out):
        print(f)
    return 0


def cmd_run_plan(args):
    cfg = _cfg(args)
    if args.preset is None:
        raise SystemExit("run-plan needs --preset (the --config file supplies overrides)")
    plan = harness.build_preset(args.preset, cfg, out_dir=args.out)
    table = harness.run_plan(plan, jobs=args.jobs)
    print(f"# results: {Path(plan.out_dir) / 'results.csv'}")
    print(",".join(harness.RESULTS_HEADER))
    for r in table.rows:
        print(",".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in harness.RESULTS_HEADER))
    if args.plots:
        harness.emit_plots(table, Path(plan.out_dir) / "plots")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file overriding the desk defaults")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sslmark", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="train a clean SimCLR encoder")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--arch")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("embed", parents=[common], help="build a shadow set and watermark an encoder")
    s.add_argument("--encoder", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_embed)

    s = sub.add_parser("transfer", parents=[common], help="train a linear head on a frozen encoder")
    s.add_argument("--encoder", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("attack", parents=[common], help="derive a suspect model")
    s.add_argument("--kind", required=True, choices=[k for k in adversary.ATTACK_KINDS if k != "DT"])
    s.add_argument("--model", required=True, help="downstream model (FT, PRUNE) or encoder (others)")
    s.add_argument("--shadow", help="shadow directory (UNLEARN, ADAPTIVE; trigger source for OVERWRITE)")
    s.add_argument("--r", type=float, default=0.6)
    s.add_argument("--psi", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("verify-eaas", parents=[common], help="verify an encoder service")
    s.add_argument("--encoder", required=True)
    s.add_argument("--shadow", required=True)
    s.add_argument("--mu", type=float, default=verify.MU)
    s.add_argument("--lam", type=float, default=verify.LAMBDA)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_verify_eaas)

    s = sub.add_parser("verify-mlaas", parents=[common], help="verify a classifier service")
    s.add_argument("--model", required=True)
    s.add_argument("--shadow", required=True)
    s.add_argument("--tau", type=float, default=verify.TAU_SMALL)
    s.add_argument("--lam", type=float, default=verify.LAMBDA)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_verify_mlaas)

    s = sub.add_parser("diagnose", parents=[common], help="cluster, bias and PCA diagnostics")
    s.add_argument("--encoder", required=True)
    s.add_argument("--shadow", required=True)
    s.add_argument("--model", help="downstream model for the prediction-bias statistic")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_diagnose)

    s = sub.add_parser("sweep", parents=[common], help="p-value versus number of probing pairs")
    s.add_argument("--model", required=True)
    s.add_argument("--shadow", required=True)
    s.add_argument("--sizes", default="20,50,100,200")
    s.add_argument("--scenario", choices=["MLaaS", "EaaS"], default="MLaaS")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("plot", parents=[common], help="render figures of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_plot)

    s = sub.add_parser("run-plan", parents=[common], help="run a preset through the stage cache")
    s.add_argument("--preset", choices=harness.PRESETS)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--plots", action="store_true", help="also render figures")
    s.set_defaults(fn=cmd_run_plan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.fn(args) or 0)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
