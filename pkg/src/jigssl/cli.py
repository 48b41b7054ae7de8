"""Command-line entry point: ``jigssl <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import experiments as ex
from .dataset import SynthSpec, generate_synthetic_dataset, load_images, load_manifest, make_folds, plan_for_k
from .metrics import evaluate_scores, write_roc_csv
from .model import build_model, load_checkpoint, save_checkpoint
from .ood import MODES, evaluate_ood
from .permset import generate_permutation_set
from .training import TrainConfig, TrainData, evaluate, load_config_file, parse_config_text, predict_proba, train

log = logging.getLogger("jigssl")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _experiment_config(args, protocol: str) -> ex.ExperimentConfig:
    mapping = load_config_file(args.config) if args.config else {}
    mapping.setdefault("protocol", protocol)
    if mapping["protocol"] != protocol:
        raise ValueError(f"config protocol {mapping['protocol']!r} does not match subcommand ({protocol})")
    cfg = ex.ExperimentConfig.from_mapping(mapping)
    updates = {}
    if getattr(args, "manifest", None):
        updates["manifest"] = args.manifest
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if getattr(args, "seeds", None):
        updates["seeds"] = tuple(args.seeds)
    if getattr(args, "k", None):
        updates["k_list"] = tuple(args.k)
    if getattr(args, "folds", None) is not None:
        updates["folds"] = tuple(args.folds)
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.out:
        updates["output_dir"] = args.out
    cfg = replace(cfg, **updates)
    if not cfg.manifest:
        raise ValueError("no manifest given (--manifest or 'manifest' in --config)")
    return cfg


def cmd_gen_perms(args) -> int:
    ps = generate_permutation_set(args.grid, args.P, args.pool, args.seed or 0)
    out = Path(args.out or "perms.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    ps.save(out)
    print(f"wrote {ps.P} permutations (min pairwise Hamming {ps.min_pairwise_hamming}) to {out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    spec = SynthSpec(videos=args.videos, frames_per_video=args.frames, image_side=args.side)
    m = generate_synthetic_dataset(args.out or "synth", spec, seed=args.seed or 0)
    print(f"wrote {len(m.records)} frames ({m.n_labeled} labelled) to {m.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment_config(args, "fraction-sweep")
    seed = cfg.seeds[0]
    manifest = load_manifest(cfg.manifest)
    template = make_folds(manifest, cfg.n_folds, cfg.val_fraction, cfg.split_seed, cfg.fold_strategy)[args.fold]
    k = args.k[0] if args.k else 100.0
    plan = plan_for_k(template, manifest, k, seed=seed)
    tc = ex.train_config_for(cfg, args.arm, k, seed)
    ssl = args.arm == "ssl"
    permset = ex.permset_for(tc, cfg.perm_seed) if ssl else None
    data = TrainData.from_plan(manifest, plan)
    model, history = train(build_model(tc.encoder, tc.P if ssl else None, seed=seed), data, permset, tc,
                           dump_shuffled=args.dump_shuffled)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.pt", permset, {"train_config": tc.to_text(), "fold": args.fold})
    history.write_csv(out / "history.csv")
    (out / "config.txt").write_text(tc.to_text())
    rep = evaluate(model, data.val_images, data.val_labels, tc.image_side)
    rep.save(out / "validation.json")
    print(json.dumps({k: v for k, v in rep.as_dict().items() if k != "roc"}, sort_keys=True))
    return EXIT_OK


def _checkpoint_config(extra: dict) -> TrainConfig:
    return TrainConfig.from_mapping(parse_config_text(extra["train_config"])) if "train_config" in extra \
        else TrainConfig()


def cmd_eval(args) -> int:
    model, _, extra = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if args.fold is not None:
        cfg = _experiment_config(args, "fraction-sweep")
        recs = make_folds(manifest, cfg.n_folds, cfg.val_fraction, cfg.split_seed,
                          cfg.fold_strategy)[args.fold].validation(manifest)
    else:
        recs = manifest.labeled
    data = TrainData.from_records(manifest, recs, ())
    scores = predict_proba(model, data.sup_images, _checkpoint_config(extra).image_side)
    rep = evaluate_scores(scores, data.sup_labels.numpy())
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "eval.json")
    if rep.roc is not None:
        write_roc_csv(rep.roc, out / "eval_roc.csv")
    print(json.dumps({k: v for k, v in rep.as_dict().items() if k != "roc"}, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args, "fraction-sweep")
    report = ex.run_fraction_sweep(cfg)
    ex.render_report(report, cfg.output_dir)
    print(ex.sweep_markdown(report), end="")
    if report.failed:
        print(f"{len(report.failed)} of {len(report.cells)} cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_domain_adapt(args) -> int:
    cfg = _experiment_config(args, "domain-adaptation")
    report = ex.run_domain_adaptation(cfg)
    ex.render_report(report, cfg.output_dir)
    print(report.markdown(), end="")
    return EXIT_OK


def cmd_ood_experiment(args) -> int:
    cfg = _experiment_config(args, "ood")
    report = ex.run_ood_experiment(cfg)
    ex.render_report(report, cfg.output_dir)
    print(report.markdown(), end="")
    return EXIT_OK


def cmd_ood_score(args) -> int:
    model, permset, extra = load_checkpoint(args.checkpoint)
    tc = _checkpoint_config(extra)
    ins, outs = load_manifest(args.in_manifest), load_manifest(args.out_manifest)
    in_imgs, out_imgs = load_images(ins, ins.records), load_images(outs, outs.records)
    res = evaluate_ood(model, in_imgs, out_imgs, permset, tc.tile_spec, args.mode, args.M, seed=args.seed or 0,
                       scramble_fraction=tc.scramble_fraction)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    paths = [r.image_path for r in ins.records] + [r.image_path for r in outs.records]
    with open(out / "ood_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "ood_label", "kappa", "kl_term", "jigsaw_term"])
        for p, lab, s in zip(paths, res["labels"], res["scores"]):
            w.writerow([p, int(lab), f"{s.kappa:.8f}", f"{s.kl_term:.8f}", f"{s.jigsaw_term:.8f}"])
    write_roc_csv(res["roc"], out / "ood_roc.csv")
    summary = {"mode": args.mode, "M": args.M, "n_in": len(in_imgs), "n_out": len(out_imgs), "auroc": res["auroc"]}
    (out / "ood_auroc.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.input)
    report = ex.load_report(src)
    formats = args.format or ["csv", "markdown", "plot"]
    for p in ex.render_report(report, args.out or src, formats):
        print(p)
    return EXIT_OK


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from clobbering values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat 'key = value' config file", **kw)
    p.add_argument("--seed", type=int, **kw)
    p.add_argument("--out", help="output file or directory", **kw)
    p.add_argument("--workers", type=int, **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jigssl", description=__doc__, parents=[_global_flags(False)])
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-perms", parents=[common], help="generate a permutation set file")
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--P", type=int, default=30)
    p.add_argument("--pool", type=int, default=None, help="candidate pool size (default: all, or 10000 for G>=3)")
    p.set_defaults(func=cmd_gen_perms)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic two-modality dataset")
    p.add_argument("--videos", type=int, default=100)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--side", type=int, default=48)
    p.set_defaults(func=cmd_synth_data)

    def experiment_args(p):
        p.add_argument("--manifest")
        p.add_argument("--k", type=float, nargs="+")
        p.add_argument("--folds", type=int, nargs="+")
        p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("train", parents=[common], help="train one arm on one fold")
    experiment_args(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--arm", choices=ex.ARMS, default="ssl")
    p.add_argument("--dump-shuffled", metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on labelled records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=None, help="evaluate only this fold's validation split")
    p.set_defaults(func=cmd_eval)

    for name, func, hlp in (("sweep", cmd_sweep, "labelled-fraction sweep"),
                            ("domain-adapt", cmd_domain_adapt, "source-to-target modality experiment"),
                            ("ood-experiment", cmd_ood_experiment, "train and score the OOD protocol")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        experiment_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("ood-score", parents=[common], help="score in/out manifests with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-manifest", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--mode", choices=MODES, default="identity")
    p.add_argument("--M", type=int, default=4)
    p.set_defaults(func=cmd_ood_score)

    p = sub.add_parser("report", parents=[common], help="re-render a saved report")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("csv", "markdown", "plot"), action="append")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
