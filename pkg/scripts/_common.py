"""Shared argument handling for the experiment scripts."""

import argparse
import logging
from pathlib import Path

import torch

from jigssl.dataset import SynthSpec, generate_synthetic_dataset, load_manifest
from jigssl.experiments import ExperimentConfig
from jigssl.training import load_config_file


def parse(description, protocol, default_out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--manifest", help="dataset manifest; a synthetic set is generated under --data if omitted")
    p.add_argument("--data", default="data/synth", help="where to generate (or reuse) the synthetic set")
    p.add_argument("--config", help="flat key = value experiment config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default=default_out)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    if args.manifest:
        manifest = load_manifest(args.manifest)
    elif (Path(args.data) / "manifest.csv").exists():
        manifest = load_manifest(Path(args.data) / "manifest.csv")
    else:
        manifest = generate_synthetic_dataset(args.data, SynthSpec(videos=100, frames_per_video=20), seed=0)
    mapping = load_config_file(args.config) if args.config else {}
    mapping.update(protocol=protocol, seeds=tuple(args.seeds), output_dir=args.out, workers=args.workers,
                   manifest=str(manifest.root / "manifest.csv"))
    return ExperimentConfig.from_mapping(mapping), manifest
