import os
import sys
import json
import time
import hashlib
import logging
from os import path
from argparse import ArgumentParser, Namespace
from typing import Any, Dict, List, Optional

import yaml

from lsdiff import __version__
from lsdiff.errors import LipSyncError, SchemaError
from lsdiff.environment import Env, RunConfig, parse_config, apply_env
from lsdiff.logutils import setup_logging

logger = logging.getLogger(__name__)

RUN_MANIFEST_NAME = "run_manifest.json"


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="lsdiff", description="Audio-driven lip-sync video diffusion")
    parser.add_argument("--version", action="version", version=f"lsdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: ArgumentParser):
        p.add_argument("--config", type=str, default=None, help="YAML run configuration. Flags override it.")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--device", type=str, default=None, help="Device to use, e.g. cpu or cuda.")
        p.add_argument("--output-dir", type=str, default=None, help="General output directory. Every run creates "
                                                                    "a sub-folder in here with its logs and "
                                                                    "run manifest.")
        p.add_argument("--exp-name", type=str, default=None, help="Experiment name. Reusing the name of a "
                                                                  "previous training run resumes it.")
        p.add_argument("--log-level", type=str, default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override any config field by dotted path, e.g. train.lr=1e-4")

    p = sub.add_parser("train", help="Train the denoiser and ID-Guider")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optim", type=str, default=None, choices=["adamw", "adam", "sgd"])
    p.add_argument("--use-fp16", action="store_true", default=None, help="Use FP16 mixed precision on CUDA")
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--manifest", type=str, default=None, help="Curated clip manifest. Without one a synthetic "
                                                              "corpus is generated.")
    p.add_argument("--codec", type=str, default=None, choices=["identity", "unshuffle", "toy", "diffusers"])

    p = sub.add_parser("infer", help="Lip-sync a video to an audio track")
    common(p)
    p.add_argument("--video", type=str, required=True)
    p.add_argument("--audio", type=str, default=None, help="Driving audio. Defaults to the video's own track.")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--scale", type=float, default=None, help="Classifier-free guidance scale")
    p.add_argument("--steps", type=int, default=None, help="Number of denoising steps")
    p.add_argument("--reference", type=str, default=None, choices=["random", "first"])

    p = sub.add_parser("curate", help="Filter raw clips into a training manifest")
    common(p)
    p.add_argument("--in", dest="in_dir", type=str, required=True)
    p.add_argument("--out", dest="out_dir", type=str, required=True)
    p.add_argument("--manifest", type=str, required=True, help="JSON-lines manifest, appended to and resumed")
    p.add_argument("--thresholds", type=str, default=None, help="YAML mapping of curate.* fields")

    p = sub.add_parser("evaluate", help="Score generated clips against references")
    common(p)
    p.add_argument("--gen", type=str, required=True)
    p.add_argument("--ref", type=str, required=True)
    p.add_argument("--report", type=str, required=True, help="JSON report path; a CSV is written beside it")
    p.add_argument("--embedder", type=str, default=None, choices=["mean_pixel"])
    p.add_argument("--lpips-command", type=str, default=None)
    p.add_argument("--sync-command", type=str, default=None)

    p = sub.add_parser("config", help="Print the fully defaulted configuration")
    common(p)
    return parser


def _parse_set(items: List[str]) -> Dict[str, Any]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise SchemaError(f"expected KEY=VALUE, got {item!r}", field="--set")
        out[key.strip()] = yaml.safe_load(value)
    return out


def overrides_from_args(args: Namespace) -> Dict[str, Any]:
    o = {"seed": args.seed, "device": args.device, "output_dir": args.output_dir, "exp_name": args.exp_name,
         "log_level": args.log_level}
    if args.command == "train":
        o.update({"train.steps": args.steps, "train.batch_size": args.batch_size, "train.lr": args.lr,
                  "train.optim": args.optim, "train.use_fp16": args.use_fp16,
                  "train.val_interval": args.val_interval, "train.manifest": args.manifest,
                  "train.codec": args.codec})
    elif args.command == "infer":
        o.update({"infer.guidance_scale": args.scale, "infer.steps": args.steps, "infer.reference": args.reference})
    elif args.command == "curate" and args.thresholds is not None:
        try:
            with open(args.thresholds, "r") as f:
                o["curate"] = yaml.safe_load(f) or {}
        except OSError as e:
            raise SchemaError(f"cannot read {args.thresholds}: {e}", field="--thresholds") from e
    elif args.command == "evaluate":
        o.update({"evaluate.embedder": args.embedder, "evaluate.lpips_command": args.lpips_command,
                  "evaluate.sync_command": args.sync_command})
    o.update(_parse_set(args.overrides))
    return o


def file_digest(fpath: str) -> str:
    h = hashlib.sha256()
    with open(fpath, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hashes(paths: List[str]) -> Dict[str, str]:
    """sha256 of every artifact file; directories are walked in sorted order."""
    out = {}
    for p in paths:
        if path.isdir(p):
            for root, dirs, files in os.walk(p):
                dirs.sort()
                for name in sorted(files):
                    fp = path.join(root, name)
                    out[fp] = file_digest(fp)
        elif path.isfile(p):
            out[p] = file_digest(p)
    return out


############## Commands ##############

def cmd_train(config: RunConfig, args: Namespace, run_dir: str) -> List[str]:
    from lsdiff.runner import Runner, CHECKPOINT_NAME
    runner = Runner(config, run_dir, device=Env.device)
    losses = runner.run_loop()
    if losses:
        logger.info("final loss %.6f after %d steps", losses[-1], runner.step_id)
    return [path.join(run_dir, CHECKPOINT_NAME)]


def cmd_infer(config: RunConfig, args: Namespace, run_dir: str) -> List[str]:
    from lsdiff.inference import InferencePipeline
    pipeline = InferencePipeline.from_checkpoint(args.checkpoint, config.infer, device=Env.device)
    return [pipeline.run(args.video, args.out, args.audio, seed=Env.seed)]


def cmd_curate(config: RunConfig, args: Namespace, run_dir: str) -> List[str]:
    from lsdiff.curation import list_sources, run_pipeline, validate_manifest
    manifest = run_pipeline(list_sources(args.in_dir), args.out_dir, args.manifest, config.curate)
    for problem in validate_manifest(manifest, config.curate):
        logger.warning("manifest check: %s", problem)
    logger.info("failures by filter: %s", manifest.failures())
    return [args.manifest]


def cmd_evaluate(config: RunConfig, args: Namespace, run_dir: str) -> List[str]:
    from lsdiff.metrics import evaluate_pairs
    report = evaluate_pairs(args.gen, args.ref, config=config.evaluate)
    csv_path = path.splitext(args.report)[0] + ".csv"
    logger.info("aggregate: %s", report.to_dict()["aggregate"])
    return [report.to_json(args.report), report.to_csv(csv_path)]


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "curate": cmd_curate, "evaluate": cmd_evaluate}


def dispatch(config: RunConfig, args: Namespace, run_dir: str) -> Dict[str, Any]:
    """Run one subcommand and write ``run_manifest.json`` describing it into ``run_dir``."""
    start = time.time()
    artifacts = COMMANDS[args.command](config, args, run_dir)
    manifest = {
        "command": args.command,
        "argv": list(sys.argv),
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": Env.seed,
        "version": __version__,
        "wall_time": time.time() - start,
        "artifacts": artifact_hashes(artifacts),
    }
    os.makedirs(run_dir, exist_ok=True)
    with open(path.join(run_dir, RUN_MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config, overrides_from_args(args))
        if args.command == "config":
            sys.stdout.write(config.to_yaml())
            return 0
        apply_env(config)
        run_dir = Env.run_dir()
        setup_logging(run_dir, Env.log_level)
        Env.info()
        logger.info("%s", " ".join(sys.argv))
        dispatch(config, args, run_dir)
    except (LipSyncError, OSError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
