"""Command line: ``unmt <stage> --config FILE [--seed N] [--workdir DIR]``.

``unmt all`` runs the whole recipe; ``unmt make-cipher --workdir DIR``
writes the synthetic demo corpus together with a ready-to-use config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .cipher import write_cipher_dataset
from .pipeline import STAGE_ORDER, PathsConfig, PipelineConfig, PipelineError, Runner, recipe_stages


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="unmt",
        description="Unsupervised MT pipeline. Stages: " + ", ".join(STAGE_ORDER)
        + ". translate/postprocess/evaluate take a system, e.g. evaluate/finetune-pseudo.")
    ap.add_argument("stage", help="stage name, 'all', 'stages' or 'make-cipher'")
    ap.add_argument("--config", help="pipeline config (JSON)")
    ap.add_argument("--seed", type=int, help="override the global seed")
    ap.add_argument("--workdir", help="override the working directory")
    ap.add_argument("--force", action="store_true", help="rerun even if up-to-date")
    ap.add_argument("--lines", type=int, default=10000, help="make-cipher: monolingual lines per side")
    ap.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> PipelineConfig:
    if not args.config:
        raise PipelineError("--config is required for this stage")
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workdir:
        cfg = replace(cfg, paths=replace(cfg.paths, workdir=str(Path(args.workdir).resolve())))
    return cfg


def make_cipher(args) -> int:
    out = Path(args.workdir or "cipher")
    seed = args.seed or 0
    write_cipher_dataset(out / "data", n_mono=args.lines, seed=seed)
    paths = PathsConfig(**{k: f"data/{k.replace('_', '.', 1)}.txt" for k in
                           ("mono_high", "mono_low", "valid_high", "valid_low", "test_high", "test_low")},
                        workdir="work")
    cfg = PipelineConfig(paths=paths, seed=seed)
    cfg.save(out / "config.json")
    print(out / "config.json")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(args.threads)
    try:
        if args.stage == "make-cipher":
            return make_cipher(args)
        cfg = load_config(args)
        if args.stage == "stages":
            print("\n".join(recipe_stages(cfg)))
            return 0
        runner = Runner(cfg)
        with runner.lock():
            if args.stage == "all":
                statuses = runner.run_all(args.force)
                for name, status in statuses.items():
                    print(f"{name}: {status}")
                print(json.dumps(json.loads((runner.workdir / "report.json").read_text()), indent=1))
            else:
                print(f"{args.stage}: {runner.run(args.stage, args.force)}")
    except (PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
