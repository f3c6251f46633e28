"""Command-line entry point: ``cbsa {gen-data,partition,train,evaluate,ablate}``.

Exit codes: 0 success, 1 I/O or format failure, 2 invalid configuration
(including K > C), 3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from .cbsf import CBSFFormatError
from .config import ConfigError, RunConfig, load_config
from .data import SpecError
from .model import ABLATIONS
from .runner import (
    PartitionError,
    evaluate_run,
    materialize,
    partition_for,
    run_ablation,
    run_seeds,
    write_dataset,
    write_json,
)
from .train import NonFiniteLossError

log = logging.getLogger("cbsa")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3
DEFAULT_ABLATION_MODES = ("tp", "tp+saa", "full")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds is empty")
    return seeds


def _mode_list(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in ABLATIONS]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"unknown ablation modes {bad}; choose from {ABLATIONS}")
    return modes


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="root seed (data, init, training, k-means)")
    common.add_argument("--threads", type=int, help="BLAS thread cap (default 1)")
    common.add_argument("--ablate", choices=ABLATIONS, help="module configuration")
    common.add_argument("--seeds", type=_seed_list, help="comma-separated seeds, e.g. 1,2,3")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--data", type=Path, help="dataset directory written by gen-data")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cbsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/val CBSF files and a manifest")
    sub.add_parser("partition", parents=[common], help="spectral label contexts of the labeled split")
    sub.add_parser("train", parents=[common], help="train one model per seed")
    sub.add_parser("evaluate", parents=[common], help="re-score a finished run directory (--out)")
    ab = sub.add_parser("ablate", parents=[common], help="module ablation grid over seeds")
    ab.add_argument("--modes", type=_mode_list, default=list(DEFAULT_ABLATION_MODES), help="comma-separated ablation modes")
    return parser


def resolve(args: argparse.Namespace, environ=None) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.ablate is not None:
        overrides["model.ablation"] = args.ablate
    if args.out is not None:
        overrides["paths.out"] = str(args.out)
    if args.data is not None:
        overrides["paths.data"] = str(args.data)
    cfg = load_config(args.config, environ, overrides)
    if cfg.model.ablation not in ABLATIONS:
        raise ConfigError(f"model.ablation must be one of {ABLATIONS}, got {cfg.model.ablation!r}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def cmd_gen_data(cfg: RunConfig, args) -> dict:
    manifest = write_dataset(cfg, cfg.paths.out, cfg.seed)
    print(f"wrote {manifest['n_total']} train / {manifest['n_val']} val instances to {cfg.paths.out}")
    return manifest


def cmd_partition(cfg: RunConfig, args) -> dict:
    loaded = materialize(cfg, cfg.seed)
    part = partition_for(cfg, loaded.data.labels_l, cfg.seed)
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = part.to_json()
    write_json(out / "partition.json", payload)
    print(json.dumps({"K": payload["K"], "blocks": part.blocks()}))
    return payload


def cmd_train(cfg: RunConfig, args) -> dict:
    seeds = args.seeds or [cfg.seed]
    final = run_seeds(cfg, seeds, cfg.paths.out)
    if "summary" in final:
        s = final["summary"]["map_val"]
        print(f"mAP {100 * s['mean']:.2f} +/- {100 * s['stderr']:.2f} over seeds {seeds}")
    else:
        print(f"mAP {100 * final['map_val']:.2f}, CF1 {100 * final['cf1_val']:.2f}")
    return final


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    result = evaluate_run(cfg.paths.out)
    print(json.dumps(result, sort_keys=True))
    return result


def cmd_ablate(cfg: RunConfig, args) -> dict:
    modes = [args.ablate] if args.ablate else args.modes
    result = run_ablation(cfg, modes, args.seeds or [cfg.seed], cfg.paths.out)
    for mode in modes:
        s = result["results"][mode]["summary"]["map_val"]
        print(f"{mode:8s} mAP {100 * s['mean']:.2f}")
    return result


COMMANDS = {
    "gen-data": cmd_gen_data,
    "partition": cmd_partition,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args, environ)
        with threadpool_limits(limits=cfg.threads):
            COMMANDS[args.command](cfg, args)
    except (ConfigError, SpecError, PartitionError) as exc:
        print(f"cbsa: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"cbsa: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, CBSFFormatError, KeyError, json.JSONDecodeError) as exc:
        print(f"cbsa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
