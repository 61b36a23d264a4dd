"""Command line entry point: ``raven <command> --config FILE [options]``."""
from __future__ import annotations

import os

# BLAS pools must be capped before numpy is imported
_threads = os.environ.get("RAVEN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

COMMANDS = ("gen-data", "train", "eval", "infer", "calibrate-tau", "profile", "sweep-chirps")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raven", description="chirp-streaming radar perception experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="experiment config (.toml or .json)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--prefix", type=int, help="decode from the first L chirps")
    p.add_argument("--exit", dest="exit_mode", default="off", choices=("off", "cosine", "entropy", "compare"),
                   help="early-exit rule for eval/infer")
    p.add_argument("--variant", choices=tuple("ABCDEF"), help="override the model ordering variant")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--weights", help="checkpoint (default: OUT/weights.rvwt)")
    p.add_argument("--lengths", help="comma separated chirp counts for sweep-chirps")
    p.add_argument("--runs", type=int, default=100, help="timing repetitions for profile")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import harness

    try:
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.variant:
            d = cfg.to_dict()
            d["model"]["variant"] = args.variant
            cfg = harness.ExperimentConfig.from_dict(d)
        out = Path(args.out or cfg.out_dir)
        weights = Path(args.weights) if args.weights else out / harness.WEIGHTS
        cmd = args.command
        if cmd == "gen-data":
            res = harness.cmd_gen_data(cfg, out)
        elif cmd == "train":
            res = harness.cmd_train(cfg, out)
        elif cmd == "eval":
            res = harness.cmd_eval(cfg, out, weights, args.prefix, args.exit_mode)
        elif cmd == "infer":
            res = harness.cmd_infer(cfg, out, weights, exit_mode="off" if args.exit_mode == "compare"
                                    else args.exit_mode, prefix=args.prefix)
            res = {"frames": len(res["frames"]), "mean_l_exit":
                   sum(r["l_exit"] for r in res["frames"]) / max(1, len(res["frames"]))}
        elif cmd == "calibrate-tau":
            res = harness.cmd_calibrate_tau(cfg, out, weights)
        elif cmd == "profile":
            res = harness.cmd_profile(cfg, out, args.runs, weights if args.weights else None)
        else:
            lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else None
            res = harness.cmd_sweep_chirps(cfg, out, weights, lengths)
            res = {"lengths": res["lengths"], "f1": {L: r["f1"] for L, r in res["per_prefix"].items()}}
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"raven {args.command}: error: {e}", file=sys.stderr)
        return 2
    json.dump(_brief(res), sys.stdout, indent=1, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0


def _brief(res):
    if isinstance(res, dict):
        return {k: _brief(v) for k, v in res.items() if k not in ("l_exit", "mean_curve")}
    return res


if __name__ == "__main__":
    sys.exit(main())
