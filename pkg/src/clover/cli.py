"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .gridworlds import ConfigError
from .harness import (calibrate_channel, eval_policy, positive_listening_gain, read_message_log,
                      run_experiment, sample_event_messages, speaker_consistency, write_calibration,
                      write_eval, write_message_log)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clover", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train one run per seed")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides 'seeds'")
    tr.add_argument("--out", help="output directory; overrides 'out'")
    tr.add_argument("--algo", choices=("clover", "vdn", "qmix"), help="mixer kind")
    tr.add_argument("--no-comm", action="store_true", help="force every communication bit to 0")
    tr.add_argument("--slots", type=int, help="p-CSMA slots per decision epoch")

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--forced-silent", action="store_true")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="directory for the episode report and message log")
    ev.add_argument("--listening-gain", action="store_true",
                    help="also run a forced-silent pass and report the return difference")

    an = sub.add_parser("analyze", help="speaker consistency of a message log")
    an.add_argument("--messages", required=True)
    an.add_argument("--per-group", type=int, default=10)
    an.add_argument("--event", help="event tag defining the first group")
    an.add_argument("--seed", type=int, default=0)

    ca = sub.add_parser("calibrate", help="Monte-Carlo PRR sweep of the channel")
    ca.add_argument("--config", required=True)
    ca.add_argument("--out", help="CSV path (default: calibration.csv in the config's out directory)")
    ca.add_argument("--trials", type=int)
    return ap


def _train(args) -> int:
    overrides = {}
    if args.seed:
        overrides["seeds"] = ",".join(map(str, args.seed))
    if args.out:
        overrides["out"] = args.out
    if args.algo:
        overrides["mixer.kind"] = args.algo
    if args.no_comm:
        overrides["train.no_comm"] = "true"
    if args.slots is not None:
        overrides["channel.slots"] = str(args.slots)
    cfg = load_config(args.config, overrides)
    for res in run_experiment(cfg):
        last = res.rows[-1] if res.rows else None
        summary = "" if last is None else f"  mean steps {last.mean_steps_to_termination:.2f}"
        print(f"seed {res.seed}: {res.metrics_path}  {res.checkpoint_path}{summary}")
    return 0


def _eval(args) -> int:
    report = eval_policy(args.ckpt, args.episodes, forced_silent=args.forced_silent, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.ckpt).stem + ("_silent" if args.forced_silent else "")
    write_eval(report, out / f"{stem}_eval.csv")
    write_message_log(report, out / f"{stem}_messages.csv")
    print(f"episodes {len(report.rows)}  mean return {report.mean_return:.4f} +- {report.std_return:.4f}  "
          f"mean comm prob {report.mean_comm_prob:.4f}  success {report.success_rate:.3f}")
    print(f"wrote {out / f'{stem}_eval.csv'} and {out / f'{stem}_messages.csv'}")
    if args.listening_gain:
        gain, _, _ = positive_listening_gain(args.ckpt, args.episodes, seed=args.seed)
        print(f"positive-listening gain {gain:.4f}")
    return 0


def _analyze(args) -> int:
    entries = read_message_log(args.messages)
    vectors, labels = sample_event_messages(entries, args.per_group, args.seed, args.event)
    rep = speaker_consistency(vectors, labels)
    for group, mean in rep.group_means.items():
        print(f"intra-group cosine [{group}]: {mean:.4f}")
    print(f"intra-group mean {rep.intra_mean:.4f}  inter-group mean {rep.inter_mean:.4f}  "
          f"zero-norm vectors {rep.zero_norm}")
    path = Path(args.messages).with_name(Path(args.messages).stem + "_cosine.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["label"] + [str(x) for x in rep.labels]) + "\n")
        for lab, row in zip(rep.labels, rep.matrix):
            fh.write(",".join([str(lab)] + [repr(float(v)) for v in row]) + "\n")
    print(f"wrote {path}")
    return 0


def _calibrate(args) -> int:
    cfg = load_config(args.config)
    res = calibrate_channel(cfg, trials=args.trials)
    path = Path(args.out) if args.out else Path(cfg.out) / "calibration.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_calibration(res, path)
    flag = "ok" if res.in_band else "OUTSIDE [0.40, 0.95]"
    print(f"corner-to-corner PRR {res.corner_prr:.4f} ({flag}); wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"train": _train, "eval": _eval, "analyze": _analyze, "calibrate": _calibrate}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime-error exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
