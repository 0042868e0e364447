"""Command line interface: simulate / run / eval / calibrate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import RunConfig, apply_overrides, load_config, save_config


def _base_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "scenario", None):
        overrides["scenario"] = args.scenario
    return apply_overrides(config, overrides)


def cmd_simulate(args):
    from .orchestrator import build_simulator
    from .sequences import LiveSequenceSource, write_sequence
    config = _base_config(args)
    duration = (3 * config.segment_length
                if config.scenario == "multi-domain" else config.duration)
    schedule = None
    drop = None
    if config.scenario == "multi-domain":
        schedule = [(0.0, config.palette),
                    (config.segment_length, config.alt_palette),
                    (2 * config.segment_length, config.palette)]
    elif config.scenario == "view-drop":
        drop = (config.drop_start, config.drop_end)
    _, sim = build_simulator(config, config.palette, config.scene_seed,
                             config.noise_seed, duration, schedule, drop)
    write_sequence(LiveSequenceSource(sim), args.out)
    print(f"wrote sequence to {args.out}")


def cmd_run(args):
    from .orchestrator import run_sequence
    config = _base_config(args)
    report = run_sequence(config)
    print(f"report: {os.path.join(config.out_dir, 'report.json')}")
    for method, blocks in sorted(report["summary"].items()):
        m10 = blocks.get("miou10", {}).get("miou")
        mh = blocks.get("miouH", {}).get("miou")
        if m10 is not None:
            print(f"  {method:<16} mIoU-10 {m10:.3f}   mIoU-H {mh:.3f}")


def cmd_eval(args):
    from .orchestrator import recompute_from_eval
    path = os.path.join(args.run_dir, "eval_frames.npz")
    result = recompute_from_eval(path)
    print(json.dumps(result, indent=1, sort_keys=True))


def cmd_calibrate(args):
    from .orchestrator import calibrate_thresholds
    config = _base_config(args)
    result = calibrate_thresholds(config)
    print(json.dumps(result, indent=1, sort_keys=True))
    if args.out:
        with open(args.out, "w") as f:
            for key in ("cd_new", "cd_lidar", "l_usable"):
                f.write(f"{key} = {result[key]}\n")
        print(f"wrote thresholds to {args.out}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="adaptrav",
        description="online-adaptive long-range traversability, desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="emit a sensor sequence to disk")
    p.add_argument("--config")
    p.add_argument("--scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="execute a scenario")
    p.add_argument("--config")
    p.add_argument("--scenario")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="recompute metrics from a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate",
                       help="derive selection thresholds from scene pairs")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_calibrate)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
