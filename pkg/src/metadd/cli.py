"""``metadd`` command line. Flags override config-file keys, which override the built-in defaults."""
import argparse
import json
import sys

import yaml

from . import config as C
from . import pipeline
from .errors import ConfigError, MetaDDError

STAGES = {
    "pretrain": pipeline.stage_pretrain,
    "distill": pipeline.stage_distill,
    "eval": pipeline.stage_eval,
    "cam-export": pipeline.stage_cam_export,
    "erase-study": pipeline.stage_erase_study,
}


def _on_off(v):
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def build_parser():
    p = argparse.ArgumentParser(prog="metadd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
        s.add_argument("--seed", type=int)
        s.add_argument("--ipc", type=int)
        s.add_argument("--metadd", type=_on_off, metavar="on|off")
        s.add_argument("--baseline", choices=["dc", "dm"])
        s.add_argument("--pool", help="YAML file with an auxiliary list (or a mapping with 'auxiliaries')")
        s.add_argument("--out", help="output directory for run dirs")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set distill.iterations=50")
    r = sub.add_parser("report")
    r.add_argument("run_dirs", nargs="+", help="eval run directories")
    r.add_argument("--out", default="report")
    return p


def _pool_override(path):
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read pool file {path}: {e}") from None
    if isinstance(data, list):
        return {"auxiliaries": data}
    if isinstance(data, dict):
        return data
    raise ConfigError(f"pool file {path} must hold a list of architectures or a mapping")


def overrides_from_args(args) -> dict:
    ov = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        C.set_path(ov, key.strip(), yaml.safe_load(raw))
    flags = {"seed": args.seed, "distill.ipc": args.ipc, "distill.metadd": args.metadd,
             "distill.baseline": args.baseline, "output_dir": args.out}
    for key, v in flags.items():
        if v is not None:
            C.set_path(ov, key, v)
    if args.pool:
        ov["pool"] = {**ov.get("pool", {}), **_pool_override(args.pool)}
    return ov


def resolve_config(args) -> dict:
    ov = overrides_from_args(args)
    return C.load(args.config, ov) if args.config else C.resolve(ov)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            pipeline.report(args.run_dirs, args.out)
        else:
            cfg = resolve_config(args)
            STAGES[args.command](cfg)
    except MetaDDError as e:
        print(json.dumps({"error": e.category, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
