import argparse
import logging
import sys
from typing import List, Optional

try:
    from .bound_report import narrative, verdict_bullets
    from .errors import MetagenError
    from .harness import CAMPAIGNS, emit_report, load_config, run_campaign
except ImportError:
    from src.bound_report import narrative, verdict_bullets
    from src.errors import MetagenError
    from src.harness import CAMPAIGNS, emit_report, load_config, run_campaign

logger = logging.getLogger("metagen")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metagen", description="Run bound-verification campaigns")
    parser.add_argument("campaign", choices=CAMPAIGNS)
    parser.add_argument("--config", type=str, required=True, help="TOML experiment config")
    parser.add_argument("--out", type=str, default=None, help="Output directory (overrides out_dir)")
    parser.add_argument("--format", type=str, choices=("csv", "json"), default="csv")
    parser.add_argument("--check", action="store_true", help="Exit 1 when any row or suite fails")
    parser.add_argument("--seed", type=int, default=None, help="Override master_seed")
    parser.add_argument("--debug", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.debug else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = load_config(args.config, campaign=args.campaign, seed=args.seed)
        if args.out:
            cfg.out_dir = args.out
        report = run_campaign(cfg)
        path = emit_report(report, cfg.out_dir, args.format)
    except MetagenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    print(f"\n=== Campaign: {report.campaign} ===")
    print(f"Config: {args.config} | master_seed={cfg.master_seed} | rows={len(report.rows)} "
          f"| failures={len(report.failures)}")
    for name, ok in report.suites.items():
        print(f"{name:>12} | {'holds' if ok else 'VIOLATED'}")
    for bullet in verdict_bullets(report.rows):
        print(f"- {bullet}")
    print(narrative(report.campaign, report.rows, report.suites))
    print(f"Report: {path}")

    if args.debug and report.rows:
        print("\n=== DEBUG: first rows ===")
        print(report.frame().head(20).to_string(index=False))

    if report.failures:
        print("\n=== Failures (first 10) ===")
        for f in report.failures[:10]:
            print(f"cell={f['cell']} trial={f['trial']} seed={f['seed']} | {f['error']}")

    if args.check and not report.holds:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
