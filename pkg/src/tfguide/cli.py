"""Command-line entry point: ``tfguide run | verify | compare-fig3``.

Exit codes: 0 success, 1 a verified claim failed, 2 usage or validation
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import NumericalError, TFGuideError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tfguide")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfguide", description="Training-free guidance laboratory.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every (method x seed) cell of a config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: $TFGUIDE_OUT or ./tfguide-out)")
    r.add_argument("--jobs", type=int, default=1)
    v = sub.add_parser("verify", help="run a claim verification suite")
    v.add_argument("claim", help="claim id or 'all'")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    c = sub.add_parser("compare-fig3", help="paired gd vs pgd comparison")
    c.add_argument("config")
    c.add_argument("--out")
    return p


def _cmd_run(args) -> int:
    from .config import load_config
    from .runner import run

    cfg = load_config(args.config)
    report = run(cfg, args.out, jobs=args.jobs)
    for row in report.rows:
        print(f"{row.label:24s} median_loss={row.median_loss} nfe={row.nfe_per_run}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .claims import CLAIM_IDS, verify
    from .config import validate
    from .runner import default_out_dir, write_atomic

    ids = CLAIM_IDS if args.claim == "all" else (args.claim,)
    if any(c not in CLAIM_IDS for c in ids):
        print(f"unknown claim id {args.claim!r}; expected 'all' or one of: {', '.join(CLAIM_IDS)}",
              file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else default_out_dir() / "claims"
    ok = True
    for cid in ids:
        rep = verify(cid, seed=args.seed)
        validate(rep.to_dict(), "claim")
        write_atomic(out / f"{cid}.json", rep.to_json() + "\n")
        write_atomic(out / f"{cid}.csv", rep.to_csv())
        print(f"{'PASS' if rep.passed else 'FAIL'} {cid}: measured={rep.to_dict()['measured']}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_fig3(args) -> int:
    from .config import load_config
    from .runner import compare_fig3

    doc = compare_fig3(load_config(args.config), args.out)
    for name in ("hard", "easy"):
        c = doc[name]
        print(f"{name}: pgd<=gd on {c['pgd_le_gd_fraction']:.2f} of seeds, "
              f"median diff {c['median_difference']:.4g} (band {c['mc_band']:.4g})")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    handler = {"run": _cmd_run, "verify": _cmd_verify, "compare-fig3": _cmd_fig3}[args.command]
    try:
        return handler(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERIC
    except TFGuideError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
