"""Command line entry point: ``subcurve {run,compare,probe,spectrum}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="subcurve",
        description="Quasi-Newton in the class-gradient subspace: experiments and diagnostics.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_jobs=False):
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides $SUBCURVE_OUT and the config)")
        p.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's list")
        if with_jobs:
            p.add_argument("--jobs", type=int, default=1, help="grid cells to run in parallel")

    common(sub.add_parser("run", help="train every (method, eta, batch size, seed) cell"), True)
    p = sub.add_parser("compare", help="tabulate final accuracy/loss from metrics CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="directory for comparison.json / comparison.txt")
    common(sub.add_parser("probe", help="curvature and subspace-overlap diagnostics"))
    common(sub.add_parser("spectrum", help="top Gauss-Newton eigenvalues after training"))
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            try:
                result = harness.compare(args.csv)
            except (ValueError, OSError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            text = harness.format_comparison(result)
            if args.out:
                out = Path(args.out)
                out.mkdir(parents=True, exist_ok=True)
                (out / "comparison.json").write_text(json.dumps(result, indent=2, sort_keys=True))
                (out / "comparison.txt").write_text(text)
            print(text, end="")
            return 0

        cfg = harness.load_config(args.config, out=args.out, seeds=args.seeds)
        if args.command == "run":
            record = harness.run(cfg, jobs=max(1, args.jobs))
            for cell in record["cells"]:
                final = cell["final_val"] or cell["final_train"] or {}
                acc = final.get("accuracy")
                acc_txt = f"{100 * acc:.1f}%" if acc is not None else "-"
                print(f"{cell['cell']:<48} {cell['outcome']:<10} acc={acc_txt}")
            print(f"wrote {cfg['out']}/metrics.csv ({len(record['cells'])} cells, "
                  f"{record['diverged']} diverged)")
            return 2 if record["diverged"] else 0
        if args.command == "probe":
            report = harness.probe(cfg)
            ov = report["overlap"]
            print(f"assignment score {ov['assignment_score']:.4f}, combined rank "
                  f"{ov['combined_rank']}, low-rank rel. error "
                  f"{report['low_rank_error']['frobenius_rel_error']:.4f}")
            print(f"wrote {cfg['out']}/probe.json")
            return 0
        if args.command == "spectrum":
            report = harness.spectrum(cfg)
            vals = ", ".join(f"{v:.4g}" for v in report["top_eigenvalues"][:10])
            print(f"top eigenvalues: {vals}")
            print(f"gap ratio lambda_C/lambda_C+1: {report['gap_ratio']}")
            print(f"wrote {cfg['out']}/spectrum.json")
            return 0
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
