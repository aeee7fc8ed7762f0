"""``basinlab`` command-line entry point.

Exit codes: 0 success, 2 manifest/usage error, 3 numeric divergence,
4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_SCHEMA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("basinlab")


def _seed_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="basinlab", description="Train ensembles and measure their connectivity and diversity.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train the ensemble described by a manifest and record metrics")
    r.add_argument("--manifest", required=True)
    r.add_argument("--seeds", type=_seed_list, help="comma list or ranges, e.g. 0,1,4-6 (overrides the manifest)")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", help="output root (overrides the manifest)")
    r.add_argument("--eval", choices=["test", "train"], default="test")

    t = sub.add_parser("table", help="aggregate metrics across seeds")
    t.add_argument("paths", nargs="+", help="run directories or metrics.json files")
    t.add_argument("--format", choices=["csv", "text"], default="text")
    t.add_argument("--out")

    pl = sub.add_parser("plot", help="render a report as SVG")
    pl.add_argument("kind", help="pair, plane, scatter or ablation")
    pl.add_argument("input")
    pl.add_argument("--out", required=True)
    pl.add_argument("--value", choices=["loss", "acc"], default="loss", help="plane heatmap quantity")
    pl.add_argument("--title", default="")

    a = sub.add_parser("align", help="permutation-align the members of a run directory")
    a.add_argument("directory")
    a.add_argument("--method", choices=["pcd", "multi_pcd"], default="pcd")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")

    c = sub.add_parser("connect", help="pairwise curve or joint connectivity of a run directory")
    c.add_argument("directory")
    c.add_argument("--pair", type=int, nargs=2, metavar=("I", "J"))
    c.add_argument("--samples", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eval", choices=["test", "train"], default="test")
    c.add_argument("--out")

    pn = sub.add_parser("plane", help="loss/accuracy on the plane through three members")
    pn.add_argument("directory")
    pn.add_argument("--anchors", type=int, nargs=3, default=[0, 1, 2])
    pn.add_argument("--resolution", type=int, default=25)
    pn.add_argument("--margin", type=float, default=0.2)
    pn.add_argument("--eval", choices=["test", "train"], default="test")
    pn.add_argument("--out", help="write .json or .csv")

    d = sub.add_parser("diversity", help="predictive variance and one-vs-all JSD")
    d.add_argument("directory")
    d.add_argument("--eval", choices=["test", "train"], default="test")
    d.add_argument("--out")
    return p


def _limit_threads() -> None:
    # must run before numpy loads its BLAS
    if os.environ.get("BASINLAB_DETERMINISTIC") == "1":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"


def _emit(text: str, out) -> None:
    if out:
        from .train import atomic_write

        atomic_write(out, text.encode())
    else:
        sys.stdout.write(text)


def _dispatch(args) -> int:
    from . import commands

    if args.command == "run":
        outcomes = commands.cmd_run(args.manifest, args.seeds, args.jobs, args.out, args.eval)
        for o in outcomes:
            status = "partial" if o.partial else "ok"
            print(f"seed {o.seed}: {status}, {o.epochs_run} epochs trained, {o.directory}")
        return EXIT_DIVERGED if any(o.partial for o in outcomes) else EXIT_OK
    if args.command == "table":
        _emit(commands.cmd_table(args.paths, args.format), args.out)
    elif args.command == "plot":
        commands.cmd_plot(args.kind, args.input, args.out, args.value, args.title)
    elif args.command == "align":
        summary = commands.cmd_align(args.directory, args.method, args.out, args.seed)
        print(json.dumps({k: summary[k] for k in ("method", "sweeps", "converged", "max_logit_deviation")}))
    elif args.command == "connect":
        pair = tuple(args.pair) if args.pair else None
        doc = commands.cmd_connect(args.directory, pair, args.samples, args.seed, args.eval)
        _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    elif args.command == "plane":
        grid = commands.cmd_plane(args.directory, args.anchors, args.resolution, args.margin, args.eval)
        if args.out and args.out.endswith(".csv"):
            _emit(grid.to_csv(), args.out)
        else:
            _emit(json.dumps(grid.to_json(), indent=2) + "\n", args.out)
    elif args.command == "diversity":
        _emit(json.dumps(commands.cmd_diversity(args.directory, args.eval), indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    from .errors import FormatError, NonFiniteError, SchemaError, UsageError

    try:
        return _dispatch(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NonFiniteError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
