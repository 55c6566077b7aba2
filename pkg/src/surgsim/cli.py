"""Command line entry point: ``surgsim simulate | validate-gradients | metrics``.

Exit codes: 0 success, 1 check failed, 2 configuration error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _bandwidth(text: str):
    if text == "median":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("bandwidth must be 'median' or a positive number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surgsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write its dataset")
    s.add_argument("scenario", help="scenario YAML file")
    s.add_argument("--out", help="output directory (relative paths honour SURGSIM_OUTPUT_ROOT)")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--threads", type=int, help="solver/rasterizer threads (default: scenario setting)")
    s.add_argument("--frames", metavar="A..B", help="render only frames A..B-1 (state is still simulated from 0)")
    s.add_argument("--bench", action="store_true", help="print per-phase timings")

    g = sub.add_parser("validate-gradients", help="check constraint gradients against finite differences")
    g.add_argument("--samples", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-5)

    m = sub.add_parser("metrics", help="embedding metrics, or 'metrics miou' for label masks")
    m.add_argument("mode", nargs="?", choices=["miou"], help="mask mode")
    m.add_argument("--real", help="real embeddings (.semb)")
    m.add_argument("--gen", help="generated embeddings (.semb)")
    m.add_argument("--k", type=int, help="neighbour count for density/coverage")
    m.add_argument("--bandwidth", type=_bandwidth, help="RBF bandwidth: 'median' or a positive number")
    m.add_argument("--kid-subsets", type=int, default=100)
    m.add_argument("--kid-subset-size", type=int)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--pred", help="directory of predicted label PNGs")
    m.add_argument("--gt", help="directory of ground-truth label PNGs")
    m.add_argument("--classes", type=int, help="number of classes")
    m.add_argument("--report", help="write the report as JSON to this path")
    return p


def _simulate(args) -> int:
    from .scenario_runner import ScenarioError, parse_frame_range, parse_scenario, run_scenario

    try:
        sc = parse_scenario(args.scenario)
        frames = parse_frame_range(args.frames, sc.frame_count)
    except ScenarioError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads if args.threads is not None else sc.solver.threads
    if threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    res = run_scenario(sc, seed=args.seed, frame_range=frames, threads=threads, out_dir=args.out)
    if args.bench:
        for line in res.timer.lines():
            print(line)
    if not res.complete and res.failed_frame is not None:
        print(f"numeric abort at frame {res.failed_frame}: {res.error}", file=sys.stderr)
        print(f"partial dataset: {res.manifest_path}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {res.manifest['frames_present']}/{res.manifest['frame_count']} frames: {res.manifest_path}")
    return EXIT_OK


def _validate_gradients(args) -> int:
    from .neohookean import validate_gradients

    r = validate_gradients(args.samples, args.seed)
    print(f"samples\t{r.samples}")
    print(f"max_rel_error_hydrostatic\t{r.max_rel_error_hydrostatic:.3e}")
    print(f"max_rel_error_deviatoric\t{r.max_rel_error_deviatoric:.3e}")
    print(f"seconds\t{r.seconds:.3f}")
    ok = r.max_rel_error < args.tolerance
    print("PASS" if ok else f"FAIL (tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_FAILED


def _mask_files(directory: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(directory.glob("*.png"))}


def _metrics_miou(args) -> int:
    from .genmetrics import MetricError, MetricReport, iou_counts, miou_from_counts
    from .scenario_runner import read_png

    if not (args.pred and args.gt and args.classes):
        print("config error: metrics miou needs --pred, --gt and --classes", file=sys.stderr)
        return EXIT_CONFIG
    pred, gt = _mask_files(Path(args.pred)), _mask_files(Path(args.gt))
    if not gt or set(pred) != set(gt):
        print(f"config error: mask sets differ ({len(pred)} predicted, {len(gt)} ground truth)", file=sys.stderr)
        return EXIT_CONFIG
    inter = np.zeros(args.classes, np.int64)
    union = np.zeros(args.classes, np.int64)
    try:
        for name in gt:
            i, u = iou_counts(read_png(pred[name]), read_png(gt[name]), args.classes)
            inter += i
            union += u
        report = MetricReport(miou=miou_from_counts(inter, union),
                              params={"classes": args.classes, "images": len(gt), "aggregation": "dataset"})
    except MetricError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return _emit(report, args.report)


def _metrics_embeddings(args) -> int:
    from .genmetrics import MetricError, embedding_report, read_embeddings

    missing = [f"--{n}" for n in ("real", "gen", "k", "bandwidth") if getattr(args, n) is None]
    if missing:
        print(f"config error: metrics needs {', '.join(missing)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = embedding_report(read_embeddings(args.real), read_embeddings(args.gen), k=args.k,
                                  kid_subsets=args.kid_subsets, kid_subset_size=args.kid_subset_size,
                                  bandwidth=args.bandwidth, seed=args.seed)
    except (MetricError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return _emit(report, args.report)


def _emit(report, path) -> int:
    d = report.to_dict()
    for k in sorted(d):
        print(f"{k}\t{d[k]}")
    if path:
        report.write(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        return _simulate(args)
    if args.command == "validate-gradients":
        return _validate_gradients(args)
    return _metrics_miou(args) if args.mode == "miou" else _metrics_embeddings(args)


if __name__ == "__main__":
    sys.exit(main())
