"""Command-line front end: fit, eval, cluster, synth, export.

Machine-readable output goes to stdout, logs to stderr.  Exit codes: 0 on
success, 1 on usage/config errors, 2 on data errors, 3 on numerical failures.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as cio
from .errors import DataError, InvalidConfigError, InvalidInputError, NumericalError
from .evaluation import (
    MetricsReport,
    active_cuboid_stats,
    eval_chamfer,
    miou,
    normal_consistency,
    structural_clusters,
    transfer_labels,
)
from .optimizer import PROJECTIONS, VARIANTS, FitConfig, fit

_CLOUD_SUFFIXES = (".xyz", ".ply", ".obj")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="cuboidfit",
                     description="Cuboid shape abstraction for point clouds")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_fit = sub.add_parser("fit", help="fit cuboids to a cloud (or a directory)")
    p_fit.add_argument("--input", required=True, help="cloud file or directory")
    p_fit.add_argument("--cuboids", type=int, default=16, metavar="M")
    p_fit.add_argument("--steps", type=int, default=2000)
    p_fit.add_argument("--lr", type=float, default=6e-4)
    p_fit.add_argument("--lambda1", type=float, default=0.1)
    p_fit.add_argument("--lambda2", type=float, default=0.01)
    p_fit.add_argument("--sigma-s", type=float, default=0.05)
    p_fit.add_argument("--eps-ext", type=float, default=0.05)
    p_fit.add_argument("--eps-sps", type=float, default=0.01)
    p_fit.add_argument("--variant", choices=VARIANTS, default="p2c-seg")
    p_fit.add_argument("--projection", choices=PROJECTIONS, default="normal")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--batch-points", type=int, default=None)
    p_fit.add_argument("--out", default="result.json",
                       help="result file (or directory in directory mode)")
    p_fit.add_argument("--export-obj", default=None, metavar="PATH",
                       help="also export active cuboids as OBJ")
    p_fit.add_argument("--format", choices=cio.FORMATS, default=None)
    p_fit.add_argument("--no-normalize", action="store_true",
                       help="skip recentering/unit-diagonal scaling on load")
    p_fit.add_argument("--jobs", type=int,
                       default=int(os.environ.get("CUBOIDFIT_JOBS", "1")),
                       help="parallel shapes in directory mode")
    p_fit.set_defaults(func=_cmd_fit)

    p_eval = sub.add_parser("eval", help="evaluate a result against its cloud")
    p_eval.add_argument("--input", required=True, help="cloud file or directory")
    p_eval.add_argument("--result", required=True, help="result file or directory")
    p_eval.add_argument("--samples", type=int, default=4096)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--fraction", type=float, default=0.2,
                        help="label-transfer subset fraction (dataset mode)")
    p_eval.add_argument("--merge-label", action="append", default=[],
                        metavar="OLD:NEW", help="relabel ground truth before IOU")
    p_eval.add_argument("--format", choices=cio.FORMATS, default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_cluster = sub.add_parser("cluster", help="group results by existence vector")
    p_cluster.add_argument("--results", required=True, nargs="+",
                           help="result files or a directory")
    p_cluster.set_defaults(func=_cmd_cluster)

    p_synth = sub.add_parser("synth", help="generate a synthetic labeled cloud")
    p_synth.add_argument("--kind", choices=cio.SHAPE_KINDS, required=True)
    p_synth.add_argument("--points", type=int, default=2048)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output .xyz path")
    p_synth.add_argument("--gt", default=None,
                         help="ground-truth sidecar path (default OUT.gt.json)")
    p_synth.set_defaults(func=_cmd_synth)

    p_export = sub.add_parser("export", help="convert a result file to OBJ")
    p_export.add_argument("--result", required=True)
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(func=_cmd_export)
    return parser


def _log(msg):
    sys.stderr.write(msg + "\n")


def _fit_config(args):
    return FitConfig(
        num_cuboids=args.cuboids,
        steps=args.steps,
        lr=args.lr,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        sigma_s=args.sigma_s,
        eps_ext=args.eps_ext,
        eps_sps=args.eps_sps,
        variant=args.variant,
        projection=args.projection,
        seed=args.seed,
        batch_points=args.batch_points,
    ).validate()


def _fit_one(input_path, out_path, obj_path, config, fmt, normalize):
    pc = cio.load_pointcloud(input_path, fmt=fmt, normalize=normalize)
    result = fit(pc, config)
    doc = cio.result_document(
        result,
        config,
        input_path=str(input_path),
        normals_source=pc.normals_source,
        extra_config={"normalize": normalize},
    )
    cio.save_result(doc, out_path)
    if obj_path:
        cio.export_obj(result, obj_path)
    return {
        "input": str(input_path),
        "out": str(out_path),
        "n_active": result.n_active,
        "final_total": result.metrics["final_total"],
        "final_recons": result.metrics["final_recons"],
    }


def _cmd_fit(args):
    config = _fit_config(args)
    source = Path(args.input)
    normalize = not args.no_normalize
    if source.is_dir():
        files = sorted(
            p for p in source.iterdir() if p.suffix.lower() in _CLOUD_SUFFIXES
        )
        if not files:
            raise DataError(f"no point-cloud files in {source}")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [
            (
                f,
                out_dir / (f.stem + ".json"),
                (out_dir / (f.stem + ".obj")) if args.export_obj else None,
                config,
                args.format,
                normalize,
            )
            for f in files
        ]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                summaries = list(pool.map(_fit_one_star, jobs))
        else:
            summaries = [_fit_one(*job) for job in jobs]
        for summary in summaries:
            print(json.dumps(summary))
            _log(f"fit {summary['input']}: n_active={summary['n_active']}")
        return 0
    summary = _fit_one(source, args.out, args.export_obj, config, args.format,
                       normalize)
    print(json.dumps(summary))
    _log(f"fit {summary['input']}: n_active={summary['n_active']}")
    return 0


def _fit_one_star(job):
    return _fit_one(*job)


def _parse_merges(specs):
    merges = {}
    for spec in specs:
        try:
            old, new = spec.split(":")
            merges[int(old)] = int(new)
        except ValueError:
            raise InvalidConfigError(
                f"--merge-label expects OLD:NEW integers, got {spec!r}"
            ) from None
    return merges


def _apply_merges(labels, merges):
    if not merges or labels is None:
        return labels
    out = labels.copy()
    for old, new in merges.items():
        out[labels == old] = new
    return out


def _load_eval_pair(cloud_path, result_path, fmt):
    doc = cio.load_result(result_path)
    normalize = bool(doc.config.get("normalize", True))
    pc = cio.load_pointcloud(cloud_path, fmt=fmt, normalize=normalize)
    if len(doc.labels) != len(pc):
        raise DataError(
            f"{result_path} has {len(doc.labels)} labels but {cloud_path} has "
            f"{len(pc)} points"
        )
    return pc, doc


class _DocResult:
    """Adapter giving a ResultDocument the attribute surface of a result."""

    def __init__(self, doc):
        self.cuboids = doc.to_cuboids()
        self.existence = doc.existence
        self.labels = doc.labels_array()


def _cmd_eval(args):
    cloud_src = Path(args.input)
    result_src = Path(args.result)
    if cloud_src.is_dir() != result_src.is_dir():
        raise InvalidConfigError(
            "--input and --result must both be files or both directories"
        )
    if cloud_src.is_dir():
        result_files = sorted(result_src.glob("*.json"))
        if not result_files:
            raise DataError(f"no result files in {result_src}")
        pairs = []
        for rf in result_files:
            matches = [
                cloud_src / (rf.stem + suf)
                for suf in _CLOUD_SUFFIXES
                if (cloud_src / (rf.stem + suf)).exists()
            ]
            if not matches:
                raise DataError(f"no cloud in {cloud_src} matching {rf.stem}")
            pairs.append((matches[0], rf))
        fraction = args.fraction
    else:
        pairs = [(cloud_src, result_src)]
        fraction = 1.0

    merges = _parse_merges(args.merge_label)
    rng = np.random.default_rng(args.seed)
    results, clouds = [], []
    for cloud_path, result_path in pairs:
        pc, doc = _load_eval_pair(cloud_path, result_path, args.format)
        clouds.append(pc)
        results.append(_DocResult(doc))

    chamfers = [
        eval_chamfer(r, pc, samples=args.samples, rng=rng)
        for r, pc in zip(results, clouds)
    ]
    consistencies = [
        normal_consistency(r, pc, samples=args.samples, rng=rng)
        for r, pc in zip(results, clouds)
    ]
    per_label, mean_iou = [], None
    if all(pc.gt_labels is not None for pc in clouds):
        gts = [_apply_merges(pc.gt_labels, merges) for pc in clouds]
        labelmap = transfer_labels(results, gts, fraction=fraction, rng=rng)
        per_label, mean_iou = miou(results, gts, labelmap)
    report = MetricsReport(
        chamfer=float(np.mean(chamfers)),
        normal_consistency=float(np.mean(consistencies)),
        n_ac=active_cuboid_stats(results),
        per_label_iou=per_label,
        miou=mean_iou,
    )
    print(json.dumps(report.to_dict()))
    return 0


def _collect_results(specs):
    paths = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.json")))
        else:
            paths.append(p)
    if not paths:
        raise DataError("no result files given")
    return paths


def _cmd_cluster(args):
    paths = _collect_results(args.results)
    docs = [cio.load_result(p) for p in paths]
    results = [_DocResult(d) for d in docs]
    clusters = structural_clusters(results)
    payload = [
        {
            "existence": [int(f) for f in results[members[0]].existence],
            "shapes": [str(paths[i]) for i in members],
        }
        for members in clusters
    ]
    print(json.dumps(payload))
    return 0


def _cmd_synth(args):
    pc, gt_cuboids, _ = cio.synth_shape(
        args.kind, n_points=args.points, noise_sigma=args.noise, seed=args.seed
    )
    cio.save_pointcloud_xyz(pc, args.out)
    gt_path = args.gt if args.gt else str(args.out) + ".gt.json"
    sidecar = {
        "kind": args.kind,
        "seed": args.seed,
        "noise_sigma": args.noise,
        "n_points": args.points,
        "cuboids": [[float(v) for v in c.to_vector()] for c in gt_cuboids],
    }
    Path(gt_path).write_text(json.dumps(sidecar, indent=2) + "\n")
    print(json.dumps({"out": str(args.out), "gt": str(gt_path), "points": args.points}))
    return 0


def _cmd_export(args):
    doc = cio.load_result(args.result)
    cio.export_obj(doc, args.out)
    print(json.dumps({"out": str(args.out),
                      "n_active": int(doc.existence.sum())}))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfigError, InvalidInputError) as exc:
        _log(f"error: {exc}")
        return 1
    except DataError as exc:
        _log(f"data error: {exc}")
        return 2
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
