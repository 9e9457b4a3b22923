"""Command-line surface: evaluation, combining, ranking, training, benchmarks.

Exit codes: 0 success, 1 usage error, 2 data/format error. Outputs are
byte-identical across runs for identical inputs unless ``--run-meta`` opts
into a metadata header. ``DEPTHBENCH_OUT`` provides the default output
directory.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time

import numpy as np

from . import io as dio
from .combine import image_oracle, pixel_average
from .errors import DepthbenchError
from .metrics import average_rank, category_stats, evaluate_dataset
from .refiner import RefinerConfig, _forward, init_params, train_toy
from .suite import COMPOSITE_NAMES, PRIMITIVE_NAMES, gradient_suite
from .synthetic import make_samples

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we reserve 2 for data
        raise _UsageError(message)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_") or "unnamed"


def _resolve_out(args) -> str:
    out = args.out or os.environ.get("DEPTHBENCH_OUT")
    if not out:
        raise _UsageError("no output directory: pass --out or set DEPTHBENCH_OUT")
    os.makedirs(out, exist_ok=True)
    return out


def _run_meta(args) -> dict | None:
    if not getattr(args, "run_meta", False):
        return None
    return {"argv": list(args._argv), "time_unix": time.time()}


def _load_predictions(manifest, directory, pred_space):
    preds = dio.load_prediction_dir(manifest, directory)
    if pred_space and pred_space != manifest.space:
        preds = {k: dio.invert_space(v) for k, v in preds.items()}
    return preds


def _write_report_pair(report, out, meta) -> tuple[str, str]:
    stem = f"{_slug(report.method)}__{_slug(report.dataset)}"
    json_path = os.path.join(out, f"{stem}.report.json")
    csv_path = os.path.join(out, f"{stem}.report.csv")
    dio.write_report(report, json_path, format="json", run_meta=meta)
    dio.write_report(report, csv_path, format="csv", run_meta=meta)
    return json_path, csv_path


def _print_aggregate(report) -> None:
    print(f"{report.method} on {report.dataset}: "
          f"delta1={100.0 * report.aggregate_delta1:.2f}% "
          f"absrel={100.0 * report.aggregate_absrel:.2f}% "
          f"({len(report.per_image)} images)")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_evaluate(args) -> int:
    out = _resolve_out(args)
    manifest = dio.load_manifest(args.manifest)
    preds = _load_predictions(manifest, args.pred, args.pred_space)
    report = evaluate_dataset(manifest, preds, args.method, jobs=args.jobs)
    _write_report_pair(report, out, _run_meta(args))
    _print_aggregate(report)
    return 0


def _cmd_combine(args) -> int:
    out = _resolve_out(args)
    manifest = dio.load_manifest(args.manifest)
    preds_a = _load_predictions(manifest, args.pred_a, args.pred_space)
    preds_b = _load_predictions(manifest, args.pred_b, args.pred_space)

    combined = {}
    for entry in manifest.entries:
        gt = dio.load_entry_gt(manifest, entry)
        a = preds_a.get(entry.image_id)
        b = preds_b.get(entry.image_id)
        if a is None or b is None:
            continue  # evaluation below reports all missing ids at once
        combined[entry.image_id] = pixel_average(a, b, gt)
    pred_dir = os.path.join(out, "predictions")
    dio.save_prediction_dir(combined, pred_dir)

    report = evaluate_dataset(manifest, combined, args.method, jobs=args.jobs)
    _write_report_pair(report, out, _run_meta(args))
    _print_aggregate(report)
    print(f"combined predictions written to {pred_dir}")
    return 0


def _cmd_oracle(args) -> int:
    out = _resolve_out(args)
    rep_a = dio.read_report(args.report_a)
    rep_b = dio.read_report(args.report_b)
    criteria = ["delta1", "absrel"] if args.criterion == "both" else [args.criterion]

    summary = {}
    for criterion in criteria:
        sel = image_oracle(rep_a, rep_b, criterion)
        stem = f"oracle_{criterion}"
        dio.write_report(sel.report, os.path.join(out, f"{stem}.report.json"),
                         format="json", run_meta=_run_meta(args))
        dio.write_report(sel.report, os.path.join(out, f"{stem}.report.csv"),
                         format="csv", run_meta=_run_meta(args))
        summary[criterion] = {
            "method_a": rep_a.method, "method_b": rep_b.method,
            "fraction_a": sel.fraction_a, "fraction_b": sel.fraction_b,
            "aggregate_delta1": sel.report.aggregate_delta1,
            "aggregate_absrel": sel.report.aggregate_absrel,
        }
        print(f"oracle[{criterion}]: delta1={100.0 * sel.report.aggregate_delta1:.2f}% "
              f"absrel={100.0 * sel.report.aggregate_absrel:.2f}% "
              f"selected {sel.fraction_a:.0f}%/{sel.fraction_b:.0f}%")
    with open(os.path.join(out, "oracle_fractions.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


def _cmd_rank(args) -> int:
    out = _resolve_out(args)
    scores: dict[str, dict[tuple[str, str], float]] = {}
    for path in args.scores or []:
        for method, cols in dio.read_scores_csv(path).items():
            scores.setdefault(method, {}).update(cols)
    for path in args.reports or []:
        rep = dio.read_report(path)
        cell = scores.setdefault(rep.method, {})
        cell[(rep.dataset, "delta1")] = rep.aggregate_delta1
        cell[(rep.dataset, "absrel")] = rep.aggregate_absrel
    if not scores:
        raise _UsageError("rank: provide --scores and/or --reports inputs")

    ranking = average_rank(scores, ties=args.ties)
    dio.write_ranking_csv(ranking, os.path.join(out, "ranking.csv"))
    with open(os.path.join(out, "ranking.json"), "w", encoding="utf-8") as f:
        json.dump({"ties": args.ties,
                   "average_rank": {m: ranking.average_rank[m]
                                    for m in ranking.methods}},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    for m in sorted(ranking.methods, key=lambda m: (ranking.average_rank[m], m)):
        print(f"{ranking.average_rank[m]:5.1f}  {m}")
    return 0


def _cmd_categories(args) -> int:
    out = _resolve_out(args)
    report = dio.read_report(args.report)
    stats = category_stats(report, metric=args.metric)
    dio.write_category_stats_csv(stats, os.path.join(out, "category_stats.csv"))
    dio.render_boxplot_svg(stats, os.path.join(out, "boxplot.svg"))
    dio.render_boxplot_png(stats, os.path.join(out, "boxplot.png"),
                           metric=args.metric)
    for s in stats:
        print(f"{s.category}: median={s.median:.4f} iqr={s.iqr:.4f} "
              f"n={s.count} outliers={len(s.outlier_ids)}")
    return 0


def _cmd_pool_attn(args) -> int:
    from .preimage import (CrossAttnMap, SelfAttnMap, fold_cross_attention,
                           pool_self_attention)
    from .io.bundles import (ROLE_CROSS, ROLE_CROSS_FOLDED, ROLE_SELF,
                             ROLE_SELF_POOLED)

    records = dio.read_container(args.input)
    out_records = []
    for rec in records:
        if rec.role == ROLE_SELF:
            heads, h, w, _ = rec.data.shape
            pooled = pool_self_attention(
                SelfAttnMap(heads=rec.meta or heads, h=h, w=w,
                            data=rec.data.astype(np.float64)))
            out_records.append(dio.RasterRecord(
                name=rec.name, role=ROLE_SELF_POOLED, data=pooled.data,
                meta=rec.meta or heads))
        elif rec.role == ROLE_CROSS:
            heads, h, w, _ = rec.data.shape
            folded = fold_cross_attention(
                CrossAttnMap(heads=rec.meta or heads, h=h, w=w,
                             data=rec.data.astype(np.float64)))
            out_records.append(dio.RasterRecord(
                name=rec.name, role=ROLE_CROSS_FOLDED, data=folded.data,
                meta=rec.meta or heads))
        else:
            out_records.append(rec)
    dio.write_container(args.output, out_records)
    print(f"pooled {len(records)} records -> {args.output}")
    return 0


def _cmd_train_toy(args) -> int:
    out = _resolve_out(args)
    config = RefinerConfig(
        stages=args.stages, base_channels=args.base_channels,
        seg_classes=args.seg_classes, injection_mode=args.injection,
        head_mode=args.head, latent_hw=(args.latent, args.latent),
        heads=args.heads, feature_channels=args.feature_channels,
        preimage_seed=args.seed)
    dataset = make_samples(args.samples, args.seed,
                           latent=config.latent_hw, classes=config.seg_classes)
    result = train_toy(config, dataset, args.steps, args.lr, args.seed,
                       batch_size=args.batch_size)

    hist_path = os.path.join(out, "loss_history.csv")
    with open(f"{hist_path}.tmp", "w", encoding="utf-8", newline="\n") as f:
        f.write("step,total,ssi,dice,focal\n")
        for i, h in enumerate(result.history):
            f.write(f"{i},{h.total!r},{h.ssi!r},{h.dice!r},{h.focal!r}\n")
    os.replace(f"{hist_path}.tmp", hist_path)

    dio.write_refiner_params(result.params, os.path.join(out, "params.rstc"),
                             config_path=os.path.join(out, "config.json"))
    dio.render_loss_curves(result.history, os.path.join(out, "loss_curves.png"))
    first, last = result.history[0], result.history[-1]
    print(f"trained {args.steps} steps ({config.injection_mode}, {config.head_mode}): "
          f"total {first.total:.4f} -> {last.total:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    errors = gradient_suite(args.seed)
    failures = []
    for name in PRIMITIVE_NAMES + COMPOSITE_NAMES:
        err = errors[name]
        tol = PRIMITIVE_TOL if name in PRIMITIVE_NAMES else COMPOSITE_TOL
        status = "ok" if err < tol else "FAIL"
        print(f"{name:24s} {err:12.3e}  (tol {tol:.0e})  {status}")
        if err >= tol:
            failures.append(name)
    if args.out:
        out = _resolve_out(args)
        with open(os.path.join(out, "gradcheck.json"), "w", encoding="utf-8") as f:
            json.dump(errors, f, indent=2, sort_keys=True)
            f.write("\n")
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}", file=sys.stderr)
        return 2
    print("all gradient checks passed")
    return 0


def _cmd_bench(args) -> int:
    out = _resolve_out(args)
    dtype = np.float32 if args.precision == "f32" else np.float64
    try:
        resolutions = [int(r) for r in args.resolutions.split(",") if r]
    except ValueError as exc:
        raise _UsageError(f"bench: bad resolution list {args.resolutions!r}") from exc
    if not resolutions:
        raise _UsageError("bench: empty resolution list")

    rows = []
    for res in resolutions:
        config = RefinerConfig(stages=3, base_channels=args.base_channels,
                               seg_classes=4, latent_hw=(res, res),
                               preimage_seed=args.seed)
        sample = make_samples(1, args.seed, latent=config.latent_hw)[0]
        stages = config.synthesize(sample.image)
        params = init_params(config, args.seed, dtype=dtype)
        _forward(stages, params, config.injection_mode)  # warm-up
        times = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            _forward(stages, params, config.injection_mode)
            times.append(time.perf_counter() - t0)
        t = np.array(times)
        q1, med, q3 = np.percentile(t, [25, 50, 75])
        rows.append({"latent": res, "output": 2 * res, "runs": args.runs,
                     "mean_s": float(t.mean()), "std_s": float(t.std()),
                     "median_s": float(med), "iqr_s": float(q3 - q1)})
        print(f"latent {res:4d} -> output {2 * res:4d}: median "
              f"{med * 1e3:8.2f} ms  iqr {1e3 * (q3 - q1):6.2f} ms  "
              f"mean {t.mean() * 1e3:8.2f} ms  std {t.std() * 1e3:6.2f} ms")

    with open(os.path.join(out, "bench.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("latent,output,runs,mean_s,std_s,median_s,iqr_s\n")
        for r in rows:
            f.write(f"{r['latent']},{r['output']},{r['runs']},{r['mean_s']!r},"
                    f"{r['std_s']!r},{r['median_s']!r},{r['iqr_s']!r}\n")
    dio.render_bench_plot(rows, os.path.join(out, "bench.png"))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="depthbench",
                     description="Affine-invariant depth evaluation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", help="output directory (default $DEPTHBENCH_OUT)")
        p.add_argument("--run-meta", action="store_true",
                       help="attach run metadata header to reports")

    p = sub.add_parser("evaluate", help="score a prediction directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="directory of <id>.pfm predictions")
    p.add_argument("--method", default="method")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--pred-space", choices=["depth", "disparity"], default=None,
                   help="declare prediction space; differs from manifest -> 1/x")
    add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("combine", help="pixel-average two prediction directories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-a", required=True)
    p.add_argument("--pred-b", required=True)
    p.add_argument("--method", default="pixel_average")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--pred-space", choices=["depth", "disparity"], default=None)
    add_common(p)
    p.set_defaults(func=_cmd_combine)

    p = sub.add_parser("oracle", help="per-image best-of-two upper bound")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--criterion", choices=["delta1", "absrel", "both"],
                   default="both")
    add_common(p)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("rank", help="average-rank table over methods")
    p.add_argument("--scores", nargs="*",
                   help="CSV tables: method,dataset,delta1,absrel")
    p.add_argument("--reports", nargs="*", help="report JSONs from evaluate")
    p.add_argument("--ties", choices=["min", "average"], default="min")
    add_common(p)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("categories", help="per-category boxplot statistics")
    p.add_argument("--report", required=True)
    p.add_argument("--metric", choices=["delta1", "absrel"], default="delta1")
    add_common(p)
    p.set_defaults(func=_cmd_categories)

    p = sub.add_parser("pool-attn", help="pool/fold raw attention containers")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_pool_attn)

    p = sub.add_parser("train-toy", help="train the toy refiner on synthetic data")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=8e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--seg-classes", type=int, default=2)
    p.add_argument("--latent", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--feature-channels", type=int, default=6)
    p.add_argument("--injection", choices=["stagewise", "block"],
                   default="stagewise")
    p.add_argument("--head", choices=["pixel", "latent_surrogate"],
                   default="pixel")
    add_common(p)
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optionally write gradcheck.json here")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="forward-pass wall time per resolution")
    p.add_argument("--resolutions", default="8,16,32",
                   help="comma-separated latent sizes")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--precision", choices=["f64", "f32"], default="f64")
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    add_common(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    args._argv = list(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DepthbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
