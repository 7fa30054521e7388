"""``lungseg`` command line: phantom-gen, train, infer, eval, ttest, report.

Exit codes: 0 success, 2 invalid input, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, apply_overrides, load_config
from .metrics import METRICS, UndefinedMetricError, aggregate, paired_t_test
from .phantom import PhantomConfig, generate_dataset
from .pipeline import (
    PipelineError,
    evaluate_predictions,
    infer_volume,
    load_model,
    pred_path,
    read_report,
    summary_rows,
    train_model,
    write_aggregate,
    write_report,
)
from .volgrid import load_manifest, load_volume, save_mask

log = logging.getLogger("lungseg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _kv(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _run_config(args):
    overrides = dict(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


# --------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args):
    tpl = PhantomConfig(
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
        profile=args.profile,
        tumor_prob=args.tumor_prob,
        effusion_prob=args.effusion_prob,
        consolidation_prob=args.consolidation_prob,
        noise_sigma_hu=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    man = generate_dataset(args.n, tpl, args.out, split=args.split, prefix=args.prefix)
    print(f"wrote {len(man)} phantoms to {os.path.join(args.out, 'manifest.csv')}")


def cmd_train(args):
    cfg = _run_config(args)
    man = load_manifest(args.manifest)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log"
    _, losses = train_model(man, cfg, out_path=args.out, log_path=log_path)
    print(f"steps={len(losses)} final_loss={losses[-1]!r} weights={args.out} log={log_path}")


def cmd_infer(args):
    net_cfg, store, resolution = load_model(args.weights)
    pre = _run_config(args).preprocess
    if args.volume:
        if not args.out:
            raise UsageError("--volume needs --out")
        v = load_volume(args.volume)
        save_mask(infer_volume(net_cfg, store, v, resolution, pre, args.remove_dense), args.out)
        print(f"wrote {args.out}")
        return
    if not (args.manifest and args.out_dir):
        raise UsageError("give --volume/--out or --manifest/--out-dir")
    os.makedirs(args.out_dir, exist_ok=True)
    entries = load_manifest(args.manifest).split(args.split)
    if not entries:
        raise UsageError(f"manifest has no {args.split!r} cases")
    for e in entries:
        pred = infer_volume(net_cfg, store, load_volume(e.image_path), resolution, pre, args.remove_dense)
        save_mask(pred, pred_path(args.out_dir, e.case_id))
    print(f"wrote {len(entries)} masks to {args.out_dir}")


def _print_summary(rows):
    metrics = METRICS + (("tumor_overlap",) if rows[0].tumor_overlap is not None else ())
    for m, s in aggregate(summary_rows(rows), metrics).items():
        flags = f" [{';'.join(s.flags)}]" if s.flags else ""
        print(f"{m},{s.mean!r},{s.sd!r},{s.n}{flags}")


def cmd_eval(args):
    man = load_manifest(args.manifest)
    rows = evaluate_predictions(args.pred_dir, man, args.mode, args.split, args.threads)
    write_report(rows, args.out)
    if args.aggregate:
        write_aggregate({args.run: {args.test_set: rows}}, args.aggregate)
    print("metric,mean,sd,n")
    _print_summary(rows)


def _paired_values(path_a, path_b, metric, structure):
    a = {r.case_id: r for r in summary_rows(read_report(path_a), structure)}
    b = {r.case_id: r for r in summary_rows(read_report(path_b), structure)}
    if set(a) != set(b):
        only = sorted(set(a) ^ set(b))
        raise UsageError(f"case sets differ ({len(only)} unmatched, e.g. {only[0]!r})")
    if not a:
        raise UsageError("reports have no rows for the chosen structure")
    ids = sorted(a)
    va = [getattr(a[c], metric) for c in ids]
    vb = [getattr(b[c], metric) for c in ids]
    if any(v is None or math.isnan(v) for v in va + vb):
        raise UndefinedMetricError(f"{metric} is missing for some cases")
    return va, vb


def cmd_ttest(args):
    va, vb = _paired_values(args.report_a, args.report_b, args.metric, args.structure)
    r = paired_t_test(va, vb)
    mean_a, mean_b = math.fsum(va) / len(va), math.fsum(vb) / len(vb)
    print("metric,n,mean_a,mean_b,t,df,p_two_sided")
    print(f"{args.metric},{len(va)},{mean_a!r},{mean_b!r},{r.t!r},{r.df},{r.p_two_sided!r}")


def _parse_run_spec(spec):
    # LABEL=TESTSET:path/to/report.csv
    run, sep, rest = spec.partition("=")
    ts, sep2, path = rest.partition(":")
    if not (sep and sep2 and run and ts and path):
        raise UsageError(f"--run expects LABEL=TESTSET:REPORT.csv, got {spec!r}")
    return run, ts, path


def cmd_report(args):
    from .plotting import report_figures

    table = {}
    for spec in args.run:
        run, ts, path = _parse_run_spec(spec)
        if ts in table.get(run, {}):
            raise UsageError(f"duplicate run/test set {run}={ts}")
        table.setdefault(run, {})[ts] = read_report(path)
    os.makedirs(args.out_dir, exist_ok=True)
    agg = os.path.join(args.out_dir, "aggregate.csv")
    write_aggregate(table, agg)
    figs = report_figures({r: {t: summary_rows(v) for t, v in d.items()} for r, d in table.items()},
                          args.out_dir)
    with open(agg) as fh:
        sys.stdout.write(fh.read())
    for f in figs:
        log.info("figure %s", f)


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="lungseg", description="Slice-wise CT lung segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="random seed (training and phantoms)")
    p.add_argument("--config", default=None, help="key=value configuration file")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads and parallel evaluation workers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="write synthetic phantoms and a manifest")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--profile", choices=["healthy", "diverse"], default="healthy")
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=["train", "test"], default="train")
    g.add_argument("--prefix", default="case")
    g.add_argument("--dims", type=int, nargs=3, default=[32, 64, 64], metavar=("Z", "Y", "X"))
    g.add_argument("--spacing", type=float, nargs=3, default=[2.5, 1.25, 1.25], metavar=("SZ", "SY", "SX"))
    g.add_argument("--tumor-prob", type=float, default=0.5)
    g.add_argument("--effusion-prob", type=float, default=0.5)
    g.add_argument("--consolidation-prob", type=float, default=0.5)
    g.add_argument("--noise", type=float, default=20.0, help="Gaussian noise sigma in HU")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train a network on a manifest's train split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="weights file, rewritten after every epoch")
    t.add_argument("--log", default=None, help="per-step loss log (default: next to --out)")
    t.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="config override")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one volume or every case of a manifest split")
    i.add_argument("--weights", required=True)
    i.add_argument("--volume")
    i.add_argument("--out")
    i.add_argument("--manifest")
    i.add_argument("--split", choices=["train", "test"], default="test")
    i.add_argument("--out-dir")
    i.add_argument("--remove-dense", action="store_true", help="drop -50..70 HU areas from the mask")
    i.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="config override")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a manifest")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=["per_lung", "combined"], default="per_lung")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--out", required=True, help="per-case report CSV")
    e.add_argument("--aggregate", help="also write a one-run aggregate table here")
    e.add_argument("--run", default="model", help="run label for the aggregate table")
    e.add_argument("--test-set", default="test", help="test-set label for the aggregate table")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("ttest", help="paired t-test between two report CSVs")
    s.add_argument("report_a")
    s.add_argument("report_b")
    s.add_argument("--metric", choices=list(METRICS) + ["tumor_overlap"], default="dsc")
    s.add_argument("--structure", choices=["averaged", "combined", "right", "left"], default=None)
    s.set_defaults(func=cmd_ttest)

    r = sub.add_parser("report", help="aggregate table and box plots over several reports")
    r.add_argument("--run", action="append", required=True, metavar="LABEL=TESTSET:CSV")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if getattr(args, "set", None):
        try:
            apply_overrides(load_config(args.config), dict(args.set))
        except ConfigError as exc:
            parser.error(str(exc))
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (UndefinedMetricError, ArithmeticError, PipelineError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except (ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
