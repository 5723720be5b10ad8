"""``copse`` command line: gen, train, eval, infer, gradcheck.

Exit codes: 0 ok, 1 missing input, 2 bad flags, 3 training divergence,
4 gradient check failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import geometry as geo
from . import synth
from .estimator import PoseSizeEstimator
from .exceptions import TrainingDiverged
from .metrics import PredictionRecord, compute_report
from .ply import read_ply
from .training import default_gradcheck

EXIT_OK, EXIT_MISSING, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
LOG_SCHEMA_VERSION = 1
PREDICTIONS_VERSION = 1
GRADCHECK_TOL = 1e-4

logger = logging.getLogger("copse")


class MissingInput(Exception):
    pass


def thread_budget():
    """Worker cap from ``COPSE_THREADS``; defaults to the logical core count."""
    raw = os.environ.get("COPSE_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"COPSE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"COPSE_THREADS must be a positive integer, got {raw!r}")
    return n


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return value


def _non_negative_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"expected a number >= 0, got {text}")
    return value


def _categories(text):
    cats = tuple(c.strip() for c in text.split(",") if c.strip())
    unknown = [c for c in cats if c not in synth.CATEGORIES]
    if not cats or unknown:
        raise argparse.ArgumentTypeError(
            f"categories must be a comma list drawn from {','.join(synth.CATEGORIES)}")
    return cats


def _manifest_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if not os.path.isfile(path):
        raise MissingInput(f"dataset manifest not found: {path}")
    return path


def _require_file(path, what):
    if not os.path.isfile(path):
        raise MissingInput(f"{what} not found: {path}")
    return path


# -- commands ----------------------------------------------------------------------


def cmd_gen(args):
    cfg = synth.DatasetConfig(categories=args.categories, n_train=args.n, n_test=args.n_test,
                              seed=args.seed, sigma=args.sigma, jitter=args.jitter,
                              n_points=args.points, n_template_points=args.nk, binary=args.binary)
    workers = min(args.workers or thread_budget(), thread_budget())
    path = synth.build_dataset(args.out, cfg, workers=workers)
    n_total = len(cfg.categories) * (cfg.n_train + cfg.n_test)
    print(json.dumps({"manifest": path, "train": len(cfg.categories) * cfg.n_train,
                      "test": len(cfg.categories) * cfg.n_test, "total": n_total}))
    return EXIT_OK


def cmd_train(args):
    manifest = _manifest_path(args.data)
    samples = synth.load_samples(manifest, split="train")
    if not samples:
        raise MissingInput(f"no training samples in {manifest}")
    templates = synth.load_templates(manifest, n_points=args.nk)
    warm = min(10, args.epochs) if args.warm is None else args.warm
    if warm > args.epochs:
        print(f"error: --warm {warm} exceeds --epochs {args.epochs}", file=sys.stderr)
        return EXIT_USAGE
    est = PoseSizeEstimator(n_template_points=args.nk, n_points=len(samples[0].cloud),
                            center_mode=args.center, epochs=args.epochs,
                            batch_size=args.batch, learning_rate=args.lr,
                            warmup_epochs=warm, random_state=args.seed)
    out = args.out
    log_path = args.log or os.path.splitext(out)[0] + ".log.jsonl"
    for p in (out, log_path):
        if os.path.dirname(p):
            os.makedirs(os.path.dirname(p), exist_ok=True)
    header = {"schema_version": LOG_SCHEMA_VERSION, "kind": "header",
              "config": {"data": manifest, **est.get_params(),
                         "encoder_widths": list(est.encoder_widths),
                         "decoder_widths": list(est.decoder_widths)}}
    with open(log_path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")

        def log(entry):
            fh.write(json.dumps({k: _plain(v) for k, v in entry.items()}, sort_keys=True) + "\n")
            fh.flush()
            if args.verbose:
                print(f"epoch {entry['epoch']:4d}  L_total {entry['L_total']:.6f}", file=sys.stderr)

        try:
            est.fit(samples, templates=templates, log=log)
        except TrainingDiverged as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    est.save(out)
    print(json.dumps({"checkpoint": out, "log": log_path,
                      "final_L_total": _plain(est.history_[-1]["L_total"])}))
    return EXIT_OK


def _load_predictions(path):
    with open(_require_file(path, "predictions file")) as fh:
        doc = json.load(fh)
    if doc.get("version") != PREDICTIONS_VERSION:
        raise ValueError(f"unsupported predictions version {doc.get('version')}")
    return {p["id"]: (geo.RigidTransform(np.reshape(p["R"], (3, 3)), p["t"]), np.asarray(p["s"]))
            for p in doc["predictions"]}


def cmd_eval(args):
    manifest = _manifest_path(args.data)
    split = None if args.split == "all" else args.split
    samples = synth.load_samples(manifest, split=split)
    if not samples:
        raise MissingInput(f"no {args.split} samples in {manifest}")
    config = {"data": manifest, "split": args.split}
    if args.predictions:
        preds = _load_predictions(args.predictions)
        missing = [s.sample_id for s in samples if s.sample_id not in preds]
        if missing:
            raise MissingInput(f"no prediction for {len(missing)} samples, e.g. {missing[0]}")
        records = [PredictionRecord(s.sample_id, s.category, *preds[s.sample_id], s.pose, s.size,
                                    s.symmetry) for s in samples]
        config["predictions"] = args.predictions
    else:
        est = PoseSizeEstimator.load(_require_file(args.checkpoint, "checkpoint"))
        records = est.predict_records(samples)
        config["checkpoint"] = args.checkpoint
    report = compute_report(records, resolution=args.resolution, config=config)
    if os.path.dirname(args.out):
        os.makedirs(os.path.dirname(args.out), exist_ok=True)
    report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    print(json.dumps(report.mean, sort_keys=True))
    return EXIT_OK


def cmd_infer(args):
    est = PoseSizeEstimator.load(_require_file(args.checkpoint, "checkpoint"))
    if args.category not in est.templates_:
        print(f"error: checkpoint has no template for category {args.category!r}", file=sys.stderr)
        return EXIT_USAGE
    cloud = read_ply(_require_file(args.cloud, "cloud"))
    (pose, size), = est.predict([cloud], categories=[args.category])
    print(json.dumps({"R": pose.R.reshape(-1).tolist(), "t": pose.t.tolist(),
                      "s": np.asarray(size).tolist()}))
    return EXIT_OK


def cmd_gradcheck(args):
    rows = default_gradcheck(seed=args.seed, teacher_forcing=args.teacher_forcing,
                             center_mode=args.center)
    ok = True
    width = max(len(name) for name, _, _ in rows)
    for name, size, err in rows:
        passed = err <= GRADCHECK_TOL
        ok &= passed
        print(f"{name:<{width}}  {size:6d}  {err:.3e}  {'ok' if passed else 'FAIL'}")
    print("gradcheck " + ("passed" if ok else "failed"))
    return EXIT_OK if ok else EXIT_GRADCHECK


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="copse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help, out_required=True):
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--out", required=out_required, help=out_help)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, "output directory")
    p.add_argument("--categories", type=_categories, default=synth.CATEGORIES)
    p.add_argument("--n", type=_positive_int, default=100, help="train samples per category")
    p.add_argument("--n-test", type=_non_negative_int, default=0, help="test samples per category")
    p.add_argument("--sigma", type=_non_negative_float, default=0.002)
    p.add_argument("--jitter", type=_non_negative_float, default=0.2)
    p.add_argument("--points", type=_positive_int, default=1024)
    p.add_argument("--nk", type=_positive_int, default=36)
    p.add_argument("--binary", action="store_true", help="binary little-endian PLY")
    p.add_argument("--workers", type=_positive_int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p, "checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--warm", type=_non_negative_int, default=None,
                   help="teacher-forcing epochs (default: min(10, --epochs))")
    p.add_argument("--nk", type=_positive_int, default=36)
    p.add_argument("--center", choices=("vote", "regress"), default="vote")
    p.add_argument("--log", default=None, help="JSON-lines log (default: next to checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    common(p, "report JSON path")
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="JSON {version, predictions: [{id, R, t, s}]}")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--csv", default=None)
    p.add_argument("--resolution", type=_positive_int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="pose and size for one PLY cloud")
    common(p, "unused", out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--category", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p, "unused", out_required=False)
    p.add_argument("--center", choices=("vote", "regress"), default="vote")
    p.add_argument("--teacher-forcing", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        threads = thread_budget()
    except ValueError as exc:
        parser.exit(EXIT_USAGE, f"error: {exc}\n")
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
