"""Command-line entry point: ``dholab train|eval|gridsearch|conflict-report|verify-theory``.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, parse_floats
from .data import (
    Dataset,
    carve_validation,
    fraction_split,
    kshot_split,
    load_csv_dataset,
    mixture_splits,
    save_csv_dataset,
    zscore,
)
from .errors import (
    CheckpointError,
    CSVParseError,
    DivergenceError,
    InsufficientDataError,
    NonFiniteGradientError,
    SchemaError,
    TeacherFormatError,
)
from .inference import InterpolationSetting, evaluate_heads, grid_search, heuristic_setting
from .losses import ema_smooth, read_trace_csv, write_layer_trace_csv, write_trace_csv
from .model import build_model, init_language_aware, load_checkpoint, prototype_embeddings, save_checkpoint
from .seeding import rng_for
from .teacher import (
    OracleTeacherConfig,
    calibrate_corruption,
    load_teacher_predictions,
    oracle_teacher_predict,
    save_teacher_predictions,
)
from .theory import verify_all
from .trainer import train

log = logging.getLogger("dholab")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:12]


def run_dir(out: str, subcommand: str, config_hash: str, seed: int) -> Path:
    d = Path(out) / f"{subcommand}-{config_hash}-{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(directory: Path, subcommand: str, config_hash: str, seed: int, dataset, teacher) -> dict:
    manifest = {
        "subcommand": subcommand,
        "config_hash": config_hash,
        "seed": seed,
        "dataset": dataset,
        "teacher": teacher,
        "output_dir": str(directory),
        "version": __version__,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


def _load_matrix_csv(path: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    try:
        return np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def prepare_data(cfg: ExperimentConfig, seed: int):
    """Returns ``(train, val or None, test or None, split, means or None, descriptor)``."""
    dc = cfg.data
    means = None
    if dc.source == "mixture":
        m = mixture_splits(dc.num_classes, dc.input_dim, dc.separation, dc.noise, seed,
                           dc.n_train, dc.n_val, dc.n_test)
        train_set, val, test, means = m.train, m.val, m.test, m.means
        descriptor = {"source": "mixture", "num_classes": dc.num_classes, "input_dim": dc.input_dim,
                      "separation": dc.separation, "noise": dc.noise, "n_train": dc.n_train}
    else:
        if not dc.train_csv:
            raise UsageError("[data] train_csv is required for csv source")
        train_set = load_csv_dataset(dc.train_csv, split="train")
        C = train_set.num_classes
        val = load_csv_dataset(dc.val_csv, num_classes=C, split="val") if dc.val_csv else None
        test = load_csv_dataset(dc.test_csv, num_classes=C, split="test") if dc.test_csv else None
        descriptor = {"source": "csv", "train_csv": dc.train_csv, "val_csv": dc.val_csv, "test_csv": dc.test_csv}

    split_seed = int(rng_for(seed, "data-split").integers(2**31))
    if dc.shots > 0:
        split = kshot_split(train_set, dc.shots, split_seed)
    elif dc.label_fraction > 0:
        split = fraction_split(train_set, dc.label_fraction, split_seed)
    else:
        from .data import LabeledSplit

        lab = np.flatnonzero(train_set.labeled_mask)
        split = LabeledSplit(lab, np.flatnonzero(~train_set.labeled_mask))
    if val is None and dc.carve_validation:
        split, val = carve_validation(train_set, split, 0.2, int(rng_for(seed, "val-carve").integers(2**31)))
    if dc.normalize:
        sets = [s for s in (train_set, val, test) if s is not None]
        normed = iter(zscore(*sets))
        train_set = next(normed)
        val = next(normed) if val is not None else None
        test = next(normed) if test is not None else None
    return train_set, val, test, split, means, descriptor


def prepare_teacher(cfg: ExperimentConfig, train_set: Dataset, split, means, seed: int):
    tc = cfg.teacher
    if tc.source == "file":
        preds = load_teacher_predictions(tc.path, train_set, cfg.train.zeta)
        return preds, {"source": "file", "path": tc.path}
    if tc.prototypes == "means":
        if means is None:
            raise UsageError("[teacher] prototypes=means needs the mixture data source")
        protos = means
    else:
        protos = _load_matrix_csv(tc.prototypes)
    rate = tc.corruption_rate
    if tc.target_accuracy > 0:
        rate = calibrate_corruption(protos, train_set, tc.target_accuracy, cfg.train.zeta)
    strata = [split.labeled_indices, split.unlabeled_indices] if tc.stratified else None
    oc = OracleTeacherConfig(protos, tc.noise, cfg.train.zeta, rate)
    preds = oracle_teacher_predict(oc, train_set, int(rng_for(seed, "teacher-noise").integers(2**31)), strata)
    return preds, {"source": "oracle", "corruption_rate": rate, "noise": tc.noise,
                   "temperature": cfg.train.zeta, "accuracy": preds.accuracy}


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg.train.seed = args.seed
    seed = cfg.train.seed
    out = run_dir(args.out, "train", cfg.hash(), seed)
    train_set, val, test, split, means, data_desc = prepare_data(cfg, seed)
    teacher, teacher_desc = prepare_teacher(cfg, train_set, split, means, seed)

    mc = cfg.model
    model = build_model(train_set.feature_dim, train_set.num_classes, mc.hidden_dims, mc.feature_dim,
                        mode=mc.mode, kd_head=mc.kd_head, cosine_scale=mc.cosine_scale,
                        seed=int(rng_for(seed, "init").integers(2**31)))
    if mc.class_embeddings == "prototypes":
        if means is None:
            raise UsageError("[model] class_embeddings=prototypes needs the mixture data source")
        emb = prototype_embeddings(model.extractor, means, float(np.linalg.norm(model.ce_head.W, axis=1).mean()))
    elif mc.class_embeddings:
        emb = _load_matrix_csv(mc.class_embeddings)
    if mc.class_embeddings:
        init_language_aware(model.ce_head, emb)
        if model.kd_head is not model.ce_head:
            init_language_aware(model.kd_head, emb)

    train_view = split.strip_labels(train_set)
    report, opt_state = train(model, train_view, split, teacher, cfg.train)

    if val is not None:
        gs = grid_search(model, val, cfg.inference.alpha_grid, cfg.inference.beta_grid)
        setting = gs.best
        gs.to_csv(out / "grid.csv")
    else:
        setting = heuristic_setting(teacher.accuracy)
    if mc.mode == "sho":
        setting = InterpolationSetting(1.0, 1.0)

    save_checkpoint(out / "checkpoint.json", model, setting.alpha, setting.beta, opt_state,
                    extra={"lam": cfg.train.lam, "teacher_accuracy": teacher.accuracy})
    write_trace_csv(report.trace, out / "conflict_trace.csv")
    write_layer_trace_csv(report.trace, out / "conflict_layers.csv")
    summary = report.summary()
    summary.pop("duration_s")
    summary["interpolation"] = {"alpha": setting.alpha, "beta": setting.beta}
    if test is not None:
        acc = evaluate_heads(model, test, setting)
        summary["test"] = {"ce_head": acc.ce, "kd_head": acc.kd, "combined": acc.combined}
    _write_json(out / "report.json", summary)
    cfg.write_ini(out / "config.ini")
    save_csv_dataset(train_view, out / "train.csv")
    if val is not None:
        save_csv_dataset(val, out / "val.csv")
    if test is not None:
        save_csv_dataset(test, out / "test.csv")
    save_teacher_predictions(teacher, out / "teacher.csv")
    write_manifest(out, "train", cfg.hash(), seed, data_desc, teacher_desc)
    print(f"trained {mc.mode} for {cfg.train.epochs} epochs ({report.steps} steps, {report.duration_s:.1f}s) -> {out}")
    if "test" in summary:
        t = summary["test"]
        print(f"test accuracy: ce_head={t['ce_head']:.4f} kd_head={t['kd_head']:.4f} combined={t['combined']:.4f}")
    return EXIT_OK


def _load_for_eval(checkpoint: str, data: str):
    ck = load_checkpoint(checkpoint)
    model = ck["model"]
    ds = load_csv_dataset(data, num_classes=model.num_classes, split="eval")
    if ds.feature_dim != model.extractor.input_dim:
        raise CheckpointError(f"dataset has {ds.feature_dim} features, model expects {model.extractor.input_dim}")
    return ck, model, ds


def cmd_eval(args) -> int:
    ck, model, ds = _load_for_eval(args.checkpoint, args.data)
    alpha = args.alpha if args.alpha is not None else (ck["alpha"] if ck["alpha"] is not None else 0.5)
    beta = args.beta if args.beta is not None else (ck["beta"] if ck["beta"] is not None else 1.0)
    setting = InterpolationSetting(alpha, beta)
    params = {"checkpoint": args.checkpoint, "data": args.data, "alpha": alpha, "beta": beta, "adaptive": args.adaptive}
    out = run_dir(args.out, "eval", _digest(params), args.seed)
    res = evaluate_heads(model, ds, setting, adaptive=args.adaptive)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        C = model.num_classes
        w.writerow(["index", "label", "prediction", "alpha"] + [f"p_ce{c}" for c in range(C)] + [f"p_kd{c}" for c in range(C)])
        alphas = np.broadcast_to(np.asarray(res.alpha, dtype=float), (len(ds),))
        for i in range(len(ds)):
            lab = int(ds.labels[i])
            w.writerow([i, "" if lab < 0 else lab, int(res.predictions[i]), repr(float(alphas[i]))]
                       + [repr(float(v)) for v in res.p_ce[i]] + [repr(float(v)) for v in res.p_kd[i]])
    summary = {"ce_head": res.ce, "kd_head": res.kd, "combined": res.combined, "alpha": alpha,
               "beta": beta, "adaptive": args.adaptive, "n": len(ds)}
    _write_json(out / "eval.json", summary)
    write_manifest(out, "eval", _digest(params), args.seed, {"source": "csv", "path": args.data},
                   {"checkpoint": args.checkpoint})
    mode = "adaptive" if args.adaptive else f"alpha={alpha} beta={beta}"
    print(f"accuracy ({mode}): combined={res.combined:.4f} ce_head={res.ce:.4f} kd_head={res.kd:.4f}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    _, model, ds = _load_for_eval(args.checkpoint, args.data)
    alphas, betas = parse_floats(args.alphas), parse_floats(args.betas)
    params = {"checkpoint": args.checkpoint, "data": args.data, "alphas": alphas, "betas": betas}
    out = run_dir(args.out, "gridsearch", _digest(params), args.seed)
    res = grid_search(model, ds, alphas, betas)
    res.to_csv(out / "grid.csv")
    res.write_summary(out / "best.json")
    write_manifest(out, "gridsearch", _digest(params), args.seed, {"source": "csv", "path": args.data},
                   {"checkpoint": args.checkpoint})
    b = res.best
    print(f"best alpha={b.alpha} beta={b.beta} accuracy={b.val_accuracy:.4f} -> {out}")
    return EXIT_OK


COMPARISON_COLUMNS = ("step", "sho_cossim_head", "sho_cossim_theta", "dho_cossim_theta", "sho_inner", "dho_inner")


def conflict_comparison(sho_traces, dho_traces, factor: float = 0.99) -> list:
    """Smoothed side-by-side rows over the common step prefix."""
    n = min(len(sho_traces), len(dho_traces))
    if len(sho_traces) != len(dho_traces):
        log.warning("trace lengths differ (%d vs %d); using the first %d steps",
                    len(sho_traces), len(dho_traces), n)
    sho, dho = sho_traces[:n], dho_traces[:n]
    cols = [
        ema_smooth([t.cossim_head for t in sho], factor),
        ema_smooth([t.cossim_theta for t in sho], factor),
        ema_smooth([t.cossim_theta for t in dho], factor),
        ema_smooth([t.inner_product for t in sho], factor),
        ema_smooth([t.inner_product for t in dho], factor),
    ]
    return [(sho[i].step, *(c[i] for c in cols)) for i in range(n)]


def cmd_conflict_report(args) -> int:
    paths = [Path(args.sho) / "conflict_trace.csv", Path(args.dho) / "conflict_trace.csv"]
    for p in paths:
        if not p.exists():
            raise UsageError(f"missing conflict trace {p}")
    sho, dho = (read_trace_csv(p) for p in paths)
    params = {"sho": str(args.sho), "dho": str(args.dho), "smoothing": args.smoothing}
    out = run_dir(args.out, "conflict-report", _digest(params), args.seed)
    rows = conflict_comparison(sho, dho, args.smoothing)
    with open(out / "conflict_comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + ["" if v is None else repr(float(v)) for v in r[1:]])
    write_manifest(out, "conflict-report", _digest(params), args.seed, None, None)
    head = [r[1] for r in rows if r[1] is not None]
    if head:
        print(f"min smoothed SHO head cosine: {min(head):.4f}")
    pairs = [(r[2], r[3]) for r in rows if r[2] is not None and r[3] is not None]
    if pairs:
        frac = np.mean([d > s for s, d in pairs])
        print(f"steps with DHO theta cosine > SHO theta cosine: {frac:.1%}")
    print(f"wrote {out / 'conflict_comparison.csv'}")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    params = {"tolerance": args.tolerance, "quick": args.quick, "fault": args.fault}
    out = run_dir(args.out, "verify-theory", _digest(params), args.seed)
    reports = verify_all(seed=args.seed, tolerance=args.tolerance, fault=args.fault, quick=args.quick)
    failed = []
    for r in reports:
        _write_json(out / f"{r.theorem}.json", r.as_dict())
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.theorem}: trials={r.trials} max_violation={r.max_violation:.3e} tol={r.tolerance:g}")
        if not r.passed:
            failed.append(r.theorem)
    write_manifest(out, "verify-theory", _digest(params), args.seed, None, None)
    if failed:
        print("violations in: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs", help="output root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dholab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train an SHO or DHO student")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--adaptive", action="store_true", help="entropy-adaptive per-example alpha")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", parents=[common], help="search (alpha, beta) on validation data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--betas", default="0.1,0.3,0.5,0.7,1.0,2.0")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("conflict-report", parents=[common], help="merge SHO and DHO conflict traces")
    p.add_argument("--sho", required=True, help="SHO train run directory")
    p.add_argument("--dho", required=True, help="DHO train run directory")
    p.add_argument("--smoothing", type=float, default=0.99)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_conflict_report)

    p = sub.add_parser("verify-theory", parents=[common], help="numerical theorem checks")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--quick", action="store_true", help="smaller trial counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault", choices=["wrong-mixture"], default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify_theory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, CSVParseError, SchemaError,
            TeacherFormatError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NonFiniteGradientError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
