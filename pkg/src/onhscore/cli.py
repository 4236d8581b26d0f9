"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 acceptance failure
(``repro`` only).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from onhscore.cohort import simulate_cohort
from onhscore.compensation import CompensationParams, compensate_volume
from onhscore.evaluation import METRICS, cross_validate, dice_report, holdout_evaluate
from onhscore.forest import ForestParams, ModelFormatError, load_model, predict_proba, save_model, train_forest
from onhscore.metrics import (
    CLASSES,
    SCORES_HEADER,
    append_scores_csv,
    extract_features,
    feature_row,
    read_scores_csv,
)
from onhscore.phantom import PhantomGeometryError, PhantomSpec, analytic_volumes, gen_labels, preset, render_intensity
from onhscore.volume import IntensityVolume, LabelVolume, VolumeFormatError, load_volume, normalize_intensity, save_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ACCEPTANCE = 0, 1, 2, 3

REPRO_MIN_AUC = 0.95
REPRO_MIN_ACCURACY = 0.88

PREDS_HEADER = ["eye_id", "subject_id", "true_class", "predicted_class", "p_odd", "p_papilledema", "p_healthy"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--seed", type=int, default=42, help="root seed for every random stream")
    p.add_argument("--threads", type=int, default=1, help="worker threads (output does not depend on it)")
    p.add_argument("--quiet", action="store_true", help="do not print the resolved configuration")
    return p


def _forest_flags(p):
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--mtry", type=int, default=1)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--no-bootstrap", action="store_true")
    p.add_argument("--class-weight", choices=["balanced"], default=None)


def _forest_params(args, seed=None) -> ForestParams:
    return ForestParams(
        n_trees=args.trees, mtry=args.mtry, max_depth=args.max_depth, min_leaf=args.min_leaf,
        bootstrap=not args.no_bootstrap, seed=args.seed if seed is None else seed,
        class_weight=args.class_weight,
    )


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="onhscore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic ONH phantoms")
    phsub = ph.add_subparsers(dest="phantom_command", required=True, parser_class=_Parser)
    gen = phsub.add_parser("gen", parents=[common], help="write a phantom label volume")
    src = gen.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=["healthy", "odd", "papilledema"])
    src.add_argument("--spec", type=Path, help="phantom spec (JSON)")
    gen.add_argument("--out", type=Path, required=True, help="output stem")
    gen.add_argument("--render", action="store_true", help="also write <stem>_intensity")
    dump = phsub.add_parser("spec", parents=[common], help="print a preset's spec as JSON")
    dump.add_argument("--preset", choices=["healthy", "odd", "papilledema"], required=True)

    comp = sub.add_parser("compensate", parents=[common], help="adaptive attenuation compensation")
    comp.add_argument("--in", dest="input", type=Path, required=True)
    comp.add_argument("--out", type=Path, required=True)
    comp.add_argument("--contrast-exp", type=float, default=2.0)
    comp.add_argument("--threshold-exp", type=float, default=12.0)
    comp.add_argument("--no-rescale", action="store_true")

    sc = sub.add_parser("score", parents=[common], help="drusen and swelling scores for one eye")
    sc.add_argument("--labels", type=Path, required=True)
    sc.add_argument("--eye-id", required=True)
    sc.add_argument("--subject-id", required=True)
    sc.add_argument("--true-class", choices=[c.value for c in CLASSES])
    sc.add_argument("--min-island", type=int, default=0)
    sc.add_argument("--out", type=Path, required=True)

    tr = sub.add_parser("train", parents=[common], help="train the random forest")
    tr.add_argument("--scores", type=Path, required=True)
    tr.add_argument("--model", type=Path, required=True)
    _forest_flags(tr)

    pr = sub.add_parser("predict", parents=[common], help="classify eyes in a scores CSV")
    pr.add_argument("--model", type=Path, required=True)
    pr.add_argument("--scores", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("evaluate", help="evaluation protocol")
    evsub = ev.add_subparsers(dest="evaluate_command", required=True, parser_class=_Parser)
    ed = evsub.add_parser("dice", parents=[common], help="Dice/Jaccard between two label volumes")
    ed.add_argument("--pred", type=Path, required=True)
    ed.add_argument("--truth", type=Path, required=True)
    ed.add_argument("--out", type=Path, required=True)
    ecv = evsub.add_parser("cv", parents=[common], help="grouped k-fold cross-validation")
    ecv.add_argument("--scores", type=Path, required=True)
    ecv.add_argument("--folds", type=int, default=5)
    ecv.add_argument("--holdout", action="store_true", help="single 50/50 grouped split instead of k-fold")
    ecv.add_argument("--out", type=Path, required=True)
    _forest_flags(ecv)

    rp = sub.add_parser("repro", parents=[common], help="cluster-simulation reproduction of the classification")
    rp.add_argument("--out", type=Path, required=True)
    rp.add_argument("--folds", type=int, default=5)
    rp.add_argument("--classes-collapsed", action="store_true", help="null case: one pooled cluster")
    _forest_flags(rp)

    pl = sub.add_parser("pipeline", parents=[common], help="score (and classify) many label volumes")
    pl.add_argument("--labels", type=Path, nargs="*", default=[])
    pl.add_argument("--model", type=Path)
    pl.add_argument("--min-island", type=int, default=0)
    pl.add_argument("--scores-out", type=Path, required=True)
    pl.add_argument("--preds-out", type=Path)
    return parser


def _print_config(args):
    if args.quiet:
        return
    cfg = {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) else v)
           for k, v in sorted(vars(args).items()) if k != "func"}
    print("# config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


# --- commands -----------------------------------------------------------------

def cmd_phantom(args):
    if args.phantom_command == "spec":
        print(preset(args.preset).to_json())
        return EXIT_OK
    spec = preset(args.preset) if args.preset else PhantomSpec.from_json(args.spec.read_text(encoding="utf-8"))
    labels = gen_labels(spec)
    save_volume(labels, args.out)
    av = analytic_volumes(spec)
    sidecar = args.out.with_name(args.out.name + ".analytic")
    sidecar.write_text(
        f"drusen_mm3={av.drusen_mm3!r}\nswelling_mm3={av.swelling_mm3!r}\n"
        f"prelamina_mm3={av.prelamina_mm3!r}\ndome_mm3={av.dome_mm3!r}\n", encoding="utf-8")
    args.out.with_name(args.out.name + ".spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    if args.render:
        save_volume(render_intensity(labels, spec, args.seed), args.out.with_name(args.out.name + "_intensity"))
    _log(args, f"wrote {args.out} (drusen {av.drusen_mm3:.4f} mm3, swelling {av.swelling_mm3:.4f} mm3 analytic)")
    return EXIT_OK


def cmd_compensate(args):
    vol = load_volume(args.input)
    if not isinstance(vol, IntensityVolume):
        raise VolumeFormatError(f"{args.input}: expected an intensity volume")
    params = CompensationParams(args.contrast_exp, args.threshold_exp, not args.no_rescale)
    save_volume(compensate_volume(normalize_intensity(vol), params), args.out)
    return EXIT_OK


def _load_labels(stem) -> LabelVolume:
    vol = load_volume(stem)
    if not isinstance(vol, LabelVolume):
        raise VolumeFormatError(f"{stem}: expected a label volume")
    return vol


def cmd_score(args):
    feats = extract_features(_load_labels(args.labels), args.eye_id, args.subject_id, args.true_class,
                             min_island=args.min_island)
    append_scores_csv(args.out, [feats])
    _log(args, f"{feats.eye_id}: drusen {feats.drusen_score_mm3:.6g} mm3, swelling {feats.swelling_score_mm3:.6g} mm3")
    return EXIT_OK


def cmd_train(args):
    feats = read_scores_csv(args.scores)
    model = train_forest(feats, _forest_params(args))
    save_model(model, args.model)
    if model.oob_accuracy is not None:
        _log(args, f"out-of-bag accuracy {model.oob_accuracy:.4f}")
    return EXIT_OK


def _pred_rows(model, feats):
    if not feats:
        return []
    proba = predict_proba(model, np.array([f.vector for f in feats]))
    rows = []
    for f, p in zip(feats, proba):
        rows.append([f.eye_id, f.subject_id, "" if f.true_class is None else f.true_class.value,
                     CLASSES[int(np.argmax(p))].value] + [repr(float(v)) for v in p])
    return rows


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_predict(args):
    model = load_model(args.model)
    _write_csv(args.out, PREDS_HEADER, _pred_rows(model, read_scores_csv(args.scores)))
    return EXIT_OK


def cmd_evaluate(args):
    if args.evaluate_command == "dice":
        pred, truth = _load_labels(args.pred), _load_labels(args.truth)
        args.out.write_text(dice_report(pred, truth).to_json() + "\n", encoding="utf-8")
        return EXIT_OK
    feats = read_scores_csv(args.scores)
    params = _forest_params(args)
    if args.holdout:
        report = holdout_evaluate(feats, params, seed=args.seed)
    else:
        report = cross_validate(feats, args.folds, params, seed=args.seed, threads=args.threads)
    args.out.write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def run_repro(seed: int, folds: int = 5, params: ForestParams = ForestParams(), collapsed: bool = False,
              threads: int = 1) -> dict:
    """Simulate the 70/30/50 cohort, evaluate it, and check the acceptance thresholds."""
    feats = simulate_cohort(seed, collapsed=collapsed)
    holdout = holdout_evaluate(feats, params, seed=seed)
    cv = cross_validate(feats, folds, params, seed=seed, threads=threads)
    checks = {m: cv.mean(m) >= REPRO_MIN_AUC for m in METRICS[:3]}
    checks["accuracy"] = cv.mean("accuracy") >= REPRO_MIN_ACCURACY
    return {
        "seed": seed,
        "cohort": {c.value: sum(f.true_class is c for f in feats) for c in CLASSES},
        "collapsed": collapsed,
        "forest": {"n_trees": params.n_trees, "mtry": params.mtry, "max_depth": params.max_depth,
                   "min_leaf": params.min_leaf, "bootstrap": params.bootstrap, "class_weight": params.class_weight},
        "holdout": holdout.as_dict(),
        "cv": cv.as_dict(),
        "thresholds": {"min_auc": REPRO_MIN_AUC, "min_accuracy": REPRO_MIN_ACCURACY},
        "checks": checks,
        "passed": all(checks.values()),
    }


def cmd_repro(args):
    report = run_repro(args.seed, args.folds, _forest_params(args, seed=0), args.classes_collapsed, args.threads)
    args.out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    cv = report["cv"]
    _log(args, "  ".join(f"{m}={cv[m]['mean']}±{cv[m]['std']}" for m in METRICS))
    _log(args, "PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_ACCEPTANCE


def cmd_pipeline(args):
    model = load_model(args.model) if args.model else None

    def work(stem):
        try:
            return extract_features(_load_labels(stem), stem.name, stem.name, min_island=args.min_island), None
        except (VolumeFormatError, OSError, ValueError) as exc:
            return None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(work, args.labels))

    failed = 0
    score_rows, pred_rows = [], []
    for stem, (feats, err) in zip(args.labels, results):
        if err is None:
            score_rows.append(feature_row(feats) + ["ok"])
            if model is not None:
                pred_rows.append(_pred_rows(model, [feats])[0] + ["ok"])
        else:
            failed += 1
            _log(args, f"{stem}: {err}")
            status = "error: " + err.replace("\n", " ")
            score_rows.append([stem.name, stem.name, "", "", "", status])
            pred_rows.append([stem.name, stem.name, "", "", "", "", "", status])
    _write_csv(args.scores_out, SCORES_HEADER + ["status"], score_rows)
    if model is not None and args.preds_out:
        _write_csv(args.preds_out, PREDS_HEADER + ["status"], pred_rows)
    return EXIT_DATA if failed else EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "compensate": cmd_compensate,
    "score": cmd_score,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "repro": cmd_repro,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            parser.error("--threads must be >= 1")
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    _print_config(args)
    try:
        return COMMANDS[args.command](args)
    except (VolumeFormatError, ModelFormatError, PhantomGeometryError, ValueError, OSError) as exc:
        print(f"onhscore: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
