"""``dermx-kit`` command line.

Exit codes: 0 success, 1 other library error, 2 usage, 3 configuration,
4 input/output. On failure a single JSON line ``{"error": <category>,
"message": ...}`` is printed to stderr.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as E
from . import reporting as R
from .config import load_config
from .errors import ConfigError, DermxError, SchemaError

logger = logging.getLogger("dermxkit")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4


def _sidecar(path, suffix):
    path = Path(path)
    return path.with_name(path.stem + suffix)


def _write_file_manifest(out_path, manifest):
    manifest.finished = R.now()
    R.write_json(_sidecar(out_path, ".manifest.json"), manifest)


# -- ingest / fuse / folds ----------------------------------------------------------------


def cmd_ingest(args, manifest):
    from .ingest import clean_dataset, dataset_stats, parse_annotations, save_dataset

    raw = parse_annotations(args.annotations, args.images_root)
    records, log = clean_dataset(raw)
    digest = save_dataset(args.out, records, log)
    R.write_json(_sidecar(args.out, ".cleaning.json"), log.as_dict())
    table = dataset_stats(records)
    R.write_csv(
        _sidecar(args.out, ".counts.csv"),
        "counts",
        table.rows(),
        columns=["source", *table.diseases, "total"],
    )
    manifest.dataset_hash = digest
    _write_file_manifest(args.out, manifest)
    print(f"{log.retained_images} images, {log.retained_evaluations} evaluations -> {args.out}")


def cmd_fuse(args, manifest):
    from .fusion import (FusionConfig, build_label_set, characteristic_sample_counts,
                         observed_characteristics, save_labels, select_characteristics)
    from .agreement import binary_agreement
    from .ingest import load_dataset

    records, meta = load_dataset(args.dataset)
    config = FusionConfig(
        denominator=args.denominator,
        require_outline=not args.tag_presence,
        resize_mode=args.resize_mode,
    )
    if args.characteristics:
        retained = tuple(c.strip() for c in args.characteristics.split(",") if c.strip())
    else:
        retained = select_characteristics(records, args.min_samples, args.min_f1, config)
    if not retained:
        raise ConfigError("no characteristic passes the selection thresholds")
    labels = build_label_set(records, retained, config, dataset_hash=meta["content_hash"])
    digest = save_labels(args.out, labels)

    universe = observed_characteristics(records)
    samples = characteristic_sample_counts(records, universe, config)
    agreement = binary_agreement(records, universe)
    rows = [[c, samples[c], agreement[c].f1.mean, c in retained] for c in universe]
    header = {"min_samples": args.min_samples, "min_f1": args.min_f1, "fusion": config.__dict__}
    R.write_csv(_sidecar(args.out, ".sample_counts.csv"), "sample_counts", rows, header=header)
    R.write_csv(_sidecar(args.out, ".prevalence.csv"), "prevalence", labels.prevalence.rows(digits=2),
                columns=["characteristic", *labels.prevalence.diseases])
    manifest.dataset_hash = meta["content_hash"]
    manifest.inputs["labels_hash"] = digest
    _write_file_manifest(args.out, manifest)
    print(f"{len(labels)} images, {len(retained)} characteristics ({', '.join(retained)}) -> {args.out}")


def _load_labels(path):
    from .fusion import load_labels

    return load_labels(path)


def cmd_folds(args, manifest):
    from .training import make_folds

    labels = _load_labels(args.labels)
    plan = make_folds(labels.gold_labels(), k=args.k, seed=args.seed)
    plan.save(args.out)
    manifest.dataset_hash = labels.content_hash
    manifest.fold_plan_hash = plan.digest
    manifest.seeds = {"folds": args.seed}
    _write_file_manifest(args.out, manifest)
    sizes = np.bincount(list(plan.assignments.values()), minlength=plan.k)
    print(f"{plan.k} folds, sizes {sizes.tolist()} -> {args.out}")


# -- agreement ------------------------------------------------------------------------------


def agreement_json(report):
    d = report.diagnosis
    return {
        "characteristics": list(report.characteristics),
        "notes": report.notes,
        "diagnosis": {
            "f1": d.f1,
            "sensitivity": d.sensitivity,
            "specificity": d.specificity,
            "selection": d.selection,
            "mean_f1": d.mean_f1,
            "mean_sensitivity": d.mean_sensitivity,
            "mean_specificity": d.mean_specificity,
            "mean_selection": d.mean_selection,
            "per_rater": d.per_rater,
        },
        "characteristic_binary": {
            name: {
                "f1": b.f1, "sensitivity": b.sensitivity, "specificity": b.specificity,
                "kappa": b.kappa, "selection": b.selection, "pairs": b.pairs,
                "pair_values": {f"{r1}|{r2}": list(v) for (r1, r2), v in b.pair_values.items()},
            }
            for name, b in report.characteristic_binary.items()
        },
        "characteristic_localization": report.characteristic_localization,
    }


def cmd_agreement(args, manifest):
    from .agreement import agreement_report
    from .ingest import load_dataset

    records, meta = load_dataset(args.dataset)
    chars = None
    if args.characteristics:
        chars = [c.strip() for c in args.characteristics.split(",") if c.strip()]
    report = agreement_report(records, chars)
    out = Path(args.out)
    base = out.with_suffix("")
    R.write_json(base.with_suffix(".json"), agreement_json(report))
    d = report.diagnosis
    rows = [
        [dis, d.f1[dis].mean, d.f1[dis].std, d.sensitivity[dis].mean, d.sensitivity[dis].std,
         d.specificity[dis].mean, d.specificity[dis].std, d.selection[dis].mean, d.selection[dis].std]
        for dis in d.f1
    ]
    rows.append(["mean", d.mean_f1.mean, d.mean_f1.std, d.mean_sensitivity.mean, d.mean_sensitivity.std,
                 d.mean_specificity.mean, d.mean_specificity.std, d.mean_selection.mean, d.mean_selection.std])
    header = {"std": "population", "raters": len(d.per_rater)}
    R.write_csv(base.with_suffix(".csv"), "agreement_diagnosis", rows, header=header)
    crow = []
    for name in report.characteristics:
        b = report.characteristic_binary[name]
        loc = report.characteristic_localization[name]
        crow.append([name, b.f1.mean, b.f1.std, b.kappa.mean, b.kappa.std, b.sensitivity.mean,
                     b.specificity.mean, b.selection.mean, loc.f1.mean, loc.f1.std, loc.sensitivity.mean,
                     loc.specificity.mean, loc.images])
    R.write_csv(_sidecar(base.with_suffix(".csv"), "_characteristics.csv"), "agreement_characteristics", crow,
                header=header)
    manifest.dataset_hash = meta["content_hash"]
    _write_file_manifest(base.with_suffix(".json"), manifest)
    print(f"diagnosis agreement mean F1 {d.mean_f1} -> {base.with_suffix('.json')}")


# -- train -----------------------------------------------------------------------------------


def _train_one(args, labels, plan, fold, run_config, out_dir, manifest):
    from . import model as M
    from .plotting import history_plot
    from .training import train

    dermx_config = M.config_for_kind(
        args.model, num_characteristics=len(labels.characteristics), **run_config.model
    )
    manifest.config = {**run_config.asdict(), "dermx": dermx_config.asdict()}
    with R.output_dir(out_dir, manifest):
        result = train(
            args.model, labels, fold_plan=plan, fold=fold,
            train_config=run_config.train, dermx_config=dermx_config, out_dir=out_dir,
        )
        history_plot(result.history, Path(out_dir) / "history.png")
    last = result.history.rows[-1]
    print(f"fold {fold}: train macro F1 {last['train_macro_f1']:.3f}, val {last['val_macro_f1']:.3f} -> {out_dir}")


def cmd_train(args, manifest):
    from .training import FoldPlan, train_interpretable_baselines

    run_config = load_config(args.config)
    labels = _load_labels(args.labels)
    plan = FoldPlan.load(args.fold_plan)
    missing = sorted(set(plan.assignments) ^ {it.image_id for it in labels.items})
    if missing:
        raise ConfigError(f"fold plan and labels disagree on {len(missing)} image ids, e.g. {missing[0]}")
    manifest.dataset_hash = labels.content_hash
    manifest.fold_plan_hash = plan.digest
    manifest.seeds = {"train": run_config.train.seed, "folds": plan.seed}

    if args.model == "baselines":
        manifest.config = run_config.asdict()
        with R.output_dir(args.out, manifest):
            result = train_interpretable_baselines(labels, plan, seed=run_config.train.seed)
            rows = []
            for name, vals in result.scores.items():
                s = aggregate_summary(vals)
                rows.append([name, s.mean, s.std, s.n, *vals])
            cols = ["model", "macro_f1_mean", "macro_f1_std", "folds"] + [f"fold_{k}" for k in range(plan.k)]
            R.write_csv(Path(args.out) / "baselines.csv", "baselines", rows, columns=cols,
                        header={"flags": result.flags})
        for row in rows:
            print(f"{row[0]}: macro F1 {R.fmt(row[1])} ± {R.fmt(row[2])}")
        return

    folds = [args.fold] if args.fold is not None else list(range(plan.k))
    for fold in folds:
        if not 0 <= fold < plan.k:
            raise ConfigError(f"fold {fold} outside 0..{plan.k - 1}")
        out_dir = Path(args.out) if args.fold is not None else Path(args.out) / f"fold_{fold:02d}"
        fold_manifest = R.RunManifest(**{**manifest.__dict__, "inputs": dict(manifest.inputs, fold=fold)})
        _train_one(args, labels, plan, fold, run_config, out_dir, fold_manifest)


def aggregate_summary(values):
    from .metrics import aggregate

    return aggregate(values)


# -- eval / explain / faithfulness -------------------------------------------------------------


def _eval_ids(payload, labels, which):
    if which == "test":
        ids = payload["extra"].get("test_ids") or []
        if not ids:
            raise ConfigError("checkpoint has no held-out test ids; use --ids all")
        return list(ids)
    return [it.image_id for it in labels.items]


def _check_compat(payload, labels):
    if list(payload["characteristics"]) != list(labels.characteristics):
        raise ConfigError("checkpoint and labels carry different characteristic lists")


def write_overlays(model, labels, ids, out_dir, limit):
    from .plotting import render_overlays

    written = 0
    for image_id in ids:
        if written >= limit:
            break
        item = labels.by_id(image_id)
        image = labels.image(image_id)
        for ci, name in enumerate(labels.characteristics):
            fm = item.fuzzy_map(name)
            if not item.presence[ci] or fm is None:
                continue
            A = E.upsampled_attention(model, image, ci)
            render_overlays(image, fm.values, A, Path(out_dir) / f"{image_id}__{name.replace(' ', '_')}.png")
        written += 1
    return written


def cmd_eval(args, manifest):
    from .model import load_checkpoint

    run_config = load_config(args.config)
    ev = run_config.eval
    model, payload = load_checkpoint(args.checkpoint)
    labels = _load_labels(args.labels)
    _check_compat(payload, labels)
    ids = _eval_ids(payload, labels, args.ids)
    manifest.config = {"eval": run_config.asdict()["eval"], "model": payload["config"], "kind": payload["kind"]}
    manifest.dataset_hash = labels.content_hash
    manifest.inputs = {"checkpoint": str(args.checkpoint), "fold": payload["extra"].get("fold"), "ids": args.ids}
    out = Path(args.report_dir)
    header = {"kind": payload["kind"], "fold": payload["extra"].get("fold"), "images": len(ids)}

    with R.output_dir(out, manifest):
        preds = E.collect_predictions(model, labels, ids)
        diag = E.diagnosis_metrics(preds, labels.diseases)
        R.write_csv(out / "diagnosis.csv", "metrics", R.metric_rows(diag), header=header)
        summary = {
            "kind": payload["kind"],
            "label": args.label or R.MODEL_LABELS.get(payload["kind"]),
            "fold": payload["extra"].get("fold"),
            "images": len(ids),
            "diagnosis": {d: m.__dict__ for d, m in diag.items()},
        }

        fill = E.dataset_mean_color(labels) if ev.fill == "mean" else (0, 0, 0)
        faith = E.faithfulness_report(model, labels, ids, ev.occlusion_source, fill, ev.threshold, ev.cam_binarize)
        R.write_csv(
            out / "faithfulness.csv", "faithfulness",
            [[f.image_id, f.predicted_class, f.m_x, f.m_xe, f.F, f.occlusion_source, f.occluded_fraction]
             for f in faith],
            header={**header, "fill": ev.fill, "cam_binarize": ev.cam_binarize},
        )
        summary["faithfulness"] = E.aggregate([f.F for f in faith])

        if model.with_characteristics:
            ident = E.identification_metrics(preds.char_pred(ev.threshold), preds.z, labels.characteristics)
            R.write_csv(out / "identification.csv", "metrics", R.metric_rows(ident),
                        header={**header, "threshold": ev.threshold})
            summary["identification"] = {c: m.__dict__ for c, m in ident.items()}
            for mode, fname in (("agreed_only", "localization_agreed.csv"), ("all_labeled", "localization_all.csv")):
                loc = E.localization_report(model, labels, ids, mode, ev.eval_at, ev.threshold)
                per = loc.per_characteristic(labels.characteristics, ev.pooled)
                R.write_csv(out / fname, "metrics", R.metric_rows(per),
                            header={**header, "mode": mode, "eval_at": ev.eval_at, "pooled": ev.pooled,
                                    "skipped_missing_map": loc.skipped_missing_map})
                summary[f"localization_{mode}"] = {c: m.__dict__ for c, m in per.items()}
            prec = E.precision_records(preds, labels, ev.tau, ev.threshold, ev.correct_reference)
            R.write_csv(
                out / "precision.csv", "precision",
                [[r.image_id, r.predicted_diagnosis, r.gold_diagnosis, r.correct, r.predicted_characteristics,
                  r.expected_set, r.precision] for r in prec],
                header={**header, "tau": ev.tau, "correct_reference": ev.correct_reference},
            )
            ps = E.summarize_precision(prec, ev.tau, ev.correct_reference)
            summary["precision"] = {"correct": ps.correct, "incorrect": ps.incorrect, "tau": ev.tau,
                                    "correct_reference": ev.correct_reference}
            write_overlays(model, labels, ids, out / "overlays", ev.overlays)
        R.write_json(out / "summary.json", summary)
    print(f"evaluated {len(ids)} images -> {out}")


def cmd_explain(args, manifest):
    from .model import load_checkpoint

    model, payload = load_checkpoint(args.checkpoint)
    labels = _load_labels(args.labels)
    _check_compat(payload, labels)
    if not model.with_characteristics:
        raise ConfigError("explain needs a model with a characteristic head")
    ids = args.image_id or [it.image_id for it in labels.items][: args.limit]
    unknown = [i for i in ids if i not in labels.gold_labels()]
    if unknown:
        raise ConfigError(f"unknown image id {unknown[0]!r}")
    manifest.dataset_hash = labels.content_hash
    manifest.inputs = {"checkpoint": str(args.checkpoint), "image_ids": ids}
    with R.output_dir(args.out_dir, manifest):
        n = write_overlays(model, labels, ids, args.out_dir, len(ids))
    print(f"overlays for {n} images -> {args.out_dir}")


def cmd_faithfulness(args, manifest):
    from .model import load_checkpoint

    run_config = load_config(args.config)
    ev = run_config.eval
    model, payload = load_checkpoint(args.checkpoint)
    labels = _load_labels(args.labels)
    _check_compat(payload, labels)
    ids = _eval_ids(payload, labels, args.ids)
    source = args.source or ev.occlusion_source
    fill_name = args.fill or ev.fill
    fill = E.dataset_mean_color(labels) if fill_name == "mean" else (0, 0, 0)
    records = E.faithfulness_report(model, labels, ids, source, fill, ev.threshold, ev.cam_binarize)
    R.write_csv(
        args.out, "faithfulness",
        [[f.image_id, f.predicted_class, f.m_x, f.m_xe, f.F, f.occlusion_source, f.occluded_fraction]
         for f in records],
        header={"kind": payload["kind"], "fill": fill_name, "cam_binarize": ev.cam_binarize},
    )
    manifest.dataset_hash = labels.content_hash
    _write_file_manifest(args.out, manifest)
    print(f"mean F {E.aggregate([f.F for f in records])} over {len(records)} images -> {args.out}")


# -- report -------------------------------------------------------------------------------------


def cmd_report(args, manifest):
    from .plotting import comparison_bars

    paths = R.find_summaries(args.runs)
    if not paths:
        raise FileNotFoundError(f"no summary.json under {args.runs}")
    summaries = [json.loads(p.read_text()) for p in paths]
    expert = json.loads(Path(args.agreement).read_text()) if args.agreement else None
    out = Path(args.out or Path(args.runs) / "report")
    manifest.inputs = {"summaries": [str(p) for p in paths], "agreement": args.agreement}
    with R.output_dir(out, manifest):
        table = R.comparison_table(summaries, expert)
        columns, rows = R.comparison_rows(table)
        R.write_csv(out / "comparison.csv", "comparison", rows, columns=columns,
                    header={"metric": "f1", "std": "population", "runs": len(summaries)})
        comparison_bars(
            {name: {label: (s.mean, s.std) for label, s in cells.items()} for name, cells in table.items()},
            out / "comparison.png",
            metric="F1",
            title="Diagnosis F1 vs gold standard",
        )
        ident = _identification_across(summaries)
        if ident:
            R.write_csv(out / "identification_summary.csv", "identification_summary", ident,
                        columns=["model", "characteristic", "f1_mean", "f1_std", "support"])
    labels = [c for c in columns if c.endswith("_mean")]
    mean_row = rows[-1]
    print("mean F1: " + ", ".join(f"{c[:-5]} {R.fmt(v)}" for c, v in zip(labels, mean_row[1::2])) + f" -> {out}")


def _identification_across(summaries):
    from .metrics import aggregate

    rows = []
    by_label = {}
    for s in summaries:
        if "identification" in s:
            by_label.setdefault(R._label(s), []).append(s["identification"])
    for label, folds in sorted(by_label.items()):
        names = sorted({c for f in folds for c in f})
        for name in names:
            vals = [f[name]["f1"] for f in folds if name in f]
            s = aggregate(np.nan if v is None else v for v in vals)
            rows.append([label, name, s.mean, s.std, sum(f[name]["support"] for f in folds if name in f)])
    return rows


# -- parser --------------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dermx-kit", description="Explainable skin-disease classification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("ingest", help="validate and clean an annotation index into a dataset bundle")
    s.add_argument("--annotations", required=True)
    s.add_argument("--images-root", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fuse", help="select characteristics and build fused training labels")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-samples", type=int, default=30)
    s.add_argument("--min-f1", type=float, default=0.30)
    s.add_argument("--characteristics", default=None, help="comma-separated list; skips selection")
    s.add_argument("--denominator", choices=("correct", "all"), default="correct")
    s.add_argument("--tag-presence", action="store_true", help="a tag without outline sets the presence bit")
    s.add_argument("--resize-mode", choices=("bilinear", "area"), default="bilinear")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("folds", help="write a stratified fold plan")
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_folds)

    s = sub.add_parser("agreement", help="rater agreement report")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="report path; .json and .csv files are written")
    s.add_argument("--characteristics", default=None)
    s.set_defaults(func=cmd_agreement)

    s = sub.add_parser("train", help="train a model on one or all folds")
    s.add_argument("--labels", required=True)
    s.add_argument("--fold-plan", required=True)
    s.add_argument("--model", required=True, choices=("dx", "dermx", "dermx+", "baselines"))
    s.add_argument("--config", default=None)
    s.add_argument("--fold", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--report-dir", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--ids", choices=("test", "all"), default="test")
    s.add_argument("--label", default=None, help="column name in consolidated reports")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="render attention overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--image-id", action="append", default=None)
    s.add_argument("--limit", type=int, default=8)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("faithfulness", help="contrastive occlusion faithfulness")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--ids", choices=("test", "all"), default="test")
    s.add_argument("--source", choices=("model", "expert"), default=None)
    s.add_argument("--fill", choices=("mean", "black"), default=None)
    s.set_defaults(func=cmd_faithfulness)

    s = sub.add_parser("report", help="consolidate evaluated runs into comparison tables")
    s.add_argument("--runs", required=True)
    s.add_argument("--agreement", default=None, help="agreement .json for the Expert column")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def _fail(category, message):
    print(json.dumps({"error": category, "message": str(message)}), file=sys.stderr)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    manifest = R.RunManifest(command=["dermx-kit", *argv], started=R.now())
    try:
        args.func(args, manifest)
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except SchemaError as exc:
        _fail("schema", exc)
        return EXIT_IO
    except OSError as exc:
        _fail(getattr(exc, "category", "io"), exc)
        return EXIT_IO
    except DermxError as exc:
        _fail(exc.category, exc)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
