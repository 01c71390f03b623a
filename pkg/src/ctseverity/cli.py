"""Command-line entry point. Exit codes: 0 success, 2 invalid input, 3 runtime failure."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cluster, convnet, evaluation, forest, pipeline
from .errors import CtSeverityError, StageError, ValidationError
from .lesions import RegionParams
from .phantom import PhantomSpec, random_phantom_spec, write_phantom

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _region_flags(p):
    d = RegionParams()
    p.add_argument("--connectivity", type=int, default=d.connectivity, choices=(6, 18, 26))
    p.add_argument("--min-lesion-voxels", type=int, default=d.min_lesion_voxels)
    p.add_argument("--rind-depth-mm", type=float, default=d.rind_depth_mm)
    p.add_argument("--apex-fraction", type=float, default=d.apex_fraction)
    p.add_argument("--mediastinal-halfwidth-mm", type=float, default=d.mediastinal_halfwidth_mm)


def _region_params(a) -> RegionParams:
    return RegionParams(a.connectivity, a.min_lesion_voxels, a.rind_depth_mm, a.apex_fraction,
                        a.mediastinal_halfwidth_mm)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom_gen(a) -> None:
    if a.spec:
        spec = PhantomSpec.from_json(_read_json(a.spec))
    else:
        rng = np.random.default_rng(a.seed)
        spec = random_phantom_spec(rng, a.cohort, (a.size,) * 3, (a.spacing_mm,) * 3)
    write_phantom(a.out, spec, a.seed, _region_params(a))


def cmd_compute_metrics(a) -> None:
    records = pipeline.read_manifest(a.manifest)
    vectors = pipeline.compute_metrics(records, _region_params(a), a.workers)
    pipeline.write_metrics_csv(records, vectors, a.out)


def cmd_filter(a) -> None:
    records = pipeline.read_manifest(a.manifest)
    if a.metrics:
        fm = pipeline.read_metrics_csv(a.metrics)
        col = fm.names.index("po_lungs")
        po = dict(zip(fm.case_ids, fm.values[:, col].tolist()))
        missing = [r.case_id for r in records if r.case_id not in po]
        if missing:
            raise ValidationError(f"metrics table lacks cases {missing}")
    else:
        vectors = pipeline.compute_metrics(records, _region_params(a), a.workers)
        po = {k: v["po_lungs"] for k, v in vectors.items()}
    kept, log = pipeline.filter_cohort(records, po, a.min_po)
    pipeline.write_manifest(kept, a.out)
    if a.log:
        _write_json(a.log, pipeline._clean(log))
    print(f"retained {len(kept)}, excluded {len(log)}")


def cmd_split(a) -> None:
    records = pipeline.read_manifest(a.manifest)
    try:
        fractions = tuple(float(v) for v in a.fractions.split(","))
    except ValueError as exc:
        raise ValidationError(f"bad --fractions {a.fractions!r}") from exc
    split = pipeline.split_dataset(records, fractions, a.seed)
    pipeline.write_manifest(split, a.out)
    table = pipeline.split_table(split)
    if a.table:
        Path(a.table).write_text(table)
    sys.stdout.write(table)


def cmd_cluster(a) -> None:
    fm = pipeline.read_metrics_csv(a.features)
    scaled = cluster.standardize_rescale(cluster.impute_mean(fm, a.fit_on), a.fit_on)
    if a.canonical:
        from .metrics import CANONICAL_FEATURES
        idx = [scaled.names.index(n) for n in CANONICAL_FEATURES if n in scaled.names]
    else:
        idx = cluster.recursive_feature_elimination(scaled, a.k, a.seed, a.fit_on)
    view = scaled.select(idx)
    if a.split:
        view = view.take(view.rows(a.split))
    dendro = cluster.average_linkage(cluster.distance_matrix(view))
    cluster.heatmap_svg(view, dendro, a.out)
    if a.dendrogram:
        cluster.write_dendrogram(dendro, a.dendrogram, view.case_ids)
    if a.selected:
        _write_json(a.selected, {"features": list(view.names)})
    print("selected: " + ", ".join(view.names))


def _pipeline_config(a) -> pipeline.PipelineConfig:
    if getattr(a, "config", None):
        return pipeline.PipelineConfig.load(a.config, seed=a.seed)
    return pipeline.PipelineConfig(seed=a.seed if a.seed is not None else 0)


def cmd_train(a) -> None:
    cfg = _pipeline_config(a)
    seed = cfg.seed
    if a.model == "m3":
        if not a.manifest:
            raise ValidationError("train --model m3 needs --manifest")
        records = pipeline.read_manifest(a.manifest)
        if a.scale:
            cfg.scale = a.scale
        if a.epochs is not None:
            cfg.m3_epochs = a.epochs
        cfg.validate()
        if any(r.split is None for r in records):
            records = [r.with_split(r.split or "train") for r in records]
        net, result = pipeline.train_m3(records, cfg, seed)
        convnet.save_weights(net, a.out)
        print(f"best epoch {result.best_epoch}")
        return
    if not a.features:
        raise ValidationError(f"train --model {a.model} needs --features")
    fm = pipeline.read_metrics_csv(a.features)
    if a.selected:
        names = list(_read_json(a.selected)["features"])
    elif a.model == "m1":
        raise ValidationError("train --model m1 needs --selected")
    else:
        names = list(fm.names)
    if all(s is None for s in fm.splits):
        fm.splits = ["train"] * len(fm.splits)
    fit = pipeline.train_m1 if a.model == "m1" else pipeline.train_m2
    forest.serialize_model(fit(fm, names, cfg, seed), a.out)


def _load_any_model(path):
    with open(path, "rb") as fh:
        head = fh.readline()
    try:
        if json.loads(head).get("format") == convnet.WEIGHTS_FORMAT:
            return convnet.load_weights(path)
    except ValueError:
        pass
    return forest.deserialize_model(path)


def cmd_evaluate(a) -> None:
    try:
        model = _load_any_model(a.model)
    except OSError as exc:
        raise ValidationError(f"cannot read model {a.model}: {exc}") from exc
    records = pipeline.read_manifest(a.manifest)
    if a.split:
        records = [r for r in records if r.split == a.split]
    if not records:
        raise ValidationError("no cases to evaluate")
    if isinstance(model, convnet.Net):
        X = pipeline.case_tensors(records, pipeline.scale_of(model.spec), a.workers)
        scores = model.predict_score(X)
    else:
        if a.features:
            fm = pipeline.read_metrics_csv(a.features)
            by_id = {c: i for i, c in enumerate(fm.case_ids)}
            fm = fm.take([by_id[r.case_id] for r in records])
        else:
            vectors = pipeline.compute_metrics(records, _region_params(a), a.workers)
            tmp = Path(a.out).with_suffix(".metrics.csv")
            pipeline.write_metrics_csv(records, vectors, tmp)
            fm = pipeline.read_metrics_csv(tmp)
            tmp.unlink()
        scores = forest.predict_score(model, pipeline.model_matrix(model, fm))
    report, band = pipeline.evaluate_model_scores(scores, records, a.n_boot, a.seed, band=bool(a.roc))
    out = report.to_json()
    out["n_boot"] = a.n_boot
    out["seed"] = a.seed
    _write_json(a.out, out)
    if a.roc:
        evaluation.roc_svg([(Path(a.model).stem, report.roc, band)], a.roc)
    print(f"AUC {report.roc.auc:.4f} CI [{report.ci[0]:.4f}, {report.ci[1]:.4f}]")


def cmd_demo(a) -> None:
    cfg = _pipeline_config(a)
    if a.n_cases is not None:
        cfg.n_cases = a.n_cases
    if a.epochs is not None:
        cfg.m3_epochs = a.epochs
    cfg.validate()
    report = pipeline.run_pipeline(cfg, a.out)
    sys.stdout.write(report["confusion_table"])
    for m in ("M1", "M2", "M3"):
        print(f"{m}: AUC {report[m]['auc']:.3f} CI [{report[m]['ci95'][0]:.3f}, {report[m]['ci95'][1]:.3f}]")


def cmd_run(a) -> None:
    cfg = _pipeline_config(a)
    report = pipeline.run_pipeline(cfg, a.out, a.manifest)
    sys.stdout.write(report["confusion_table"])


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctseverity", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic case with known ground truth")
    p.add_argument("--spec", help="phantom spec JSON; a random cohort case when omitted")
    p.add_argument("--cohort", default="covid", choices=pipeline.COHORTS)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--spacing-mm", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _region_flags(p)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("compute-metrics", help="severity metrics table for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _region_flags(p)
    p.set_defaults(func=cmd_compute_metrics)

    p = sub.add_parser("filter", help="exclude covid cases with minimal opacity")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="precomputed metrics.csv")
    p.add_argument("--min-po", type=float, default=1.0)
    p.add_argument("--log", help="exclusion log JSON")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _region_flags(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("split", help="stratified train/validation/test assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--table", help="write the split table here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("cluster", help="feature selection plus clustered heatmap")
    p.add_argument("--features", required=True, help="metrics.csv")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--canonical", action="store_true", help="use the reference six features instead of RFE")
    p.add_argument("--fit-on", default="train", help="split used for scaling and RFE")
    p.add_argument("--split", help="only draw cases from this split")
    p.add_argument("--out", required=True)
    p.add_argument("--dendrogram")
    p.add_argument("--selected", help="write selected feature names JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="fit M1, M2 or M3")
    p.add_argument("--model", required=True, choices=("m1", "m2", "m3"))
    p.add_argument("--features", help="metrics.csv (m1/m2)")
    p.add_argument("--selected", help="features.json (m1; optional for m2)")
    p.add_argument("--manifest", help="cases.jsonl (m3)")
    p.add_argument("--scale", choices=tuple(convnet.SCALES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ROC, bootstrap CI, operating point and confusion table")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="precomputed metrics.csv (m1/m2)")
    p.add_argument("--split", help="restrict to one split")
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--roc")
    _region_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("demo", help="full pipeline on a generated phantom cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-cases", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("run", help="full pipeline on a case manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code(exc.cause)
    if isinstance(exc, ValidationError):
        return EXIT_INVALID
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CtSeverityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
