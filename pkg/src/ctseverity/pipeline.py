"""Case manifests, cohort filtering, stratified splits and the end-to-end run."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cluster, convnet, evaluation, forest
from .errors import CtSeverityError, StageError, ValidationError
from .lesions import RegionParams
from .metrics import METRIC_NAMES, compute_all, format_value
from .phantom import generate_phantom, random_phantom_spec, write_phantom
from .volgrid import load_volume

MANIFEST_FORMAT = "ctseverity-manifest"
MANIFEST_VERSION = 1
CONFIG_VERSION = 1
COHORTS = ("covid", "pneumonia", "ild", "healthy")
SPLITS = ("train", "validation", "test")
GRID_KEYS = ("ct", "lobes", "disease", "prob")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    ct: str
    lobes: str
    disease: str
    prob: str
    cohort: str
    split: str | None = None

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValidationError(f"case {self.case_id}: unknown cohort {self.cohort!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"case {self.case_id}: unknown split {self.split!r}")

    def with_split(self, split) -> "CaseRecord":
        return dataclasses.replace(self, split=split)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def read_manifest(path) -> list:
    """Records from a JSONL manifest; grid paths are resolved against the manifest's folder."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    records, seen = [], set()
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{n}: {exc}") from exc
        if d.get("format") == MANIFEST_FORMAT:
            if d.get("version") != MANIFEST_VERSION:
                raise ValidationError(f"unsupported manifest version {d.get('version')!r}")
            continue
        try:
            rec = CaseRecord(
                str(d["case_id"]),
                *(str(base / d[k]) for k in GRID_KEYS),
                d["cohort"],
                d.get("split"),
            )
        except KeyError as exc:
            raise ValidationError(f"{path}:{n}: missing field {exc}") from exc
        if rec.case_id in seen:
            raise ValidationError(f"duplicate case id {rec.case_id!r}")
        seen.add(rec.case_id)
        records.append(rec)
    return records


def write_manifest(records, path) -> None:
    """Write JSONL with paths relative to the manifest's folder when possible."""
    path = Path(path)
    base = path.parent.resolve()
    out = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION})]
    for r in sorted(records, key=lambda r: r.case_id):
        d = r.to_json()
        for k in GRID_KEYS:
            p = Path(d[k]).resolve()
            try:
                d[k] = str(p.relative_to(base))
            except ValueError:
                d[k] = str(p)
        out.append(json.dumps(d, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")


def load_case(rec: CaseRecord):
    grids = []
    for k in GRID_KEYS:
        try:
            grids.append(load_volume(getattr(rec, k)))
        except CtSeverityError as exc:
            raise StageError("load", rec.case_id, exc) from exc
    return tuple(grids)


# ---------------------------------------------------------------------------
# metrics table
# ---------------------------------------------------------------------------

def _case_metrics(args):
    rec, params = args
    ct, lobes, disease, _ = load_case(rec)
    try:
        return rec.case_id, compute_all(ct, lobes, disease, params)
    except CtSeverityError as exc:
        raise StageError("metrics", rec.case_id, exc) from exc


def compute_metrics(records, params: RegionParams = RegionParams(), workers: int = 1) -> dict:
    """Severity vectors keyed by case id, in case-id order whatever the worker count."""
    jobs = [(r, params) for r in records]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_case_metrics, jobs))
    else:
        results = [_case_metrics(j) for j in jobs]
    return dict(sorted(results))


def write_metrics_csv(records, vectors: dict, path) -> None:
    by_id = {r.case_id: r for r in records}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", "cohort", "split", *METRIC_NAMES])
    for cid in sorted(vectors):
        r = by_id[cid]
        sv = vectors[cid]
        w.writerow([cid, r.cohort, r.split or "", *(format_value(sv[n]) for n in METRIC_NAMES)])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path) -> cluster.FeatureMatrix:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0][:3] != ["case_id", "cohort", "split"]:
        raise ValidationError(f"{path}: not a metrics table")
    names = rows[0][3:]
    vals, cohorts, splits, ids = [], [], [], []
    for row in rows[1:]:
        if len(row) != len(rows[0]):
            raise ValidationError(f"{path}: ragged row for case {row[0] if row else '?'}")
        ids.append(row[0])
        cohorts.append(row[1])
        splits.append(row[2] or None)
        try:
            vals.append([math.nan if c == "NA" else float(c) for c in row[3:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: case {row[0]}: {exc}") from exc
    values = np.array(vals, dtype=np.float64).reshape(len(vals), len(names))
    return cluster.FeatureMatrix(values, names, cohorts, splits, ids)


# ---------------------------------------------------------------------------
# cohort filter and split
# ---------------------------------------------------------------------------

def filter_cohort(records, po_by_id: dict, min_po_percent: float = 1.0):
    """Drop covid cases below ``min_po_percent`` PO. Returns ``(kept, exclusion_log)``."""
    kept, log = [], []
    for r in records:
        po = po_by_id[r.case_id]
        if r.cohort == "covid" and (math.isnan(po) or po < min_po_percent):
            reason = "no opacities" if po == 0 else "minimal opacities"
            log.append({"case_id": r.case_id, "po": po, "reason": reason})
        else:
            kept.append(r)
    return kept, log


def _apportion(n: int, fractions) -> list:
    """Largest-remainder integer split of ``n``; remainder ties go to earlier splits."""
    raw = [f * n for f in fractions]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(records, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list:
    """Stratified train/validation/test assignment, deterministic per seed."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    needed = sum(f > 0 for f in fractions)
    out = []
    for k, cohort in enumerate(COHORTS):
        members = sorted((r for r in records if r.cohort == cohort), key=lambda r: r.case_id)
        if not members:
            continue
        if len(members) < needed:
            raise ValidationError(f"cohort {cohort!r} has {len(members)} cases, too few to stratify")
        counts = _apportion(len(members), fractions)
        perm = np.random.default_rng([seed, k]).permutation(len(members))
        labels = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
        out.extend(members[i].with_split(lab) for i, lab in zip(perm, labels))
    return sorted(out, key=lambda r: r.case_id)


def split_table(records) -> str:
    """Counts by class / category and split, laid out like the data-split table."""
    titles = {"covid": "COVID-19", "pneumonia": "Pneumonia", "ild": "ILD", "healthy": "No pathology"}
    lines = ["\t".join(["2 classes", "4 categories", "Train", "Validation", "Test"])]
    for cohort in COHORTS:
        counts = [sum(1 for r in records if r.cohort == cohort and r.split == s) for s in SPLITS]
        cls = "Positive" if cohort == "covid" else ("Negative" if cohort == "pneumonia" else "")
        lines.append("\t".join([cls, titles[cohort], *map(str, counts)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    n_cases: int = 60
    phantom_size: int = 48
    phantom_spacing_mm: float = 4.0
    connectivity: int = 26
    min_lesion_voxels: int = 5
    rind_depth_mm: float = 10.0
    apex_fraction: float = 0.05
    mediastinal_halfwidth_mm: float = 20.0
    min_po_percent: float = 1.0
    train_fraction: float = 0.6
    validation_fraction: float = 0.15
    test_fraction: float = 0.25
    k_features: int = 6
    rf_n_trees: int = 500
    rf_max_depth: int = 8
    gbt_n_estimators: int = 2000
    gbt_max_depth: int = 3
    gbt_max_features: int = 3
    gbt_subsample: float = 0.8
    gbt_learning_rate: float = 0.1
    lr_c: float = 0.2
    scale: str = "desk"
    m3_epochs: int = 10
    m3_batch_size: int = 4
    m3_learning_rate: float = 1e-3
    m3_momentum: float = 0.9
    n_boot: int = 1000
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scale not in convnet.SCALES:
            raise ValidationError(f"scale must be one of {sorted(convnet.SCALES)}")
        if self.n_cases < 8 or self.phantom_size < 16 or self.phantom_spacing_mm <= 0:
            raise ValidationError("demo cohort needs n_cases >= 8 and phantom_size >= 16")
        if self.k_features < 1 or self.n_boot < 1 or self.workers < 1:
            raise ValidationError("k_features, n_boot and workers must be positive")
        if self.m3_learning_rate <= 0:
            raise ValidationError("m3_learning_rate must be positive")
        self.region_params()

    @property
    def fractions(self):
        return (self.train_fraction, self.validation_fraction, self.test_fraction)

    def region_params(self) -> RegionParams:
        return RegionParams(self.connectivity, self.min_lesion_voxels, self.rind_depth_mm,
                            self.apex_fraction, self.mediastinal_halfwidth_mm)

    def to_dict(self) -> dict:
        return {"config_version": CONFIG_VERSION, **dataclasses.asdict(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "PipelineConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ValidationError(f"config line {n}: expected key = value")
            if key == "config_version":
                if value != str(CONFIG_VERSION):
                    raise ValidationError(f"unsupported config version {value!r}")
                continue
            if key not in types:
                raise ValidationError(f"config line {n}: unknown key {key!r}")
            kw[key] = value
        kw.update({k: v for k, v in overrides.items() if v is not None})
        conv = {"int": int, "float": float, "str": str}
        try:
            return cls(**{k: conv[types[k]](v) for k, v in kw.items()})
        except ValueError as exc:
            raise ValidationError(f"bad config value: {exc}") from exc

    @classmethod
    def load(cls, path, **overrides) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, **overrides)


# ---------------------------------------------------------------------------
# demo cohort
# ---------------------------------------------------------------------------

DEMO_MIX = {"covid": 0.4, "pneumonia": 0.2, "ild": 0.2, "healthy": 0.2}


def generate_demo_cohort(out_dir, config: PipelineConfig) -> list:
    """Write a labelled phantom cohort under ``out_dir/cases`` and return its records."""
    out_dir = Path(out_dir)
    counts = _apportion(config.n_cases, list(DEMO_MIX.values()))
    cohorts = [c for c, n in zip(DEMO_MIX, counts) for _ in range(n)]
    dims = (config.phantom_size,) * 3
    spacing = (config.phantom_spacing_mm,) * 3
    records = []
    for i, cohort in enumerate(cohorts):
        rng = np.random.default_rng([config.seed, i])
        spec = random_phantom_spec(rng, cohort, dims, spacing)
        case_seed = int(rng.integers(2**31))
        cid = f"case{i:04d}"
        case_dir = out_dir / "cases" / cid
        write_phantom(case_dir, spec, case_seed, config.region_params())
        records.append(CaseRecord(cid, *(str(case_dir / k) for k in GRID_KEYS), cohort))
    return records


def phantom_case(cohort: str, seed: int, dims=(48, 48, 48), spacing=(4.0, 4.0, 4.0)):
    """In-memory phantom grids for one cohort-typical case."""
    rng = np.random.default_rng(seed)
    spec = random_phantom_spec(rng, cohort, dims, spacing)
    return generate_phantom(spec, int(rng.integers(2**31)))


# ---------------------------------------------------------------------------
# models on feature tables
# ---------------------------------------------------------------------------

def _model_params(model) -> dict:
    return model.params if isinstance(model, forest.ForestModel) else model.gbt.params


def model_matrix(model, fm: cluster.FeatureMatrix) -> np.ndarray:
    """Columns the model was trained on, with missing values filled by its training means."""
    names = model.feature_names
    missing = [n for n in names if n not in fm.names]
    if missing:
        raise ValidationError(f"feature table lacks {missing}")
    X = fm.values[:, [fm.names.index(n) for n in names]].copy()
    means = np.asarray(_model_params(model).get("impute_means", [0.0] * len(names)), dtype=np.float64)
    nan = np.isnan(X)
    X[nan] = np.broadcast_to(means, X.shape)[nan]
    return X


def _train_block(fm: cluster.FeatureMatrix, names):
    train = fm.rows("train")
    if len(train) == 0:
        raise ValidationError("no training cases")
    X = fm.values[np.ix_(train, [fm.names.index(n) for n in names])]
    with np.errstate(all="ignore"):
        means = np.nanmean(np.where(np.isnan(X).all(axis=0), 0.0, X), axis=0)
    X = np.where(np.isnan(X), means, X)
    return X, fm.target[train], [float(v) for v in means]


def train_m1(fm: cluster.FeatureMatrix, names, config: PipelineConfig, seed: int):
    X, y, means = _train_block(fm, names)
    model = forest.fit_random_forest(X, y, n_trees=config.rf_n_trees, max_depth=config.rf_max_depth, seed=seed)
    model.feature_names = list(names)
    model.params["impute_means"] = means
    return model


def train_m2(fm: cluster.FeatureMatrix, names, config: PipelineConfig, seed: int):
    X, y, means = _train_block(fm, names)
    gbt_params = {
        "n_estimators": config.gbt_n_estimators,
        "max_depth": config.gbt_max_depth,
        "max_features": min(config.gbt_max_features, len(names)),
        "subsample": config.gbt_subsample,
        "learning_rate": config.gbt_learning_rate,
    }
    model = forest.fit_m2(X, y, gbt_params=gbt_params, C=config.lr_c, seed=seed)
    model.feature_names = list(names)
    model.gbt.params["impute_means"] = means
    return model


# ---------------------------------------------------------------------------
# M3 data
# ---------------------------------------------------------------------------

def _case_tensor(args):
    rec, scale = args
    ct, lobes, _, prob = load_case(rec)
    try:
        return convnet.preprocess_case(ct, lobes, prob, scale=scale)
    except CtSeverityError as exc:
        raise StageError("preprocess", rec.case_id, exc) from exc


def case_tensors(records, scale: str, workers: int = 1) -> np.ndarray:
    jobs = [(r, scale) for r in records]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_case_tensor, jobs))
    else:
        out = [_case_tensor(j) for j in jobs]
    return np.stack(out)


def scale_of(spec: convnet.NetworkSpec) -> str:
    for name, s in convnet.SCALES.items():
        if tuple(spec.input_dims[1:]) == tuple(s["dims"]):
            return name
    raise ValidationError(f"network input {spec.input_dims} matches no preprocessing scale")


def train_m3(records, config: PipelineConfig, seed: int, X=None):
    """Train the CNN on the train split, selecting the epoch by validation AUC."""
    records = list(records)
    if X is None:
        X = case_tensors(records, config.scale, config.workers)
    y = np.array([r.cohort == "covid" for r in records], dtype=np.float64)
    tr = [i for i, r in enumerate(records) if r.split == "train"]
    va = [i for i, r in enumerate(records) if r.split == "validation"]
    spec = convnet.NetworkSpec((2,) + tuple(convnet.SCALES[config.scale]["dims"]))
    net = convnet.Net(spec, seed)
    cfg = convnet.TrainConfig(config.m3_epochs, config.m3_batch_size, config.m3_learning_rate,
                              config.m3_momentum, seed)
    result = convnet.train(net, X[tr], y[tr], cfg, X[va] if va else None, y[va] if va else None)
    return net, result


# ---------------------------------------------------------------------------
# end-to-end run
# ---------------------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except CtSeverityError as exc:
        raise StageError(name, None, exc) from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _clean(v):
    """JSON-safe copy: nan becomes null."""
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def evaluate_model_scores(scores, records, n_boot: int, seed: int, band: bool = True):
    cats = [r.cohort for r in records]
    report = evaluation.evaluate_scores(scores, cats, n_boot, seed)
    labels = np.array([c == "covid" for c in cats])
    band_pts = None
    if band:
        base, lo, hi = evaluation.bootstrap_roc_band(scores, labels, n_boot, seed)
        band_pts = evaluation.band_at_points(report.roc, base, lo, hi)
    return report, band_pts


def run_pipeline(config: PipelineConfig, out_dir, manifest=None) -> dict:
    """Metrics, feature selection, clustering, M1/M2/M3 training and test-set evaluation.

    With ``manifest=None`` a phantom cohort is generated first. Returns the report dict.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = {name: int(s.generate_state(1)[0]) for name, s in zip(
        ("split", "rfe", "m1", "m2", "m3", "boot"), np.random.SeedSequence(config.seed).spawn(6))}

    if manifest is None:
        records = _stage("ingest", generate_demo_cohort, out, config)
    else:
        records = _stage("ingest", read_manifest, manifest)
    if not records:
        raise ValidationError("manifest has no cases")

    vectors = compute_metrics(records, config.region_params(), config.workers)
    kept, exclusions = filter_cohort(records, {k: v["po_lungs"] for k, v in vectors.items()},
                                     config.min_po_percent)
    _write_json(out / "exclusions.json", _clean(exclusions))
    if all(r.split is not None for r in kept):
        split = kept
    else:
        split = _stage("split", split_dataset, kept, config.fractions, seeds["split"])
    write_manifest(split, out / "cases.jsonl")
    (out / "split_table.txt").write_text(split_table(split))
    kept_vectors = {r.case_id: vectors[r.case_id] for r in split}
    write_metrics_csv(split, kept_vectors, out / "metrics.csv")

    fm = read_metrics_csv(out / "metrics.csv")
    k = min(config.k_features, len(fm.names))
    scaled = _stage("cluster", cluster.standardize_rescale, cluster.impute_mean(fm))
    selected_idx = _stage("rfe", cluster.recursive_feature_elimination, scaled, k, seeds["rfe"])
    selected = [scaled.names[i] for i in selected_idx]
    _write_json(out / "features.json", {"features": selected})
    view = scaled.select(selected_idx)
    dendro = cluster.average_linkage(cluster.distance_matrix(view))
    cluster.heatmap_svg(view, dendro, out / "heatmap.svg")
    cluster.write_dendrogram(dendro, out / "dendrogram.json", view.case_ids)

    m1 = _stage("train-m1", train_m1, fm, selected, config, seeds["m1"])
    forest.serialize_model(m1, out / "m1.json")
    m2 = _stage("train-m2", train_m2, fm, list(fm.names), config, seeds["m2"])
    forest.serialize_model(m2, out / "m2.json")
    tensors = case_tensors(split, config.scale, config.workers)
    net, m3_result = _stage("train-m3", train_m3, split, config, seeds["m3"], tensors)
    convnet.save_weights(net, out / "m3.bin")

    test = [i for i, r in enumerate(split) if r.split == "test"]
    test_records = [split[i] for i in test]
    if len({r.cohort == "covid" for r in test_records}) < 2:
        raise StageError("evaluate", None, ValidationError("test split lacks one of the classes"))
    test_fm = fm.take(test)
    scores = {
        "M1": forest.predict_score(m1, model_matrix(m1, test_fm)),
        "M2": forest.predict_score(m2, model_matrix(m2, test_fm)),
        "M3": net.predict_score(tensors[test]),
    }
    report, curves, tables = {}, [], {}
    for name, s in scores.items():
        rep, band = _stage("evaluate", evaluate_model_scores, s, test_records, config.n_boot, seeds["boot"])
        report[name] = rep.to_json()
        curves.append((name, rep.roc, band))
        tables[name] = rep.confusion
    report["M3"]["training"] = {
        "best_epoch": m3_result.best_epoch,
        "validation_auc": m3_result.val_auc_history,
    }
    report["selected_features"] = selected
    report["n_cases"] = {"input": len(records), "excluded": len(exclusions), "retained": len(split)}
    report["confusion_table"] = evaluation.render_confusion(tables)
    _write_json(out / "report.json", _clean(report))
    (out / "confusion.txt").write_text(report["confusion_table"])
    evaluation.roc_svg(curves, out / "roc.svg")
    _write_json(out / "run_manifest.json", {
        "config": config.to_dict(),
        "derived_seeds": seeds,
        "manifest": None if manifest is None else str(manifest),
        "artifacts": sorted({p.name for p in out.iterdir() if p.is_file()} | {"run_manifest.json"}),
    })
    return report

