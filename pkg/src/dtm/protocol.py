"""The split/ensemble/evaluate pipeline shared by the CLI and the experiment scripts."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluate as ev
from .data import Dataset
from .ensemble import TransformationEnsemble, member_seed
from .models import ModelError, ModelSpec, TransformationModel, canonical_name, make_spec
from .netcore import CNNConfig
from .train import (MIN_SPLIT_SIZE, AugmentationParams, Split, SplitPlan, TrainConfig, fit,
                    make_splits, run_jobs, write_history)

PAPER_MODELS = ("SI", "SI-LS_x", "SI-CS_B", "CI_B", "CI_B-LS_x")
BENCHMARK = "SI-LS_x"

# converged full-batch-style settings for the convex tabular models
TABULAR_TRAIN = TrainConfig(lr=0.02, batch_size=64, max_epochs=300, patience=30, augment=False)
# desk-scale image settings: a larger step than the full-size defaults so a run finishes on a laptop
DESK_IMAGE_TRAIN = TrainConfig(lr=1e-3, batch_size=6, max_epochs=30, patience=10, augment=True)
DESK_CNN = CNNConfig(filters=(8, 8, 16, 16), dense_units=32)


@dataclass(frozen=True)
class ProtocolConfig:
    models: tuple[str, ...] = PAPER_MODELS
    benchmark: str = BENCHMARK
    members: int = 5
    plan: SplitPlan = SplitPlan()
    train: TrainConfig = TABULAR_TRAIN
    image_train: TrainConfig = DESK_IMAGE_TRAIN
    cnn: CNNConfig = DESK_CNN
    latent: str = "logistic"
    seed: int = 0
    warm_start: bool = True
    augmentation: AugmentationParams = AugmentationParams()
    bootstrap: int = ev.DEFAULT_RESAMPLES

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(canonical_name(m) for m in self.models))
        object.__setattr__(self, "benchmark", canonical_name(self.benchmark))
        if self.members < 1:
            raise ValueError("ensemble size must be at least 1")

    def spec_for(self, name: str, data: Dataset) -> ModelSpec:
        return make_spec(name, data.columns, K=data.K, latent=self.latent,
                         volume_shape=data.volume_shape, cnn=self.cnn)

    def train_for(self, spec: ModelSpec) -> TrainConfig:
        return self.image_train if spec.needs_image else self.train


@dataclass
class ProtocolRun:
    config: ProtocolConfig
    splits: list[Split]
    ensembles: dict[str, list[TransformationEnsemble]]   # model -> one ensemble per split


def _fit_job(job) -> TransformationModel:
    spec, data, split, cfg, seed, reference, aug = job
    return fit(spec, data, split, cfg, seed, reference, aug)


def _uses_reference(spec: ModelSpec, ref_spec: ModelSpec | None) -> bool:
    if ref_spec is None:
        return False
    if spec.K != ref_spec.K and "SI" in [t.key for t in spec.terms]:
        return False
    keys = {t.key for t in spec.terms}
    if "LS" in keys and not set(spec.linear_term.features) <= set(ref_spec.linear_term.features):
        return False
    return bool(keys & {"SI", "LS"})


def fit_references(data: Dataset, splits: Sequence[Split], cfg: ProtocolConfig,
                   workers: int | None = None) -> list[TransformationModel | None]:
    """One benchmark fit per split; simple-intercept and linear-shift terms start from it."""
    if not cfg.warm_start or not data.columns:
        return [None] * len(splits)
    spec = cfg.spec_for(cfg.benchmark, data)
    if "LS" not in {t.key for t in spec.terms}:
        return [None] * len(splits)
    jobs = [(spec, data, s, cfg.train_for(spec), member_seed(cfg.seed, s.split_id, 10_000), None,
             cfg.augmentation) for s in splits]
    return run_jobs(_fit_job, jobs, workers)


def run_fits(data: Dataset, cfg: ProtocolConfig, splits: Sequence[Split] | None = None,
             workers: int | None = None, out_dir=None) -> ProtocolRun:
    """Fit every (model, split, member) combination; optionally serialize each ensemble."""
    splits = list(splits) if splits is not None else make_splits(len(data), cfg.plan)
    refs = fit_references(data, splits, cfg, workers)
    ref_spec = refs[0].spec if refs and refs[0] is not None else None
    jobs, keys = [], []
    for name in cfg.models:
        spec = cfg.spec_for(name, data)
        use_ref = _uses_reference(spec, ref_spec)
        for s, ref in zip(splits, refs):
            for m in range(cfg.members):
                jobs.append((spec, data, s, cfg.train_for(spec), member_seed(cfg.seed, s.split_id, m),
                             ref if use_ref else None, cfg.augmentation))
                keys.append((name, s.split_id))
    models = run_jobs(_fit_job, jobs, workers)
    grouped: dict[str, dict[int, list]] = {n: {} for n in cfg.models}
    for (name, sid), model in zip(keys, models):
        grouped[name].setdefault(sid, []).append(model)
    ensembles = {n: [TransformationEnsemble(grouped[n][s.split_id]) for s in splits]
                 for n in cfg.models}
    run = ProtocolRun(cfg, splits, ensembles)
    if out_dir is not None:
        save_fits(run, out_dir)
    return run


def fit_dir(out_dir, model: str, split: int) -> Path:
    return Path(out_dir) / "fits" / model / f"split{split}"


def save_fits(run: ProtocolRun, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "splits.json").write_text(json.dumps([s.to_dict() for s in run.splits]))
    for name, ens_list in run.ensembles.items():
        for s, ens in zip(run.splits, ens_list):
            d = fit_dir(out_dir, name, s.split_id)
            ens.save(d, {"split": s.split_id, "seed": run.config.seed})
            for i, m in enumerate(ens.members):
                write_history(d / f"member{i}_history.csv", m.history)


def load_fits(out_dir, models: Sequence[str], cfg: ProtocolConfig | None = None) -> ProtocolRun:
    out_dir = Path(out_dir)
    path = out_dir / "splits.json"
    if not path.exists():
        raise FileNotFoundError(f"no fitted splits under {out_dir}")
    splits = [Split.from_dict(d) for d in json.loads(path.read_text())]
    ensembles = {}
    for name in models:
        name = canonical_name(name)
        ensembles[name] = [TransformationEnsemble.load(fit_dir(out_dir, name, s.split_id))
                           for s in splits]
    cfg = cfg or ProtocolConfig(models=tuple(ensembles))
    return ProtocolRun(cfg, splits, ensembles)


# ---------------------------------------------------------------------------
# predictions and reports


def _inputs(spec: ModelSpec, data: Dataset, idx):
    X = data.X[idx]
    B = data.volumes[idx] if spec.needs_image else None
    if spec.needs_image and data.volumes is None:
        raise ModelError(f"{spec.name} needs image volumes, dataset has none")
    if tuple(data.columns) != spec.features:
        raise ModelError(f"{spec.name} was fitted on columns {spec.features}, data has {data.columns}")
    return X, B


def predict_split(ens: TransformationEnsemble, data: Dataset, split: Split) -> ev.Predictions:
    idx = np.asarray(split.test)
    X, B = _inputs(ens.spec, data, idx)
    probs = ens.predict_proba(X, B)
    probs = probs / probs.sum(axis=1, keepdims=True)
    return ev.Predictions(split.split_id, np.array([data.ids[i] for i in idx]),
                          ens.spec.target(data.y[idx]), probs)


@dataclass
class Reports:
    metrics: list[dict] = field(default_factory=list)
    relative: list[dict] = field(default_factory=list)
    calibration: dict[str, ev.CalibrationTable] = field(default_factory=dict)
    coefficients: list[dict] = field(default_factory=list)
    predictions: dict[str, list[ev.Predictions]] = field(default_factory=dict)


def split_test_nll(rep: Reports, model: str) -> np.ndarray:
    """Mean test NLL of ``model`` in every split of an evaluated run."""
    return np.array([ev.score_nll(p.probs, p.y).mean() for p in rep.predictions[canonical_name(model)]])


def _binary_preds(preds: list[ev.Predictions]) -> list[ev.Predictions]:
    """Favorable/unfavorable view of ordinal predictions as K=2 records."""
    out = []
    for p in preds:
        if p.K == 2:
            out.append(p)
            continue
        unfav, o = ev.binary_view(p.probs, p.y)
        out.append(ev.Predictions(p.split, p.ids, o.astype(np.int64),
                                  np.column_stack([1.0 - unfav, unfav])))
    return out


def _metric_rows(model: str, outcome: str, results: list[ev.MetricResult], splits) -> list[dict]:
    rows = []
    for r in results:
        for s, v in zip(splits, r.per_split):
            rows.append({"model": model, "outcome": outcome, "metric": r.name, "split": str(s.split_id),
                         "estimate": float(v), "lo": math.nan, "median": math.nan, "hi": math.nan})
        rows.append({"model": model, "outcome": outcome, "metric": r.name, "split": "all",
                     "estimate": r.mean, "lo": r.lower, "median": r.median, "hi": r.upper})
    return rows


def evaluate_run(run: ProtocolRun, data: Dataset, B: int | None = None, seed: int | None = None) -> Reports:
    """Test metrics (ordinal and binary), benchmark differences, calibration and coefficients."""
    cfg = run.config
    B = cfg.bootstrap if B is None else B
    seed = cfg.seed if seed is None else seed
    rep = Reports()
    for name, ens_list in run.ensembles.items():
        preds = [predict_split(e, data, s) for e, s in zip(ens_list, run.splits)]
        rep.predictions[name] = preds
        binp = _binary_preds(preds)
        if preds[0].K > 2:
            res = ev.metric_suite(preds, B, seed)
            rep.metrics += _metric_rows(name, "ordinal",
                                        [r for r in res if r.name in ("nll", "rps", "qwk", "ordinal_acc")],
                                        run.splits)
            rep.calibration[f"{name}:ordinal"] = ev.calibration(preds, "ordinal")
        rep.metrics += _metric_rows(name, "binary",
                                    [r for r in ev.metric_suite(binp, B, seed)
                                     if r.name in ("nll", "brier", "auc_error", "acc_error")],
                                    run.splits)
        rep.calibration[f"{name}:binary"] = ev.calibration(binp, "binary")
        spec = ens_list[0].spec
        if spec.linear_term is not None:
            draws = [m.nets["LS"].params["0_dense.kernel"].data[:, 0] for e in ens_list for m in e.members]
            for c in ev.pooled_coefficients(list(spec.linear_term.features), draws, B, seed):
                rep.coefficients.append({"model": name, "feature": c.name, "estimate": c.estimate,
                                         "lo": c.lower, "median": c.median, "hi": c.upper,
                                         "scale": ens_list[0].members[0].dist.interpretation})
    bench = cfg.benchmark
    if bench in rep.predictions:
        bp = rep.predictions[bench]
        for name, preds in rep.predictions.items():
            views = [("binary", _binary_preds(preds), _binary_preds(bp))]
            if preds[0].K > 2 and bp[0].K > 2:
                views.insert(0, ("ordinal", preds, bp))
            for outcome, mp, rp in views:
                r = ev.relative_to_benchmark([ev.score_nll(p.probs, p.y) for p in mp],
                                             [ev.score_nll(p.probs, p.y) for p in rp],
                                             model_ids=[p.ids for p in mp],
                                             benchmark_ids=[p.ids for p in rp],
                                             B=B, seed=seed, name="nll")
                for s, v in zip(run.splits, r.per_split):
                    rep.relative.append({"model": name, "benchmark": bench, "outcome": outcome,
                                         "metric": "nll", "split": str(s.split_id), "estimate": float(v),
                                         "lo": math.nan, "median": math.nan, "hi": math.nan})
                rep.relative.append({"model": name, "benchmark": bench, "outcome": outcome,
                                     "metric": "nll", "split": "all", "estimate": r.mean,
                                     "lo": r.lower, "median": r.median, "hi": r.upper})
    return rep


def write_table(path, rows: list[dict], columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c]
                        for c in columns])


def read_table(path) -> list[dict]:
    """Rows of a report table, with numeric-looking cells parsed as floats."""
    def conv(v):
        try:
            return float(v)
        except ValueError:
            return v
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: conv(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def write_reports(rep: Reports, out_dir, extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table(out_dir / "metrics.csv", rep.metrics,
                ["model", "outcome", "metric", "split", "estimate", "lo", "median", "hi"])
    write_table(out_dir / "relative.csv", rep.relative,
                ["model", "benchmark", "outcome", "metric", "split", "estimate", "lo", "median", "hi"])
    write_table(out_dir / "coefficients.csv", rep.coefficients,
                ["model", "feature", "estimate", "lo", "median", "hi", "scale"])
    cal_rows, notes = [], []
    for key, table in sorted(rep.calibration.items()):
        model, outcome = key.split(":")
        for b in table.bins:
            cal_rows.append({"model": model, "outcome": outcome, **asdict(b)})
        notes += [f"{key}: {n}" for n in table.notes]
    write_table(out_dir / "calibration.csv", cal_rows,
                ["model", "outcome", "split", "target", "bin", "lower", "upper", "n", "predicted",
                 "observed"])
    summary = {"metrics": [r for r in rep.metrics if r["split"] == "all"],
               "relative": [r for r in rep.relative if r["split"] == "all"],
               "coefficients": rep.coefficients, "calibration_notes": notes}
    if extra:
        summary.update(extra)
    (out_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# sample-size curves


def default_sizes(n: int, count: int = 7, smallest: int | None = None) -> list[int]:
    """``count`` geometric steps ending at ``n``."""
    smallest = max(MIN_SPLIT_SIZE, n // 10) if smallest is None else smallest
    if smallest < MIN_SPLIT_SIZE:
        raise ValueError(f"sub-sample size {smallest} is below the minimum of {MIN_SPLIT_SIZE}")
    if smallest > n:
        raise ValueError(f"smallest size {smallest} exceeds the {n} available observations")
    sizes = np.unique(np.round(np.geomspace(smallest, n, count)).astype(int))
    return [int(s) for s in sizes]


def subsample_table(data: Dataset, models: Sequence[str], cfg: ProtocolConfig,
                    sizes: Sequence[int] | None = None, n_splits: int = 30,
                    workers: int | None = None) -> list[dict]:
    """Test NLL of each model over ``n_splits`` random sub-samples per size, plus NLLR.

    NLLR is the within-split test-NLL difference, first model minus second.
    """
    models = [canonical_name(m) for m in models]
    if len(models) != 2:
        raise ValueError("sub-sampling compares exactly two models")
    sizes = default_sizes(len(data)) if sizes is None else [int(s) for s in sizes]
    for s in sizes:
        if s < MIN_SPLIT_SIZE:
            raise ValueError(f"sub-sample size {s} is below the minimum of {MIN_SPLIT_SIZE}")
        if s > len(data):
            raise ValueError(f"sub-sample size {s} exceeds the {len(data)} available observations")
    jobs, keys = [], []
    for j, size in enumerate(sizes):
        for r in range(n_splits):
            rng = np.random.default_rng([cfg.seed, j, r])
            rows = np.sort(rng.choice(len(data), size=size, replace=False))
            sub = data.subset(rows)
            split = make_splits(size, replace(cfg.plan, n_splits=1, seed=int(rng.integers(2 ** 31))))[0]
            for name in models:
                spec = cfg.spec_for(name, sub)
                jobs.append((spec, sub, split, cfg.train_for(spec), member_seed(cfg.seed, j, r), None,
                             cfg.augmentation))
                keys.append((size, r, name, sub, split))
    fitted = run_jobs(_fit_job, jobs, workers)
    nlls: dict[tuple, dict] = {}
    for (size, r, name, sub, split), model in zip(keys, fitted):
        X, B = _inputs(model.spec, sub, split.test)
        nlls.setdefault((size, r), {})[name] = model.nll(X, B, sub.y[split.test])
    table = []
    for (size, r), d in sorted(nlls.items()):
        a, b = d[models[0]], d[models[1]]
        table.append({"size": size, "split": r, "model_a": models[0], "model_b": models[1],
                      "nll_a": a, "nll_b": b, "nllr": a - b})
    return table


def subsample_means(table: list[dict]) -> list[dict]:
    out = []
    for size in sorted({r["size"] for r in table}):
        rows = [r for r in table if r["size"] == size]
        out.append({"size": size, "nll_a": float(np.mean([r["nll_a"] for r in rows])),
                    "nll_b": float(np.mean([r["nll_b"] for r in rows])),
                    "nllr": float(np.mean([r["nllr"] for r in rows]))})
    return out


# ---------------------------------------------------------------------------
# effect curves


def effect_curve_table(data: Dataset, feature: str, cfg: ProtocolConfig, grid=None,
                       n_boot: int = 50, model: str = "SI-CS_age-LS_xt",
                       linear_model: str = BENCHMARK, workers: int | None = None) -> list[dict]:
    """Complex-shift curves of ``feature`` refitted on bootstrap samples, with the linear fit's line.

    Every refit uses a fresh 8:1:1 split of its bootstrap sample (validation
    and test rows drawn from the out-of-bag pool would also be defensible).
    Curves are mean-centred over the grid, so only their shape is compared.
    """
    from .models import effect_curve, linear_coefficients

    if feature not in data.columns:
        raise ModelError(f"no feature {feature!r} in the data")
    j = data.columns.index(feature)
    if grid is None:
        grid = np.linspace(np.quantile(data.X[:, j], 0.02), np.quantile(data.X[:, j], 0.98), 41)
    grid = np.asarray(grid, dtype=np.float64)
    spec = make_spec(model, data.columns, K=data.K, latent=cfg.latent, age_feature=feature)
    if "CS_" + feature not in {t.key for t in spec.terms}:
        raise ModelError(f"{model} has no complex shift on {feature!r}")
    lin_spec = make_spec(linear_model, data.columns, K=data.K, latent=cfg.latent)
    jobs = []
    for b in range(n_boot):
        rng = np.random.default_rng([cfg.seed, b])
        rows = rng.integers(0, len(data), size=len(data))
        sub = data.subset(rows)
        split = make_splits(len(sub), replace(cfg.plan, n_splits=1, seed=int(rng.integers(2 ** 31))))[0]
        jobs.append((spec, sub, split, cfg.train, member_seed(cfg.seed, b, 0), None, cfg.augmentation))
    jobs.append((lin_spec, data, make_splits(len(data), replace(cfg.plan, n_splits=1))[0], cfg.train,
                 member_seed(cfg.seed, n_boot, 0), None, cfg.augmentation))
    fitted = run_jobs(_fit_job, jobs, workers)
    table = []
    for b, m in enumerate(fitted[:-1]):
        for g, v in zip(grid, effect_curve(m, feature, grid)):
            table.append({"curve": f"boot{b}", "grid": float(g), "value": float(v)})
    lin = fitted[-1]
    coefs = linear_coefficients(lin)
    beta = coefs.values[list(coefs.names).index(feature)]
    z = (grid - lin.stats.mean[j]) / lin.stats.sd[j]
    line = beta * z
    for g, v in zip(grid, line - line.mean()):
        table.append({"curve": "linear", "grid": float(g), "value": float(v)})
    return table
