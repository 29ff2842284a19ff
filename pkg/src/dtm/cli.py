"""Command-line driver: simulate, fit, ensemble, evaluate, subsample, effect-curve.

Exit codes: 0 success, 2 invalid configuration or input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import DataError, Dataset, SyntheticSpec, generate_synthetic, load_dataset, write_dataset
from .models import ModelError, canonical_name
from .netcore import CNNConfig
from .protocol import (BENCHMARK, DESK_CNN, DESK_IMAGE_TRAIN, TABULAR_TRAIN, ProtocolConfig,
                       effect_curve_table, evaluate_run, load_fits, predict_split, run_fits,
                       subsample_means, subsample_table, write_reports, write_table)
from .train import WORKERS_ENV, AugmentationParams, SplitPlan, TrainConfig, TrainingDiverged, default_workers

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifest: str | None = None
    tabular: str | None = None
    schema: str | None = None


@dataclass
class SubsampleSection:
    models: list[str] = field(default_factory=lambda: ["CI_B-LS_x", "SI-LS_x"])
    sizes: list[int] | None = None
    n_splits: int = 30


@dataclass
class EffectCurveSection:
    feature: str = "age"
    model: str = "SI-CS_age-LS_xt"
    grid: list[float] | None = None
    n_boot: int = 50


@dataclass
class RunConfig:
    data: DataSection | None = None
    synthetic: dict | None = None
    model: str | None = None
    models: list[str] | None = None
    benchmark: str = BENCHMARK
    latent: str = "logistic"
    train: dict = field(default_factory=dict)
    image_train: dict = field(default_factory=dict)
    cnn: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)
    ensemble: int = 1
    bootstrap: int = 1000
    out: str = "runs/default"
    seed: int = 0
    subsample: SubsampleSection = field(default_factory=SubsampleSection)
    effect_curve: EffectCurveSection = field(default_factory=EffectCurveSection)

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping")
        _reject_unknown(doc, cls, "config")
        kw = dict(doc)
        if "data" in kw and kw["data"] is not None:
            _reject_unknown(kw["data"], DataSection, "data")
            d = DataSection(**kw["data"])
            for k in ("manifest", "tabular", "schema"):
                v = getattr(d, k)
                if v is None:
                    raise ConfigError(f"data.{k} is required")
                p = Path(v) if Path(v).is_absolute() else base / v
                if not p.exists():
                    raise ConfigError(f"data.{k}: {p} does not exist")
                setattr(d, k, str(p))
            kw["data"] = d
        for key, typ in (("subsample", SubsampleSection), ("effect_curve", EffectCurveSection)):
            if key in kw:
                _reject_unknown(kw[key], typ, key)
                kw[key] = typ(**kw[key])
        for key, typ in (("train", TrainConfig), ("image_train", TrainConfig), ("cnn", CNNConfig),
                         ("augmentation", AugmentationParams), ("splits", SplitPlan),
                         ("synthetic", SyntheticSpec)):
            if kw.get(key) is not None:
                _reject_unknown(kw[key], typ, key)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        return cls.from_dict(doc, path.parent)

    def validate(self) -> None:
        try:
            for name in self.model_names(required=False):
                canonical_name(name)
            canonical_name(self.benchmark)
            self.protocol()
            if self.synthetic is not None:
                self.synthetic_spec()
        except (ModelError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.ensemble < 1:
            raise ConfigError("ensemble must be at least 1")
        if self.bootstrap < 1:
            raise ConfigError("bootstrap must be at least 1")

    # ------------------------------------------------------------------
    def model_names(self, required: bool = True) -> list[str]:
        names = list(self.models or []) + ([self.model] if self.model else [])
        if required and not names:
            raise ConfigError("no model given (set 'model' or 'models')")
        return names

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synthetic or {})
        for k in ("beta", "prevalence", "volume_shape", "lesion_radius", "mrs_beta"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        d.setdefault("seed", self.seed)
        return SyntheticSpec(**d)

    def protocol(self, members: int | None = None) -> ProtocolConfig:
        def tc(over, base):
            return dataclasses.replace(base, **over)
        cnn = dict(self.cnn)
        if "filters" in cnn:
            cnn["filters"] = tuple(cnn["filters"])
        plan = dict(self.splits)
        if "fractions" in plan:
            plan["fractions"] = tuple(plan["fractions"])
        return ProtocolConfig(
            models=tuple(self.model_names(required=False)) or (BENCHMARK,),
            benchmark=self.benchmark, members=members or self.ensemble,
            plan=SplitPlan(**plan), train=tc(self.train, TABULAR_TRAIN),
            image_train=tc(self.image_train, DESK_IMAGE_TRAIN), cnn=tc(cnn, DESK_CNN),
            latent=self.latent, seed=self.seed, augmentation=AugmentationParams(**self.augmentation),
            bootstrap=self.bootstrap)


def _reject_unknown(doc, typ, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(typ)}
    extra = sorted(set(doc) - known)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")


# ---------------------------------------------------------------------------
# commands


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data is not None:
        schema_path = Path(cfg.data.schema)
        text = schema_path.read_text()
        schema = json.loads(text) if schema_path.suffix == ".json" else yaml.safe_load(text)
        return load_dataset(cfg.data.manifest, cfg.data.tabular, schema)
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic_spec())
    raise ConfigError("no data: give a 'data' section or a 'synthetic' section")


def cmd_simulate(cfg: RunConfig, out: Path, workers: int) -> None:
    if cfg.synthetic is None:
        raise ConfigError("simulate needs a 'synthetic' section")
    ds = generate_synthetic(cfg.synthetic_spec())
    schema = write_dataset(ds, out / "data")
    (out / "data" / "schema.json").write_text(json.dumps(schema, indent=2))
    print(f"wrote {len(ds)} rows to {out / 'data'}")


def cmd_fit(cfg: RunConfig, out: Path, workers: int, members: int | None = None) -> None:
    cfg.model_names()
    data = load_data(cfg)
    run = run_fits(data, cfg.protocol(members), workers=workers, out_dir=out)
    for name, ens in run.ensembles.items():
        print(f"{name}: {len(ens)} split(s) x {len(ens[0])} member(s) -> {out / 'fits' / name}")


def cmd_ensemble(cfg: RunConfig, out: Path, workers: int) -> None:
    """Test-set predictions of fitted ensembles, averaged on the transformation scale."""
    data = load_data(cfg)
    run = load_fits(out, cfg.model_names(), cfg.protocol())
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for name, ens_list in run.ensembles.items():
        rows = []
        for ens, split in zip(ens_list, run.splits):
            p = predict_split(ens, data, split)
            idx = np.asarray(split.test)
            X = data.X[idx]
            B = data.volumes[idx] if ens.spec.needs_image else None
            linear_pool = ens.probability_average(X, B)
            for i in range(len(p)):
                row = {"split": split.split_id, "id": p.ids[i], "y": int(p.y[i])}
                row.update({f"p{k}": float(p.probs[i, k]) for k in range(p.K)})
                row.update({f"q{k}": float(linear_pool[i, k]) for k in range(p.K)})
                rows.append(row)
        write_table(pred_dir / f"{name}.csv", rows)
        print(f"{name}: predictions for {len(rows)} test rows -> {pred_dir / (name + '.csv')}")


def cmd_evaluate(cfg: RunConfig, out: Path, workers: int) -> None:
    data = load_data(cfg)
    names = cfg.model_names()
    bench = canonical_name(cfg.benchmark)
    load = list(dict.fromkeys([canonical_name(n) for n in names] + [bench]))
    if not (out / "fits" / bench).exists():
        load.remove(bench)
    run = load_fits(out, load, cfg.protocol())
    rep = evaluate_run(run, data)
    write_reports(rep, out, {"seed": cfg.seed, "n": len(data), "models": load,
                             "splits": [{"split": s.split_id, "n_train": len(s.train),
                                         "n_val": len(s.val), "n_test": len(s.test)}
                                        for s in run.splits]})
    print(f"reports written to {out}")


def cmd_subsample(cfg: RunConfig, out: Path, workers: int) -> None:
    data = load_data(cfg)
    sec = cfg.subsample
    try:
        table = subsample_table(data, sec.models, cfg.protocol(1), sec.sizes, sec.n_splits, workers)
    except ValueError as exc:
        raise ConfigError(f"subsample: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "subsample.csv", table)
    write_table(out / "subsample_means.csv", subsample_means(table))
    print(f"{len(table)} sub-sample fits -> {out / 'subsample.csv'}")


def cmd_effect_curve(cfg: RunConfig, out: Path, workers: int) -> None:
    data = load_data(cfg)
    sec = cfg.effect_curve
    try:
        table = effect_curve_table(data, sec.feature, cfg.protocol(1), sec.grid, sec.n_boot, sec.model,
                                   workers=workers)
    except ValueError as exc:
        raise ConfigError(f"effect_curve: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / f"effect_{sec.feature}.csv", table)
    print(f"effect curve of {sec.feature} -> {out / ('effect_' + sec.feature + '.csv')}")


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "subsample": cmd_subsample,
    "effect-curve": cmd_effect_curve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default: ${WORKERS_ENV} or 1)")
        p.add_argument("--out", default=None, help="override the configured output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out or cfg.out)
        workers = default_workers() if args.workers is None else max(1, args.workers)
        COMMANDS[args.command](cfg, out, workers)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ModelError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
