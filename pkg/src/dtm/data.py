"""Datasets: tabular encoding, voxel volume files, and a synthetic generator with known truth."""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .latent import get_latent
from .trafo import class_probs_from_cutpoints

VOX_MAGIC = b"VOX1"
VOX_HEADER = struct.Struct("<4s3I")
MAX_VOXELS = 2 ** 31

# mRS 0..6 class frequencies of the 407-patient cohort
PAPER_PREVALENCE = (0.452, 0.216, 0.147, 0.061, 0.049, 0.012, 0.061)
PAPER_VOLUME_SHAPE = (128, 128, 28)
DESK_VOLUME_SHAPE = (16, 16, 8)


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tabular schema and encoding

COLUMN_KINDS = ("continuous", "categorical", "ordinal-score")
COLUMN_ROLES = ("predictor", "outcome", "id")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"
    role: str = "predictor"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in COLUMN_ROLES:
            raise DataError(f"column {self.name!r}: unknown role {self.role!r}")
        if (self.kind == "categorical" or self.role == "outcome") and len(self.levels) < 2:
            raise DataError(f"column {self.name!r}: needs at least two levels")


@dataclass(frozen=True)
class TabularSchema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        n_out = sum(c.role == "outcome" for c in self.columns)
        if n_out != 1:
            raise DataError(f"schema needs exactly one outcome column, found {n_out}")

    @classmethod
    def from_dict(cls, d: dict) -> "TabularSchema":
        cols = []
        for name, entry in d.items():
            if isinstance(entry, str):
                entry = {"kind": entry} if entry in COLUMN_KINDS else {"role": entry}
            entry = dict(entry)
            levels = tuple(str(v) for v in entry.pop("levels", ()))
            unknown = set(entry) - {"kind", "role"}
            if unknown:
                raise DataError(f"column {name!r}: unknown schema keys {sorted(unknown)}")
            cols.append(ColumnSpec(name, entry.get("kind", "continuous"),
                                   entry.get("role", "predictor"), levels))
        return cls(tuple(cols))

    def to_dict(self) -> dict:
        out = {}
        for c in self.columns:
            entry = {"kind": c.kind, "role": c.role}
            if c.levels:
                entry["levels"] = list(c.levels)
            out[c.name] = entry
        return out

    @property
    def outcome(self) -> ColumnSpec:
        return next(c for c in self.columns if c.role == "outcome")

    @property
    def id_column(self) -> ColumnSpec | None:
        return next((c for c in self.columns if c.role == "id"), None)

    @property
    def predictors(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.role == "predictor"]


@dataclass
class Standardization:
    """Per-column location/scale; dummy columns keep (0, 1)."""
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def identity(cls, p: int) -> "Standardization":
        return cls(np.zeros(p), np.ones(p))

    @classmethod
    def fit(cls, X, continuous, columns=None) -> "Standardization":
        X = np.asarray(X, dtype=np.float64)
        continuous = np.asarray(continuous, dtype=bool)
        mean = np.where(continuous, X.mean(axis=0), 0.0)
        sd = np.where(continuous, X.std(axis=0, ddof=1) if len(X) > 1 else 0.0, 1.0)
        bad = np.flatnonzero(continuous & ~(sd > 0))
        if bad.size:
            names = [columns[i] for i in bad] if columns is not None else list(bad)
            raise DataError(f"constant column(s) {names} have zero standard deviation; exclude them")
        return cls(mean, sd)

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.sd

    def inverse(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.sd + self.mean


@dataclass
class EncodedTable:
    X: np.ndarray
    y: np.ndarray
    ids: list[str]
    columns: list[str]
    continuous: np.ndarray
    column_map: dict[str, list[str]]
    stats: Standardization | None = None

    @property
    def X_std(self) -> np.ndarray:
        return self.stats.transform(self.X) if self.stats is not None else self.X


def _missing(v: str) -> bool:
    return v is None or v.strip() in ("", "NA", "NaN", "nan")


def encode_rows(rows: list[dict], schema: TabularSchema) -> EncodedTable:
    """Dummy-encode categoricals (first level is the reference), keep numeric columns raw."""
    columns: list[str] = []
    continuous: list[bool] = []
    column_map: dict[str, list[str]] = {}
    for c in schema.predictors:
        if c.kind == "categorical":
            names = [f"{c.name}_{lvl}" for lvl in c.levels[1:]]
            continuous += [False] * len(names)
        else:
            names = [c.name]
            continuous.append(True)
        column_map[c.name] = names
        columns += names
    X = np.zeros((len(rows), len(columns)))
    y = np.zeros(len(rows), dtype=np.int64)
    ids = []
    out_col = schema.outcome
    id_col = schema.id_column
    for i, row in enumerate(rows):
        j = 0
        for c in schema.predictors:
            v = row.get(c.name)
            if _missing(v):
                raise DataError(f"row {i}: missing value in column {c.name!r}")
            if c.kind == "categorical":
                v = str(v).strip()
                if v not in c.levels:
                    raise DataError(f"row {i}: unknown level {v!r} for column {c.name!r}")
                k = c.levels.index(v)
                if k > 0:
                    X[i, j + k - 1] = 1.0
                j += len(c.levels) - 1
            else:
                try:
                    X[i, j] = float(v)
                except ValueError:
                    raise DataError(f"row {i}: non-numeric value {v!r} in column {c.name!r}") from None
                j += 1
        v = row.get(out_col.name)
        if _missing(v):
            raise DataError(f"row {i}: missing outcome")
        v = str(v).strip()
        if v not in out_col.levels:
            raise DataError(f"row {i}: unknown outcome level {v!r}")
        y[i] = out_col.levels.index(v)
        ids.append(str(row[id_col.name]).strip() if id_col is not None else str(i))
    return EncodedTable(X, y, ids, columns, np.array(continuous, dtype=bool), column_map)


def ingest_tabular(path, schema: TabularSchema, stats: Standardization | None = None,
                   standardize: bool = True) -> EncodedTable:
    """Read a comma-separated file with header row and encode it per ``schema``.

    With ``standardize`` and no ``stats``, statistics come from this file;
    training code should instead fit them on the training split only.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [c.name for c in schema.columns]
        absent = [n for n in needed if n not in header]
        if absent:
            raise DataError(f"{path}: header lacks column(s) {absent}")
        rows = list(reader)
    table = encode_rows(rows, schema)
    if standardize:
        table.stats = stats or Standardization.fit(table.X, table.continuous, table.columns)
    return table


# ---------------------------------------------------------------------------
# VOX1 volumes


class VoxError(DataError):
    pass


class VoxMagicError(VoxError):
    pass


class VoxTruncatedError(VoxError):
    pass


class VoxExtentError(VoxError):
    pass


def write_vox(path, volume) -> None:
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise VoxExtentError(f"volume must be rank 3, got shape {vol.shape}")
    data = np.ascontiguousarray(vol, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VOX_HEADER.pack(VOX_MAGIC, *vol.shape))
        fh.write(data.tobytes())


def read_vox(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != VOX_MAGIC:
        raise VoxMagicError(f"{path}: not a VOX1 file")
    if len(raw) < VOX_HEADER.size:
        raise VoxTruncatedError(f"{path}: header truncated")
    _, d, h, w = VOX_HEADER.unpack_from(raw)
    n = d * h * w
    if n == 0 or n > MAX_VOXELS:
        raise VoxExtentError(f"{path}: implausible extents ({d}, {h}, {w})")
    payload = raw[VOX_HEADER.size:]
    if len(payload) != 4 * n:
        raise VoxTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)


def normalize_volume(vol) -> np.ndarray:
    vol = np.asarray(vol, dtype=np.float64)
    sd = vol.std()
    out = vol - vol.mean()
    return (out / sd if sd > 0 else out).astype(np.float32)


# ---------------------------------------------------------------------------
# in-memory dataset


@dataclass
class Dataset:
    y: np.ndarray
    X: np.ndarray
    columns: list[str]
    continuous: np.ndarray
    K: int
    ids: list[str] = field(default_factory=list)
    volumes: np.ndarray | None = None
    true_probs: np.ndarray | None = None
    image_score: np.ndarray | None = None
    column_map: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.y))]

    def __len__(self):
        return len(self.y)

    @property
    def volume_shape(self) -> tuple[int, int, int] | None:
        return None if self.volumes is None else tuple(self.volumes.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = (lambda a: None if a is None else a[idx])
        return Dataset(self.y[idx], self.X[idx], list(self.columns), self.continuous, self.K,
                       [self.ids[i] for i in idx], pick(self.volumes), pick(self.true_probs),
                       pick(self.image_score), dict(self.column_map))


# ---------------------------------------------------------------------------
# synthetic semi-structured data


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 400
    K: int = 7
    beta: tuple[float, ...] = (1.0, -0.5, 0.0)
    prevalence: tuple[float, ...] | None = None
    latent: str = "logistic"
    w_img: float = 0.0
    volume_shape: tuple[int, int, int] | None = None
    lesion_rate: float = 0.7
    lesion_radius: tuple[float, float] = (1.5, 4.0)
    lesion_amplitude: float = 3.0
    age_effect: str | None = None
    mrs_levels: int = 0
    mrs_beta: tuple[float, ...] = ()
    seed: int = 0

    def cutpoints(self) -> np.ndarray:
        prev = np.asarray(self.prevalence if self.prevalence is not None
                          else (PAPER_PREVALENCE if self.K == 7 else np.full(self.K, 1.0 / self.K)))
        if len(prev) != self.K:
            raise DataError(f"prevalence has {len(prev)} entries for K={self.K}")
        prev = prev / prev.sum()
        return get_latent(self.latent).quantile(np.cumsum(prev)[:-1])


def age_curve(kind: str | None, age):
    """Nonlinear log-odds contribution of standardized age."""
    age = np.asarray(age, dtype=np.float64)
    if kind is None:
        return np.zeros_like(age)
    if kind == "hinge":
        return 1.5 * np.maximum(age - 0.5, 0.0)
    if kind == "linear":
        return 0.8 * age
    raise DataError(f"unknown age effect {kind!r}")


def _lesion_volume(shape, rng, spec: SyntheticSpec):
    vol = rng.normal(size=shape)
    blob = np.zeros(shape)
    if rng.random() < spec.lesion_rate:
        r = rng.uniform(*spec.lesion_radius)
        centre = [rng.uniform(0.25 * s, 0.75 * s) for s in shape]
        grid = np.meshgrid(*[np.arange(s) + 0.5 for s in shape], indexing="ij")
        # slices are thicker than in-plane voxels: shrink the blob along z
        dist2 = ((grid[0] - centre[0]) ** 2 + (grid[1] - centre[1]) ** 2
                 + (2.0 * (grid[2] - centre[2])) ** 2)
        blob = spec.lesion_amplitude * (dist2 <= r * r)
    return vol + blob, blob.sum()


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Covariates, optional lesion volumes, and outcomes drawn from an exact proportional-odds law.

    Linear predictor: ``x @ beta + age_curve(age) + mrs effects + w_img * s(B)``
    where ``s(B)`` is the lesion's integrated intensity scaled by a reference
    sphere, so it is O(1).
    """
    rng = np.random.default_rng(spec.seed)
    n, J = spec.n, len(spec.beta)
    X = rng.normal(size=(n, J))
    columns = [f"x{j + 1}" for j in range(J)]
    continuous = [True] * J
    column_map = {c: [c] for c in columns}
    eta = X @ np.asarray(spec.beta, dtype=np.float64)
    if spec.age_effect is not None:
        age = rng.normal(size=n)
        X = np.column_stack([X, age])
        columns.append("age")
        continuous.append(True)
        column_map["age"] = ["age"]
        eta = eta + age_curve(spec.age_effect, age)
    if spec.mrs_levels:
        if len(spec.mrs_beta) != spec.mrs_levels - 1:
            raise DataError("mrs_beta needs one effect per non-reference level")
        lvl = rng.choice(spec.mrs_levels, size=n, p=_mrs_weights(spec.mrs_levels))
        dummies = np.zeros((n, spec.mrs_levels - 1))
        dummies[lvl > 0, lvl[lvl > 0] - 1] = 1.0
        names = [f"mrs_bl_{k}" for k in range(1, spec.mrs_levels)]
        X = np.column_stack([X, dummies])
        columns += names
        continuous += [False] * len(names)
        column_map["mrs_bl"] = names
        eta = eta + dummies @ np.asarray(spec.mrs_beta, dtype=np.float64)
    volumes = score = None
    if spec.volume_shape is not None:
        ref = spec.lesion_amplitude * (4.0 / 3.0) * np.pi * 3.0 ** 3 / 2.0
        volumes = np.zeros((n, *spec.volume_shape), dtype=np.float32)
        score = np.zeros(n)
        for i in range(n):
            vol, mass = _lesion_volume(spec.volume_shape, rng, spec)
            volumes[i] = normalize_volume(vol)
            score[i] = mass / ref
        eta = eta + spec.w_img * score
    elif spec.w_img:
        raise DataError("w_img > 0 needs a volume_shape")
    probs = class_probs_from_cutpoints(spec.cutpoints()[None, :] - eta[:, None], spec.latent,
                                       clamp=False)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(n)
    y = np.minimum((u[:, None] > cum).sum(axis=1), spec.K - 1)
    return Dataset(y.astype(np.int64), X, columns, np.array(continuous, dtype=bool), spec.K,
                   [f"s{i:05d}" for i in range(n)], volumes, probs, score, column_map)


def _mrs_weights(levels: int) -> np.ndarray:
    w = 0.5 ** np.arange(levels)
    return w / w.sum()


# ---------------------------------------------------------------------------
# on-disk layout: tabular.csv + volumes/*.vox + manifest.csv (+ truth.csv)


def write_dataset(ds: Dataset, directory, outcome: str = "mrs") -> dict:
    """Write a dataset to ``directory`` and return a schema dict describing tabular.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw_cols, schema = _raw_columns(ds)
    schema[outcome] = {"kind": "ordinal-score", "role": "outcome",
                       "levels": [str(k) for k in range(ds.K)]}
    schema = {"id": {"role": "id", "kind": "continuous"}, **schema}
    with open(directory / "tabular.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *raw_cols.keys(), outcome])
        for i in range(len(ds)):
            w.writerow([ds.ids[i], *(_cell(col[i]) for col in raw_cols.values()), int(ds.y[i])])
    with open(directory / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "row", "volume"])
        if ds.volumes is not None:
            (directory / "volumes").mkdir(exist_ok=True)
        for i in range(len(ds)):
            rel = ""
            if ds.volumes is not None:
                rel = f"volumes/{ds.ids[i]}.vox"
                write_vox(directory / rel, ds.volumes[i])
            w.writerow([ds.ids[i], i, rel])
    if ds.true_probs is not None:
        with open(directory / "truth.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *[f"p{k}" for k in range(ds.K)], "image_score"])
            for i in range(len(ds)):
                s = "" if ds.image_score is None else _fmt(ds.image_score[i])
                w.writerow([ds.ids[i], *(_fmt(p) for p in ds.true_probs[i]), s])
    return schema


def _fmt(v) -> str:
    return repr(float(v))


def _cell(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else _fmt(v)


def _raw_columns(ds: Dataset):
    """Undo dummy coding so the CSV holds one column per source variable."""
    raw, schema = {}, {}
    for src, names in ds.column_map.items():
        idx = [ds.columns.index(c) for c in names]
        if len(idx) == 1 and ds.continuous[idx[0]]:
            raw[src] = ds.X[:, idx[0]]
            schema[src] = {"kind": "continuous"}
        else:
            sub = ds.X[:, idx]
            raw[src] = np.where(sub.any(axis=1), sub.argmax(axis=1) + 1, 0).astype(float)
            schema[src] = {"kind": "categorical",
                           "levels": ["0", *[c.rsplit("_", 1)[1] for c in names]]}
    return {k: (v.astype(int) if schema[k]["kind"] == "categorical" else v)
            for k, v in raw.items()}, schema


def load_dataset(manifest, tabular, schema: TabularSchema | dict) -> Dataset:
    """Load tabular rows (and volumes when the manifest lists them)."""
    if isinstance(schema, dict):
        schema = TabularSchema.from_dict(schema)
    table = ingest_tabular(tabular, schema, standardize=False)
    manifest = Path(manifest)
    with open(manifest, newline="", encoding="utf-8") as fh:
        entries = list(csv.DictReader(fh))
    if not entries:
        raise DataError(f"{manifest}: empty manifest")
    rows = np.array([int(e["row"]) for e in entries])
    if rows.min() < 0 or rows.max() >= len(table.y):
        raise DataError(f"{manifest}: row index out of range")
    for e, r in zip(entries, rows):
        if e["id"] != table.ids[r]:
            raise DataError(f"{manifest}: id {e['id']!r} does not match tabular row {r}")
    volumes = None
    paths = [e.get("volume", "") for e in entries]
    if any(paths):
        if not all(paths):
            raise DataError(f"{manifest}: some rows lack a volume")
        vols = [read_vox(manifest.parent / p if not os.path.isabs(p) else p) for p in paths]
        shapes = {v.shape for v in vols}
        if len(shapes) != 1:
            raise DataError(f"{manifest}: volumes have differing extents {sorted(shapes)}")
        volumes = np.stack(vols)
    truth = None
    truth_path = manifest.parent / "truth.csv"
    K = len(schema.outcome.levels)
    if truth_path.exists():
        with open(truth_path, newline="", encoding="utf-8") as fh:
            t = {r["id"]: r for r in csv.DictReader(fh)}
        if all(table.ids[r] in t for r in rows):
            truth = np.array([[float(t[table.ids[r]][f"p{k}"]) for k in range(K)] for r in rows])
    return Dataset(table.y[rows], table.X[rows], table.columns, table.continuous, K,
                   [table.ids[r] for r in rows], volumes, truth, None, table.column_map)
