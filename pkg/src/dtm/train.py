"""Maximum-likelihood training with minibatch Adam, early stopping and volume augmentation."""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .data import Dataset, Standardization
from .ensemble import warm_start
from .latent import get_latent
from .models import ModelSpec, TransformationModel
from .netcore import PAPER_LEARNING_RATE, Adam, backward
from .trafo import gammas_from_thetas

WORKERS_ENV = "DTM_WORKERS"


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = PAPER_LEARNING_RATE
    batch_size: int = 6
    max_epochs: int = 200
    patience: int = 20
    augment: bool = True
    early_stopping: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.max_epochs > 0 and self.patience > 0):
            raise ValueError("learning rate, batch size, epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    n_splits: int = 6
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError("need at least one split")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ValueError(f"split fractions must be positive and sum to 1, got {self.fractions}")


@dataclass(frozen=True)
class Split:
    split_id: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"split": self.split_id, "train": self.train.tolist(),
                "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(d["split"], *(np.array(d[k], dtype=np.int64) for k in ("train", "val", "test")))


MIN_SPLIT_SIZE = 10


def split_sizes(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    return n_train, n_val, n - n_train - n_val


def make_splits(n: int, plan: SplitPlan = SplitPlan()) -> list[Split]:
    if n < MIN_SPLIT_SIZE:
        raise ValueError(f"need at least {MIN_SPLIT_SIZE} observations to split, got {n}")
    n_train, n_val, _ = split_sizes(n, plan.fractions)
    out = []
    for s in range(plan.n_splits):
        perm = np.random.default_rng([plan.seed, s]).permutation(n)
        out.append(Split(s, np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                         np.sort(perm[n_train + n_val:])))
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationParams:
    rotation: float = 20.0       # degrees
    width_shift: float = 0.2     # fraction of extent
    height_shift: float = 0.2
    shear: float = 0.15          # degrees, as in the Keras image generator
    zoom: float = 0.15
    fill: str = "nearest"

    @classmethod
    def none(cls) -> "AugmentationParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def augment(volume, params: AugmentationParams, rng: np.random.Generator) -> np.ndarray:
    """Random in-plane affine transform, shared by all slices along the last axis."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"augment expects a rank-3 volume, got shape {vol.shape}")
    theta = np.deg2rad(rng.uniform(-params.rotation, params.rotation))
    tx = rng.uniform(-params.height_shift, params.height_shift) * vol.shape[0]
    ty = rng.uniform(-params.width_shift, params.width_shift) * vol.shape[1]
    shear = np.deg2rad(rng.uniform(-params.shear, params.shear))
    zx, zy = rng.uniform(1.0 - params.zoom, 1.0 + params.zoom, size=2)
    if theta == 0 and tx == 0 and ty == 0 and shear == 0 and zx == 1 and zy == 1:
        return vol.copy()
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, -np.sin(shear)], [0.0, np.cos(shear)]])
    m2 = rot @ shr @ np.diag([zx, zy])
    matrix = np.eye(3)
    matrix[:2, :2] = m2
    centre = (np.array(vol.shape[:2], dtype=np.float64) - 1.0) / 2.0
    offset = np.zeros(3)
    offset[:2] = centre - m2 @ centre + np.array([tx, ty])
    return ndimage.affine_transform(vol, matrix, offset=offset, order=0, mode=params.fill)


# ---------------------------------------------------------------------------
# fitting


def intercept_from_frequencies(y, K: int, dist) -> np.ndarray:
    """Simple-intercept parameters reproducing the observed class frequencies."""
    counts = np.bincount(np.asarray(y), minlength=K).astype(np.float64)
    counts = np.maximum(counts, 0.5)
    cum = np.cumsum(counts / counts.sum())[:-1]
    return gammas_from_thetas(get_latent(dist).quantile(cum))


def _batch(data: Dataset, idx, volumes=None):
    X = data.X[idx]
    B = None
    if volumes is not None:
        B = volumes
    elif data.volumes is not None:
        B = data.volumes[idx]
    return X, B


def fit(spec: ModelSpec, data: Dataset, split: Split, cfg: TrainConfig = TrainConfig(),
        seed: int = 0, reference: TransformationModel | None = None,
        aug: AugmentationParams = AugmentationParams()) -> TransformationModel:
    """Fit one model on ``split.train``, selecting the epoch with the lowest validation NLL.

    Epoch 0 (the initialization) takes part in the selection. With
    ``cfg.early_stopping`` off, the weights after the last epoch are kept,
    which for the convex tabular models is the training-set MLE. With a
    ``reference`` model, simple-intercept and linear-shift parameters are
    warm-started from it; otherwise a simple intercept starts at the training
    class frequencies.
    """
    if tuple(data.columns) != spec.features:
        raise ValueError(f"dataset columns {data.columns} do not match model features {spec.features}")
    if spec.needs_image and data.volumes is None:
        raise ValueError(f"{spec.name} needs image volumes, dataset has none")
    rng = np.random.default_rng(seed)
    model = TransformationModel(spec, rng)
    tr, va = np.asarray(split.train), np.asarray(split.val)
    if len(spec.features):
        model.stats = Standardization.fit(data.X[tr], data.continuous, data.columns)
    if reference is not None:
        warm_start(model, reference)
    elif "SI" in model.nets:
        g = intercept_from_frequencies(spec.target(data.y[tr]), spec.K, spec.latent)
        model.nets["SI"].set_weights({"0_dense.kernel": g[None, :]})

    params = model.parameters()
    opt = Adam(lr=cfg.lr)
    use_images = spec.needs_image
    Xva, Bva = _batch(data, va)
    if not use_images:
        Bva = None

    def val_nll():
        return model.nll(Xva, Bva, data.y[va], cfg.eval_batch_size)

    Xtr_all, Btr_all = _batch(data, tr)
    history = [(0, model.nll(Xtr_all, Btr_all if use_images else None, data.y[tr],
                             cfg.eval_batch_size), val_nll())]
    best_val, best_epoch, best_w = history[0][2], 0, model.get_weights()
    wait = 0
    n_tr = len(tr)
    for epoch in range(1, cfg.max_epochs + 1):
        erng = np.random.default_rng([seed, epoch])
        vols = None
        if use_images:
            vols = data.volumes[tr]
            if cfg.augment:
                vols = np.stack([augment(v, aug, erng) for v in vols])
        order = erng.permutation(n_tr)
        total = 0.0
        for b, start in enumerate(range(0, n_tr, cfg.batch_size)):
            pos = order[start:start + cfg.batch_size]
            rows = tr[pos]
            loss, nll_val = model.loss(data.X[rows], None if vols is None else vols[pos],
                                       data.y[rows], training=True, rng=erng)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(epoch, b)
            grads = backward(loss, params)
            try:
                opt.step(params, grads)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, b, str(exc)) from None
            total += nll_val * len(rows)
        v = val_nll()
        if not np.isfinite(v):
            raise TrainingDiverged(epoch, -1, "non-finite validation NLL")
        history.append((epoch, total / n_tr, v))
        if not cfg.early_stopping:
            best_val, best_epoch, best_w = v, epoch, None
        elif v < best_val:
            best_val, best_epoch, best_w = v, epoch, model.get_weights()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best_w is not None:
        model.set_weights(best_w)
    model.history = history
    model.meta = {"split": int(split.split_id), "seed": int(seed), "stopped_epoch": int(best_epoch),
                  "epochs_run": int(history[-1][0]), "val_nll": float(best_val),
                  "warm_start": reference is not None}
    return model


def write_history(path, history: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_nll", "val_nll"])
        for e, t, v in history:
            w.writerow([e, repr(float(t)), repr(float(v))])


def read_history(path) -> list[tuple[int, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["epoch"]), float(r["train_nll"]), float(r["val_nll"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# work queue


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_jobs(fn: Callable, jobs: Sequence, workers: int | None = None) -> list:
    """Apply ``fn`` to every job, in order; more than one worker uses a process pool."""
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))
