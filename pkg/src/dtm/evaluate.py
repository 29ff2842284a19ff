"""Proper scores, discrimination, calibration and bootstrap intervals on test predictions.

Binary views of ordinal predictions use the favorable/unfavorable collapse
after class ``cut_after`` (class 2 by default). A K=2 model is already
binary and uses ``cut_after=0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .latent import clamp_prob
from .trafo import collapse_to_binary

DEFAULT_RESAMPLES = 1000
PERCENTILES = (2.5, 50.0, 97.5)
BINARY_CUT = 2


@dataclass
class Predictions:
    """Test-set predictions of one split."""
    split: int
    ids: np.ndarray
    y: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.y) or len(self.ids) != len(self.y):
            raise ValueError("ids, y and probs must describe the same observations")
        if len(self.y) and np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("predicted probabilities must sum to 1 within 1e-9")
        if np.any((self.y < 0) | (self.y >= self.K)):
            raise ValueError(f"outcome classes must lie in 0..{self.K - 1}")

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def __len__(self):
        return len(self.y)


def default_cut(K: int) -> int:
    return 0 if K == 2 else BINARY_CUT


def binary_view(probs, y, cut_after: int | None = None):
    """(p_unfavorable, 1{unfavorable}) for ordinal or binary predictions."""
    probs = np.asarray(probs, dtype=np.float64)
    cut = default_cut(probs.shape[1]) if cut_after is None else cut_after
    _, unfav = collapse_to_binary(probs, cut)
    return unfav, (np.asarray(y) > cut).astype(np.float64)


# ---------------------------------------------------------------------------
# per-observation proper scores


def score_nll(probs, y) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return -np.log(clamp_prob(probs[np.arange(len(probs)), np.asarray(y)]))


def score_brier(probs, y, cut_after: int | None = None) -> np.ndarray:
    p, o = binary_view(probs, y, cut_after)
    return (p - o) ** 2


def score_rps(probs, y) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[1]
    cum = np.cumsum(probs, axis=1)[:, :-1]
    obs = (np.asarray(y)[:, None] <= np.arange(K - 1)[None, :]).astype(np.float64)
    return ((cum - obs) ** 2).sum(axis=1) / (K - 1)


# ---------------------------------------------------------------------------
# per-split indices


def score_auc(p_unfav, outcome) -> float:
    """Rank-statistic AUC with midranks; NaN when only one class is present."""
    p = np.asarray(p_unfav, dtype=np.float64)
    o = np.asarray(outcome).astype(bool)
    n1 = int(o.sum())
    n0 = len(o) - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(p)
    return float((ranks[o].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def score_acc(probs, y, binary: bool = False, cut_after: int | None = None) -> float:
    if binary:
        p, o = binary_view(probs, y, cut_after)
        return float(np.mean((p > 0.5) == (o == 1.0)))
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


def score_qwk(probs, y) -> float:
    """Quadratic weighted kappa between the argmax class and the true class."""
    probs = np.asarray(probs)
    K = probs.shape[1]
    pred = np.argmax(probs, axis=1)
    y = np.asarray(y)
    observed = np.zeros((K, K))
    np.add.at(observed, (y, pred), 1.0)
    observed /= observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    a = np.arange(K)
    w = (a[:, None] - a[None, :]) ** 2 / (K - 1) ** 2
    denom = (w * expected).sum()
    if denom == 0.0:
        # both raters put everything in one class
        return 1.0 if np.array_equal(pred, y) else float("nan")
    return float(1.0 - (w * observed).sum() / denom)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class MetricResult:
    name: str
    per_split: np.ndarray
    mean: float
    lower: float
    median: float
    upper: float

    def as_row(self) -> dict:
        return {"metric": self.name, "estimate": self.mean, "lo": self.lower,
                "median": self.median, "hi": self.upper}


def _percentiles(values: np.ndarray) -> tuple[float, float, float]:
    values = np.asarray(values, dtype=np.float64)
    if np.all(np.isnan(values)):
        return (float("nan"),) * 3
    lo, med, hi = np.nanpercentile(values, PERCENTILES)
    return float(lo), float(med), float(hi)


def _resample_indices(sizes: Sequence[int], B: int, seed: int):
    """Yield, for b = 0..B-1, one index array per split, drawn from rng([seed, b])."""
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        yield [rng.integers(0, n, size=n) for n in sizes]


def bootstrap_metric(name: str, groups: Sequence[tuple], metric: Callable[..., float],
                     B: int = DEFAULT_RESAMPLES, seed: int = 0) -> MetricResult:
    """Within-split bootstrap of an arbitrary per-split metric.

    ``groups`` holds one tuple of aligned arrays per split; ``metric`` maps such
    a tuple to a number. Each resample draws rows with replacement inside every
    split and averages the split metrics. Missing split values are skipped.
    """
    if B < 1:
        raise ValueError("need at least one bootstrap resample")
    groups = [tuple(np.asarray(a) for a in g) for g in groups]
    sizes = [len(g[0]) for g in groups]
    if not groups or min(sizes) == 0:
        raise ValueError("every split needs at least one observation")
    per_split = np.array([metric(*g) for g in groups], dtype=np.float64)
    boot = np.empty(B)
    for b, idx in enumerate(_resample_indices(sizes, B, seed)):
        vals = [metric(*(a[i] for a in g)) for g, i in zip(groups, idx)]
        boot[b] = np.nan if np.all(np.isnan(vals)) else np.nanmean(vals)
    mean = float(np.nanmean(per_split)) if not np.all(np.isnan(per_split)) else float("nan")
    return MetricResult(name, per_split, mean, *_percentiles(boot))


def bootstrap_ci(contributions: Sequence, B: int = DEFAULT_RESAMPLES, seed: int = 0,
                 name: str = "metric") -> MetricResult:
    """Bootstrap interval of a mean score from per-observation contributions of S splits."""
    if B < 1:
        raise ValueError("need at least one bootstrap resample")
    groups = [np.asarray(c, dtype=np.float64) for c in contributions]
    if not groups or min(len(g) for g in groups) == 0:
        raise ValueError("every split needs at least one observation")
    boot = np.empty(B)
    for b, idx in enumerate(_resample_indices([len(g) for g in groups], B, seed)):
        boot[b] = np.mean([g[i].mean() for g, i in zip(groups, idx)])
    per_split = np.array([g.mean() for g in groups])
    return MetricResult(name, per_split, float(per_split.mean()), *_percentiles(boot))


def relative_to_benchmark(model: Sequence, benchmark: Sequence, *, model_ids=None,
                          benchmark_ids=None, B: int = DEFAULT_RESAMPLES, seed: int = 0,
                          mode: str = "paired", name: str = "metric") -> MetricResult:
    """Split-wise difference of mean scores, model minus benchmark.

    ``mode`` selects what the bootstrap resamples:
    ``paired`` resamples observation-wise differences (identical records give a
    zero-width interval), ``fixed`` holds the benchmark's split mean constant
    and resamples the model only, ``independent`` resamples both score sets
    separately.
    """
    if mode not in ("fixed", "paired", "independent"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(model) != len(benchmark):
        raise ValueError("model and benchmark cover different numbers of splits")
    m = [np.asarray(a, dtype=np.float64) for a in model]
    r = [np.asarray(a, dtype=np.float64) for a in benchmark]
    for s, (a, c) in enumerate(zip(m, r)):
        if len(a) != len(c):
            raise ValueError(f"split {s}: model and benchmark score different observations")
    if model_ids is not None or benchmark_ids is not None:
        if model_ids is None or benchmark_ids is None:
            raise ValueError("observation ids must be given for both record sets")
        for s, (a, c) in enumerate(zip(model_ids, benchmark_ids)):
            if not np.array_equal(np.asarray(a), np.asarray(c)):
                raise ValueError(f"split {s}: observation ids do not match")
    if B < 1:
        raise ValueError("need at least one bootstrap resample")
    per_split = np.array([a.mean() - c.mean() for a, c in zip(m, r)])
    sizes = [len(a) for a in m]
    boot = np.empty(B)
    if mode == "independent":
        idx_b = list(_resample_indices(sizes, B, seed + 1))
    for b, idx in enumerate(_resample_indices(sizes, B, seed)):
        if mode == "fixed":
            vals = [a[i].mean() - c.mean() for a, c, i in zip(m, r, idx)]
        elif mode == "paired":
            vals = [(a[i] - c[i]).mean() for a, c, i in zip(m, r, idx)]
        else:
            vals = [a[i].mean() - c[j].mean() for a, c, i, j in zip(m, r, idx, idx_b[b])]
        boot[b] = np.mean(vals)
    return MetricResult(name, per_split, float(per_split.mean()), *_percentiles(boot))


# ---------------------------------------------------------------------------
# standard report over splits


def metric_suite(preds: Sequence[Predictions], B: int = DEFAULT_RESAMPLES, seed: int = 0,
                 cut_after: int | None = None) -> list[MetricResult]:
    """NLL, Brier, RPS, 1-AUC, 1-ACC (binary) and QWK, ACC (ordinal, K > 2)."""
    if not preds:
        raise ValueError("no predictions to evaluate")
    K = preds[0].K
    cut = default_cut(K) if cut_after is None else cut_after
    out = [
        bootstrap_ci([score_nll(p.probs, p.y) for p in preds], B, seed, "nll"),
        bootstrap_ci([score_brier(p.probs, p.y, cut) for p in preds], B, seed, "brier"),
        bootstrap_ci([score_rps(p.probs, p.y) for p in preds], B, seed, "rps"),
    ]
    bin_groups = [binary_view(p.probs, p.y, cut) for p in preds]
    out.append(bootstrap_metric("auc_error", bin_groups, lambda q, o: 1.0 - score_auc(q, o), B, seed))
    out.append(bootstrap_metric("acc_error", bin_groups,
                                lambda q, o: float(np.mean((q > 0.5) != (o == 1.0))), B, seed))
    if K > 2:
        groups = [(p.probs, p.y) for p in preds]
        out.append(bootstrap_metric("qwk", groups, score_qwk, B, seed))
        out.append(bootstrap_metric("ordinal_acc", groups, score_acc, B, seed))
    return out


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationBin:
    split: str           # split id or "pooled"
    target: str          # "unfavorable", "class<k>" or "class-average"
    bin: int
    lower: float
    upper: float
    n: int
    predicted: float
    observed: float


@dataclass
class CalibrationTable:
    bins: list[CalibrationBin]
    notes: list[str] = field(default_factory=list)

    def select(self, split: str, target: str) -> list[CalibrationBin]:
        return [b for b in self.bins if b.split == split and b.target == target]

    def write_csv(self, path) -> None:
        cols = ["split", "target", "bin", "lower", "upper", "n", "predicted", "observed"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for b in self.bins:
                w.writerow([b.split, b.target, b.bin, repr(b.lower), repr(b.upper), b.n,
                            repr(b.predicted), repr(b.observed)])

    @classmethod
    def read_csv(cls, path) -> "CalibrationTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([CalibrationBin(r["split"], r["target"], int(r["bin"]), float(r["lower"]),
                                   float(r["upper"]), int(r["n"]), float(r["predicted"]),
                                   float(r["observed"])) for r in rows])


QUARTILES = (0.25, 0.5, 0.75)
MIN_CALIBRATION_N = 8


def quartile_bins(p, outcome) -> tuple[list[tuple], bool]:
    """Bins split at the empirical quartiles of ``p``.

    Returns per-bin ``(index, lower, upper, n, mean predicted, observed)``
    for the non-empty bins, and whether tied quartiles forced a merge.
    Bin j holds the predictions in ``(q_{j-1}, q_j]``.
    """
    p = np.asarray(p, dtype=np.float64)
    o = np.asarray(outcome, dtype=np.float64)
    edges = np.quantile(p, QUARTILES)
    uniq = np.unique(edges)
    merged = len(uniq) < len(edges)
    which = np.searchsorted(uniq, p, side="left")
    bounds = np.concatenate([[p.min()], uniq, [p.max()]])
    out = []
    for j in range(len(uniq) + 1):
        mask = which == j
        if mask.any():
            out.append((j, float(bounds[j]), float(bounds[j + 1]), int(mask.sum()),
                        float(p[mask].mean()), float(o[mask].mean())))
    return out, merged


def calibration(preds: Sequence[Predictions], target: str = "binary",
                cut_after: int | None = None) -> CalibrationTable:
    """Quartile-bin calibration per split plus the split-averaged curve.

    ``binary`` bins the unfavorable-outcome probability. ``ordinal`` bins each
    class's one-vs-rest probability and averages the curves over classes.
    """
    if target not in ("binary", "ordinal"):
        raise ValueError(f"target must be 'binary' or 'ordinal', got {target!r}")
    table = CalibrationTable([])
    curves = []  # per split: {bin: (pred, obs)}
    for pr in preds:
        if len(pr) < MIN_CALIBRATION_N:
            raise ValueError(f"split {pr.split}: calibration needs at least {MIN_CALIBRATION_N} "
                             f"observations, got {len(pr)}")
        sid = str(pr.split)
        if target == "binary":
            p, o = binary_view(pr.probs, pr.y, cut_after)
            bins, merged = quartile_bins(p, o)
            if merged:
                table.notes.append(f"split {sid}: tied quartiles merged into {len(bins)} bin(s)")
            table.bins += [CalibrationBin(sid, "unfavorable", *b) for b in bins]
            curves.append({b[0]: (b[4], b[5], b[3]) for b in bins})
        else:
            per_class = []
            for k in range(pr.K):
                bins, merged = quartile_bins(pr.probs[:, k], pr.y == k)
                if merged:
                    table.notes.append(f"split {sid} class {k}: tied quartiles merged into "
                                       f"{len(bins)} bin(s)")
                table.bins += [CalibrationBin(sid, f"class{k}", *b) for b in bins]
                per_class.append({b[0]: (b[4], b[5], b[3]) for b in bins})
            avg = _average_curves(per_class)
            table.bins += [CalibrationBin(sid, "class-average", j, float("nan"), float("nan"),
                                          n, pv, ov) for j, (pv, ov, n) in sorted(avg.items())]
            curves.append(avg)
    label = "unfavorable" if target == "binary" else "class-average"
    for j, (pv, ov, n) in sorted(_average_curves(curves).items()):
        table.bins.append(CalibrationBin("pooled", label, j, float("nan"), float("nan"), n, pv, ov))
    return table


def _average_curves(curves: list[dict]) -> dict:
    out = {}
    for j in sorted({j for c in curves for j in c}):
        pts = [c[j] for c in curves if j in c]
        out[j] = (float(np.mean([q[0] for q in pts])), float(np.mean([q[1] for q in pts])),
                  int(sum(q[2] for q in pts)))
    return out


# ---------------------------------------------------------------------------
# coefficients


@dataclass
class CoefficientSummary:
    name: str
    estimate: float
    lower: float
    median: float
    upper: float


def pooled_coefficients(names: Sequence[str], draws, B: int = DEFAULT_RESAMPLES,
                        seed: int = 0) -> list[CoefficientSummary]:
    """Pool coefficient vectors of all fits (members x splits) with a bootstrap interval.

    The fits themselves are resampled; nothing is refitted.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim != 2 or draws.shape[1] != len(names):
        raise ValueError("draws must be an (n_fits, n_coefficients) array matching names")
    if B < 1:
        raise ValueError("need at least one bootstrap resample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(draws), size=(B, len(draws)))
    boot = draws[idx].mean(axis=1)
    lo, med, hi = np.percentile(boot, PERCENTILES, axis=0)
    est = draws.mean(axis=0)
    return [CoefficientSummary(n, float(est[j]), float(lo[j]), float(med[j]), float(hi[j]))
            for j, n in enumerate(names)]


def sign_test(differences, alternative: str = "less") -> tuple[int, int, float]:
    """Exact sign test on split-wise differences; ties are dropped.

    Returns (number negative, number non-tied, p-value). With
    ``alternative="less"`` a small p-value means the differences tend to be negative.
    """
    from scipy.stats import binomtest

    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0]
    neg = int((d < 0).sum())
    if len(d) == 0:
        return 0, 0, 1.0
    alt = {"less": "greater", "greater": "less", "two-sided": "two-sided"}[alternative]
    return neg, len(d), float(binomtest(neg, len(d), 0.5, alternative=alt).pvalue)
