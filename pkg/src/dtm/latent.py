"""Latent reference distributions F_Z and the scale their shift parameters live on."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

PROB_FLOOR = 1e-12

INTERPRETATION = {
    "logistic": "log-odds-ratio",
    "normal": "probit-shift",
    "mev": "log-hazard-ratio",
}

_ALIASES = {
    "logistic": "logistic",
    "normal": "normal",
    "standard_normal": "normal",
    "mev": "mev",
    "minimum_extreme_value": "mev",
}


def clamp_prob(p):
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


@dataclass(frozen=True)
class LatentDistribution:
    kind: str = "logistic"

    def __post_init__(self):
        if self.kind not in _ALIASES:
            raise ValueError(f"unknown latent distribution {self.kind!r}; "
                             f"choose from {sorted(INTERPRETATION)}")
        object.__setattr__(self, "kind", _ALIASES[self.kind])

    @property
    def interpretation(self) -> str:
        return INTERPRETATION[self.kind]

    def cdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logistic":
            return special.expit(z)
        if self.kind == "normal":
            return special.ndtr(z)
        return -np.expm1(-np.exp(z))

    def sf(self, z):
        """Survival function 1 - cdf, accurate in the upper tail."""
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logistic":
            return special.expit(-z)
        if self.kind == "normal":
            return special.ndtr(-z)
        return np.exp(-np.exp(z))

    def log_pdf(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "logistic":
            a = np.abs(z)
            return -a - 2.0 * np.log1p(np.exp(-a))
        if self.kind == "normal":
            return -0.5 * z * z - 0.5 * np.log(2 * np.pi)
        return z - np.exp(z)

    def pdf(self, z):
        return np.exp(self.log_pdf(z))

    def quantile(self, p):
        p = np.asarray(p, dtype=np.float64)
        if np.any((p <= 0) | (p >= 1)) or np.any(np.isnan(p)):
            raise ValueError("quantile needs probabilities strictly inside (0, 1)")
        if self.kind == "logistic":
            return special.logit(p)
        if self.kind == "normal":
            return special.ndtri(p)
        return np.log(-np.log1p(-p))

    def isf(self, q):
        """Inverse survival function, the upper-tail counterpart of quantile."""
        q = np.asarray(q, dtype=np.float64)
        if np.any((q <= 0) | (q >= 1)) or np.any(np.isnan(q)):
            raise ValueError("isf needs probabilities strictly inside (0, 1)")
        if self.kind == "logistic":
            return -special.logit(q)
        if self.kind == "normal":
            return -special.ndtri(q)
        return np.log(-np.log(q))

    def interval_prob(self, lower, upper):
        """P(lower < Z <= upper), computed on whichever tail keeps precision."""
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        upper_tail = lower > 0
        via_cdf = self.cdf(upper) - self.cdf(lower)
        via_sf = self.sf(lower) - self.sf(upper)
        return np.where(upper_tail, via_sf, via_cdf)


def get_latent(kind: str | LatentDistribution) -> LatentDistribution:
    return kind if isinstance(kind, LatentDistribution) else LatentDistribution(kind)
