"""Transformation functions and the likelihood contributions built from them.

Ordinal outcomes use class indices ``0..K-1`` (mRS 0 is class 0). A model
produces K-1 cutpoints ``h(y_k | x)``; class k has probability
``F_Z(h_k) - F_Z(h_{k-1})`` with implicit ``h_{-1} = -inf`` and ``h_{K-1} = +inf``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .latent import PROB_FLOOR, LatentDistribution, clamp_prob, get_latent
from .netcore import Tensor


# ---------------------------------------------------------------------------
# monotone cutpoints


def thetas_from_gammas(gammas) -> np.ndarray:
    """theta_1 = gamma_1, theta_k = theta_{k-1} + exp(gamma_k). Works row-wise."""
    g = np.asarray(gammas, dtype=np.float64)
    inc = np.concatenate([g[..., :1], np.exp(g[..., 1:])], axis=-1)
    return np.cumsum(inc, axis=-1)


def gammas_from_thetas(thetas) -> np.ndarray:
    t = np.asarray(thetas, dtype=np.float64)
    d = np.diff(t, axis=-1)
    if np.any(d <= 0):
        raise ValueError("cutpoints must be strictly increasing")
    return np.concatenate([t[..., :1], np.log(d)], axis=-1)


@dataclass
class CutpointVector:
    gammas: np.ndarray

    @classmethod
    def from_thetas(cls, thetas) -> "CutpointVector":
        return cls(gammas_from_thetas(thetas))

    @property
    def thetas(self) -> np.ndarray:
        return thetas_from_gammas(self.gammas)

    @property
    def n_classes(self) -> int:
        return self.gammas.shape[-1] + 1


def ordered_cutpoints(gammas: Tensor) -> Tensor:
    """Tape version of :func:`thetas_from_gammas` for ``(K-1,)`` or ``(N, K-1)`` input."""
    g = gammas.data
    e = np.exp(g[..., 1:])
    out = thetas_from_gammas(g)

    def bw(grad):
        # d theta_j / d gamma_k = 1 (k = 0) or exp(gamma_k) (1 <= k <= j)
        tail = np.flip(np.cumsum(np.flip(grad, -1), -1), -1)
        dg = tail.copy()
        dg[..., 1:] *= e
        gammas._accumulate(dg)

    return Tensor(out, (gammas,), bw)


def _bounds(h: np.ndarray, y: np.ndarray):
    n, km1 = h.shape
    rows = np.arange(n)
    upper = np.where(y < km1, h[rows, np.minimum(y, km1 - 1)], np.inf)
    lower = np.where(y > 0, h[rows, np.maximum(y - 1, 0)], -np.inf)
    return rows, upper, lower


def ordinal_loglik(h: Tensor, y, dist: LatentDistribution) -> Tensor:
    """Per-observation log-likelihood ``log p_{y_i}`` given shifted cutpoints ``h`` (N, K-1)."""
    y = np.asarray(y, dtype=np.int64)
    km1 = h.shape[1]
    if np.any((y < 0) | (y > km1)):
        raise ValueError(f"class indices must lie in 0..{km1}")
    rows, upper, lower = _bounds(h.data, y)
    p_raw = dist.interval_prob(lower, upper)
    p = clamp_prob(p_raw)
    active = (p_raw > PROB_FLOOR) & (p_raw < 1.0 - PROB_FLOOR)

    def bw(g):
        scale = np.where(active, g / p, 0.0)
        dh = np.zeros_like(h.data)
        has_up = y < km1
        has_low = y > 0
        f_up = dist.pdf(np.where(has_up, upper, 0.0))
        f_low = dist.pdf(np.where(has_low, lower, 0.0))
        np.add.at(dh, (rows[has_up], y[has_up]), (scale * f_up)[has_up])
        np.add.at(dh, (rows[has_low], y[has_low] - 1), -(scale * f_low)[has_low])
        h._accumulate(dh)

    return Tensor(np.log(p), (h,), bw)


def class_probs_from_cutpoints(h, dist: LatentDistribution | str = "logistic",
                               clamp: bool = True) -> np.ndarray:
    """Class probabilities from (already shifted) cutpoints, shape (..., K)."""
    dist = get_latent(dist)
    h = np.asarray(h, dtype=np.float64)
    lo = np.concatenate([np.full(h.shape[:-1] + (1,), -np.inf), h], axis=-1)
    hi = np.concatenate([h, np.full(h.shape[:-1] + (1,), np.inf)], axis=-1)
    p = dist.interval_prob(lo, hi)
    return clamp_prob(p) if clamp else p


def ordinal_class_probs(cutpoints: CutpointVector | np.ndarray, shift=0.0,
                        dist: LatentDistribution | str = "logistic",
                        clamp: bool = True) -> np.ndarray:
    thetas = cutpoints.thetas if isinstance(cutpoints, CutpointVector) else np.asarray(cutpoints)
    shift = np.asarray(shift, dtype=np.float64)
    h = thetas - shift[..., None] if shift.ndim else thetas - shift
    return class_probs_from_cutpoints(h, dist, clamp)


def nll(contributions) -> float:
    c = np.asarray(contributions, dtype=np.float64).ravel()
    if c.size == 0:
        raise ValueError("nll of an empty set of contributions")
    return float(-c.mean())


def log_prob_of_class(probs, y) -> np.ndarray:
    probs = np.asarray(probs)
    return np.log(clamp_prob(probs[np.arange(len(probs)), np.asarray(y)]))


def censored_log_prob(h_at_upper, h_at_lower, dist: LatentDistribution | str = "logistic"):
    """log(F_Z(h(upper)) - F_Z(h(lower))) for an interval-censored observation."""
    dist = get_latent(dist)
    hu = np.asarray(h_at_upper, dtype=np.float64)
    hl = np.asarray(h_at_lower, dtype=np.float64)
    if np.any(hl >= hu):
        raise ValueError("censoring interval is empty or inverted")
    return np.log(clamp_prob(dist.interval_prob(hl, hu)))


def collapse_to_binary(probs, cut_after: int = 2) -> tuple:
    """(P(Y <= cut_after), P(Y > cut_after)); ``cut_after=2`` is mRS 0-2 vs 3-6."""
    probs = np.asarray(probs, dtype=np.float64)
    K = probs.shape[-1]
    if not 0 <= cut_after <= K - 2:
        raise ValueError(f"cut_after must be in 0..{K - 2}, got {cut_after}")
    fav = probs[..., :cut_after + 1].sum(axis=-1)
    unfav = probs[..., cut_after + 1:].sum(axis=-1)
    return fav, unfav


# ---------------------------------------------------------------------------
# continuous outcomes: Bernstein polynomial baseline transformation


def bernstein_basis(t, order: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[..., None]
    j = np.arange(order + 1)
    return comb(order, j) * t ** j * (1.0 - t) ** (order - j)


@dataclass
class BernsteinBasis:
    order: int
    lower: float
    upper: float
    raw: np.ndarray  # unconstrained; coefficients are raw[0] + cumsum(exp(raw[1:]))

    @classmethod
    def for_outcome(cls, y, order: int = 6, expand: float = 0.01) -> "BernsteinBasis":
        y = np.asarray(y, dtype=np.float64)
        lo, hi = float(y.min()), float(y.max())
        pad = expand * (hi - lo)
        return cls(order, lo - pad, hi + pad, np.zeros(order + 1))

    @classmethod
    def from_coefficients(cls, coefs, lower: float, upper: float) -> "BernsteinBasis":
        coefs = np.asarray(coefs, dtype=np.float64)
        return cls(len(coefs) - 1, lower, upper, gammas_from_thetas(coefs))

    @property
    def coefficients(self) -> np.ndarray:
        return thetas_from_gammas(self.raw)

    def _t(self, y, warn: bool = True):
        y = np.asarray(y, dtype=np.float64)
        outside = (y < self.lower) | (y > self.upper)
        if warn and np.any(outside):
            warnings.warn(f"{int(outside.sum())} outcome value(s) clamped to the Bernstein support",
                          RuntimeWarning, stacklevel=3)
        y = np.clip(y, self.lower, self.upper)
        return (y - self.lower) / (self.upper - self.lower)

    def basis(self, y) -> np.ndarray:
        return bernstein_basis(self._t(y), self.order)

    def deriv_basis(self, y) -> np.ndarray:
        """Rows map coefficient vectors to h'(y)."""
        t = self._t(y, warn=False)
        low = bernstein_basis(t, self.order - 1) * self.order / (self.upper - self.lower)
        d = np.zeros(low.shape[:-1] + (self.order + 1,))
        d[..., 1:] += low
        d[..., :-1] -= low
        return d

    def h(self, y) -> np.ndarray:
        return self.basis(y) @ self.coefficients

    def h_prime(self, y) -> np.ndarray:
        return self.deriv_basis(y) @ self.coefficients


def exact_log_density(basis: BernsteinBasis, shift, y, dist: LatentDistribution | str = "logistic"):
    """log f_Y(y) = log f_Z(h0(y) - shift) + log h0'(y)."""
    dist = get_latent(dist)
    deriv = basis.h_prime(y)
    return dist.log_pdf(basis.h(y) - np.asarray(shift)) + np.log(deriv)


def exact_loglik(raw: Tensor, shift: Tensor | None, y, basis: BernsteinBasis,
                 dist: LatentDistribution) -> Tensor:
    """Tape version of :func:`exact_log_density` differentiable in ``raw`` and ``shift``.

    ``basis`` supplies order and support; its own ``raw`` is ignored.
    """
    y = np.asarray(y, dtype=np.float64)
    A = basis.basis(y)
    D = basis.deriv_basis(y)
    coefs = ordered_cutpoints(raw)
    h0 = Tensor(A) @ coefs.reshape(-1, 1)
    dh = Tensor(D) @ coefs.reshape(-1, 1)
    z = h0 if shift is None else h0 - shift
    return (_log_pdf_op(z, dist) + dh.log()).reshape(-1)


def _log_pdf_op(z: Tensor, dist: LatentDistribution) -> Tensor:
    zd = z.data
    if dist.kind == "logistic":
        dlog = -np.tanh(zd / 2.0)
    elif dist.kind == "normal":
        dlog = -zd
    else:
        dlog = 1.0 - np.exp(zd)
    return Tensor(dist.log_pdf(zd), (z,), lambda g: z._accumulate(g * dlog))
