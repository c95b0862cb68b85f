"""Categorical value supports and HL-Gauss target projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

MIN_SUPPORT_WIDTH = 1.0


class SupportConfigError(ValueError):
    """Support range or bin count is invalid."""


@dataclass(frozen=True)
class SupportGrid:
    v_min: float
    v_max: float
    m: int

    def __post_init__(self):
        if not (math.isfinite(self.v_min) and math.isfinite(self.v_max)):
            raise SupportConfigError("support bounds must be finite")
        if not self.v_min < self.v_max:
            raise SupportConfigError(f"degenerate support [{self.v_min}, {self.v_max}]")
        if self.m < 2:
            raise SupportConfigError("need at least 2 bins")

    @property
    def width(self) -> float:
        """Bin width."""
        return (self.v_max - self.v_min) / self.m

    @property
    def edges(self) -> np.ndarray:
        return self.v_min + self.width * np.arange(self.m + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.v_min + self.width * (np.arange(self.m) + 0.5)

    def to_dict(self) -> dict:
        return {"v_min": self.v_min, "v_max": self.v_max, "m": self.m}


def make_support(v_min: float, v_max: float, m: int) -> SupportGrid:
    return SupportGrid(float(v_min), float(v_max), int(m))


def universal_support(
    r_min: float, r_max: float, H: int, L: int, gamma1: float, gamma2: float
) -> tuple[float, float]:
    """Bounds on the dual-discounted return of ``ceil(L / H)`` consecutive H-step options.

    The intra-option sum runs over ``gamma1`` for H steps and each option boundary
    multiplies by ``gamma2 ** H``.  Returns the raw bounds; callers widen a
    zero-width result (see :func:`widen`).
    """
    if H < 1:
        raise SupportConfigError("option length must be >= 1")
    if L < H:
        raise SupportConfigError("horizon shorter than one option")
    if not (0.0 < gamma1 < 1.0 and 0.0 < gamma2 < 1.0):
        raise SupportConfigError("discounts must lie in (0, 1)")
    if r_min > r_max:
        raise SupportConfigError("r_min > r_max")
    K = -(-L // H)
    intra = (1.0 - gamma1**H) / (1.0 - gamma1)
    q = gamma2**H
    inter = (1.0 - q**K) / (1.0 - q)
    scale = intra * inter
    return r_min * scale, r_max * scale


def widen(v_min: float, v_max: float, floor: float = MIN_SUPPORT_WIDTH) -> tuple[float, float]:
    """Replace a range narrower than ``floor`` by ``(c - floor, c + floor)`` around its center."""
    if v_max - v_min >= floor:
        return v_min, v_max
    c = 0.5 * (v_min + v_max)
    return c - floor, c + floor


def data_centric_support(returns, pad: float = 0.2, floor: float = MIN_SUPPORT_WIDTH) -> tuple[float, float]:
    """1%/99% return quantiles, widened symmetrically by ``pad`` about their midpoint."""
    x = np.asarray(returns, dtype=np.float64).ravel()
    if x.size == 0:
        raise SupportConfigError("no returns to build a support from")
    lo, hi = np.quantile(x, [0.01, 0.99])
    c = 0.5 * (lo + hi)
    w = 0.5 * (hi - lo) * (1.0 + pad)
    v_min, v_max = widen(c - w, c + w, floor)
    return float(v_min), float(v_max)


def hl_gauss_sigma(grid: SupportGrid, sigma_coef: float = 0.75) -> float:
    return sigma_coef * grid.width


def project_truncated_normal(mu, sigma: float, grid: SupportGrid) -> np.ndarray:
    """Bin masses of N(mu, sigma^2) truncated to the support.

    ``mu`` may be a scalar or an array; the result has an extra trailing axis of
    length ``grid.m`` and each row sums to one.
    """
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    mu = np.asarray(mu, dtype=np.float64)
    # beyond ~30 sigma the truncated mass is entirely in the edge bin; clipping keeps the CDF representable
    mu_c = np.clip(mu, grid.v_min - 30.0 * sigma, grid.v_max + 30.0 * sigma)
    z = (grid.edges - mu_c[..., None]) / sigma
    # difference the CDF on the side of the mean where it is small to avoid cancellation
    upper_side = (mu_c >= 0.5 * (grid.v_min + grid.v_max))[..., None]
    mass = np.where(upper_side, np.diff(ndtr(z), axis=-1), -np.diff(ndtr(-z), axis=-1))
    return mass / mass.sum(axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def dist_mean(probs: np.ndarray, grid: SupportGrid) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != grid.m:
        raise ValueError(f"distribution has {probs.shape[-1]} bins, support has {grid.m}")
    return probs @ grid.centers
