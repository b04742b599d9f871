"""Seasonal decomposition, series adjustment and min-max normalization."""

from dataclasses import dataclass

import numpy as np

from addd.errors import InvalidInputError, ShapeError

SEASONAL = "seasonal"
DESEASONALIZED = "deseasonalized"
NONE = "none"


@dataclass(frozen=True)
class Decomposition:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int
    template: np.ndarray  # seasonal value per phase, phase = index % period

    @property
    def level(self):
        return float(np.mean(self.trend))


def _centered_moving_average(x, period):
    """Centered MA; even windows use the usual 2 x period weighting."""
    if period % 2:
        w = np.full(period, 1.0 / period)
    else:
        w = np.full(period + 1, 1.0 / period)
        w[0] = w[-1] = 0.5 / period
    half = len(w) // 2
    valid = np.convolve(x, w, mode="valid")
    trend = np.empty_like(x)
    trend[half : half + len(valid)] = valid
    trend[:half] = valid[0]
    trend[half + len(valid) :] = valid[-1]
    return trend, half


def stl_decompose(series, period):
    """Additive trend/seasonal/residual split of ``series``.

    The trend is a centered moving average over one period (edges replicate
    the nearest interior value), the seasonal part is the per-phase mean of
    the detrended interior, centered to zero mean.
    """
    x = np.asarray(series, dtype=np.float64)
    period = int(period)
    if x.ndim != 1:
        raise ShapeError("series must be one-dimensional")
    if period < 2 or len(x) < 2 * period:
        raise InvalidInputError(f"series of length {len(x)} is too short for period {period}")
    trend, half = _centered_moving_average(x, period)
    detrended = x - trend
    phases = np.arange(len(x)) % period
    interior = np.zeros(len(x), dtype=bool)
    interior[half : len(x) - half] = True
    sums = np.bincount(phases[interior], weights=detrended[interior], minlength=period)
    counts = np.bincount(phases[interior], minlength=period)
    template = sums / counts
    template -= template.mean()
    seasonal = template[phases]
    residual = x - trend - seasonal
    return Decomposition(trend, seasonal, residual, period, template)


def adjust(series, decomposition, keep=SEASONAL):
    """Strip components from ``series`` according to ``keep``.

    ``keep="seasonal"`` returns the seasonal pattern plus the mean trend
    level (trend variation and residual removed). ``keep="deseasonalized"``
    removes the seasonal pattern instead and returns trend plus residual.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.shape != decomposition.trend.shape:
        raise ShapeError(f"series shape {x.shape} does not match decomposition {decomposition.trend.shape}")
    if keep == SEASONAL:
        return decomposition.seasonal + decomposition.level
    if keep == DESEASONALIZED:
        return x - decomposition.seasonal
    raise ValueError(f"unknown keep mode {keep!r}")


class StreamAdjuster:
    """Causal per-sample adjustment using a decomposition fitted offline.

    In ``deseasonalized`` mode the fitted seasonal template is subtracted at
    the sample's phase; ``none`` passes values through. Only the phase of
    the global step index is needed, so no future data is ever used.
    """

    def __init__(self, template, period, mode=DESEASONALIZED):
        if mode not in (DESEASONALIZED, NONE):
            raise ValueError(f"unsupported streaming mode {mode!r}")
        self.template = np.asarray(template, dtype=np.float64)
        self.period = int(period)
        self.mode = mode

    @classmethod
    def fit(cls, series, period, mode=DESEASONALIZED):
        dec = stl_decompose(series, period)
        return cls(dec.template, period, mode)

    def transform(self, value, t):
        if self.mode == NONE:
            return float(value)
        return float(value) - self.template[int(t) % self.period]

    def transform_series(self, values, start=0):
        x = np.asarray(values, dtype=np.float64)
        if self.mode == NONE:
            return x.copy()
        idx = (np.arange(len(x)) + int(start)) % self.period
        return x - self.template[idx]


@dataclass(frozen=True)
class Normalizer:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise InvalidInputError(f"degenerate range [{self.min}, {self.max}]")

    def apply(self, value):
        v = (np.asarray(value, dtype=np.float64) - self.min) / (self.max - self.min)
        v = np.clip(v, 0.0, 1.0)
        return float(v) if v.ndim == 0 else v


def fit_normalizer(pretrain_series):
    x = np.asarray(pretrain_series, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("cannot fit a normalizer on an empty series")
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise InvalidInputError("cannot fit a normalizer on a constant series")
    return Normalizer(lo, hi)


def apply(normalizer, value):
    return normalizer.apply(value)
