"""Isotonic calibration of predicted CVR (the CF factor)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def pool_adjacent_violators(values: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit of ``values``."""
    y = np.asarray(values, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if y.shape != w.shape:
        raise ValueError("values and weights differ in length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    # Each block: [weighted mean, total weight, number of points]
    means: list[float] = []
    totals: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        totals.append(float(wi))
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, n2 = means.pop(), totals.pop(), sizes.pop()
            m1, w1, n1 = means.pop(), totals.pop(), sizes.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            totals.append(wt)
            sizes.append(n1 + n2)
    return np.repeat(means, sizes)


@dataclass(frozen=True)
class Calibrator:
    """Monotone pcvr -> calibrated cvr mapping, linear between breakpoints."""

    x: np.ndarray
    y: np.ndarray
    counts: np.ndarray
    identity: bool = False

    def __call__(self, pcvr):
        if self.identity:
            return np.clip(np.asarray(pcvr, dtype=float), 0.0, 1.0)
        return np.interp(pcvr, self.x, self.y)

    def factor(self, pcvr):
        """CF = calibrated / predicted, so CPA * pcvr * CF = CPA * calibrated."""
        p = np.asarray(pcvr, dtype=float)
        cal = self(p)
        safe = np.where(p > 0, p, 1.0)
        return np.where(p > 0, cal / safe, 1.0)

    def to_record(self) -> dict:
        return {"x": self.x.tolist(), "y": self.y.tolist(), "counts": self.counts.tolist(),
                "identity": self.identity}


def identity_calibrator() -> Calibrator:
    return Calibrator(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([0, 0]), identity=True)


def fit_calibrator(pairs: Iterable[tuple[float, float]], n_bins: int = 20, min_pairs: int = 200) -> Calibrator:
    """Bin (pcvr, converted) pairs and fit PAV over the bin means.

    Distinct pcvr values are their own bins when there are at most ``n_bins``
    of them; otherwise bins are equal-count quantiles of pcvr.
    """
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    if len(arr) < min_pairs:
        return identity_calibrator()
    order = np.argsort(arr[:, 0], kind="mergesort")
    p, label = arr[order, 0], arr[order, 1]
    uniq, inverse = np.unique(p, return_inverse=True)
    if len(uniq) <= n_bins:
        bin_of = inverse
    else:
        bin_of = np.minimum((np.arange(len(p)) * n_bins) // len(p), n_bins - 1)
        # keep ties in a single bin
        first_bin_of_value = np.full(len(uniq), -1)
        for b, v in zip(bin_of, inverse):
            if first_bin_of_value[v] < 0:
                first_bin_of_value[v] = b
        bin_of = first_bin_of_value[inverse]
        _, bin_of = np.unique(bin_of, return_inverse=True)
    n = int(bin_of.max()) + 1
    counts = np.bincount(bin_of, minlength=n).astype(float)
    x = np.bincount(bin_of, weights=p, minlength=n) / counts
    y = np.bincount(bin_of, weights=label, minlength=n) / counts
    fitted = pool_adjacent_violators(y, counts)
    return Calibrator(x, np.clip(fitted, 0.0, 1.0), counts.astype(np.int64))


def advertiser_scale(conversions, expected, prior_conversions: float = 20.0,
                     bounds: tuple[float, float] = (0.5, 2.0)) -> np.ndarray:
    """Per-advertiser multiplier on calibrated cvr.

    Observed conversions over the calibrated expectation on the same clicks,
    shrunk toward 1 with ``prior_conversions`` pseudo-counts. Multiplying a
    monotone mapping by a positive constant keeps it monotone.
    """
    c = np.asarray(conversions, dtype=float)
    e = np.asarray(expected, dtype=float)
    ratio = (c + prior_conversions) / (e + prior_conversions)
    return np.clip(ratio, *bounds)
