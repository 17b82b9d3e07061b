"""Geometric characteristics of tessellations and their statistics.

Cell-level characteristics (number of faces, volume, generator radius) yield
one value per nonempty cell; pair-level characteristics (neighbour-volume
ratio, cell-volume difference) yield one value per face-adjacent pair of
cells.  Histograms use half-open bins with a closed last bin, and the
discrepancy functional is the L1 distance between relative frequencies.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (BinMismatch, EmptyBreaks, EmptyHistogram,
                     InsufficientData, NonPositiveVolume)
from .geometry import Tessellation


class CharacteristicKind(enum.Enum):
    NOF = "nof"
    VOL = "vol"
    NVR = "nvr"
    VOL_DIFF = "vol_diff"
    RADIUS = "radius"

    @property
    def arity(self) -> int:
        return 2 if self in (CharacteristicKind.NVR,
                             CharacteristicKind.VOL_DIFF) else 1


def nvr(v1: float, v2: float) -> float:
    """Neighbour-volume ratio: sqrt(max/min - 1); symmetric."""
    if not (v1 > 0.0 and v2 > 0.0):
        raise NonPositiveVolume(f"volumes must be positive, got {v1}, {v2}")
    hi, lo = (v1, v2) if v1 >= v2 else (v2, v1)
    return float(np.sqrt(hi / lo - 1.0))


def vol_diff(v1: float, v2: float) -> float:
    """Absolute difference of cell volumes; symmetric."""
    return abs(float(v1) - float(v2))


def extract(kind: CharacteristicKind, tess: Tessellation) -> np.ndarray:
    """Characteristic values in deterministic order: by cell id for
    cell-level kinds, by sorted id pair for pair-level kinds."""
    if kind.arity == 1:
        ids = sorted(tess.cells)
        if kind is CharacteristicKind.NOF:
            return np.array([tess.cells[i].nof for i in ids], dtype=float)
        if kind is CharacteristicKind.VOL:
            return np.array([tess.cells[i].volume for i in ids])
        return np.array([tess.radius_of(i) for i in ids])
    pairs = sorted(tess.neighbor_pairs)
    fn = nvr if kind is CharacteristicKind.NVR else vol_diff
    return np.array([fn(tess.cells[a].volume, tess.cells[b].volume)
                     for a, b in pairs])


@dataclass(frozen=True)
class Histogram:
    """Binned frequencies over strictly increasing break points."""

    breaks: np.ndarray
    counts: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        if breaks.ndim != 1 or len(breaks) < 2 or \
                np.any(np.diff(breaks) <= 0.0):
            raise EmptyBreaks("breaks must be >= 2 strictly increasing reals")
        if len(counts) != len(breaks) - 1 or np.any(counts < 0.0):
            raise EmptyBreaks("counts must be nonnegative, one per bin")
        breaks.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def relative(self) -> np.ndarray:
        s = self.total
        if s <= 0.0:
            raise EmptyHistogram("histogram has zero total mass")
        return self.counts / s

    def scaled(self, k: float) -> "Histogram":
        return Histogram(self.breaks, self.counts * k, self.clamped)


def histogram(values, breaks) -> Histogram:
    """Bin values into [t_{i-1}, t_i) classes (last bin closed).  Values
    outside the break range are clamped into the edge bins and counted in
    the histogram's `clamped` field."""
    breaks = np.asarray(breaks, dtype=float)
    if breaks.ndim != 1 or len(breaks) < 2 or np.any(np.diff(breaks) <= 0.0):
        raise EmptyBreaks("breaks must be >= 2 strictly increasing reals")
    values = np.asarray(values, dtype=float)
    J = len(breaks) - 1
    counts = np.zeros(J)
    clamped = 0
    if values.size:
        idx = np.searchsorted(breaks, values, side="right") - 1
        clamped = int(np.sum((values < breaks[0]) | (values > breaks[-1])))
        idx = np.clip(idx, 0, J - 1)
        counts = np.bincount(idx, minlength=J).astype(float)
    return Histogram(breaks, counts, clamped)


def discrepancy(h1: Histogram, h2: Histogram) -> float:
    """L1 distance between relative-frequency histograms on identical bins;
    zero iff the histograms are proportional, at most 2."""
    if h1.n_bins != h2.n_bins or not np.array_equal(h1.breaks, h2.breaks):
        raise BinMismatch("histograms must share identical breaks")
    return float(np.abs(h1.relative() - h2.relative()).sum())


def sample_mean(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 1:
        raise InsufficientData("mean needs at least one value")
    return float(values.mean())


def sample_variance(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise InsufficientData("variance needs at least two values")
    return float(values.var(ddof=1))


def nof_breaks(lo: int, hi: int) -> np.ndarray:
    """Unit-width integer bins [k-0.5, k+0.5) spanning [lo, hi]."""
    return np.arange(lo, hi + 2) - 0.5


def vol_breaks(max_volume: float, n_bins: int = 20) -> np.ndarray:
    """Equal-width volume bins over [0, 1.1 * max_volume]."""
    return np.linspace(0.0, 1.1 * max_volume, n_bins + 1)


def histogram_to_csv(h: Histogram) -> str:
    total = h.total
    lines = ["bin_left,bin_right,count,relative_frequency"]
    for i in range(h.n_bins):
        rel = h.counts[i] / total if total > 0 else 0.0
        lines.append(f"{h.breaks[i]:.17g},{h.breaks[i + 1]:.17g},"
                     f"{h.counts[i]:.17g},{rel:.17g}")
    return "\n".join(lines) + "\n"


def histogram_from_csv(text: str) -> Histogram:
    rows = [r for r in text.strip().splitlines()[1:] if r]
    lefts, rights, counts = [], [], []
    for r in rows:
        parts = r.split(",")
        lefts.append(float(parts[0]))
        rights.append(float(parts[1]))
        counts.append(float(parts[2]))
    breaks = np.array(lefts + [rights[-1]])
    return Histogram(breaks, np.array(counts))
