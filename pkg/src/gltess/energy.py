"""Energy models over periodic tessellations.

A model bundles an optional hardcore constraint (cells not too small, not
too large, not too misshapen), an optional capped neighbour-volume-ratio
pair potential, and any number of reconstructing potentials that pull a
sample statistic (mean, variance, or full histogram) of a cell or pair
characteristic toward a target.  The total is

    E = hardcore + theta_pair * sum_pairs min(NVR, K)
        + sum_i theta_i * sqrt(|T_i - target_i|)      (mean / variance)
        + sum_i theta_i * sqrt(dsc(H_i, H'_i))        (histogram)

with each unordered pair of face-adjacent cells contributing exactly once.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import _state as S
from .characteristics import (CharacteristicKind, Histogram, discrepancy,
                              extract, histogram, nvr, sample_mean,
                              sample_variance, vol_diff)
from .errors import ConfigError, InsufficientData, NonPositiveVolume
from .geometry import (Configuration, ConfigurationChange, Tessellation,
                       apply_change)


class Functional(enum.Enum):
    MEAN = "mean"
    VARIANCE = "variance"
    DSC = "dsc"


@dataclass(frozen=True)
class HardcoreParams:
    """Thresholds on barycenter-to-face-plane distances; None disables.

    alpha: reject cells with h_min <= alpha (cells too small / thin)
    beta:  reject cells with h_max >= beta  (cells too large)
    b_shape: reject cells with h_max^3 >= b_shape * volume (too irregular)
    """

    alpha: float | None = None
    beta: float | None = None
    b_shape: float | None = None

    def __post_init__(self):
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.b_shape is not None and not self.b_shape > 0:
            raise ConfigError("b_shape must be positive")
        if self.alpha is not None and self.beta is not None \
                and not self.alpha < self.beta:
            raise ConfigError("need 0 < alpha < beta")

    @property
    def enabled(self) -> bool:
        return (self.alpha is not None or self.beta is not None
                or self.b_shape is not None)


@dataclass(frozen=True)
class PairPotentialSpec:
    """Capped neighbour-volume-ratio pair potential with weight theta."""

    theta: float
    cap: float = 100.0

    def __post_init__(self):
        if not self.cap > 0:
            raise ConfigError("cap must be positive")


@dataclass(frozen=True)
class ReconstructingPotentialSpec:
    """Full-tessellation potential sqrt(|T(s) - s0|) or sqrt(dsc(H, H'))."""

    kind: CharacteristicKind
    functional: Functional
    theta: float
    target_value: float | None = None
    target_hist: Histogram | None = None

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise ConfigError("theta must be finite")
        if self.functional is Functional.DSC:
            if self.target_hist is None or self.target_hist.total <= 0:
                raise ConfigError("dsc functional needs a target histogram "
                                  "with positive mass")
        else:
            if self.target_value is None:
                raise ConfigError(f"{self.functional.value} functional needs "
                                  "a target value")


@dataclass(frozen=True)
class EnergyModel:
    hardcore: HardcoreParams = HardcoreParams()
    pair: PairPotentialSpec | None = None
    reconstructing: tuple = ()
    activity: float = 2000.0

    def __post_init__(self):
        if not self.activity > 0:
            raise ConfigError("activity must be positive")
        if len(self.reconstructing) > K.KMAX:
            raise ConfigError(f"at most {K.KMAX} reconstructing potentials")
        for spec in self.reconstructing:
            if spec.functional is Functional.DSC \
                    and spec.target_hist.n_bins > K.JMAX:
                raise ConfigError(f"at most {K.JMAX} histogram bins")

    @classmethod
    def null(cls, activity: float = 2000.0) -> "EnergyModel":
        """The E == 0 model."""
        return cls(activity=activity)

    @property
    def is_null(self) -> bool:
        return not self.needs_tessellation()

    def needs_tessellation(self) -> bool:
        return (self.hardcore.enabled or self.pair is not None
                or len(self.reconstructing) > 0)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Raw potential terms plus the weighted total (inf when inadmissible)."""

    hardcore_finite: bool
    pair_sum: float
    reconstructing_terms: tuple
    total: float


# ---------------------------------------------------------------------------
# potential evaluation (batch reference path)
# ---------------------------------------------------------------------------

def hardcore_value(cell, params: HardcoreParams) -> float:
    """0 for admissible cells, +inf when any enabled threshold trips
    (boundaries inclusive)."""
    if params.alpha is not None and cell.h_min <= params.alpha:
        return math.inf
    if params.beta is not None and cell.h_max >= params.beta:
        return math.inf
    if params.b_shape is not None and \
            cell.h_max ** 3 >= params.b_shape * cell.volume:
        return math.inf
    return 0.0


def capped_nvr(v1: float, v2: float, cap: float) -> float:
    if not cap > 0:
        raise NonPositiveVolume("cap must be positive")
    return min(nvr(v1, v2), cap)


def current_histogram(spec: ReconstructingPotentialSpec,
                      tess: Tessellation) -> Histogram:
    return histogram(extract(spec.kind, tess), spec.target_hist.breaks)


def reconstructing_value(spec: ReconstructingPotentialSpec,
                         tess: Tessellation) -> float:
    """Unweighted value of one reconstructing potential on a tessellation."""
    if spec.functional is Functional.DSC:
        return math.sqrt(discrepancy(current_histogram(spec, tess),
                                     spec.target_hist))
    values = extract(spec.kind, tess)
    if spec.functional is Functional.MEAN:
        t = sample_mean(values)
    else:
        t = sample_variance(values)
    return math.sqrt(abs(t - spec.target_value))


def total_energy(model: EnergyModel, tess: Tessellation) -> EnergyBreakdown:
    """Evaluate the periodic energy from scratch (reference path).

    Each cell contributes once; each unordered face-adjacent pair once.
    """
    for cell in tess.cells.values():
        if hardcore_value(cell, model.hardcore) == math.inf:
            return EnergyBreakdown(False, 0.0, (), math.inf)
    pair_sum = 0.0
    if model.pair is not None:
        for a, b in tess.neighbor_pairs:
            pair_sum += capped_nvr(tess.cells[a].volume,
                                   tess.cells[b].volume, model.pair.cap)
    terms = []
    total = (model.pair.theta * pair_sum) if model.pair is not None else 0.0
    for spec in model.reconstructing:
        try:
            v = reconstructing_value(spec, tess)
        except InsufficientData:
            return EnergyBreakdown(True, pair_sum, (), math.inf)
        terms.append(v)
        total += spec.theta * v
    return EnergyBreakdown(True, pair_sum, tuple(terms), total)


# ---------------------------------------------------------------------------
# kernel encoding
# ---------------------------------------------------------------------------

_KIND_CODE = {
    CharacteristicKind.NOF: K.CH_NOF,
    CharacteristicKind.VOL: K.CH_VOL,
    CharacteristicKind.NVR: K.CH_NVR,
    CharacteristicKind.VOL_DIFF: K.CH_VOLDIFF,
    CharacteristicKind.RADIUS: K.CH_RADIUS,
}
_FUNC_CODE = {
    Functional.MEAN: K.F_MEAN,
    Functional.VARIANCE: K.F_VARIANCE,
    Functional.DSC: K.F_DSC,
}


def encode_model(model: EnergyModel):
    """Flatten an EnergyModel into the kernel's array encoding."""
    enc = S.null_model_encoding()
    hc, pairp, rk_kind, rk_func, rk_theta, rk_s0, rk_J, rk_breaks, \
        rk_target, imod = enc
    if model.hardcore.alpha is not None:
        hc[0] = model.hardcore.alpha
    if model.hardcore.beta is not None:
        hc[1] = model.hardcore.beta
    if model.hardcore.b_shape is not None:
        hc[2] = model.hardcore.b_shape
    if model.pair is not None:
        imod[0] = 1
        pairp[0] = model.pair.theta
        pairp[1] = model.pair.cap
    imod[1] = len(model.reconstructing)
    for t, spec in enumerate(model.reconstructing):
        rk_kind[t] = _KIND_CODE[spec.kind]
        rk_func[t] = _FUNC_CODE[spec.functional]
        rk_theta[t] = spec.theta
        if spec.functional is Functional.DSC:
            h = spec.target_hist
            J = h.n_bins
            rk_J[t] = J
            rk_breaks[t, :J + 1] = h.breaks
            rk_target[t, :J] = h.relative()
        else:
            rk_s0[t] = spec.target_value
    imod[2] = 1 if model.needs_tessellation() else 0
    return enc


# ---------------------------------------------------------------------------
# incremental evaluation over explicit tessellation states
# ---------------------------------------------------------------------------

class ChainEnergyState:
    """Configuration + tessellation + cached breakdown + the running
    aggregates a proposal delta needs (sums for moments, bin counts for
    histogram discrepancies, the pair-potential sum)."""

    def __init__(self, model: EnergyModel, config: Configuration,
                 tess: Tessellation):
        self.model = model
        self.configuration = config
        self.tessellation = tess
        self._build_aggregates()

    def _build_aggregates(self):
        model, tess = self.model, self.tessellation
        self.n_cells = len(tess.cells)
        self.pair_sum = 0.0
        if model.pair is not None:
            for a, b in tess.neighbor_pairs:
                self.pair_sum += capped_nvr(tess.cells[a].volume,
                                            tess.cells[b].volume,
                                            model.pair.cap)
        self.sums = []
        self.bins = []
        for spec in model.reconstructing:
            values = extract(spec.kind, tess)
            if spec.functional is Functional.DSC:
                self.bins.append(histogram(values, spec.target_hist.breaks)
                                 .counts.copy())
                self.sums.append(None)
            else:
                self.sums.append([len(values), float(values.sum()),
                                  float((values ** 2).sum())])
                self.bins.append(None)
        self.breakdown = self._breakdown()

    def _cell_values(self, spec, cell):
        if spec.kind is CharacteristicKind.NOF:
            return float(cell.nof)
        if spec.kind is CharacteristicKind.VOL:
            return cell.volume
        return self.tessellation.radius_of(cell.generator_id)

    def _breakdown(self) -> EnergyBreakdown:
        model = self.model
        hard_ok = all(hardcore_value(c, model.hardcore) == 0.0
                      for c in self.tessellation.cells.values())
        if not hard_ok:
            return EnergyBreakdown(False, self.pair_sum, (), math.inf)
        total = model.pair.theta * self.pair_sum if model.pair else 0.0
        terms = []
        for spec, ssum, sbin in zip(model.reconstructing, self.sums,
                                    self.bins):
            if spec.functional is Functional.DSC:
                s = sbin.sum()
                if s <= 0:
                    return EnergyBreakdown(True, self.pair_sum, (), math.inf)
                d = float(np.abs(sbin / s - spec.target_hist.relative()).sum())
                v = math.sqrt(d)
            else:
                cnt, s1, s2 = ssum
                if spec.functional is Functional.MEAN:
                    if cnt < 1:
                        return EnergyBreakdown(True, self.pair_sum, (),
                                               math.inf)
                    t = s1 / cnt
                else:
                    if cnt < 2:
                        return EnergyBreakdown(True, self.pair_sum, (),
                                               math.inf)
                    t = (s2 - s1 * s1 / cnt) / (cnt - 1)
                v = math.sqrt(abs(t - spec.target_value))
            terms.append(v)
            total += spec.theta * v
        return EnergyBreakdown(True, self.pair_sum, tuple(terms), total)


def make_energy_state(model: EnergyModel, config: Configuration,
                      tess: Tessellation) -> ChainEnergyState:
    return ChainEnergyState(model, config, tess)


def energy_delta(model: EnergyModel, state: ChainEnergyState,
                 change: ConfigurationChange):
    """Evaluate a change by recomputing only affected cells.

    Returns (breakdown_of_changed_configuration, state_on_accept); the input
    state is untouched, so a rejected proposal simply drops the result.
    """
    old_tess = state.tessellation
    new_tess, new_config = apply_change(old_tess, state.configuration, change)
    new_state = ChainEnergyState.__new__(ChainEnergyState)
    new_state.model = model
    new_state.configuration = new_config
    new_state.tessellation = new_tess
    # cells that changed: apply_change reuses CellGeometry objects verbatim
    removed = [c for gid, c in old_tess.cells.items()
               if new_tess.cells.get(gid) is not c]
    added = [c for gid, c in new_tess.cells.items()
             if old_tess.cells.get(gid) is not c]
    rm_pairs = old_tess.neighbor_pairs - new_tess.neighbor_pairs
    add_pairs = new_tess.neighbor_pairs - old_tess.neighbor_pairs
    keep_pairs = old_tess.neighbor_pairs & new_tess.neighbor_pairs
    changed_ids = {c.generator_id for c in removed} | \
                  {c.generator_id for c in added}
    touched = [(a, b) for a, b in keep_pairs
               if a in changed_ids or b in changed_ids]
    new_state.n_cells = state.n_cells - len(removed) + len(added)
    new_state.pair_sum = state.pair_sum
    if model.pair is not None:
        cap = model.pair.cap
        for a, b in list(rm_pairs) + touched:
            new_state.pair_sum -= capped_nvr(old_tess.cells[a].volume,
                                             old_tess.cells[b].volume, cap)
        for a, b in list(add_pairs) + touched:
            new_state.pair_sum += capped_nvr(new_tess.cells[a].volume,
                                             new_tess.cells[b].volume, cap)
    new_state.sums = []
    new_state.bins = []
    for spec, ssum, sbin in zip(model.reconstructing, state.sums, state.bins):
        if spec.kind.arity == 1:
            rm_vals = [new_state._cell_values(spec, c) for c in removed]
            add_vals = [new_state._cell_values(spec, c) for c in added]
            # radius of a removed generator must come from the old state
            if spec.kind is CharacteristicKind.RADIUS:
                rm_vals = [old_tess.radius_of(c.generator_id)
                           for c in removed]
        else:
            fn = nvr if spec.kind is CharacteristicKind.NVR else vol_diff
            rm_vals = [fn(old_tess.cells[a].volume, old_tess.cells[b].volume)
                       for a, b in list(rm_pairs) + touched]
            add_vals = [fn(new_tess.cells[a].volume,
                           new_tess.cells[b].volume)
                        for a, b in list(add_pairs) + touched]
        if spec.functional is Functional.DSC:
            bins = sbin.copy()
            br = spec.target_hist.breaks
            J = len(br) - 1
            for v in rm_vals:
                bins[min(max(np.searchsorted(br, v, side="right") - 1, 0),
                         J - 1)] -= 1
            for v in add_vals:
                bins[min(max(np.searchsorted(br, v, side="right") - 1, 0),
                         J - 1)] += 1
            new_state.bins.append(bins)
            new_state.sums.append(None)
        else:
            cnt, s1, s2 = ssum
            cnt += len(add_vals) - len(rm_vals)
            s1 += sum(add_vals) - sum(rm_vals)
            s2 += sum(v * v for v in add_vals) - sum(v * v for v in rm_vals)
            new_state.sums.append([cnt, s1, s2])
            new_state.bins.append(None)
    new_state.breakdown = new_state._breakdown()
    return new_state.breakdown, new_state
