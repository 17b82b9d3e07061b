"""Markov chain drivers: birth-death-move evolution, simulation, stopped
reconstruction, and the greedy baseline.

One chain owns its state exclusively; independent chains (distinct seeds)
can run in parallel processes.  All randomness flows through a single
seedable 64-bit stream per chain; the per-step draw order is fixed and
documented on :func:`evolution_step`, so identical seed + parameters +
model reproduce identical runs bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._state import ChainCore
from .energy import EnergyModel, encode_model, total_energy
from .errors import ConfigError, InitializationFailure
from .geometry import Configuration, build_tessellation

_TRACE_COLUMNS = ("step", "total", "hardcore_violations", "pair_term")


@dataclass(frozen=True)
class SamplerParams:
    """Proposal constants: activity z, move deviation per axis, mark bound."""

    z: float = 2000.0
    sigma: float = 0.015
    r0: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.z > 0 and self.sigma > 0 and self.r0 > 0):
            raise ConfigError("z, sigma, r0 must all be positive")


@dataclass(frozen=True)
class StoppingCriterion:
    """Stop when the last `window` chain energies span less than `delta`."""

    delta: float
    window: int

    def __post_init__(self):
        if not (self.delta > 0 and self.window > 0):
            raise ConfigError("delta and window must be positive")


def derive_seed(seed: int, tag: int) -> int:
    """Independent stream seed for a sub-task of a run."""
    s = np.array([np.uint64((seed + 0x9E3779B97F4A7C15 * (tag + 1))
                            & (2 ** 64 - 1))], np.uint64)
    return int(K.splitmix64(s))


def hastings_constant(kind: str, n: int, z: float) -> float:
    """Proposal-ratio constant c_k: z/(n+1) for birth, n/z for death,
    1 for move (n = cardinality before the step)."""
    if kind == "birth":
        return z / (n + 1)
    if kind == "death":
        return n / z
    if kind == "move":
        return 1.0
    raise ValueError(f"unknown kind {kind!r}")


def acceptance_probability(kind: str, n: int, z: float,
                           e_before: float, e_after: float) -> float:
    """min(1, c_k * exp(E_before - E_after)) for a single proposal."""
    if e_after == np.inf:
        return 0.0
    h = hastings_constant(kind, n, z) * np.exp(min(e_before - e_after, 700.0))
    return float(min(1.0, h))


class ChainState:
    """Live Markov-chain state: configuration + tessellation caches +
    energy aggregates + RNG stream + counters."""

    def __init__(self, core: ChainCore, model: EnergyModel,
                 params: SamplerParams):
        self._core = core
        self.model = model
        self.params = params

    @classmethod
    def from_configuration(cls, config: Configuration, model: EnergyModel,
                           params: SamplerParams, anchor_every: int = 10_000,
                           seed_tag: int = 2) -> "ChainState":
        core = ChainCore(config.positions.copy(), config.radii.copy(),
                         config.ids.copy(), encode_model(model),
                         seed=derive_seed(params.rng_seed, seed_tag),
                         z=params.z, sigma=params.sigma, r0=params.r0,
                         anchor_every=anchor_every)
        core.initialize()
        if core.energy == np.inf:
            raise InitializationFailure(
                "initial configuration is not admissible (infinite energy)")
        return cls(core, model, params)

    @property
    def n(self) -> int:
        return self._core.n

    @property
    def step_count(self) -> int:
        return int(self._core.imeta[3])

    @property
    def energy(self) -> float:
        return self._core.energy

    @property
    def configuration(self) -> Configuration:
        pos, rad, gids = self._core.snapshot_arrays()
        return Configuration.from_arrays(pos, rad, gids)

    @property
    def tessellation(self):
        return build_tessellation(self.configuration)

    @property
    def breakdown(self):
        return total_energy(self.model, self.tessellation)

    def counters(self) -> dict:
        return self._core.counters()

    def fingerprint(self) -> int:
        """Order-independent hash of the configuration (rejection no-ops
        leave it bit-identical)."""
        pos, rad, gids = self._core.snapshot_arrays()
        return hash((pos.tobytes(), rad.tobytes(), gids.tobytes()))


def evolution_step(state: ChainState, model: EnergyModel | None = None,
                   params: SamplerParams | None = None) -> ChainState:
    """One birth/death/move step (mutates and returns the state).

    With probability 1/3 each: birth draws a uniform point and mark and
    accepts with min(1, z/(n+1) * exp(E_b - E_a)); death removes a uniform
    existing point with min(1, n/z * exp(E_b - E_a)); move displaces a
    uniform point by an isotropic Gaussian (sd sigma per axis, wrapped to
    the torus) with a fresh mark and accepts with min(1, exp(E_b - E_a)).
    Accepted births/moves whose tessellation develops empty cells drop the
    affected generators permanently.  Proposals with infinite energy, death
    or move on an empty configuration, and coincident positions are rejected
    outright.

    Stream consumption per step: one uniform for the kind, the proposal
    draws (birth x,y,z,mark; death index; move index, three normals via
    inverse CDF, mark), then one acceptance uniform unless the proposal was
    rejected outright.
    """
    if model is not None and model is not state.model:
        raise ConfigError("state is bound to a different model")
    if params is not None and params != state.params:
        raise ConfigError("state is bound to different sampler parameters")
    state._core.step()
    return state


@dataclass
class Diagnostics:
    """Per-run bookkeeping shared by all drivers."""

    steps: int
    runtime_seconds: float
    counters: dict
    trace: np.ndarray
    trace_columns: tuple
    cardinality: np.ndarray | None = None
    termination: str = "steps_exhausted"
    final_energy: float = 0.0
    final_components: dict = field(default_factory=dict)

    @property
    def acceptance_rates(self) -> dict:
        out = {}
        for k in ("birth", "death", "move"):
            p = self.counters["proposed"][k]
            out[k] = self.counters["accepted"][k] / p if p else 0.0
        return out


def _trace_columns(model: EnergyModel) -> tuple:
    cols = list(_TRACE_COLUMNS)
    cols += [f"recon_term_{i + 1}" for i in range(len(model.reconstructing))]
    cols.append("n_cells")
    return tuple(cols)


def _pack_trace(model, blocks):
    k = len(model.reconstructing)
    keep = [0, 1, 2, 3] + [4 + i for i in range(k)] + [4 + K.KMAX]
    if blocks:
        return np.vstack(blocks)[:, keep]
    return np.zeros((0, len(keep)))


def _final_components(state: ChainState) -> dict:
    total, comp = state._core.energy_components()
    out = {"total": float(state.energy), "pair": float(comp[0])}
    for i in range(len(state.model.reconstructing)):
        out[f"recon_{i + 1}"] = float(comp[1 + i])
    return out


def simulate(model: EnergyModel, params: SamplerParams, steps: int,
             initial: Configuration, log_every: int = 1000,
             record_cardinality: bool = False):
    """Run the evolution step `steps` times (simulation driver).

    Returns (final configuration, Diagnostics).
    """
    t0 = time.perf_counter()
    state = ChainState.from_configuration(initial, model, params)
    blocks = []
    cards = []
    done = 0
    while done < steps:
        n = min(ChainCore.BLOCK, steps - done)
        stopped, d, trace, card = state._core.run_block(
            n, log_every=log_every, record_cardinality=record_cardinality)
        blocks.append(trace)
        if record_cardinality:
            cards.append(card)
        done += d
    diag = Diagnostics(
        steps=done, runtime_seconds=time.perf_counter() - t0,
        counters=state.counters(), trace=_pack_trace(model, blocks),
        trace_columns=_trace_columns(model),
        cardinality=np.concatenate(cards) if cards else None,
        termination="steps_exhausted", final_energy=state.energy,
        final_components=_final_components(state))
    return state.configuration, diag


def reconstruct(model: EnergyModel, params: SamplerParams,
                stop: StoppingCriterion, initial: Configuration,
                cap: int = 10_000_000, log_every: int = 1000):
    """Run until the stopping criterion fires (or the hard cap).

    The criterion holds when the last `stop.window` post-step energies span
    less than `stop.delta`.  Returns (final configuration, Diagnostics) with
    termination "stopping_criterion" or "cap_reached".
    """
    if not model.reconstructing:
        raise ConfigError("reconstruct needs at least one reconstructing "
                          "potential in the model")
    t0 = time.perf_counter()
    state = ChainState.from_configuration(initial, model, params)
    blocks = []
    done = 0
    stopped = False
    while done < cap and not stopped:
        n = min(ChainCore.BLOCK, cap - done)
        stopped, d, trace, _ = state._core.run_block(
            n, log_every=log_every, stop=(stop.delta, stop.window))
        blocks.append(trace)
        done += d
    diag = Diagnostics(
        steps=done, runtime_seconds=time.perf_counter() - t0,
        counters=state.counters(), trace=_pack_trace(model, blocks),
        trace_columns=_trace_columns(model),
        termination="stopping_criterion" if stopped else "cap_reached",
        final_energy=state.energy,
        final_components=_final_components(state))
    return state.configuration, diag


def greedy_reconstruct(model: EnergyModel, params: SamplerParams,
                       n_points: int, patience: int, initial: Configuration,
                       budget: int = 10_000, cap: int = 10_000_000,
                       log_every: int = 1000):
    """Greedy baseline: replace one uniformly chosen generator per iteration
    by a fresh uniform marked point conditioned (by rejection sampling, at
    most `budget` draws) on generating a nonempty cell; keep the replacement
    only on a strict energy decrease.  Stops after `patience` consecutive
    iterations without a replacement.  Cardinality stays exactly n_points.
    """
    if initial.n != n_points:
        raise ConfigError(f"initial configuration has {initial.n} points, "
                          f"expected exactly {n_points}")
    tess = build_tessellation(initial)
    if tess.excluded_ids:
        raise ConfigError("greedy initial configuration must generate only "
                          "nonempty cells")
    if not model.needs_tessellation():
        raise ConfigError("greedy reconstruction needs a non-null model")
    t0 = time.perf_counter()
    state = ChainState.from_configuration(initial, model, params)
    blocks = []
    done = 0
    converged = False
    while done < cap and not converged:
        n = min(ChainCore.BLOCK, cap - done)
        converged, d, trace = state._core.run_greedy_block(
            n, patience=patience, budget=budget, log_every=log_every)
        blocks.append(trace)
        done += d
    diag = Diagnostics(
        steps=done, runtime_seconds=time.perf_counter() - t0,
        counters=state.counters(), trace=_pack_trace(model, blocks),
        trace_columns=_trace_columns(model),
        termination="quiet_window" if converged else "cap_reached",
        final_energy=state.energy,
        final_components=_final_components(state))
    return state.configuration, diag


# ---------------------------------------------------------------------------
# admissible initial configurations
# ---------------------------------------------------------------------------

def _draw_uniform(rngs, n, r0):
    pos = np.zeros((n, 3))
    rad = np.zeros(n)
    K.sample_uniform_marked(rngs, n, r0, pos, rad)
    return pos, rad


class _RepairScratch:
    """Reusable kernel buffers for the admissibility repair loop."""

    def __init__(self, capacity):
        from ._state import alloc_tess, alloc_workspace
        self.nc = capacity
        self.tes = alloc_tess(capacity)
        self.ws = alloc_workspace()
        self.ghead = np.full(K.GRID_MMAX ** 3, -1, np.int32)
        self.gnext = np.full(capacity, -1, np.int32)
        self.imeta = np.zeros(64, np.int64)
        self.fmeta = np.zeros(16, np.float64)

    def build(self, pos, rad):
        """Full kernel build; returns (vol, hmin, hmax, bary) row views."""
        n = len(rad)
        if n > self.nc - 2:
            self.__init__(2 * n + 64)
        p = np.zeros((self.nc, 3))
        r = np.zeros(self.nc)
        p[:n] = pos
        r[:n] = rad
        g = np.arange(self.nc, dtype=np.int64)
        id2idx = np.arange(self.nc, dtype=np.int32)
        self.imeta[0] = n
        self.imeta[2] = K.grid_resolution(n)
        self.fmeta[3] = 0.0
        K.grid_build(p, n, int(self.imeta[2]), self.ghead, self.gnext)
        st = K.full_build((p, r, g, id2idx), (self.ghead, self.gnext),
                          self.tes, self.ws, self.imeta, self.fmeta)
        if st != K.OK:
            from ._state import raise_kernel_error
            raise_kernel_error(st)
        vol, hmin, hmax = self.tes[0], self.tes[3], self.tes[4]
        return vol[:n], hmin[:n], hmax[:n], self.tes[1][:n]


def initial_admissible(model: EnergyModel, params: SamplerParams,
                       target_n: int | None = None, max_rounds: int = 400,
                       fixed_cardinality: bool = False) -> Configuration:
    """Construct a configuration with finite energy.

    Samples `target_n` (default round(z)) uniform marked points, then
    repairs: generators of empty cells are dropped, cells that trip the
    lower hardcore bound lose their generator, and cells that trip the
    upper/shape bounds receive an extra generator near their barycenter
    (or, with fixed_cardinality, the offender is resampled uniformly so the
    count never changes).  Fails after `max_rounds` sweeps.
    """
    target = int(target_n) if target_n is not None else int(round(params.z))
    if target < 1:
        raise InitializationFailure("target cardinality must be >= 1")
    rngs = np.zeros(4, np.uint64)
    K.rng_seed(rngs, np.uint64(derive_seed(params.rng_seed, 1)))
    pos, rad = _draw_uniform(rngs, target, params.r0)
    hc = model.hardcore
    scratch = _RepairScratch(2 * target + 64)
    for _ in range(max_rounds):
        n = len(rad)
        vol, hmin, hmax, bary = scratch.build(pos, rad)
        empty = vol <= 0.0
        live = ~empty
        bad_small = np.zeros(n, bool)
        bad_large = np.zeros(n, bool)
        if hc.alpha is not None:
            bad_small |= live & (hmin <= hc.alpha)
        if hc.beta is not None:
            bad_large |= live & (hmax >= hc.beta)
        if hc.b_shape is not None:
            bad_large |= live & (hmax ** 3 >= hc.b_shape * vol)
        bad_large &= ~bad_small
        if not (empty.any() or bad_small.any() or bad_large.any()):
            config = Configuration.from_arrays(pos, rad)
            bd = total_energy(model, build_tessellation(config))
            if bd.total < np.inf:
                return config
            raise InitializationFailure(
                "hardcore-admissible configuration still has infinite "
                "energy (insufficient cells for a reconstructing statistic)")
        if fixed_cardinality:
            resample = empty | bad_small | bad_large
            for i in np.flatnonzero(resample):
                p1, r1 = _draw_uniform(rngs, 1, params.r0)
                pos[i] = p1[0]
                rad[i] = r1[0]
            continue
        keep = ~(empty | bad_small)
        new_pos = [pos[i] for i in np.flatnonzero(keep)]
        new_rad = [rad[i] for i in np.flatnonzero(keep)]
        for i in np.flatnonzero(bad_large):
            jitter = _draw_uniform(rngs, 1, params.r0)[0][0] - 0.5
            p = (bary[i] + hmax[i] * jitter) % 1.0
            p[p >= 1.0] = 0.0
            new_pos.append(p)
            # splitting mark matches the cell owner's so the radical plane
            # bisects and the split cannot come up empty
            new_rad.append(rad[i])
        if not new_pos:
            raise InitializationFailure(
                "hardcore repair removed every generator")
        pos, rad = np.array(new_pos), np.array(new_rad)
    raise InitializationFailure(
        f"no admissible configuration within {max_rounds} repair sweeps "
        "(hardcore parameters may be infeasible)")
