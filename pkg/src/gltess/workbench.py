"""Reproducibility surface: datasets, experiment configs, presets, exports.

Experiment configuration files are flat INI (key = value under sections), so
any tooling can parse them.  Generator datasets are CSV files in micrometres
with a sidecar ``<name>.meta`` declaring the cuboidal domain extents.
"""

from __future__ import annotations

import configparser
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .characteristics import (CharacteristicKind, Histogram, discrepancy,
                              extract, histogram, histogram_from_csv,
                              histogram_to_csv, nof_breaks, sample_mean,
                              sample_variance, vol_breaks)
from .energy import (EnergyModel, Functional, HardcoreParams,
                     PairPotentialSpec, ReconstructingPotentialSpec,
                     total_energy)
from .errors import ConfigError, RadiusExceedsR0
from .geometry import Configuration, Tessellation, build_tessellation, \
    export_geometry
from .sampler import (SamplerParams, StoppingCriterion, derive_seed,
                      greedy_reconstruct, initial_admissible, reconstruct,
                      simulate)

_DATA_DIR = Path(__file__).parent / "data"
SAMPLE_DATASET = _DATA_DIR / "sample_generators.csv"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorDataset:
    """Marked generators in micrometres inside a cuboidal domain."""

    positions_um: np.ndarray
    radii_um: np.ndarray
    extents_um: tuple

    def __post_init__(self):
        p = np.asarray(self.positions_um, dtype=float).reshape(-1, 3)
        r = np.asarray(self.radii_um, dtype=float)
        e = tuple(float(x) for x in self.extents_um)
        if any(x <= 0 for x in e):
            raise ConfigError("domain extents must be positive")
        if np.any(r <= 0):
            raise ConfigError("dataset radii must be positive")
        if np.any(p < 0) or np.any(p >= np.array(e)[None, :]):
            raise ConfigError("dataset points must lie inside the extents")
        object.__setattr__(self, "positions_um", p)
        object.__setattr__(self, "radii_um", r)
        object.__setattr__(self, "extents_um", e)

    @property
    def n(self) -> int:
        return len(self.radii_um)

    @property
    def domain_volume_um3(self) -> float:
        ex, ey, ez = self.extents_um
        return ex * ey * ez

    @classmethod
    def from_csv(cls, csv_path) -> "GeneratorDataset":
        csv_path = Path(csv_path)
        meta_path = csv_path.with_suffix(".meta")
        if not meta_path.exists():
            raise ConfigError(f"missing sidecar metadata file {meta_path}")
        meta = configparser.ConfigParser()
        meta.read(meta_path)
        try:
            extents = (meta.getfloat("domain", "x_um"),
                       meta.getfloat("domain", "y_um"),
                       meta.getfloat("domain", "z_um"))
        except (configparser.Error, ValueError) as e:
            raise ConfigError(f"bad metadata in {meta_path}: {e}") from e
        rows = np.genfromtxt(csv_path, delimiter=",", names=True)
        try:
            pos = np.column_stack([rows["x_um"], rows["y_um"], rows["z_um"]])
            rad = np.atleast_1d(rows["radius_um"])
        except (KeyError, ValueError) as e:
            raise ConfigError(
                f"{csv_path} must have header x_um,y_um,z_um,radius_um") from e
        return cls(np.atleast_2d(pos), rad, extents)

    def to_csv(self, csv_path) -> None:
        csv_path = Path(csv_path)
        with open(csv_path, "w") as f:
            f.write("x_um,y_um,z_um,radius_um\n")
            for p, r in zip(self.positions_um, self.radii_um):
                f.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},{r:.17g}\n")
        ex, ey, ez = self.extents_um
        with open(csv_path.with_suffix(".meta"), "w") as f:
            f.write(f"[domain]\nx_um = {ex:.17g}\ny_um = {ey:.17g}\n"
                    f"z_um = {ez:.17g}\n")


@dataclass(frozen=True)
class NormalizationReport:
    axis_scales: tuple
    radius_scale: float
    max_normalized_radius: float


def normalize(dataset: GeneratorDataset, r0: float = 0.2):
    """Map the dataset onto the unit torus: positions per-axis by the domain
    extents, radii by the cube root of the domain volume.

    Raises RadiusExceedsR0 (naming the offending record) when a normalized
    radius exceeds the mark bound r0.
    """
    ex = np.array(dataset.extents_um)
    pos = dataset.positions_um / ex[None, :]
    pos = pos % 1.0
    pos[pos >= 1.0] = 0.0
    rscale = float(np.cbrt(dataset.domain_volume_um3))
    rad = dataset.radii_um / rscale
    big = np.flatnonzero(rad > r0)
    if len(big):
        i = int(big[0])
        raise RadiusExceedsR0(
            f"record {i}: radius {dataset.radii_um[i]} um normalizes to "
            f"{rad[i]:.6g} > r0 = {r0}")
    report = NormalizationReport(
        axis_scales=tuple(1.0 / e for e in ex),
        radius_scale=1.0 / rscale,
        max_normalized_radius=float(rad.max()) if len(rad) else 0.0)
    return Configuration.from_arrays(pos, rad), report


@dataclass(frozen=True)
class BinSpec:
    """Histogram layout used for targets and reconstruction potentials."""

    nof_lo: int = 4
    nof_hi: int = 40
    vol_bins: int = 20
    vol_max: float | None = None  # default: 1.1 * observed max

    def nof(self) -> np.ndarray:
        return nof_breaks(self.nof_lo, self.nof_hi)

    def vol(self, observed_max: float) -> np.ndarray:
        vmax = self.vol_max if self.vol_max is not None else observed_max
        return vol_breaks(vmax, self.vol_bins)


@dataclass(frozen=True)
class SummaryStats:
    """Mean and standard deviation of the standard characteristics."""

    n_cells: int
    n_pairs: int
    radius: tuple
    nof: tuple
    vol: tuple
    vol_diff: tuple
    nvr: tuple

    def as_dict(self) -> dict:
        return {
            "n_cells": self.n_cells, "n_pairs": self.n_pairs,
            "radius_mean": self.radius[0], "radius_sd": self.radius[1],
            "nof_mean": self.nof[0], "nof_sd": self.nof[1],
            "vol_mean": self.vol[0], "vol_sd": self.vol[1],
            "vol_diff_mean": self.vol_diff[0], "vol_diff_sd": self.vol_diff[1],
            "nvr_mean": self.nvr[0], "nvr_sd": self.nvr[1],
        }


def _mean_sd(values):
    if len(values) == 0:
        return (0.0, 0.0)
    sd = sample_variance(values) ** 0.5 if len(values) > 1 else 0.0
    return (sample_mean(values), sd)


def summarize(tess: Tessellation) -> SummaryStats:
    return SummaryStats(
        n_cells=len(tess.cells), n_pairs=len(tess.neighbor_pairs),
        radius=_mean_sd(extract(CharacteristicKind.RADIUS, tess)),
        nof=_mean_sd(extract(CharacteristicKind.NOF, tess)),
        vol=_mean_sd(extract(CharacteristicKind.VOL, tess)),
        vol_diff=_mean_sd(extract(CharacteristicKind.VOL_DIFF, tess)),
        nvr=_mean_sd(extract(CharacteristicKind.NVR, tess)))


def target_histograms(config: Configuration, bins: BinSpec = BinSpec()):
    """Tessellate data generators periodically and bin face counts and cell
    volumes; the summary carries boundary-caveat statistics for validation
    (the bounded-specimen values differ near the domain boundary)."""
    tess = build_tessellation(config)
    if len(tess.cells) < 2:
        raise ConfigError("need at least 2 nonempty cells for targets")
    nofs = extract(CharacteristicKind.NOF, tess)
    vols = extract(CharacteristicKind.VOL, tess)
    h_nof = histogram(nofs, bins.nof())
    h_vol = histogram(vols, bins.vol(float(vols.max())))
    return h_nof, h_vol, summarize(tess)


def reference_nof_histogram(bins: BinSpec = BinSpec(),
                            mean: float = 14.1608,
                            sd: float = 4.8558) -> Histogram:
    """Synthetic grain-statistics target: face-count frequencies from a
    gamma shape with the given first two moments (defaults match a measured
    polycrystal specimen).  Deterministic, used by tests and demos when no
    dataset is supplied."""
    import math
    scale = sd * sd / mean
    shape = mean / scale
    breaks = bins.nof()
    ks = np.arange(bins.nof_lo, bins.nof_hi + 1, dtype=float)
    w = np.array([math.exp((shape - 1.0) * math.log(k) - k / scale
                           - math.lgamma(shape) - shape * math.log(scale))
                  for k in ks])
    return Histogram(breaks, 1000.0 * w / w.sum())


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str                      # simulate | reconstruct | greedy
    model: EnergyModel
    sampler: SamplerParams
    steps: int = 0                 # simulate
    stop: StoppingCriterion | None = None
    cap: int = 10_000_000
    n_points: int = 0              # greedy
    patience: int = 0
    log_every: int = 1000
    chains: int = 1
    out_dir: Path = Path("out")
    target_n: int | None = None
    preset: str | None = None
    dataset: Path | None = None

    def __post_init__(self):
        if self.kind not in ("simulate", "reconstruct", "greedy"):
            raise ConfigError(f"unknown run kind {self.kind!r}")
        if self.kind == "simulate" and self.steps <= 0:
            raise ConfigError("simulate needs steps > 0")
        if self.kind == "reconstruct" and self.stop is None:
            raise ConfigError("reconstruct needs a stopping criterion")
        if self.kind == "greedy" and (self.n_points <= 0 or self.patience <= 0):
            raise ConfigError("greedy needs n_points > 0 and patience > 0")


def _get(cp, section, key, cast, default=None, required=False):
    if cp.has_option(section, key):
        try:
            return cast(cp.get(section, key))
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from e
    if required:
        raise ConfigError(f"missing required option [{section}] {key}")
    return default


_KINDS = {k.value: k for k in CharacteristicKind}
_FUNCS = {f.value: f for f in Functional}


def load_config(path) -> ExperimentConfig:
    """Parse an experiment INI file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    kind = _get(cp, "run", "kind", str, required=True)
    sampler = SamplerParams(
        z=_get(cp, "sampler", "z", float, 2000.0),
        sigma=_get(cp, "sampler", "sigma", float, 0.015),
        r0=_get(cp, "sampler", "r0", float, 0.2),
        rng_seed=_get(cp, "run", "seed", int, 0))
    hardcore = HardcoreParams(
        alpha=_get(cp, "hardcore", "alpha", float),
        beta=_get(cp, "hardcore", "beta", float),
        b_shape=_get(cp, "hardcore", "b", float)) \
        if cp.has_section("hardcore") else HardcoreParams()
    pair = None
    if cp.has_section("pair"):
        pair = PairPotentialSpec(
            theta=_get(cp, "pair", "theta", float, required=True),
            cap=_get(cp, "pair", "cap", float, 100.0))
    recon = []
    for section in sorted(s for s in cp.sections()
                          if s.startswith("potential.")):
        ckind = _get(cp, section, "kind", str, required=True)
        func = _get(cp, section, "functional", str, required=True)
        if ckind not in _KINDS or func not in _FUNCS:
            raise ConfigError(f"[{section}] unknown kind/functional")
        theta = _get(cp, section, "theta", float, required=True)
        tv = _get(cp, section, "target_value", float)
        th = None
        tcsv = _get(cp, section, "target_csv", str)
        if tcsv is not None:
            tpath = Path(tcsv)
            if not tpath.is_absolute():
                tpath = path.parent / tpath
            if not tpath.exists():
                raise ConfigError(f"[{section}] target_csv {tpath} not found")
            th = histogram_from_csv(tpath.read_text())
        recon.append(ReconstructingPotentialSpec(
            kind=_KINDS[ckind], functional=_FUNCS[func], theta=theta,
            target_value=tv, target_hist=th))
    model = EnergyModel(hardcore=hardcore, pair=pair,
                        reconstructing=tuple(recon), activity=sampler.z)
    stop = None
    if cp.has_option("run", "delta"):
        stop = StoppingCriterion(delta=_get(cp, "run", "delta", float),
                                 window=_get(cp, "run", "t", int,
                                             required=True))
    dataset = _get(cp, "dataset", "csv", str) if cp.has_section("dataset") \
        else None
    if dataset is not None:
        dpath = Path(dataset)
        dataset = dpath if dpath.is_absolute() else path.parent / dpath
    return ExperimentConfig(
        kind=kind, model=model, sampler=sampler,
        steps=_get(cp, "run", "steps", int, 0),
        stop=stop, cap=_get(cp, "run", "cap", int, 10_000_000),
        n_points=_get(cp, "run", "n_points", int, 0),
        patience=_get(cp, "run", "patience", int, 0),
        log_every=_get(cp, "run", "log_every", int, 1000),
        chains=_get(cp, "run", "chains", int, 1),
        out_dir=Path(_get(cp, "run", "out", str, "out")),
        target_n=_get(cp, "init", "target_n", int)
        if cp.has_section("init") else None,
        dataset=dataset)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize an ExperimentConfig back to INI text."""
    cp = configparser.ConfigParser()
    cp["run"] = {"kind": cfg.kind, "seed": str(cfg.sampler.rng_seed),
                 "log_every": str(cfg.log_every), "chains": str(cfg.chains),
                 "out": str(cfg.out_dir)}
    if cfg.kind == "simulate":
        cp["run"]["steps"] = str(cfg.steps)
    if cfg.stop is not None:
        cp["run"]["delta"] = repr(cfg.stop.delta)
        cp["run"]["t"] = str(cfg.stop.window)
        cp["run"]["cap"] = str(cfg.cap)
    if cfg.kind == "greedy":
        cp["run"]["n_points"] = str(cfg.n_points)
        cp["run"]["patience"] = str(cfg.patience)
    cp["sampler"] = {"z": repr(cfg.sampler.z),
                     "sigma": repr(cfg.sampler.sigma),
                     "r0": repr(cfg.sampler.r0)}
    hc = cfg.model.hardcore
    if hc.enabled:
        cp["hardcore"] = {}
        if hc.alpha is not None:
            cp["hardcore"]["alpha"] = repr(hc.alpha)
        if hc.beta is not None:
            cp["hardcore"]["beta"] = repr(hc.beta)
        if hc.b_shape is not None:
            cp["hardcore"]["b"] = repr(hc.b_shape)
    if cfg.model.pair is not None:
        cp["pair"] = {"theta": repr(cfg.model.pair.theta),
                      "cap": repr(cfg.model.pair.cap)}
    for i, spec in enumerate(cfg.model.reconstructing):
        sec = f"potential.{i + 1}"
        cp[sec] = {"kind": spec.kind.value,
                   "functional": spec.functional.value,
                   "theta": repr(spec.theta)}
        if spec.target_value is not None:
            cp[sec]["target_value"] = repr(spec.target_value)
        if spec.target_hist is not None:
            cp[sec]["target_csv"] = f"target_{i + 1}.csv"
    if cfg.target_n is not None:
        cp["init"] = {"target_n": str(cfg.target_n)}
    if cfg.dataset is not None:
        cp["dataset"] = {"csv": str(cfg.dataset)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _dataset_targets(dataset_path, r0, bins=BinSpec()):
    ds = GeneratorDataset.from_csv(dataset_path or SAMPLE_DATASET)
    config, _ = normalize(ds, r0=r0)
    return target_histograms(config, bins)


def make_preset(name: str, seed: int = 0, steps: int | None = None,
                out_dir="out", dataset=None) -> ExperimentConfig:
    """Materialize a named experiment preset.

    rt1_* : hardcore + capped-NVR pair potential, simulation run.
    rt2_* : rt1 plus a face-count histogram potential from dataset targets.
    rt6   : face-count histogram reconstruction.
    rt7   : joint face-count + volume histogram reconstruction.
    """
    sampler = SamplerParams(z=2000.0, sigma=0.015, r0=0.2, rng_seed=seed)
    hardcore = HardcoreParams(alpha=0.02, beta=0.095)
    stop = StoppingCriterion(delta=0.002, window=500_000)
    if name in ("rt1_regular", "rt1_irregular"):
        theta2 = -1.0 if "irregular" in name else 1.0
        model = EnergyModel(hardcore=hardcore,
                            pair=PairPotentialSpec(theta=theta2),
                            activity=sampler.z)
        return ExperimentConfig(
            kind="simulate", model=model, sampler=sampler,
            steps=steps or 3_000_000, out_dir=Path(out_dir), preset=name)
    if name in ("rt2_regular", "rt2_irregular"):
        theta2 = 1.0 if name == "rt2_regular" else -1.0
        h_nof, _, _ = _dataset_targets(dataset, sampler.r0)
        model = EnergyModel(
            hardcore=hardcore, pair=PairPotentialSpec(theta=theta2),
            reconstructing=(ReconstructingPotentialSpec(
                kind=CharacteristicKind.NOF, functional=Functional.DSC,
                theta=100_000.0, target_hist=h_nof),),
            activity=sampler.z)
        return ExperimentConfig(
            kind="simulate", model=model, sampler=sampler,
            steps=steps or 3_000_000, out_dir=Path(out_dir), preset=name,
            dataset=Path(dataset) if dataset else SAMPLE_DATASET)
    if name == "rt6":
        h_nof, _, _ = _dataset_targets(dataset, sampler.r0)
        model = EnergyModel(
            reconstructing=(ReconstructingPotentialSpec(
                kind=CharacteristicKind.NOF, functional=Functional.DSC,
                theta=1000.0, target_hist=h_nof),),
            activity=sampler.z)
        return ExperimentConfig(
            kind="reconstruct", model=model, sampler=sampler, stop=stop,
            out_dir=Path(out_dir), preset=name,
            dataset=Path(dataset) if dataset else SAMPLE_DATASET)
    if name == "rt7":
        h_nof, h_vol, _ = _dataset_targets(dataset, sampler.r0)
        model = EnergyModel(
            reconstructing=(
                ReconstructingPotentialSpec(
                    kind=CharacteristicKind.NOF, functional=Functional.DSC,
                    theta=1000.0, target_hist=h_nof),
                ReconstructingPotentialSpec(
                    kind=CharacteristicKind.VOL, functional=Functional.DSC,
                    theta=10_000.0, target_hist=h_vol)),
            activity=sampler.z)
        return ExperimentConfig(
            kind="reconstruct", model=model, sampler=sampler, stop=stop,
            out_dir=Path(out_dir), preset=name,
            dataset=Path(dataset) if dataset else SAMPLE_DATASET)
    raise ConfigError(f"unknown preset {name!r}; see `gltess presets list`")


PRESET_NAMES = ("rt1_regular", "rt1_irregular", "rt2_regular",
                "rt2_irregular", "rt6", "rt7")

# expected parameters per preset, asserted by the test suite
PRESET_TABLE = {
    "rt1_regular": {"alpha": 0.02, "beta": 0.095, "theta2": 1.0,
                    "z": 2000.0, "sigma": 0.015, "r0": 0.2,
                    "kind": "simulate", "steps": 3_000_000},
    "rt1_irregular": {"alpha": 0.02, "beta": 0.095, "theta2": -1.0,
                      "z": 2000.0, "sigma": 0.015, "r0": 0.2,
                      "kind": "simulate", "steps": 3_000_000},
    "rt2_regular": {"alpha": 0.02, "beta": 0.095, "theta2": 1.0,
                    "theta_n": (100_000.0,), "kinds": ("nof",),
                    "kind": "simulate"},
    "rt2_irregular": {"alpha": 0.02, "beta": 0.095, "theta2": -1.0,
                      "theta_n": (100_000.0,), "kinds": ("nof",),
                      "kind": "simulate"},
    "rt6": {"theta_n": (1000.0,), "kinds": ("nof",), "kind": "reconstruct",
            "delta": 0.002, "t": 500_000},
    "rt7": {"theta_n": (1000.0, 10_000.0), "kinds": ("nof", "vol"),
            "kind": "reconstruct", "delta": 0.002, "t": 500_000},
}


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

def _write_trace(path: Path, trace: np.ndarray, columns):
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in trace:
            f.write(f"{int(row[0])}," + ",".join(
                f"{v:.17g}" for v in row[1:-1]) + f",{int(row[-1])}\n")


def _write_acceptance(path: Path, counters: dict):
    with open(path, "w") as f:
        f.write("kind,proposed,accepted\n")
        for k in ("birth", "death", "move"):
            f.write(f"{k},{counters['proposed'][k]},"
                    f"{counters['accepted'][k]}\n")


def write_configuration_csv(path: Path, config: Configuration):
    with open(path, "w") as f:
        f.write("id,x,y,z,radius\n")
        for g in config:
            p = g.position
            f.write(f"{g.id},{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},"
                    f"{g.radius:.17g}\n")


def read_configuration_csv(path) -> Configuration:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    ids = np.atleast_1d(rows["id"]).astype(np.int64)
    pos = np.column_stack([np.atleast_1d(rows["x"]), np.atleast_1d(rows["y"]),
                           np.atleast_1d(rows["z"])])
    rad = np.atleast_1d(rows["radius"])
    return Configuration.from_arrays(pos, rad, ids)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute one experiment (possibly several chains) and write artifacts.

    Per chain directory: energy_trace.csv, acceptance.csv,
    final_configuration.csv, hist_nof.csv, hist_vol.csv, geometry.txt and
    summary.json.  Returns the summary of the last chain.
    """
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "experiment.ini").write_text(dump_config(cfg))
    for i, spec in enumerate(cfg.model.reconstructing):
        if spec.target_hist is not None:
            (out_root / f"target_{i + 1}.csv").write_text(
                histogram_to_csv(spec.target_hist))
    summary = None
    for chain in range(cfg.chains):
        out = out_root if cfg.chains == 1 else out_root / f"chain_{chain:02d}"
        out.mkdir(parents=True, exist_ok=True)
        seed = cfg.sampler.rng_seed if cfg.chains == 1 else \
            derive_seed(cfg.sampler.rng_seed, 1000 + chain)
        params = SamplerParams(z=cfg.sampler.z, sigma=cfg.sampler.sigma,
                               r0=cfg.sampler.r0, rng_seed=seed)
        t0 = time.perf_counter()
        target = cfg.target_n if cfg.kind != "greedy" else cfg.n_points
        initial = initial_admissible(
            cfg.model, params, target_n=target,
            fixed_cardinality=cfg.kind == "greedy")
        if cfg.kind == "simulate":
            final, diag = simulate(cfg.model, params, cfg.steps, initial,
                                   log_every=cfg.log_every)
        elif cfg.kind == "reconstruct":
            final, diag = reconstruct(cfg.model, params, cfg.stop, initial,
                                      cap=cfg.cap, log_every=cfg.log_every)
        else:
            final, diag = greedy_reconstruct(
                cfg.model, params, cfg.n_points, cfg.patience, initial,
                cap=cfg.cap, log_every=cfg.log_every)
        runtime = time.perf_counter() - t0
        tess = build_tessellation(final)
        summary = write_run_artifacts(out, cfg, params, final, tess, diag,
                                      runtime)
    return summary


def write_run_artifacts(out: Path, cfg, params, final, tess, diag,
                        runtime) -> dict:
    _write_trace(out / "energy_trace.csv", diag.trace, diag.trace_columns)
    _write_acceptance(out / "acceptance.csv", diag.counters)
    write_configuration_csv(out / "final_configuration.csv", final)
    nofs = extract(CharacteristicKind.NOF, tess)
    vols = extract(CharacteristicKind.VOL, tess)
    bins = BinSpec()
    (out / "hist_nof.csv").write_text(
        histogram_to_csv(histogram(nofs, bins.nof())))
    (out / "hist_vol.csv").write_text(
        histogram_to_csv(histogram(vols, bins.vol(float(vols.max())))))
    (out / "geometry.txt").write_text(export_geometry(tess, final))
    bd = total_energy(cfg.model, tess)
    discrepancies = {}
    for i, spec in enumerate(cfg.model.reconstructing):
        if spec.functional is Functional.DSC:
            cur = histogram(extract(spec.kind, tess),
                            spec.target_hist.breaks)
            discrepancies[f"dsc_{spec.kind.value}"] = discrepancy(
                cur, spec.target_hist)
    summary = {
        "version": __version__,
        "preset": cfg.preset,
        "kind": cfg.kind,
        "seed": params.rng_seed,
        "steps": diag.steps,
        "termination": diag.termination,
        "n_cells": len(tess.cells),
        "energy_total": bd.total,
        "pair_sum": bd.pair_sum,
        "reconstructing_terms": list(bd.reconstructing_terms),
        "discrepancies": discrepancies,
        "acceptance": diag.counters,
        "summary_stats": summarize(tess).as_dict(),
        "runtime_seconds": runtime,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2,
                                                 sort_keys=True))
    return summary
