"""Command-line interface: one verb per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 initialization failure,
4 geometry failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (ConfigError, DegenerateInput, GeometryFailure,
                     GltessError, InitializationFailure, RadiusExceedsR0)


def _common_run_flags(p):
    p.add_argument("--config", type=Path, help="experiment INI file")
    p.add_argument("--preset", help="named preset (see `presets list`)")
    p.add_argument("--seed", type=int, help="RNG seed override")
    p.add_argument("--steps", type=int, help="step count override")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--chains", type=int, help="independent chains to run")
    p.add_argument("--log-every", type=int, dest="log_every",
                   help="trace logging interval")
    p.add_argument("--dataset", type=Path,
                   help="generator dataset CSV for data-derived targets")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="gltess",
        description="Periodic Laguerre tessellations, Gibbs sampling, and "
                    "statistical reconstruction")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("tessellate",
                       help="tessellate a generator dataset and export")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--r0", type=float, default=0.2)

    p = sub.add_parser("targets",
                       help="data-derived target histograms and summary")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--r0", type=float, default=0.2)

    for verb in ("simulate", "reconstruct", "greedy"):
        p = sub.add_parser(verb, help=f"run a {verb} experiment")
        _common_run_flags(p)

    p = sub.add_parser("presets", help="preset utilities")
    p.add_argument("action", choices=["list"])
    return ap


def _resolve_config(args, expected_kind):
    from .workbench import load_config, make_preset
    if (args.config is None) == (args.preset is None):
        raise ConfigError("provide exactly one of --config or --preset")
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = make_preset(args.preset,
                          seed=args.seed or 0,
                          steps=args.steps,
                          out_dir=args.out or Path("out"),
                          dataset=args.dataset)
    if cfg.kind != expected_kind:
        raise ConfigError(
            f"configuration is a {cfg.kind!r} run, not {expected_kind!r}")
    if args.seed is not None:
        from .sampler import SamplerParams
        cfg.sampler = SamplerParams(z=cfg.sampler.z, sigma=cfg.sampler.sigma,
                                    r0=cfg.sampler.r0, rng_seed=args.seed)
    if args.steps is not None and cfg.kind == "simulate":
        cfg.steps = args.steps
    if args.out is not None:
        cfg.out_dir = args.out
    if args.chains is not None:
        cfg.chains = args.chains
    if args.log_every is not None:
        cfg.log_every = args.log_every
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, RadiusExceedsR0) as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except InitializationFailure as e:
        print(f"error: initialization: {e}", file=sys.stderr)
        return 3
    except (GeometryFailure, DegenerateInput) as e:
        print(f"error: geometry: {e}", file=sys.stderr)
        return 4
    except GltessError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.verb == "presets":
        from .workbench import PRESET_NAMES, PRESET_TABLE
        for name in PRESET_NAMES:
            row = PRESET_TABLE[name]
            desc = ", ".join(f"{k}={v}" for k, v in row.items())
            print(f"{name}: {desc}")
        return 0

    if args.verb in ("tessellate", "targets"):
        from .characteristics import histogram_to_csv
        from .geometry import build_tessellation, export_geometry
        from .workbench import (GeneratorDataset, normalize, summarize,
                                target_histograms, write_configuration_csv)
        ds = GeneratorDataset.from_csv(args.dataset)
        config, report = normalize(ds, r0=args.r0)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.verb == "tessellate":
            tess = build_tessellation(config)
            (args.out / "geometry.txt").write_text(
                export_geometry(tess, config))
            write_configuration_csv(args.out / "normalized_generators.csv",
                                    config)
            summary = summarize(tess).as_dict()
            summary["excluded_ids"] = sorted(tess.excluded_ids)
        else:
            h_nof, h_vol, stats = target_histograms(config)
            (args.out / "target_nof.csv").write_text(histogram_to_csv(h_nof))
            (args.out / "target_vol.csv").write_text(histogram_to_csv(h_vol))
            summary = stats.as_dict()
        summary["max_normalized_radius"] = report.max_normalized_radius
        (args.out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True))
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0

    from .workbench import run_experiment
    cfg = _resolve_config(args, args.verb)
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
