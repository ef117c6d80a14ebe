"""Command-line entry point: ``afem-eit {gendata,afem,uniform,rates}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .afem import ProblemSpec, afem_run, error_vs_dof, uniform_run
from .artifacts import (BundleError, DataBundle, bundle_checksum, rates_table, read_bundle, read_errors,
                        write_bundle, write_csv, write_run)
from .cem import trigonometric_battery
from .config import ConfigError, ExperimentConfig, load_config
from .fem import AdmissibilityError, SolverError
from .mesh import MeshError, build_initial_mesh
from .synthetic import add_noise, generate_exact_data

log = logging.getLogger("afem_eit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _generate(config: ExperimentConfig, out: Path) -> tuple[DataBundle, str]:
    battery = trigonometric_battery(n_patterns=config.n_patterns)
    exact = generate_exact_data(config.example, battery, config.data_dof, theta=config.data_theta)
    noisy = add_noise(exact.voltages, config.epsilon, config.seed)
    checksum = write_bundle(out, config, noisy.exact, noisy.noisy, noisy.draws, exact.mesh.n_vertices)
    return read_bundle(out), checksum


def _bundle_for(config: ExperimentConfig, args, out: Path) -> DataBundle:
    if args.data is None:
        bundle, checksum = _generate(config, out / "data")
        log.info("generated data bundle %s (sha256 %s)", out / "data", checksum)
        return bundle
    bundle = read_bundle(args.data)
    if bundle.example != config.example:
        raise BundleError(f"bundle is for example {bundle.example}, config asks for {config.example}")
    if bundle.noisy.shape[0] != config.n_patterns:
        raise BundleError(f"bundle has {bundle.noisy.shape[0]} patterns, config asks for {config.n_patterns}")
    if float(bundle.meta["epsilon"]) != config.epsilon or int(bundle.meta["seed"]) != config.seed:
        log.warning("bundle noise (epsilon %s, seed %s) differs from the config", bundle.meta["epsilon"],
                    bundle.meta["seed"])
    return bundle


def _spec(config: ExperimentConfig, bundle: DataBundle) -> ProblemSpec:
    return ProblemSpec(
        mesh0=build_initial_mesh(config.n_per_side),
        data=bundle.noisy,
        battery=trigonometric_battery(n_patterns=config.n_patterns),
        alpha=config.alpha,
        lam=config.lam,
        support=config.support,
    )


def cmd_gendata(args) -> int:
    config = _config(args)
    out = Path(args.out)
    _, checksum = _generate(config, out)
    print(f"{out} sha256 {checksum}")
    return EXIT_OK


def _finish_run(run, config, out: Path, figures: bool) -> None:
    errors = None
    if run.n_levels >= 4:
        errors = error_vs_dof(run, config.support)
    else:
        log.warning("only %d levels: errors.csv needs at least 4", run.n_levels)
    write_run(out, run, config, errors)
    if figures:
        from .plotting import plot_errors, plot_field, plot_mesh
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        plot_field(fig_dir / "sigma_final.png", run.meshes[-1], run.sigmas[-1],
                   f"{run.kind}, N = {run.meshes[-1].n_vertices}")
        plot_mesh(fig_dir / "mesh_final.png", run.meshes[-1], f"{run.kind} mesh, level {run.n_levels - 1}")
        if errors is not None:
            plot_errors(fig_dir / "errors.png", {run.kind: (errors.dof, errors.l2, errors.h1)})
    last = run.records[-1]
    print(f"{out}: {run.n_levels} levels, final N = {last.dof}, J = {last.objective:.6e}, "
          f"eta = {last.eta:.4e} ({run.stop_reason})")


def cmd_afem(args) -> int:
    config = _config(args)
    out = Path(args.out)
    bundle = _bundle_for(config, args, out)
    run = afem_run(_spec(config, bundle), theta=config.theta, max_levels=config.max_levels,
                   dof_budget=config.dof_budget, optimizer=config.optimizer_options(),
                   bisections=config.bisections)
    _finish_run(run, config, out, not args.no_figures)
    return EXIT_OK


def cmd_uniform(args) -> int:
    config = _config(args)
    out = Path(args.out)
    bundle = _bundle_for(config, args, out)
    run = uniform_run(_spec(config, bundle), config.uniform_levels, optimizer=config.optimizer_options(),
                      bisections=config.bisections)
    _finish_run(run, config, out, not args.no_figures)
    return EXIT_OK


def cmd_rates(args) -> int:
    if args.config:
        _config(args)  # validated for symmetry with the other commands
    out = Path(args.out)
    runs = {"adaptive": args.adaptive, "uniform": args.uniform}
    rows = rates_table(runs)
    write_csv(out / "rates.csv", ("run", "norm", "rate"), rows)
    if not args.no_figures:
        from .plotting import plot_errors
        (out / "figures").mkdir(parents=True, exist_ok=True)
        plot_errors(out / "figures" / "errors.png", {name: read_errors(d) for name, d in runs.items()})
    for name, norm, rate in rows:
        print(f"{name:9s} {norm}  {rate:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afem-eit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required, help="experiment configuration file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="noise seed, overrides the config")

    p = sub.add_parser("gendata", help="generate exact and noisy electrode data")
    common(p)
    p.set_defaults(func=cmd_gendata)
    for name, func, text in (("afem", cmd_afem, "adaptive reconstruction"),
                             ("uniform", cmd_uniform, "reconstruction on uniformly refined meshes")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--data", type=Path, default=None,
                       help="data bundle from gendata (generated into OUT/data if omitted)")
        p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
        p.set_defaults(func=func)
    p = sub.add_parser("rates", help="fit convergence rates of an adaptive and a uniform run")
    common(p, config_required=False)
    p.add_argument("--adaptive", type=Path, required=True, help="run directory of the adaptive run")
    p.add_argument("--uniform", type=Path, required=True, help="run directory of the uniform run")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figure")
    p.set_defaults(func=cmd_rates)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BundleError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, AdmissibilityError, MeshError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
