"""The ``mcmc`` command-line tool.

Usage::

    mcmc <subcommand> --config CONFIG --out DIR [--seed N] [--scale desk|paper]

Each subcommand reads a YAML configuration, computes one family of tables
and writes them as CSV files into ``DIR`` together with ``manifest.json``.
The configuration is fully validated and all results are computed before
any file is written, and files are staged under temporary names and then
renamed, so a failing run leaves no partial output behind.

Exit codes: 0 success, 2 configuration error, 3 infeasible design,
4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .channel import cir_peak
from .cir_stats import CirStatistics, cir_moments_batch
from .config import Config, ConfigError, load_config
from .drug_delivery import ReleaseSchedule, constraint_tables, design_release, evaluate_schedule, naive_release
from .mc_link import (
    BerModel,
    efficiency_curve,
    optimal_frame_duration,
    optimize_release,
    optimize_threshold_uniform,
)
from .numerics import DomainError, InfeasibleError, NonConvergenceError
from .particle_sim import SimConfig, monte_carlo_absorption, monte_carlo_cir_stats, simulate_distance

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NONCONVERGENCE = 4


@dataclass
class RunManifest:
    """Provenance record written next to every set of outputs."""

    command: str
    config_path: str
    seed: int
    output_dir: str
    timestamp: str
    scale: str | None
    version: str
    outputs: list


def fmt(value) -> str:
    """Serialize one CSV field; floats use 12 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".12g")
    return str(value)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Write all files atomically: stage every file, then rename them in."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out_dir / name))
        for tmp, final in staged:
            os.replace(tmp, final)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


def report_lines(**values) -> str:
    """``key=value`` lines, one per scalar result."""
    return "".join(f"{k}={fmt(v)}\n" for k, v in values.items())


# --------------------------------------------------------------- commands
def cmd_channel_stats(cfg: Config, args) -> dict[str, str]:
    """Analytic CIR mean and variance over a delay grid, and the CIR distribution."""
    env = cfg.env()
    t_list = cfg.grid("channel_stats", "t_list_s", positive=True)
    tau = cfg.grid("channel_stats", "tau_grid_s", positive=True)
    pdf_tau = cfg.number("channel_stats", "pdf_tau_s", positive=True)
    h_points = cfg.number("channel_stats", "h_points", 200, integer=True, minimum=2)

    moment_rows = []
    for t in t_list:
        mean, std = cir_moments_batch(env, float(t), tau)
        moment_rows += [(t, tk, m, s * s) for tk, m, s in zip(tau, mean, std)]
    files = {"moments.csv": csv_text(["t_s", "tau_s", "mean_per_s", "var_per_s2"], moment_rows)}

    if pdf_tau is not None:
        stats = CirStatistics(env)
        _, h_star = cir_peak(env, pdf_tau)
        h = np.linspace(0.0, float(h_star), h_points)
        dist_rows = []
        for t in t_list:
            pdf = stats.pdf(float(t), pdf_tau, h)
            cdf = stats.cdf(float(t), pdf_tau, h)
            dist_rows += [(t, hk, p, c) for hk, p, c in zip(h, pdf, cdf)]
        files["distribution.csv"] = csv_text(["t_s", "h_per_s", "pdf", "cdf"], dist_rows)
    return files


def _sim_config(cfg: Config, seed: int) -> SimConfig:
    try:
        return SimConfig(
            step=cfg.number("simulate", "step_s", 1e-3, positive=True),
            horizon=cfg.number("simulate", "trajectory_horizon_s", 1.0, positive=True),
            realizations=cfg.number("simulate", "realizations", 100_000, integer=True, minimum=1),
            seed=seed,
            mode=cfg.sim_mode(),
            block_size=cfg.number("simulate", "block_size", 4096, integer=True, minimum=1),
        )
    except ValueError as exc:
        raise cfg.error("simulate", None, str(exc)) from None


def cmd_simulate(cfg: Config, args) -> dict[str, str]:
    """Monte Carlo CIR statistics (and optionally one distance trajectory)."""
    cfg.section("simulate")
    env = cfg.env()
    sim = _sim_config(cfg, args.seed)
    t_list = cfg.grid("simulate", "t_list_s", positive=True)
    tau = cfg.grid("simulate", "tau_grid_s", positive=True)
    h_tau = cfg.number("channel_stats", "pdf_tau_s", None, positive=True)
    h_points = cfg.number("channel_stats", "h_points", 200, integer=True, minimum=2)

    rows = []
    ecdf_rows = []
    for t in t_list:
        res = monte_carlo_cir_stats(env, sim, float(t), tau)
        rows += [
            (t, tk, m, v, se) for tk, m, v, se in zip(tau, res.mean, res.variance, res.standard_error)
        ]
        if h_tau is not None:
            _, h_star = cir_peak(env, h_tau)
            h = np.linspace(0.0, float(h_star), h_points)
            ec = monte_carlo_cir_stats(env, sim, float(t), [h_tau], h)
            ecdf_rows += [(t, h_tau, hk, c) for hk, c in zip(h, ec.ecdf[0])]
    files = {"mc_moments.csv": csv_text(["t_s", "tau_s", "mean", "var", "se"], rows)}
    if ecdf_rows:
        files["mc_cdf.csv"] = csv_text(["t_s", "tau_s", "h_per_s", "ecdf"], ecdf_rows)
    if "trajectory_horizon_s" in cfg.section("simulate"):
        traj = simulate_distance(env, sim)
        files["trajectory.csv"] = csv_text(["time_s", "distance_m"], zip(traj.times, traj.distances))
    return files


def cmd_drug_design(cfg: Config, args) -> dict[str, str]:
    """Minimum-dose release profile and the naive constant benchmark."""
    problem = cfg.drug_problem(args.scale)
    tables = constraint_tables(problem)
    result = design_release(problem, tables)
    if not result.feasible:
        raise InfeasibleError(
            f"no non-negative release profile meets the targets with beta={problem.beta:g}; reduce beta or theta"
        )
    naive = naive_release(problem, tables)
    t_rel = problem.release_times()
    rows = [
        (i + 1, t, a, ar) for i, (t, a, ar) in enumerate(zip(t_rel, result.alphas, result.alphas_real))
    ]
    summary = [(result.total_A, result.lp_objective_real, int(naive.total), result.method, result.duality_gap)]
    return {
        "release_profile.csv": csv_text(["index", "release_time_s", "alpha", "alpha_real"], rows),
        "design_summary.csv": csv_text(["total_A", "lp_objective", "naive_total_A", "method", "duality_gap"], summary),
    }


def read_profile(path: str) -> ReleaseSchedule:
    """Release profile CSV with columns ``release_time_s`` and ``alpha``."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"release_time_s", "alpha"} <= set(reader.fieldnames):
                raise ConfigError(f"{path}: profile needs the columns release_time_s and alpha")
            times, alphas = [], []
            for lineno, row in enumerate(reader, start=2):
                try:
                    times.append(float(row["release_time_s"]))
                    alphas.append(float(row["alpha"]))
                except (TypeError, ValueError):
                    raise ConfigError(f"{path}:{lineno}: non-numeric release_time_s or alpha") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read profile: {exc.strerror}") from None
    if not times:
        raise ConfigError(f"{path}: profile is empty")
    try:
        return ReleaseSchedule(np.array(times), np.array(alphas))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_drug_eval(cfg: Config, args) -> dict[str, str]:
    """Absorption-rate moments and ``P_theta`` of a given profile."""
    if not args.profile:
        raise ConfigError("drug-eval needs --profile PATH")
    problem = cfg.drug_problem(args.scale)
    cfg.section("drug_eval")
    if "t_grid_s" in cfg.section("drug_eval"):
        times = cfg.grid("drug_eval", "t_grid_s")
    elif "between_releases" in cfg.section("drug_eval"):
        pair = cfg.get("drug_eval", "between_releases")
        if (
            not isinstance(pair, list)
            or len(pair) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in pair)
            or not 1 <= pair[0] < pair[1] <= problem.I
        ):
            raise cfg.error("drug_eval", "between_releases", f"expected two release indices 1 <= i < j <= {problem.I}")
        num = cfg.number("drug_eval", "num", 20, integer=True, minimum=1)
        t_rel = problem.release_times()
        times = np.linspace(t_rel[pair[0] - 1], t_rel[pair[1] - 1], num + 2)[1:-1]
    else:
        raise cfg.error("drug_eval", None, "needs t_grid_s or between_releases")
    resolution = cfg.number("drug_eval", "grid_resolution", 4096, integer=True, minimum=16)
    mc_n = cfg.number("drug_eval", "monte_carlo_realizations", None, integer=True, minimum=1)
    schedule = read_profile(args.profile)
    if callable(problem.theta) or np.ndim(problem.theta) > 0:
        theta = np.interp(times, problem.constraint_times(), problem.theta_values())
    else:
        theta = np.full(times.shape, float(problem.theta))

    table = evaluate_schedule(problem.env, schedule, times, theta, problem.beta, resolution)
    header = ["t_s", "theta_per_s", "E_g", "V_upper", "P_theta", "chebyshev_bound"]
    columns = [table["t_s"], theta, table["E_g"], table["V_upper"], table["P_theta"], table["chebyshev_bound"]]
    if mc_n is not None:
        sim = SimConfig(realizations=mc_n, seed=args.seed)
        mc = monte_carlo_absorption(problem.env, sim, schedule.times, schedule.alphas, times, theta, correlated=True)
        header += ["P_theta_mc", "P_theta_mc_se"]
        columns += [mc.p_exceed, mc.p_exceed_se]
    return {"evaluation.csv": csv_text(header, zip(*columns))}


def cmd_mc_threshold(cfg: Config, args) -> dict[str, str]:
    """Min-max threshold for the uniform allocation."""
    link = cfg.link()
    model = BerModel(link)
    xi, max_ber = optimize_threshold_uniform(link, model)
    alphas = np.full(link.I, link.A / link.I)
    ber = model.ber(xi, alphas)
    rows = [(i + 1, link.release_time(i + 1), a, b) for i, (a, b) in enumerate(zip(alphas, ber))]
    return {
        "threshold.csv": csv_text(["xi", "max_ber"], [(xi, max_ber)]),
        "uniform_ber.csv": csv_text(["bit_index", "release_time_s", "alpha", "ber"], rows),
        "report.txt": report_lines(xi=xi, max_ber=max_ber),
    }


def cmd_mc_release(cfg: Config, args) -> dict[str, str]:
    """Equalizing release allocation at the uniform-design threshold."""
    link = cfg.link()
    model = BerModel(link)
    xi, uniform_max = optimize_threshold_uniform(link, model)
    profile = optimize_release(link, xi, model)
    rows = [
        (i + 1, link.release_time(i + 1), a, ar, b)
        for i, (a, ar, b) in enumerate(zip(profile.alphas, profile.alphas_real, profile.ber))
    ]
    summary = [(xi, float(profile.ber.max()), uniform_max, float(profile.ber_real.max()))]
    return {
        "release.csv": csv_text(["bit_index", "release_time_s", "alpha", "alpha_real", "ber"], rows),
        "report.txt": report_lines(xi=xi, max_ber=float(profile.ber.max()), uniform_max_ber=uniform_max),
        "release_summary.csv": csv_text(["xi", "max_ber", "uniform_max_ber", "max_ber_real"], summary),
    }


def cmd_mc_frame(cfg: Config, args) -> dict[str, str]:
    """Efficiency curves and the maximum frame duration."""
    link = cfg.link()
    horizon = cfg.number("link", "horizon_s", 1e7, positive=True)
    psi_list = cfg.grid("link", "psi_list", required=False, positive=True)
    t_grid = cfg.grid("link", "t_grid_s", required=False)
    files = {}
    if psi_list is not None and t_grid is not None:
        curve = efficiency_curve(link, psi_list, t_grid)
        rows = [(psi, t, p) for psi, row in zip(psi_list, curve) for t, p in zip(t_grid, row)]
        files["efficiency.csv"] = csv_text(["psi", "t_s", "probability"], rows)
    elif (psi_list is None) != (t_grid is None):
        raise cfg.error("link", "psi_list" if psi_list is None else "t_grid_s", "psi_list and t_grid_s go together")
    frame = optimal_frame_duration(link, horizon)
    files["frame.csv"] = csv_text(
        ["psi", "P", "T_b_s", "T_star_s", "t_release_s", "r_tilde_m", "status"],
        [(link.psi, link.P, link.T_b, frame.T_star, frame.t_release, frame.r_tilde, frame.status)],
    )
    files["report.txt"] = report_lines(T_star_s=frame.T_star, status=frame.status)
    return files


COMMANDS = {
    "channel-stats": cmd_channel_stats,
    "simulate": cmd_simulate,
    "drug-design": cmd_drug_design,
    "drug-eval": cmd_drug_eval,
    "mc-threshold": cmd_mc_threshold,
    "mc-release": cmd_mc_release,
    "mc-frame": cmd_mc_frame,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcmc", description="Mobile molecular communication toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        p = sub.add_parser(name, help=func.__doc__.strip().splitlines()[0])
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="root seed for Monte Carlo streams (default 0)")
        p.add_argument(
            "--scale",
            choices=("desk", "paper"),
            default=None,
            help="drug commands: desk uses I=300, paper uses I=3000 (overrides drug.I)",
        )
        if name == "drug-eval":
            p.add_argument("--profile", required=True, help="release profile CSV from drug-design")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.seed < 0:
        print("mcmc: error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        files = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"mcmc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"mcmc: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NonConvergenceError as exc:
        print(f"mcmc: numerical non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except DomainError as exc:
        print(f"mcmc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    manifest = RunManifest(
        command=args.command,
        config_path=str(Path(args.config).resolve()),
        seed=args.seed,
        output_dir=str(out.resolve()),
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        scale=args.scale,
        version=__version__,
        outputs=sorted(files),
    )
    files["manifest.json"] = json.dumps(asdict(manifest), indent=2) + "\n"
    write_outputs(out, files)
    if "report.txt" in files:
        sys.stdout.write(files["report.txt"])
    for name in sorted(files):
        print(out / name)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
