"""Command-line entry point for the bidding toolkit.

Exit codes: 0 success, 2 usage error, 3 infeasible market or case,
4 verification failure (including AGC breaches and monotonicity violations),
5 solver time limit. Defaults can be set in a YAML config file (``--config``);
environment variables override the file, flags override both.
"""

from __future__ import annotations

import sys

import click
import yaml

from . import agc, bilevel, clearing, harness, solver
from .scenario import (
    BessPriceBids,
    MarketMask,
    default_patterns,
    load_scenario,
    save_scenario,
    synthesize_scenario,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFICATION = 4
EXIT_TIME_LIMIT = 5


def _fail(code: int, message: str) -> "SystemExit":
    click.echo(f"error: {message}", err=True)
    return SystemExit(code)


def _exit_code_for(err: Exception) -> int:
    if isinstance(err, (harness.CaseInfeasibleError, clearing.InfeasibleMarketError)):
        return EXIT_INFEASIBLE
    if isinstance(err, harness.VerificationFailedError):
        return EXIT_VERIFICATION
    if isinstance(err, harness.CaseTimeLimitError):
        return EXIT_TIME_LIMIT
    return 1


def solver_options(f):
    f = click.option("--threads", type=int, default=None, envvar="BESSBID_THREADS",
                     help="Solver threads (reserved; the backend is single-threaded).")(f)
    f = click.option("--seed", type=int, default=None, envvar="BESSBID_SEED",
                     help="Deterministic tie-breaking seed.")(f)
    f = click.option("--time-limit", type=float, default=None, envvar="BESSBID_TIME_LIMIT",
                     help="Solver wall-clock limit in seconds.")(f)
    f = click.option("--gap", type=float, default=1e-6, show_default=True,
                     envvar="BESSBID_GAP", help="Relative MIP gap tolerance.")(f)
    return f


def _settings(gap, time_limit, seed, threads) -> harness.SolverSettings:
    return harness.SolverSettings(gap_tol=gap, time_limit=time_limit,
                                  seed=seed, threads=threads)


def _mask_for(case: int | None, scn) -> MarketMask:
    return scn.market_mask if case is None else MarketMask.from_case(case)


@click.group(invoke_without_command=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML file of default flag values, keyed by flag name "
                   "(optionally nested per subcommand).")
@click.pass_context
def cli(ctx: click.Context, config: str | None) -> None:
    """Strategic-bidding toolkit for a price-maker storage unit."""
    if config is not None:
        with open(config) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise click.UsageError("config file must hold a mapping of flag values")
        flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        nested = {k: v for k, v in raw.items() if isinstance(v, dict)}
        default_map = {}
        for name in cli.commands:
            section = dict(flat)
            section.update(nested.get(name, {}))
            default_map[name] = section
        ctx.default_map = default_map
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        ctx.exit(EXIT_USAGE)


@cli.command()
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Where to write the scenario file.")
@click.option("--peak", type=float, default=None,
              help="Peak system load in MW [default: 1000].")
@click.option("--intervals", type=int, default=None,
              help="Horizon length; must divide 96 [default: 96].")
@click.option("--desk", is_flag=True,
              help="Write the fixed 24-interval reduced study system instead.")
@click.option("--case", type=click.IntRange(1, 4), default=None,
              help="Participation case stored in the scenario [default: 4].")
@click.option("--buy-price", type=float, default=0.0, show_default=True,
              help="Storage demand price bid in $/MWh for every interval.")
def synth(out, peak, intervals, desk, case, buy_price):
    """Synthesize a scenario file from the packaged daily patterns."""
    mask = MarketMask() if case is None else MarketMask.from_case(case)
    if desk:
        if peak is not None or intervals is not None:
            raise click.UsageError("--desk fixes the system size; drop --peak/--intervals")
        scn = harness.desk_scenario(mask=mask)
    else:
        peak = 1000.0 if peak is None else peak
        intervals = 96 if intervals is None else intervals
        if intervals < 1 or 96 % intervals != 0:
            raise click.UsageError("--intervals must divide 96")
        stride = 96 // intervals
        price, load = default_patterns()
        scn = synthesize_scenario(
            (price[::stride], load[::stride]),
            peak_load_mw=peak,
            delta_t=24.0 / intervals,
            market_mask=mask,
            bess_price_bids=BessPriceBids(buy=buy_price),
        )
    save_scenario(scn, out)
    click.echo(f"wrote {out}: {scn.n_intervals} intervals, {scn.n_generators} generators, "
               f"mask {scn.market_mask.label()}")


@cli.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--case", type=click.IntRange(1, 4), default=None,
              help="Override the scenario's participation case.")
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Also write the price table as CSV.")
def clear(scenario, case, out):
    """Clear the joint market with a passive (zero-bid) storage unit."""
    scn = load_scenario(scenario)
    scn = scn.with_mask(_mask_for(case, scn))
    try:
        results = clearing.clear_horizon(scn)
    except clearing.ClearingError as err:
        raise _fail(_exit_code_for(err), str(err))
    header = "t,price_energy,price_reserve,price_regcap,price_mileage,clearing_cost"
    lines = [header]
    for res in results:
        p = res.prices
        lines.append(f"{res.t},{p.energy!r},{p.reserve!r},{p.regcap!r},"
                     f"{p.mileage!r},{res.objective!r}")
    text = "\n".join(lines)
    click.echo(text)
    if out is not None:
        with open(out, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text + "\n")


@cli.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--case", type=click.IntRange(1, 4), default=None,
              help="Override the scenario's participation case.")
@click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True,
              help="Directory for the report files.")
@click.option("--terminal-soc-equality", is_flag=True,
              help="Pin end-of-horizon SOC back to the initial level.")
@solver_options
def solve(scenario, case, out, terminal_soc_equality, gap, time_limit, seed, threads):
    """Solve one bidding case and write its report files."""
    scn = load_scenario(scenario)
    try:
        report = harness.run_case(
            scn, mask=_mask_for(case, scn),
            settings=_settings(gap, time_limit, seed, threads),
            terminal_soc_equality=terminal_soc_equality,
        )
    except harness.HarnessError as err:
        raise _fail(_exit_code_for(err), str(err))
    files = harness.emit_outputs(report, out)
    click.echo(f"{report.label}: objective {report.objective!r}, gap {report.mip_gap!r}, "
               f"status {report.status}")
    for key in sorted(files):
        click.echo(f"  {key}: {files[key]}")
    for name, total in sorted(report.totals.items()):
        click.echo(f"  revenue[{name}]: {total!r}")


@cli.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--case", type=click.IntRange(1, 4), default=None,
              help="Override the scenario's participation case.")
@click.option("--step", type=float, default=0.5, show_default=True,
              help="Bid grid step in MW.")
def oracle(scenario, case, step):
    """Brute-force the optimal bids of a tiny instance by grid search."""
    scn = load_scenario(scenario)
    scn = scn.with_mask(_mask_for(case, scn))
    try:
        res = harness.brute_force_oracle(scn, step)
    except harness.OracleSizeError as err:
        raise click.UsageError(str(err))
    except ValueError as err:
        raise click.UsageError(str(err))
    click.echo(f"oracle revenue {res.revenue!r} "
               f"(step {res.grid_step}, {res.evaluated} evaluated, {res.feasible} feasible)")
    for t, bids in enumerate(res.bids):
        click.echo(f"  t{t}: sell {bids.sell} buy {bids.buy} "
                   f"reserve {bids.reserve} regcap {bids.regcap}")


@cli.command("export-mps")
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--case", type=click.IntRange(1, 4), default=None,
              help="Override the scenario's participation case.")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Where to write the MPS file.")
@click.option("--name", default="BESSBID", show_default=True, help="MPS model name.")
def export_mps(scenario, case, out, name):
    """Export the assembled bidding MILP in MPS format."""
    scn = load_scenario(scenario)
    scn = scn.with_mask(_mask_for(case, scn))
    built = bilevel.assemble_milp(scn)
    solver.export_mps(built.milp, out, name=name)
    c = built.counts
    click.echo(f"wrote {out}: {c['rows']} rows, {c['columns']} columns, "
               f"{c['binaries']} binaries")


@cli.command("agc-check")
@click.option("--seeds", type=int, default=100, show_default=True,
              help="Number of seeded regulation traces.")
@click.option("--samples", type=int, default=agc.DEFAULT_SAMPLES, show_default=True,
              help="Samples per trace.")
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Solve this scenario and replay the traces against its schedule.")
@click.option("--case", type=click.IntRange(1, 4), default=None,
              help="Override the scenario's participation case.")
@solver_options
def agc_check(seeds, samples, scenario, case, gap, time_limit, seed, threads):
    """Validate regulation traces; optionally replay them against a solved case."""
    worst_mean = 0.0
    for s in range(seeds):
        trace = agc.generate_signal(s, samples=samples)
        worst_mean = max(worst_mean, abs(float(trace.signal.mean())))
    click.echo(f"{seeds} traces x {samples} samples: bounded, worst |mean| {worst_mean:.3e}")
    if scenario is None:
        return
    scn = load_scenario(scenario)
    try:
        report = harness.run_case(scn, mask=_mask_for(case, scn),
                                  settings=_settings(gap, time_limit, seed, threads))
    except harness.HarnessError as err:
        raise _fail(_exit_code_for(err), str(err))
    runs = harness.replay_agc(report, scn.bess, seeds=range(seeds), samples=samples)
    breaches = sum(r.breached for r in runs)
    worst_delta = max(abs(r.regulation_soc_delta) for r in runs)
    click.echo(f"{len(runs)} interval replays: {breaches} SOC breaches, "
               f"worst end-of-interval regulation SOC delta {worst_delta:.3e} MWh")
    if breaches:
        raise _fail(EXIT_VERIFICATION, f"{breaches} SOC excursions beyond limits")


@cli.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cases", default="1,2,3,4", show_default=True,
              help="Comma-separated participation cases to run.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Directory for per-case report files and the comparison table.")
@solver_options
def compare(scenario, cases, out, gap, time_limit, seed, threads):
    """Run several participation cases and compare their revenues."""
    try:
        case_ids = [int(c) for c in cases.split(",") if c.strip()]
    except ValueError:
        raise click.UsageError(f"--cases must be comma-separated integers, got {cases!r}")
    if not case_ids or any(c not in (1, 2, 3, 4) for c in case_ids):
        raise click.UsageError("--cases entries must be in 1..4")
    scn = load_scenario(scenario)
    settings = _settings(gap, time_limit, seed, threads)
    reports = []
    for c in case_ids:
        try:
            reports.append(harness.run_case(scn, mask=MarketMask.from_case(c),
                                            settings=settings))
        except harness.HarnessError as err:
            raise _fail(_exit_code_for(err), f"case {c}: {err}")
    comparison = harness.compare_cases(reports)
    text = comparison.to_text()
    click.echo(text)
    if out is not None:
        from pathlib import Path
        base = Path(out)
        base.mkdir(parents=True, exist_ok=True)
        for report in reports:
            harness.emit_outputs(report, base / report.label)
        with (base / "comparison.txt").open("w", encoding="ascii", newline="\n") as fh:
            fh.write(text + "\n")
    if not all(comparison.monotonicity.values()):
        raise _fail(EXIT_VERIFICATION, "participation monotonicity violated")


def main(argv: list[str] | None = None) -> int:
    try:
        cli(args=argv, prog_name="bessbid")
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
