"""Case orchestration: solve bidding cases, decompose revenue, replay AGC
traces, brute-force tiny instances, compare market-participation policies,
and emit deterministic report files.

Case numbering follows the participation policies: case 1 = energy only,
case 2 = energy+reserve, case 3 = energy+regulation, case 4 = all markets.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import agc, bilevel, clearing, solver
from .bilevel import BilevelMilp, BilevelSolution, VerificationReport
from .clearing import BessBids
from .scenario import (
    DEFAULT_GENERATOR_TABLE,
    BessParams,
    BessPriceBids,
    GeneratorParams,
    MarketMask,
    Scenario,
    default_patterns,
    scenario_to_text,
    synthesize_scenario,
    validate_scenario,
)

log = logging.getLogger(__name__)

SCHEMA_INTERVALS = "bessbid-intervals/1"
SCHEMA_SUMMARY = "bessbid-summary/1"
REVENUE_DECIMALS = 9


class HarnessError(RuntimeError):
    pass


class CaseInfeasibleError(HarnessError):
    pass


class CaseTimeLimitError(HarnessError):
    pass


class VerificationFailedError(HarnessError):
    def __init__(self, report: VerificationReport):
        super().__init__(report.summary())
        self.report = report


class OracleSizeError(HarnessError):
    pass


def scenario_fingerprint(scn: Scenario) -> str:
    return hashlib.sha256(scenario_to_text(scn).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SolverSettings:
    gap_tol: float = 1e-6
    time_limit: float | None = None
    seed: int | None = None
    threads: int | None = None  # reserved; the backend is single-threaded


@dataclass
class IntervalRecord:
    """One interval of the published schedule; revenues are recomputed from
    prices, awards, and interval length, never copied from the optimizer."""

    t: int
    delta_t: float
    u: int
    sell_bid: float
    buy_bid: float
    reserve_bid: float
    regcap_bid: float
    sell_award: float
    buy_award: float
    reserve_award: float
    regcap_award: float
    mileage_award: float
    price_energy: float
    price_reserve: float
    price_regcap: float
    price_mileage: float
    soc: float
    revenue_energy: float
    revenue_reserve: float
    revenue_regcap: float
    revenue_mileage: float

    @property
    def revenue_total(self) -> float:
        return (self.revenue_energy + self.revenue_reserve
                + self.revenue_regcap + self.revenue_mileage)


FIELD_ORDER = [
    "t", "delta_t", "u", "sell_bid", "buy_bid", "reserve_bid", "regcap_bid",
    "sell_award", "buy_award", "reserve_award", "regcap_award", "mileage_award",
    "price_energy", "price_reserve", "price_regcap", "price_mileage", "soc",
    "revenue_energy", "revenue_reserve", "revenue_regcap", "revenue_mileage",
]


@dataclass
class BessSchedule:
    """Published storage schedule: bids, awards, prices, SOC, and the
    per-market revenue decomposition."""

    records: list[IntervalRecord]
    soc_init: float

    @classmethod
    def from_solution(cls, scn: Scenario, sol: BilevelSolution) -> "BessSchedule":
        rnd = lambda v: round(float(v), REVENUE_DECIMALS)
        records = []
        for s in sol.intervals:
            it = scn.intervals[s.t]
            dt = it.delta_t
            v = s.variables
            p = s.prices
            records.append(IntervalRecord(
                t=s.t,
                delta_t=dt,
                u=s.u,
                sell_bid=rnd(s.bids.sell),
                buy_bid=rnd(s.bids.buy),
                reserve_bid=rnd(s.bids.reserve),
                regcap_bid=rnd(s.bids.regcap),
                sell_award=rnd(v.p_bs),
                buy_award=rnd(v.p_bd),
                reserve_award=rnd(v.p_brs),
                regcap_award=rnd(v.p_brgc),
                mileage_award=rnd(v.p_brgm),
                price_energy=rnd(p.energy),
                price_reserve=rnd(p.reserve),
                price_regcap=rnd(p.regcap),
                price_mileage=rnd(p.mileage),
                soc=rnd(s.soc),
                revenue_energy=rnd(p.energy * (v.p_bs - v.p_bd) * dt),
                revenue_reserve=rnd(p.reserve * v.p_brs * dt),
                revenue_regcap=rnd(p.regcap * v.p_brgc * dt),
                revenue_mileage=rnd(p.mileage * v.p_brgm * dt),
            ))
        return cls(records=records, soc_init=scn.bess.soc_init)

    def totals(self) -> dict[str, float]:
        keys = ("energy", "reserve", "regcap", "mileage")
        out = {k: sum(getattr(r, f"revenue_{k}") for r in self.records) for k in keys}
        out["total"] = sum(out.values())
        return {k: round(v, REVENUE_DECIMALS) for k, v in out.items()}

    def tracking_interval(self, t: int) -> agc.TrackingInterval:
        start = self.soc_init if t == 0 else self.records[t - 1].soc
        r = self.records[t]
        return agc.TrackingInterval(
            start_soc=start,
            discharge_mw=r.sell_award,
            charge_mw=r.buy_award,
            regulation_mw=r.regcap_award,
            delta_t=r.delta_t,
        )


@dataclass
class CaseReport:
    label: str
    mask: MarketMask
    scenario_fingerprint: str
    status: str
    mip_gap: float
    objective: float
    schedule: BessSchedule
    totals: dict[str, float]
    verification: VerificationReport
    counts: dict[str, int]
    files: dict[str, str] = field(default_factory=dict)


def run_case(scn: Scenario, mask: MarketMask | None = None,
             settings: SolverSettings = SolverSettings(),
             terminal_soc_equality: bool = False) -> CaseReport:
    """Assemble, solve, verify, and summarize one participation case.

    A verification failure aborts the run: a report built on an unverified
    solve would publish schedule rows the clearing does not support.
    """
    if mask is not None:
        scn = scn.with_mask(mask)
    problems = validate_scenario(scn)
    if problems:
        raise HarnessError("invalid scenario: " + "; ".join(problems))

    built = bilevel.assemble_milp(scn, terminal_soc_equality=terminal_soc_equality)
    outcome = solver.solve_milp(built.milp, gap_tol=settings.gap_tol,
                                time_limit=settings.time_limit, seed=settings.seed)
    if outcome.status == solver.INFEASIBLE:
        raise CaseInfeasibleError("bidding problem infeasible")
    if outcome.status == solver.TIME_LIMIT:
        raise CaseTimeLimitError(
            f"time limit {settings.time_limit}s reached (gap {outcome.mip_gap})"
        )
    if outcome.status not in (solver.OPTIMAL, solver.GAP_LIMIT):
        raise HarnessError(f"solver returned {outcome.status}")

    sol = bilevel.extract_solution(built, outcome)
    report = bilevel.verify_bilevel_solution(scn, built, outcome, sol)
    if not report.passed:
        raise VerificationFailedError(report)

    schedule = BessSchedule.from_solution(scn, sol)
    return CaseReport(
        label=scn.market_mask.label(),
        mask=scn.market_mask,
        scenario_fingerprint=scenario_fingerprint(scn.with_mask(MarketMask())),
        status=outcome.status,
        mip_gap=float(outcome.mip_gap) if outcome.mip_gap is not None else 0.0,
        objective=float(outcome.objective),
        schedule=schedule,
        totals=schedule.totals(),
        verification=report,
        counts=built.counts,
    )


def replay_agc(report: CaseReport, bess: BessParams, seeds: range | list[int] = range(10),
               samples: int = agc.DEFAULT_SAMPLES) -> list[agc.ExcursionReport]:
    """Replay seeded AGC traces against every interval of a solved case."""
    out: list[agc.ExcursionReport] = []
    for seed in seeds:
        trace = agc.generate_signal(seed, samples=samples)
        for t in range(len(report.schedule.records)):
            out.append(agc.simulate_tracking(
                report.schedule.tracking_interval(t), trace,
                bess.soc_min, bess.soc_max,
            ))
    return out


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    revenue: float
    bids: list[BessBids]
    evaluated: int
    feasible: int
    grid_step: float


def _interval_grid(scn: Scenario, step: float) -> list[BessBids]:
    rate = scn.bess.power_rate
    mask = scn.market_mask
    # half-open grid, then the rate endpoint; arange never emits the stop
    values = [float(v) for v in np.arange(0.0, rate, step)] + [rate]
    zero = [0.0]
    energy = values if mask.energy else zero
    combos = []
    for s, d in itertools.product(energy, energy):
        if s > 0.0 and d > 0.0:
            continue  # one side of the energy market per interval
        for rs in (values if mask.reserve else zero):
            for rg in (values if mask.regulation else zero):
                combos.append(BessBids(sell=s, buy=d, reserve=rs, regcap=rg))
    return combos


def brute_force_oracle(scn: Scenario, bid_grid_step: float,
                       max_evaluations: int = 20_000_000) -> OracleResult:
    """Grid search over quantity bids with exact per-interval clearing.

    Clears each interval once per grid combination, then joins intervals
    under the SOC recursion and headroom rules. The result is a guaranteed
    lower bound on the true optimum (grid under-approximation). Only
    horizons of one or two intervals are supported; anything larger is the
    MILP's job.
    """
    if scn.n_intervals > 2:
        raise OracleSizeError(f"oracle supports at most 2 intervals, got {scn.n_intervals}")
    if bid_grid_step <= 0:
        raise ValueError("bid_grid_step must be > 0")
    bess = scn.bess
    combos = _interval_grid(scn, bid_grid_step)
    total = len(combos) ** scn.n_intervals
    if total > max_evaluations:
        raise OracleSizeError(
            f"{total} grid evaluations exceed the {max_evaluations} cap; "
            "enlarge the step or shrink the instance"
        )

    per_interval = []
    for t in range(scn.n_intervals):
        cleared = []
        for bids in combos:
            res = clearing.clear_interval(clearing.build_ll_interval(scn, t, bids))
            v = res.variables
            lay = res.layout
            revenue = (
                res.row_duals[lay.row_balance] * (v.p_bs - v.p_bd)
                + res.row_duals[lay.row_reserve_req] * v.p_brs
                + res.row_duals[lay.row_regcap_req] * v.p_brgc
                + res.row_duals[lay.row_mileage_req] * v.p_brgm
            )
            cleared.append((bids, v, float(revenue)))
        per_interval.append(cleared)

    def interval_arrays(t: int):
        c = per_interval[t]
        dt = scn.intervals[t].delta_t
        rev = np.array([r for _, _, r in c])
        de = np.array([(v.p_bd - v.p_bs) * dt for _, v, _ in c])
        hold = np.array([(v.p_brgc + v.p_brs) * dt for _, v, _ in c])
        ceil = np.array([v.p_brgc * dt for _, v, _ in c])
        net = np.array([v.p_bd - v.p_bs - v.p_brs for _, v, _ in c])
        envelope = np.array([
            (n >= -bess.power_rate + v.p_brgc - 1e-9) and (n <= bess.power_rate - v.p_brgc + 1e-9)
            for n, (_, v, _) in zip(net, c)
        ])
        return rev, de, hold, ceil, envelope

    rev0, de0, hold0, ceil0, env0 = interval_arrays(0)
    soc1 = bess.soc_init + de0
    ok0 = (env0
           & (soc1 >= bess.soc_min + hold0 - 1e-9)
           & (soc1 <= bess.soc_max - ceil0 + 1e-9))

    if scn.n_intervals == 1:
        evaluated = len(combos)
        if not ok0.any():
            raise HarnessError("no feasible grid point; the zero bid should always be feasible")
        best = int(np.argmax(np.where(ok0, rev0, -np.inf)))
        return OracleResult(revenue=float(rev0[best]), bids=[per_interval[0][best][0]],
                            evaluated=evaluated, feasible=int(ok0.sum()),
                            grid_step=bid_grid_step)

    rev1, de1, hold1, ceil1, env1 = interval_arrays(1)
    evaluated = len(combos) ** 2
    soc2 = soc1[:, None] + de1[None, :]
    ok = (ok0[:, None]
          & env1[None, :]
          & (soc2 >= bess.soc_min + hold1[None, :] - 1e-9)
          & (soc2 <= bess.soc_max - ceil1[None, :] + 1e-9))
    totals = rev0[:, None] + rev1[None, :]
    totals = np.where(ok, totals, -np.inf)
    i, j = np.unravel_index(int(np.argmax(totals)), totals.shape)
    if not np.isfinite(totals[i, j]):
        raise HarnessError("no feasible grid point; the zero bid should always be feasible")
    return OracleResult(
        revenue=float(totals[i, j]),
        bids=[per_interval[0][i][0], per_interval[1][j][0]],
        evaluated=evaluated,
        feasible=int(ok.sum()),
        grid_step=bid_grid_step,
    )


# ---------------------------------------------------------------------------
# cross-case comparison and file emission
# ---------------------------------------------------------------------------


@dataclass
class CaseComparison:
    rows: list[dict]
    monotonicity: dict[str, bool]

    def to_text(self) -> str:
        header = f"{'case':<10}{'energy':>14}{'reserve':>14}{'regcap':>14}{'mileage':>14}{'total':>14}"
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r['label']:<10}"
                f"{r['energy']:>14.4f}{r['reserve']:>14.4f}"
                f"{r['regcap']:>14.4f}{r['mileage']:>14.4f}{r['total']:>14.4f}"
            )
        for name, ok in sorted(self.monotonicity.items()):
            lines.append(f"{name}: {'ok' if ok else 'VIOLATED'}")
        return "\n".join(lines)


def _mask_subset(a: MarketMask, b: MarketMask) -> bool:
    return ((not a.energy or b.energy) and (not a.reserve or b.reserve)
            and (not a.regulation or b.regulation))


def compare_cases(reports: list[CaseReport]) -> CaseComparison:
    """Cross-case revenue table with participation-monotonicity flags.

    All reports must come from the same scenario; widening the market mask
    can only add feasible bid strategies, so totals along every mask-subset
    chain must be non-decreasing (up to the achieved MIP gaps).
    """
    if not reports:
        raise ValueError("no case reports to compare")
    prints = {r.scenario_fingerprint for r in reports}
    if len(prints) > 1:
        raise ValueError(f"scenario fingerprint mismatch across reports: {sorted(prints)}")
    rows = []
    for r in reports:
        row = {"label": r.label, "objective": r.objective, "gap": r.mip_gap}
        row.update(r.totals)
        rows.append(row)
    monotonicity: dict[str, bool] = {}
    for ra, rb in itertools.permutations(reports, 2):
        if ra.label != rb.label and _mask_subset(ra.mask, rb.mask):
            slack = abs(rb.objective) * max(ra.mip_gap, rb.mip_gap) + 1e-6
            monotonicity[f"{ra.label}<={rb.label}"] = (
                ra.totals["total"] <= rb.totals["total"] + slack
            )
    return CaseComparison(rows=rows, monotonicity=monotonicity)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_outputs(report: CaseReport, out_dir: str | Path) -> dict[str, str]:
    """Write the interval table, the case summary, and plot-data series.

    Output bytes are a pure function of the report: no timestamps, no
    environment details, keys sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}

    intervals = out / "intervals.csv"
    with intervals.open("w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# schema: {SCHEMA_INTERVALS}\n")
        fh.write(",".join(FIELD_ORDER) + "\n")
        for r in report.schedule.records:
            fh.write(",".join(_fmt(getattr(r, k)) for k in FIELD_ORDER) + "\n")
    files["intervals"] = str(intervals)

    soc = out / "soc_trace.csv"
    with soc.open("w", encoding="ascii", newline="\n") as fh:
        fh.write("t,soc\n")
        fh.write(f"-1,{_fmt(report.schedule.soc_init)}\n")
        for r in report.schedule.records:
            fh.write(f"{r.t},{_fmt(r.soc)}\n")
    files["soc_trace"] = str(soc)

    revenue = out / "revenue_traces.csv"
    with revenue.open("w", encoding="ascii", newline="\n") as fh:
        fh.write("t,revenue_energy,revenue_reserve,revenue_regcap,revenue_mileage\n")
        for r in report.schedule.records:
            fh.write(f"{r.t},{_fmt(r.revenue_energy)},{_fmt(r.revenue_reserve)},"
                     f"{_fmt(r.revenue_regcap)},{_fmt(r.revenue_mileage)}\n")
    files["revenue_traces"] = str(revenue)

    summary = out / "summary.yaml"
    doc = {
        "schema": SCHEMA_SUMMARY,
        "case": report.label,
        "mask": report.mask.label(),
        "scenario_fingerprint": report.scenario_fingerprint,
        "status": report.status,
        "mip_gap": float(report.mip_gap),
        "objective": float(report.objective),
        "totals": {k: float(v) for k, v in report.totals.items()},
        "counts": dict(report.counts),
        "verification": {
            "passed": report.verification.passed,
            "mismatches": list(report.verification.mismatches),
            "notes": list(report.verification.notes),
            "revenue_milp": float(report.verification.revenue_milp),
            "revenue_from_duals": float(report.verification.revenue_from_duals),
        },
    }
    with summary.open("w", encoding="ascii", newline="\n") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)
    files["summary"] = str(summary)

    report.files = files
    return files


# ---------------------------------------------------------------------------
# reference fixtures
# ---------------------------------------------------------------------------


def reference_scenario(mask: MarketMask = MarketMask(),
                       buy_price_bid: float = 100.0) -> Scenario:
    """Full-size reference system: 96 intervals, five generators, 400 MWh
    storage. Sized for MPS export rather than the embedded solver."""
    return synthesize_scenario(
        default_patterns(),
        market_mask=mask,
        bess_price_bids=BessPriceBids(buy=buy_price_bid),
    )


def desk_scenario(mask: MarketMask = MarketMask(),
                  energy_capacity: float = 100.0,
                  power_rate: float = 10.0,
                  soc_init: float = 0.0,
                  buy_price_bid: float = 100.0) -> Scenario:
    """Reduced fixture that the embedded solver handles quickly.

    24 hourly intervals subsampled from the packaged patterns, three
    generators with capacities and ramps scaled to 30%, a 100 MWh / 10 MW
    storage unit, and a 250 MW peak. The storage buy price bid sits above
    every clearing price so demand bids clear whenever submitted.
    """
    price, load = default_patterns()
    rows = []
    for gid, base in (("g1", 0), ("g2", 1), ("g4", 3)):
        g = DEFAULT_GENERATOR_TABLE[base]
        rows.append(GeneratorParams(
            gen_id=gid,
            base_price_bid=g.base_price_bid,
            p_max=g.p_max * 0.3,
            reserve_ramp=g.reserve_ramp * 0.3,
            regulation_ramp=g.regulation_ramp * 0.3,
        ))
    return synthesize_scenario(
        (price[::4], load[::4]),
        generator_table=tuple(rows),
        bess_params=BessParams(energy_capacity=energy_capacity,
                               power_rate=power_rate, soc_init=soc_init),
        peak_load_mw=250.0,
        delta_t=1.0,
        market_mask=mask,
        bess_price_bids=BessPriceBids(buy=buy_price_bid),
    )
