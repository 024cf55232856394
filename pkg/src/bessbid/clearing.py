"""Joint per-interval market clearing as an LP with price extraction.

One interval clears energy, spinning reserve, regulation capacity, and
regulation mileage together: generation cost plus storage bid cost is
minimized subject to generator limits, storage award caps, mileage coupling,
system requirements, and the power balance. Market prices are the duals of
the balance and requirement rows.

The row/column layout built here is the single source of truth that the
bilevel reformulation reuses for its KKT blocks, so index bookkeeping lives
in :class:`LlLayout`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import solver
from .scenario import Scenario

log = logging.getLogger(__name__)

STRONG_DUALITY_TOL = 1e-6  # relative
CS_TOL = 1e-6              # absolute on dual*slack products


class ClearingError(RuntimeError):
    pass


class InfeasibleMarketError(ClearingError):
    """Requirements exceed fleet capability."""


class UnboundedMarketError(ClearingError):
    """Malformed bids let cost decrease without bound."""


@dataclass(frozen=True)
class BessBids:
    """Quantity bids of the storage unit for one interval, MW."""

    sell: float = 0.0
    buy: float = 0.0
    reserve: float = 0.0
    regcap: float = 0.0

    def all_zero(self) -> bool:
        return self.sell == 0.0 and self.buy == 0.0 and self.reserve == 0.0 and self.regcap == 0.0


ZERO_BIDS = BessBids()


@dataclass
class LlVariables:
    """Cleared schedule for one interval, MW."""

    p_gs: np.ndarray
    p_grs: np.ndarray
    p_grgc: np.ndarray
    p_grgm: np.ndarray
    p_bs: float = 0.0
    p_bd: float = 0.0
    p_brs: float = 0.0
    p_brgc: float = 0.0
    p_brgm: float = 0.0


@dataclass(frozen=True)
class Prices:
    """Market-clearing prices, $/MWh."""

    energy: float
    reserve: float
    regcap: float
    mileage: float


class LlLayout:
    """Column/row indexing of one interval's clearing LP.

    Columns per generator j: [p_gs, p_grs, p_grgc, p_grgm]; storage columns
    [p_bs, p_bd, p_brs, p_brgc, p_brgm] follow when ``include_bess``.
    Rows per generator: output floor, output cap, reserve ramp cap,
    regulation ramp cap, mileage floor, mileage cap; then the four storage
    award caps and two storage mileage rows; then reserve, regulation
    capacity, mileage requirements and the power balance.

    Nonnegativity of p_gs, p_grgm, p_brgm is implied by rows (floor rows and
    mileage floors), so those columns are free; every other column has a zero
    lower bound. All upper limits are rows, never variable bounds.
    """

    GEN_COLS = 4
    GEN_ROWS = 6
    BESS_COLS = 5
    BESS_ROWS = 6
    SYS_ROWS = 4

    def __init__(self, scn: Scenario, t: int, include_bess: bool = True):
        self.scenario = scn
        self.t = t
        self.include_bess = include_bess
        it = scn.intervals[t]
        self.interval = it
        self.delta_t = it.delta_t
        gens = scn.generators
        g_n = len(gens)
        self.n_gens = g_n
        self.n_cols = self.GEN_COLS * g_n + (self.BESS_COLS if include_bess else 0)
        self.n_rows = self.GEN_ROWS * g_n + (self.BESS_ROWS if include_bess else 0) + self.SYS_ROWS

        dt = it.delta_t
        c = np.zeros(self.n_cols)
        lower = np.full(self.n_cols, -np.inf)
        upper = np.full(self.n_cols, np.inf)
        col_names: list[str] = []
        for j, g in enumerate(gens):
            base = self.GEN_COLS * j
            c[base + 0] = dt * it.gen_energy_bids[j]
            c[base + 1] = dt * it.gen_reserve_bids[j]
            c[base + 2] = dt * it.gen_regcap_bids[j]
            c[base + 3] = dt * it.gen_mileage_bids[j]
            lower[base + 1] = 0.0
            lower[base + 2] = 0.0
            col_names += [f"gs:{g.gen_id}", f"grs:{g.gen_id}",
                          f"grgc:{g.gen_id}", f"grgm:{g.gen_id}"]
        if include_bess:
            beta = it.bess_price_bids
            b0 = self.GEN_COLS * g_n
            c[b0 + 0] = dt * beta.sell
            c[b0 + 1] = -dt * beta.buy
            c[b0 + 2] = dt * beta.reserve
            c[b0 + 3] = dt * beta.regcap
            c[b0 + 4] = dt * beta.mileage
            lower[b0 + 0] = 0.0
            lower[b0 + 1] = 0.0
            lower[b0 + 2] = 0.0
            lower[b0 + 3] = 0.0
            col_names += ["bs", "bd", "brs", "brgc", "brgm"]
        self.c = c
        self.lower = lower
        self.upper = upper
        self.col_names = col_names

        rows: list[tuple[dict[int, float], str, float, str]] = []  # coeffs, sense, rhs, name
        for j, g in enumerate(gens):
            gs, grs, grgc, grgm = (self.GEN_COLS * j + k for k in range(4))
            gid = g.gen_id
            rows.append(({gs: 1.0, grgc: -1.0}, ">", g.p_min, f"gen_floor:{gid}"))
            rows.append(({gs: 1.0, grs: 1.0, grgc: 1.0}, "<", g.p_max, f"gen_cap:{gid}"))
            rows.append(({grs: 1.0}, "<", g.reserve_ramp, f"rs_ramp:{gid}"))
            rows.append(({grgc: 1.0}, "<", g.regulation_ramp, f"rg_ramp:{gid}"))
            rows.append(({grgm: 1.0, grgc: -1.0}, ">", 0.0, f"mil_floor:{gid}"))
            rows.append(({grgm: 1.0, grgc: -g.mileage_multiplier}, "<", 0.0, f"mil_cap:{gid}"))
        if include_bess:
            bs, bd, brs, brgc, brgm = (self.GEN_COLS * g_n + k for k in range(5))
            mult = scn.bess.mileage_multiplier
            # award caps: bid quantities land in the rhs at solve time
            rows.append(({bs: 1.0}, "<", 0.0, "bid_cap:sell"))
            rows.append(({bd: 1.0}, "<", 0.0, "bid_cap:buy"))
            rows.append(({brs: 1.0}, "<", 0.0, "bid_cap:reserve"))
            rows.append(({brgc: 1.0}, "<", 0.0, "bid_cap:regcap"))
            rows.append(({brgm: 1.0, brgc: -1.0}, ">", 0.0, "mil_floor:bess"))
            rows.append(({brgm: 1.0, brgc: -mult}, "<", 0.0, "mil_cap:bess"))
        reserve_row = {self.GEN_COLS * j + 1: 1.0 for j in range(g_n)}
        regcap_row = {self.GEN_COLS * j + 2: 1.0 for j in range(g_n)}
        mileage_row = {self.GEN_COLS * j + 3: 1.0 for j in range(g_n)}
        balance_row = {self.GEN_COLS * j + 0: 1.0 for j in range(g_n)}
        if include_bess:
            reserve_row[brs] = 1.0
            regcap_row[brgc] = 1.0
            mileage_row[brgm] = 1.0
            balance_row[bs] = 1.0
            balance_row[bd] = -1.0
        rows.append((reserve_row, ">", it.reserve_req, "req:reserve"))
        rows.append((regcap_row, ">", it.regcap_req, "req:regcap"))
        rows.append((mileage_row, ">", it.mileage_req, "req:mileage"))
        rows.append((balance_row, "=", it.load, "balance"))

        data, ri, ci = [], [], []
        senses, rhs, row_names = [], [], []
        for i, (coeffs, sense, b, name) in enumerate(rows):
            for col, val in coeffs.items():
                ri.append(i)
                ci.append(col)
                data.append(val)
            senses.append(sense)
            rhs.append(float(b))
            row_names.append(name)
        self.a = sp.coo_matrix((data, (ri, ci)), shape=(self.n_rows, self.n_cols)).tocsr()
        self.senses = np.array(senses)
        self.rhs_base = np.array(rhs)
        self.row_names = row_names

    # --- index helpers -----------------------------------------------------
    def col_gen(self, j: int, k: int) -> int:
        return self.GEN_COLS * j + k

    @property
    def col_bs(self) -> int:
        return self.GEN_COLS * self.n_gens + 0

    @property
    def col_bd(self) -> int:
        return self.GEN_COLS * self.n_gens + 1

    @property
    def col_brs(self) -> int:
        return self.GEN_COLS * self.n_gens + 2

    @property
    def col_brgc(self) -> int:
        return self.GEN_COLS * self.n_gens + 3

    @property
    def col_brgm(self) -> int:
        return self.GEN_COLS * self.n_gens + 4

    def row_gen(self, j: int, k: int) -> int:
        return self.GEN_ROWS * j + k

    @property
    def bid_rows(self) -> dict[str, int]:
        base = self.GEN_ROWS * self.n_gens
        return {"sell": base, "buy": base + 1, "reserve": base + 2, "regcap": base + 3}

    @property
    def row_mil_floor_bess(self) -> int:
        return self.GEN_ROWS * self.n_gens + 4

    @property
    def row_mil_cap_bess(self) -> int:
        return self.GEN_ROWS * self.n_gens + 5

    @property
    def row_reserve_req(self) -> int:
        return self.n_rows - 4

    @property
    def row_regcap_req(self) -> int:
        return self.n_rows - 3

    @property
    def row_mileage_req(self) -> int:
        return self.n_rows - 2

    @property
    def row_balance(self) -> int:
        return self.n_rows - 1

    # ------------------------------------------------------------------
    def rhs_for(self, bids: BessBids) -> np.ndarray:
        rhs = self.rhs_base.copy()
        if self.include_bess:
            br = self.bid_rows
            rhs[br["sell"]] = bids.sell
            rhs[br["buy"]] = bids.buy
            rhs[br["reserve"]] = bids.reserve
            rhs[br["regcap"]] = bids.regcap
        return rhs

    def build_lp(self, bids: BessBids = ZERO_BIDS) -> solver.LpProblem:
        return solver.LpProblem(
            c=self.c.copy(),
            a=self.a,
            senses=self.senses,
            rhs=self.rhs_for(bids),
            lower=self.lower.copy(),
            upper=self.upper.copy(),
            maximize=False,
            row_names=list(self.row_names),
            col_names=list(self.col_names),
        )

    def variables_from(self, x: np.ndarray) -> LlVariables:
        g_n = self.n_gens
        idx = np.arange(g_n) * self.GEN_COLS
        out = LlVariables(
            p_gs=x[idx + 0].copy(),
            p_grs=x[idx + 1].copy(),
            p_grgc=x[idx + 2].copy(),
            p_grgm=x[idx + 3].copy(),
        )
        if self.include_bess:
            out.p_bs = float(x[self.col_bs])
            out.p_bd = float(x[self.col_bd])
            out.p_brs = float(x[self.col_brs])
            out.p_brgc = float(x[self.col_brgc])
            out.p_brgm = float(x[self.col_brgm])
        return out

    def prices_from(self, row_duals: np.ndarray) -> Prices:
        dt = self.delta_t
        return Prices(
            energy=float(row_duals[self.row_balance] / dt),
            reserve=float(row_duals[self.row_reserve_req] / dt),
            regcap=float(row_duals[self.row_regcap_req] / dt),
            mileage=float(row_duals[self.row_mileage_req] / dt),
        )


@dataclass
class LlInstance:
    """A built clearing LP for one interval, ready to solve."""

    layout: LlLayout
    lp: solver.LpProblem
    bids: BessBids


@dataclass
class ClearingResult:
    t: int
    variables: LlVariables
    prices: Prices
    objective: float             # $, interval-length scaled
    row_duals: np.ndarray        # layout row order, carry the delta_t scaling
    lower_duals: np.ndarray
    duality_gap_rel: float
    cs_residual: float
    layout: LlLayout


def build_ll_interval(scn: Scenario, t: int, bids: BessBids = ZERO_BIDS) -> LlInstance:
    """Assemble one interval's joint clearing LP with the given storage bids."""
    if min(bids.sell, bids.buy, bids.reserve, bids.regcap) < 0:
        raise ValueError(f"interval {t}: bids must be >= 0, got {bids}")
    layout = LlLayout(scn, t, include_bess=True)
    return LlInstance(layout=layout, lp=layout.build_lp(bids), bids=bids)


def _solve_or_raise(lp: solver.LpProblem, t: int) -> solver.SolveOutcome:
    out = solver.solve_lp(lp)
    if out.status == solver.INFEASIBLE:
        raise InfeasibleMarketError(
            f"interval {t}: clearing infeasible (requirements exceed fleet capability)"
        )
    if out.status == solver.UNBOUNDED:
        raise UnboundedMarketError(f"interval {t}: clearing unbounded (malformed bids)")
    if out.status != solver.OPTIMAL:
        raise ClearingError(f"interval {t}: solver returned {out.status}")
    return out


def clear_interval(instance: LlInstance) -> ClearingResult:
    """Solve one interval and extract schedule, prices, and dual bookkeeping.

    When every storage bid is zero the storage columns are dropped before the
    solve and the full-layout duals are reconstructed afterwards, so prices
    are exactly the no-storage prices (zero-bid neutrality) and the returned
    duals still satisfy the full first-order system.
    """
    layout = instance.layout
    t = layout.t
    if instance.bids.all_zero():
        return _clear_interval_no_bess(layout.scenario, t, full_layout=layout)

    out = _solve_or_raise(instance.lp, t)
    result = ClearingResult(
        t=t,
        variables=layout.variables_from(out.x),
        prices=layout.prices_from(out.row_duals),
        objective=float(out.objective),
        row_duals=out.row_duals,
        lower_duals=out.lower_duals,
        duality_gap_rel=float(out.duality_gap_rel),
        cs_residual=0.0,
        layout=layout,
    )
    resid = solver.kkt_residuals(instance.lp, out.x, out.row_duals, out.lower_duals)
    result.cs_residual = resid["cs"]
    _check_result_contracts(result)
    return result


def _clear_interval_no_bess(scn: Scenario, t: int, full_layout: LlLayout | None = None) -> ClearingResult:
    reduced = LlLayout(scn, t, include_bess=False)
    lp = reduced.build_lp()
    out = _solve_or_raise(lp, t)

    full = full_layout if full_layout is not None else LlLayout(scn, t, include_bess=True)
    n_gen_rows = LlLayout.GEN_ROWS * reduced.n_gens
    n_gen_cols = LlLayout.GEN_COLS * reduced.n_gens

    x = np.zeros(full.n_cols)
    x[:n_gen_cols] = out.x

    row_duals = np.zeros(full.n_rows)
    row_duals[:n_gen_rows] = out.row_duals[:n_gen_rows]
    row_duals[full.row_reserve_req] = out.row_duals[reduced.row_reserve_req]
    row_duals[full.row_regcap_req] = out.row_duals[reduced.row_regcap_req]
    row_duals[full.row_mileage_req] = out.row_duals[reduced.row_mileage_req]
    row_duals[full.row_balance] = out.row_duals[reduced.row_balance]

    lower_duals = np.zeros(full.n_cols)
    lower_duals[:n_gen_cols] = out.lower_duals

    # storage duals reconstructed from stationarity; every storage row has
    # zero slack at zero bids so any nonnegative dual is complementary
    it = scn.intervals[t]
    beta = it.bess_price_bids
    dt = it.delta_t
    lam = row_duals[full.row_balance]
    y_rs = row_duals[full.row_reserve_req]
    y_c = row_duals[full.row_regcap_req]
    y_m = row_duals[full.row_mileage_req]
    mult = scn.bess.mileage_multiplier
    br = full.bid_rows

    w12 = max(0.0, dt * beta.mileage - y_m)
    w13 = max(0.0, y_m - dt * beta.mileage)
    row_duals[full.row_mil_floor_bess] = w12
    row_duals[full.row_mil_cap_bess] = -w13
    row_duals[br["sell"]] = min(0.0, dt * beta.sell - lam)
    lower_duals[full.col_bs] = max(0.0, dt * beta.sell - lam)
    row_duals[br["buy"]] = min(0.0, lam - dt * beta.buy)
    lower_duals[full.col_bd] = max(0.0, lam - dt * beta.buy)
    row_duals[br["reserve"]] = min(0.0, dt * beta.reserve - y_rs)
    lower_duals[full.col_brs] = max(0.0, dt * beta.reserve - y_rs)
    q = dt * beta.regcap + w12 - mult * w13 - y_c
    row_duals[br["regcap"]] = min(0.0, q)
    lower_duals[full.col_brgc] = max(0.0, q)

    result = ClearingResult(
        t=t,
        variables=full.variables_from(x),
        prices=full.prices_from(row_duals),
        objective=float(out.objective),
        row_duals=row_duals,
        lower_duals=lower_duals,
        duality_gap_rel=float(out.duality_gap_rel),
        cs_residual=0.0,
        layout=full,
    )
    resid = solver.kkt_residuals(full.build_lp(ZERO_BIDS), x, row_duals, lower_duals)
    result.cs_residual = resid["cs"]
    if resid["stationarity"] > 1e-7:
        raise ClearingError(
            f"interval {t}: reconstructed storage duals violate stationarity "
            f"({resid['stationarity']:.3e})"
        )
    _check_result_contracts(result)
    return result


def _check_result_contracts(result: ClearingResult) -> None:
    if result.duality_gap_rel > STRONG_DUALITY_TOL:
        raise ClearingError(
            f"interval {result.t}: strong-duality gap {result.duality_gap_rel:.3e}"
        )
    if result.cs_residual > CS_TOL:
        raise ClearingError(
            f"interval {result.t}: complementary slackness residual {result.cs_residual:.3e}"
        )


def clear_horizon(scn: Scenario, bids: list[BessBids] | None = None) -> list[ClearingResult]:
    """Clear every interval independently (no cross-interval coupling).

    ``bids=None`` clears with no storage participation at all; otherwise one
    :class:`BessBids` per interval is required.
    """
    n = scn.n_intervals
    if bids is not None and len(bids) != n:
        raise ValueError(f"need {n} bid quadruples, got {len(bids)}")
    results = []
    for t in range(n):
        try:
            if bids is None:
                results.append(_clear_interval_no_bess(scn, t))
            else:
                results.append(clear_interval(build_ll_interval(scn, t, bids[t])))
        except ClearingError:
            raise
        except Exception as exc:  # pragma: no cover - defensive
            raise ClearingError(f"interval {t}: {exc}") from exc
    return results
