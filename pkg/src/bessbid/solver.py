"""Embedded LP/MILP solving with dual extraction, plus MPS export/import.

LPs are solved with a dual-simplex backend so optimal bases are vertices and
constraint duals are available; MILPs go through branch-and-bound on binary
variables. Both paths report a uniform :class:`SolveOutcome`.

Dual sign convention: ``row_duals[r]`` is the sensitivity of the optimal
objective to the RHS of row ``r`` in the row's *original* sense. For a
minimization this means duals of ``>=`` rows are >= 0, duals of ``<=`` rows
are <= 0, equality duals are free. ``lower_duals``/``upper_duals`` are the
reduced costs attributed to variable bounds (>= 0 at lower, <= 0 at upper,
again for minimization; all signs flip for maximization).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog
from scipy.optimize import milp as _milp

log = logging.getLogger(__name__)

# status values of SolveOutcome
OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
GAP_LIMIT = "gap_limit"
TIME_LIMIT = "time_limit"

FEASIBILITY_TOL = 1e-7
DUALITY_GAP_TOL = 1e-6

SENSE_LE = "<"
SENSE_EQ = "="
SENSE_GE = ">"


class SolverError(RuntimeError):
    """Backend failure or contract violation (not a status like infeasible)."""


@dataclass
class LpProblem:
    """Linear program in row-sense form.

    ``a`` is the constraint matrix, ``senses`` holds one of '<', '=', '>' per
    row, ``lower``/``upper`` are variable bounds (+-inf allowed).
    """

    c: np.ndarray
    a: sp.csr_matrix
    senses: np.ndarray
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    maximize: bool = False
    row_names: list[str] | None = None
    col_names: list[str] | None = None

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    @property
    def n_cols(self) -> int:
        return self.a.shape[1]

    def validate(self) -> None:
        m, n = self.a.shape
        if len(self.c) != n:
            raise ValueError(f"objective length {len(self.c)} != {n} columns")
        if len(self.rhs) != m or len(self.senses) != m:
            raise ValueError(f"rhs/senses length mismatch with {m} rows")
        if len(self.lower) != n or len(self.upper) != n:
            raise ValueError(f"bounds length mismatch with {n} columns")
        bad = set(np.unique(self.senses)) - {SENSE_LE, SENSE_EQ, SENSE_GE}
        if bad:
            raise ValueError(f"unknown row senses: {sorted(bad)}")
        if np.any(self.lower > self.upper):
            k = int(np.argmax(self.lower > self.upper))
            raise ValueError(f"lower > upper for column {k}")


@dataclass
class MilpProblem(LpProblem):
    """LP plus integrality markers; every integer variable is a binary."""

    integrality: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.integrality is None:
            self.integrality = np.zeros(self.n_cols, dtype=np.int8)

    def validate(self) -> None:
        super().validate()
        if len(self.integrality) != self.n_cols:
            raise ValueError("integrality length mismatch")
        mask = np.asarray(self.integrality, dtype=bool)
        if np.any(self.lower[mask] < 0) or np.any(self.upper[mask] > 1):
            raise ValueError("integer variables must have bounds within [0, 1]")


@dataclass
class SolveOutcome:
    status: str
    objective: float | None = None
    x: np.ndarray | None = None
    row_duals: np.ndarray | None = None
    lower_duals: np.ndarray | None = None
    upper_duals: np.ndarray | None = None
    mip_gap: float | None = None
    node_count: int | None = None
    wall_time: float = 0.0
    feasibility_residual: float | None = None
    duality_gap_rel: float | None = None
    message: str = ""


def _bounds_list(lower: np.ndarray, upper: np.ndarray) -> list[tuple]:
    out = []
    for lo, up in zip(lower, upper):
        out.append((None if np.isneginf(lo) else float(lo),
                    None if np.isposinf(up) else float(up)))
    return out


def feasibility_residual(problem: LpProblem, x: np.ndarray) -> float:
    """Max violation of rows and bounds at x (0 when feasible)."""
    ax = problem.a.dot(x)
    resid = 0.0
    for sense, v, b in zip(problem.senses, ax, problem.rhs):
        if sense == SENSE_LE:
            resid = max(resid, v - b)
        elif sense == SENSE_GE:
            resid = max(resid, b - v)
        else:
            resid = max(resid, abs(v - b))
    lo_viol = np.max(problem.lower - x, initial=0.0)
    up_viol = np.max(x - problem.upper, initial=0.0)
    return float(max(resid, lo_viol, up_viol))


def solve_lp(problem: LpProblem) -> SolveOutcome:
    """Solve an LP with dual extraction (dual simplex, vertex solutions)."""
    problem.validate()
    t0 = time.perf_counter()

    le = np.flatnonzero(problem.senses == SENSE_LE)
    ge = np.flatnonzero(problem.senses == SENSE_GE)
    eq = np.flatnonzero(problem.senses == SENSE_EQ)

    a = problem.a.tocsr()
    # '>=' rows are negated into the '<=' block; duals are sign-corrected below
    a_ub = sp.vstack([a[le], -a[ge]], format="csr") if (len(le) + len(ge)) else sp.csr_matrix((0, problem.n_cols))
    b_ub = np.concatenate([problem.rhs[le], -problem.rhs[ge]])
    a_eq = a[eq] if len(eq) else sp.csr_matrix((0, problem.n_cols))
    b_eq = problem.rhs[eq]

    c = -problem.c if problem.maximize else problem.c
    res = linprog(
        c=c,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=_bounds_list(problem.lower, problem.upper),
        method="highs-ds",
        options={
            "primal_feasibility_tolerance": FEASIBILITY_TOL,
            "dual_feasibility_tolerance": FEASIBILITY_TOL,
        },
    )
    wall = time.perf_counter() - t0

    if res.status == 2:
        return SolveOutcome(status=INFEASIBLE, wall_time=wall, message=res.message)
    if res.status == 3:
        return SolveOutcome(status=UNBOUNDED, wall_time=wall, message=res.message)
    if res.status == 1:
        return SolveOutcome(status=TIME_LIMIT, wall_time=wall, message=res.message)
    if res.status != 0:
        raise SolverError(f"LP backend failure: {res.message}")

    # duals in the min orientation, then mapped back to original senses
    m_ub = res.ineqlin.marginals
    row_duals = np.zeros(problem.n_rows)
    row_duals[le] = m_ub[: len(le)]
    row_duals[ge] = -m_ub[len(le):]
    row_duals[eq] = res.eqlin.marginals
    lower_duals = np.array(res.lower.marginals, dtype=float)
    upper_duals = np.array(res.upper.marginals, dtype=float)

    # duality gap, computed in the min orientation
    fin_lo = np.isfinite(problem.lower)
    fin_up = np.isfinite(problem.upper)
    dual_obj = (
        float(b_ub @ m_ub) + float(b_eq @ res.eqlin.marginals)
        + float(problem.lower[fin_lo] @ lower_duals[fin_lo])
        + float(problem.upper[fin_up] @ upper_duals[fin_up])
    )
    gap_rel = abs(res.fun - dual_obj) / max(1.0, abs(res.fun))
    resid = feasibility_residual(problem, res.x)
    if resid > FEASIBILITY_TOL * 10 or gap_rel > DUALITY_GAP_TOL:
        raise SolverError(
            f"optimal solve violated numeric contracts: residual={resid:.3e}, gap={gap_rel:.3e}"
        )

    objective = -res.fun if problem.maximize else res.fun
    if problem.maximize:
        row_duals = -row_duals
        lower_duals = -lower_duals
        upper_duals = -upper_duals

    return SolveOutcome(
        status=OPTIMAL,
        objective=float(objective),
        x=np.array(res.x, dtype=float),
        row_duals=row_duals,
        lower_duals=lower_duals,
        upper_duals=upper_duals,
        wall_time=wall,
        feasibility_residual=resid,
        duality_gap_rel=gap_rel,
        message=res.message,
    )


def solve_milp(
    problem: MilpProblem,
    gap_tol: float = 1e-6,
    time_limit: float | None = None,
    seed: int | None = None,
) -> SolveOutcome:
    """Branch-and-bound solve of a binary MILP.

    ``seed`` is accepted for node-ordering reproducibility but the backend is
    already deterministic for fixed inputs, so it has no observable effect.
    """
    problem.validate()
    del seed  # determinism holds without it; kept for interface stability
    t0 = time.perf_counter()

    lb_rows = np.where(problem.senses == SENSE_LE, -np.inf, problem.rhs)
    ub_rows = np.where(problem.senses == SENSE_GE, np.inf, problem.rhs)
    constraints = [LinearConstraint(problem.a, lb_rows, ub_rows)] if problem.n_rows else []

    c = -problem.c if problem.maximize else problem.c
    options: dict = {"mip_rel_gap": float(gap_tol)}
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    res = _milp(
        c=c,
        constraints=constraints,
        integrality=problem.integrality,
        bounds=Bounds(problem.lower, problem.upper),
        options=options,
    )
    wall = time.perf_counter() - t0
    nodes = max(1, int(getattr(res, "mip_node_count", 0) or 0))
    gap = getattr(res, "mip_gap", None)
    gap = float(gap) if gap is not None else None

    if res.status == 2:
        return SolveOutcome(status=INFEASIBLE, wall_time=wall, message=res.message)
    if res.status == 3:
        return SolveOutcome(status=UNBOUNDED, wall_time=wall, message=res.message)
    if res.status == 4:
        if "unbounded" in res.message.lower():
            return SolveOutcome(status=UNBOUNDED, wall_time=wall, message=res.message)
        raise SolverError(f"MILP backend failure: {res.message}")

    objective = None
    x = None
    if res.x is not None:
        x = np.array(res.x, dtype=float)
        objective = float(-res.fun if problem.maximize else res.fun)

    if res.status == 1:
        return SolveOutcome(
            status=TIME_LIMIT, objective=objective, x=x, mip_gap=gap,
            node_count=nodes, wall_time=wall, message=res.message,
        )

    status = OPTIMAL if (gap is None or gap <= 1e-9) else GAP_LIMIT
    return SolveOutcome(
        status=status, objective=objective, x=x, mip_gap=gap,
        node_count=nodes, wall_time=wall,
        feasibility_residual=feasibility_residual(problem, x) if x is not None else None,
        message=res.message,
    )


def kkt_residuals(
    problem: LpProblem,
    x: np.ndarray,
    row_duals: np.ndarray,
    lower_duals: np.ndarray | None = None,
    upper_duals: np.ndarray | None = None,
) -> dict[str, float]:
    """First-order optimality residuals of (x, duals) for a minimization LP.

    Returns max absolute violations per block: ``stationarity`` for
    c - A'y - nu, ``primal`` for row/bound feasibility, ``dual_sign`` for
    dual feasibility, and ``cs`` for complementary slackness products.
    """
    if problem.maximize:
        raise ValueError("kkt_residuals expects a minimization problem")
    n = problem.n_cols
    nu_lo = np.zeros(n) if lower_duals is None else lower_duals
    nu_up = np.zeros(n) if upper_duals is None else upper_duals

    stat = problem.c - problem.a.T.dot(row_duals) - nu_lo - nu_up
    stationarity = float(np.max(np.abs(stat), initial=0.0))

    primal = feasibility_residual(problem, x)

    ax = problem.a.dot(x)
    slack = np.where(problem.senses == SENSE_LE, problem.rhs - ax, ax - problem.rhs)
    dual_sign = 0.0
    cs = 0.0
    for r in range(problem.n_rows):
        if problem.senses[r] == SENSE_LE:
            dual_sign = max(dual_sign, row_duals[r])       # must be <= 0
        elif problem.senses[r] == SENSE_GE:
            dual_sign = max(dual_sign, -row_duals[r])      # must be >= 0
        if problem.senses[r] != SENSE_EQ:
            cs = max(cs, abs(row_duals[r] * slack[r]))
    dual_sign = max(dual_sign, float(np.max(-nu_lo, initial=0.0)),
                    float(np.max(nu_up, initial=0.0)))
    fin_lo = np.isfinite(problem.lower)
    fin_up = np.isfinite(problem.upper)
    if np.any(fin_lo):
        cs = max(cs, float(np.max(np.abs(nu_lo[fin_lo] * (x - problem.lower)[fin_lo]), initial=0.0)))
    if np.any(fin_up):
        cs = max(cs, float(np.max(np.abs(nu_up[fin_up] * (problem.upper - x)[fin_up]), initial=0.0)))
    return {
        "stationarity": stationarity,
        "primal": primal,
        "dual_sign": float(dual_sign),
        "cs": float(cs),
    }


# ---------------------------------------------------------------------------
# MPS export / import
# ---------------------------------------------------------------------------

_SENSE_TO_MPS = {SENSE_LE: "L", SENSE_GE: "G", SENSE_EQ: "E"}
_MPS_TO_SENSE = {v: k for k, v in _SENSE_TO_MPS.items()}


class MpsFormatError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _num(v: float) -> str:
    """Shortest decimal literal that round-trips to the same float64."""
    return repr(float(v))


def _row_name(i: int) -> str:
    return f"R{i + 1:07d}"


def _col_name(j: int) -> str:
    return f"C{j + 1:07d}"


def export_mps(problem: LpProblem, path: str, name: str = "BESSBID") -> None:
    """Write fixed-format MPS with INTORG/INTEND integer markers.

    Canonical generated row/column names are used (R0000001...). When a float
    literal exceeds its 12-character field, the line gracefully widens into
    whitespace-separated (free) format, which the bundled parser and modern
    external readers both accept.
    """
    problem.validate()
    integrality = getattr(problem, "integrality", None)
    if integrality is None:
        integrality = np.zeros(problem.n_cols, dtype=np.int8)

    lines: list[str] = [f"NAME          {name}"]
    if problem.maximize:
        lines.append("OBJSENSE")
        lines.append("    MAX")
    lines.append("ROWS")
    lines.append(" N  OBJ")
    for i, sense in enumerate(problem.senses):
        lines.append(f" {_SENSE_TO_MPS[sense]}  {_row_name(i)}")

    def entry(col: str, row: str, val: float) -> str:
        return f"    {col:<10}{row:<10}{_num(val)}"

    lines.append("COLUMNS")
    csc = problem.a.tocsc()
    in_int = False
    marker = 0
    for j in range(problem.n_cols):
        is_int = bool(integrality[j])
        if is_int and not in_int:
            lines.append(f"    M{marker:<9}'MARKER'                 'INTORG'")
            marker += 1
            in_int = True
        elif not is_int and in_int:
            lines.append(f"    M{marker:<9}'MARKER'                 'INTEND'")
            marker += 1
            in_int = False
        cname = _col_name(j)
        # objective entry always written so every column is declared
        lines.append(entry(cname, "OBJ", problem.c[j]))
        for k in range(csc.indptr[j], csc.indptr[j + 1]):
            val = csc.data[k]
            if val != 0.0:
                lines.append(entry(cname, _row_name(csc.indices[k]), val))
    if in_int:
        lines.append(f"    M{marker:<9}'MARKER'                 'INTEND'")

    lines.append("RHS")
    for i, b in enumerate(problem.rhs):
        if b != 0.0:
            lines.append(entry("RHS", _row_name(i), b))

    lines.append("BOUNDS")
    for j in range(problem.n_cols):
        cname = _col_name(j)
        lo, up = problem.lower[j], problem.upper[j]
        if integrality[j]:
            lines.append(f" BV BND       {cname}")
            continue
        if np.isneginf(lo) and np.isposinf(up):
            lines.append(f" FR BND       {cname}")
            continue
        if lo == up:
            lines.append(f" FX BND       {cname:<10}{_num(lo)}")
            continue
        if np.isneginf(lo):
            lines.append(f" MI BND       {cname}")
        elif lo != 0.0:
            lines.append(f" LO BND       {cname:<10}{_num(lo)}")
        if not np.isposinf(up):
            lines.append(f" UP BND       {cname:<10}{_num(up)}")
    lines.append("ENDATA")

    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    log.info("wrote MPS: %s rows=%d cols=%d", path, problem.n_rows, problem.n_cols)


def import_mps(path: str) -> MilpProblem:
    """Parse an MPS file written by :func:`export_mps` (free-format tolerant)."""
    with open(path, "r", encoding="ascii") as fh:
        raw = fh.readlines()

    section = None
    maximize = False
    obj_row: str | None = None
    row_order: list[str] = []
    row_sense: dict[str, str] = {}
    col_order: list[str] = []
    col_index: dict[str, int] = {}
    col_int: list[bool] = []
    obj_coef: dict[int, float] = {}
    entries: list[tuple[int, int, float]] = []
    rhs_map: dict[str, float] = {}
    bound_recs: list[tuple[str, str, float | None, int]] = []
    in_int = False
    saw_endata = False
    expect_objsense_value = False

    for ln, rawline in enumerate(raw, start=1):
        line = rawline.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("*"):
            continue
        if not line[0].isspace():
            fields = line.split()
            head = fields[0].upper()
            if head == "NAME":
                section = "NAME"
                continue
            if head == "OBJSENSE":
                section = "OBJSENSE"
                expect_objsense_value = True
                if len(fields) > 1:
                    maximize = fields[1].upper() == "MAX"
                    expect_objsense_value = False
                continue
            if head in ("ROWS", "COLUMNS", "RHS", "BOUNDS"):
                section = head
                continue
            if head == "RANGES":
                raise MpsFormatError("RANGES section is not supported", ln)
            if head == "ENDATA":
                saw_endata = True
                break
            raise MpsFormatError(f"unknown section header '{fields[0]}'", ln)

        fields = line.split()
        if section == "OBJSENSE" and expect_objsense_value:
            maximize = fields[0].upper() == "MAX"
            expect_objsense_value = False
            continue
        if section == "ROWS":
            if len(fields) != 2:
                raise MpsFormatError("ROWS entries need exactly [sense, name]", ln)
            sense, rname = fields[0].upper(), fields[1]
            if sense == "N":
                if obj_row is None:
                    obj_row = rname
                continue
            if sense not in _MPS_TO_SENSE:
                raise MpsFormatError(f"unknown row sense '{fields[0]}'", ln)
            if rname in row_sense:
                raise MpsFormatError(f"duplicate row '{rname}'", ln)
            row_order.append(rname)
            row_sense[rname] = _MPS_TO_SENSE[sense]
            continue
        if section == "COLUMNS":
            if len(fields) >= 3 and fields[1] == "'MARKER'":
                kind = fields[-1].strip("'").upper()
                if kind == "INTORG":
                    in_int = True
                elif kind == "INTEND":
                    in_int = False
                else:
                    raise MpsFormatError(f"unknown marker '{fields[-1]}'", ln)
                continue
            if len(fields) not in (3, 5):
                raise MpsFormatError("COLUMNS entries need 1 or 2 (row, value) pairs", ln)
            cname = fields[0]
            if cname not in col_index:
                col_index[cname] = len(col_order)
                col_order.append(cname)
                col_int.append(in_int)
            j = col_index[cname]
            for rname, sval in zip(fields[1::2], fields[2::2]):
                try:
                    val = float(sval)
                except ValueError:
                    raise MpsFormatError(f"bad numeral '{sval}'", ln) from None
                if rname == obj_row:
                    obj_coef[j] = val
                elif rname in row_sense:
                    entries.append((rname, j, val))
                else:
                    raise MpsFormatError(f"unknown row '{rname}' in COLUMNS", ln)
            continue
        if section == "RHS":
            if len(fields) not in (3, 5):
                raise MpsFormatError("RHS entries need 1 or 2 (row, value) pairs", ln)
            for rname, sval in zip(fields[1::2], fields[2::2]):
                if rname not in row_sense:
                    raise MpsFormatError(f"unknown row '{rname}' in RHS", ln)
                try:
                    rhs_map[rname] = float(sval)
                except ValueError:
                    raise MpsFormatError(f"bad numeral '{sval}'", ln) from None
            continue
        if section == "BOUNDS":
            btype = fields[0].upper()
            if btype in ("BV", "FR", "MI", "PL"):
                if len(fields) != 3:
                    raise MpsFormatError(f"{btype} bound needs [type, set, column]", ln)
                bound_recs.append((btype, fields[2], None, ln))
            elif btype in ("UP", "LO", "FX"):
                if len(fields) != 4:
                    raise MpsFormatError(f"{btype} bound needs [type, set, column, value]", ln)
                try:
                    bound_recs.append((btype, fields[2], float(fields[3]), ln))
                except ValueError:
                    raise MpsFormatError(f"bad numeral '{fields[3]}'", ln) from None
            else:
                raise MpsFormatError(f"unknown bound type '{fields[0]}'", ln)
            continue
        raise MpsFormatError("data line outside any section", ln)

    if not saw_endata:
        raise MpsFormatError("truncated file: ENDATA missing", len(raw))
    if obj_row is None:
        raise MpsFormatError("no objective (N) row declared", len(raw))

    n, m = len(col_order), len(row_order)
    row_idx = {rname: i for i, rname in enumerate(row_order)}
    c = np.zeros(n)
    for j, v in obj_coef.items():
        c[j] = v
    if entries:
        rows = [row_idx[rname] for rname, _, _ in entries]
        cols = [j for _, j, _ in entries]
        vals = [v for _, _, v in entries]
        a = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
    else:
        a = sp.csr_matrix((m, n))
    senses = np.array([row_sense[rname] for rname in row_order])
    rhs = np.array([rhs_map.get(rname, 0.0) for rname in row_order])

    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    integrality = np.array(col_int, dtype=np.int8)
    for btype, cname, val, ln in bound_recs:
        if cname not in col_index:
            raise MpsFormatError(f"unknown column '{cname}' in BOUNDS", ln)
        j = col_index[cname]
        if btype == "BV":
            lower[j], upper[j] = 0.0, 1.0
            integrality[j] = 1
        elif btype == "FR":
            lower[j], upper[j] = -np.inf, np.inf
        elif btype == "MI":
            lower[j] = -np.inf
        elif btype == "PL":
            upper[j] = np.inf
        elif btype == "UP":
            upper[j] = val
        elif btype == "LO":
            lower[j] = val
        elif btype == "FX":
            lower[j] = upper[j] = val

    return MilpProblem(
        c=c, a=a, senses=senses, rhs=rhs, lower=lower, upper=upper,
        maximize=maximize, row_names=list(row_order), col_names=list(col_order),
        integrality=integrality,
    )
