"""Single-level reformulation: KKT system, big-M switching, linearized
objective, assembled MILP, and post-solve verification."""

import numpy as np
import pytest

from bessbid import bilevel, solver
from bessbid.clearing import ZERO_BIDS, BessBids, build_ll_interval, clear_interval
from bessbid.scenario import BessParams, BessPriceBids, GeneratorParams, MarketMask
from conftest import GEN_CHEAP, GEN_DEAR, build_scenario

EAGER_BUYER = BessPriceBids(buy=100.0)


def solve_and_extract(scn, **kwargs):
    bl = bilevel.assemble_milp(scn, **kwargs)
    out = solver.solve_milp(bl.milp, gap_tol=1e-9, time_limit=120)
    assert out.status in (solver.OPTIMAL, solver.GAP_LIMIT)
    sol = bilevel.extract_solution(bl, out)
    return bl, out, sol


def test_comp_pair_count_matches_inequality_count():
    # 8G+13 inequalities per interval: 6G+9 rows plus 2G+4 variable floors
    for gens in ([GEN_CHEAP, GEN_DEAR], list((GEN_CHEAP,))):
        scn = build_scenario(gens, BessParams(10.0, 5.0), [150.0],
                             reserve_frac=0.1, regcap_frac=0.04,
                             ancillary_ratio=1.0)
        kkt = bilevel.derive_kkt(build_ll_interval(scn, 0))
        g = len(gens)
        assert len(kkt.comp_pairs) == 8 * g + 13
        rows = [p for p in kkt.comp_pairs if p.kind == "row"]
        floors = [p for p in kkt.comp_pairs if p.kind == "lower"]
        assert len(rows) == 6 * g + 9
        assert len(floors) == 2 * g + 4


def test_kkt_residuals_on_cleared_interval():
    scn = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0), [150.0],
                         reserve_frac=0.1, regcap_frac=0.04, ancillary_ratio=1.0,
                         beta=EAGER_BUYER)
    inst = build_ll_interval(scn, 0, BessBids(0.0, 3.0, 1.0, 1.0))
    res = clear_interval(inst)
    kkt = bilevel.derive_kkt(inst)
    resid = kkt.residuals(_to_vec(inst.layout, res.variables), res.row_duals,
                          res.lower_duals, bids=inst.bids)
    assert resid["stationarity"] <= 1e-8
    assert resid["primal"] <= 1e-8
    assert resid["dual_sign"] <= 1e-12
    assert resid["cs"] <= 1e-8


def test_stationarity_identity_for_storage_sell_column():
    # at any cleared point: dt*beta_sell - lambda - delta_sellcap - nu_sell = 0
    scn = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0), [150.0],
                         reserve_frac=0.1, ancillary_ratio=1.0,
                         beta=BessPriceBids(sell=2.0, buy=100.0))
    inst = build_ll_interval(scn, 0, BessBids(4.0, 0.0, 1.0, 0.0))
    res = clear_interval(inst)
    lay = inst.layout
    dt = lay.delta_t
    lam = res.row_duals[lay.row_balance]
    delta_sell = res.row_duals[lay.bid_rows["sell"]]
    nu_sell = res.lower_duals[lay.col_bs]
    assert dt * 2.0 - lam - delta_sell - nu_sell == pytest.approx(0.0, abs=1e-9)


def test_dual_cap_formula():
    scn = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0), [150.0],
                         ancillary_ratio=1.0, beta=EAGER_BUYER)
    kkt = bilevel.derive_kkt(build_ll_interval(scn, 0))
    # largest bid is the storage buy bid at 100; generator multiplier 10
    assert kkt.m_dual == pytest.approx(2.0 * 0.25 * 100.0 * 11.0)
    assert all(p.m_dual == kkt.m_dual for p in kkt.comp_pairs)
    # every pair is covered by a recorded derivation
    recorded = {r.target for r in kkt.m_registry}
    for p in kkt.comp_pairs:
        key = p.name if p.kind == "row" else f"lb:{p.name}"
        assert key in recorded


def test_linearized_revenue_matches_direct_on_random_clearings():
    rng = np.random.default_rng(7)
    scn = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(20.0, 5.0), [150.0] * 6,
                         reserve_frac=0.1, regcap_frac=0.04, ancillary_ratio=1.0,
                         beta=EAGER_BUYER)
    for t in range(6):
        raw = rng.uniform(0.0, 5.0, size=4)
        if rng.random() < 0.5:
            raw[0] = 0.0
        else:
            raw[1] = 0.0
        inst = build_ll_interval(scn, t, BessBids(*raw))
        res = clear_interval(inst)
        x = _to_vec(inst.layout, res.variables)
        lin = bilevel.linearized_revenue_value(inst.layout, x, res.row_duals)
        direct = bilevel.direct_revenue_value(inst.layout, x, res.row_duals)
        assert lin == pytest.approx(direct, abs=1e-7)


def test_linearized_revenue_zero_for_zero_bids():
    scn = build_scenario([GEN_CHEAP], BessParams(10.0, 5.0), [80.0])
    res = clear_interval(build_ll_interval(scn, 0, ZERO_BIDS))
    x = _to_vec(res.layout, res.variables)
    assert bilevel.linearized_revenue_value(res.layout, x, res.row_duals) == pytest.approx(0.0, abs=1e-9)


def test_known_sell_instance_revenue():
    # one generator bidding 10 with headroom; storage sells 20 MW at the
    # marginal price 10 -> revenue 200 per hour of interval length
    gen = GeneratorParams("g1", 10.0, 100.0, 20.0, 10.0)
    for dt in (0.25, 1.0):
        scn = build_scenario([gen], BessParams(40.0, 20.0, soc_init=40.0), [80.0],
                             delta_t=dt, mask=MarketMask(True, False, False))
        inst = build_ll_interval(scn, 0, BessBids(sell=20.0))
        res = clear_interval(inst)
        x = _to_vec(inst.layout, res.variables)
        rev = bilevel.direct_revenue_value(inst.layout, x, res.row_duals)
        assert rev == pytest.approx(200.0 * dt, rel=1e-9)
        assert bilevel.linearized_revenue_value(inst.layout, x, res.row_duals) == pytest.approx(200.0 * dt, rel=1e-9)
        # the bidding MILP reaches the same revenue by itself
        bl, out, sol = solve_and_extract(scn)
        assert out.objective == pytest.approx(200.0 * dt, rel=1e-6)


def test_binary_count_example():
    scn = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0),
                         [150.0, 150.0], reserve_frac=0.1, regcap_frac=0.04,
                         ancillary_ratio=1.0)
    bl = bilevel.assemble_milp(scn)
    # one mode binary per interval plus one per inequality (8G+13 = 29)
    assert bl.counts["mode_binaries"] == 2
    assert bl.counts["complementarity_binaries"] == 2 * 29
    assert bl.counts["binaries"] == 2 + 2 * 29


def test_masked_markets_shrink_binaries():
    base = dict(reserve_frac=0.1, regcap_frac=0.04, ancillary_ratio=1.0)
    full = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0),
                          [150.0], **base)
    energy_only = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0),
                                 [150.0], mask=MarketMask(True, False, False), **base)
    reserve_only = build_scenario([GEN_CHEAP, GEN_DEAR], BessParams(10.0, 5.0),
                                  [150.0], mask=MarketMask(False, True, False), **base)
    n_full = bilevel.assemble_milp(full).counts
    n_energy = bilevel.assemble_milp(energy_only).counts
    n_reserve = bilevel.assemble_milp(reserve_only).counts
    assert n_full["binaries"] == 1 + 29
    # energy-only drops the reserve bid row, the regcap bid row, both storage
    # mileage rows, and the brs/brgc floors
    assert n_energy["binaries"] == 1 + 29 - 4 - 2
    # reserve-only drops the mode binary, both energy bid rows and floors,
    # the regcap bid row, both storage mileage rows, and the brgc floor
    assert n_reserve["mode_binaries"] == 0
    assert n_reserve["binaries"] == 29 - 8


def test_ul_constraint_set_masking_and_recursion():
    scn = build_scenario([GEN_CHEAP], BessParams(40.0, 10.0, soc_init=4.0),
                         [80.0, 80.0], delta_t=0.25,
                         mask=MarketMask(True, False, False))
    ul = bilevel.build_ul_constraints(scn)
    assert ul.bounds[(0, "rsbid")] == (0.0, 0.0)
    assert ul.bounds[(0, "rgbid")] == (0.0, 0.0)
    assert ul.bounds[(1, "sbid")] == (0.0, 10.0)
    names = [name for _, _, _, name in ul.rows]
    assert "t0:sell_needs_discharge_mode" in names
    recursion = {name: (coeffs, sense, rhs)
                 for coeffs, sense, rhs, name in ul.rows if "recursion" in name}
    c0, s0, r0 = recursion["t0:soc_recursion"]
    assert s0 == "=" and r0 == 4.0
    assert c0 == {(0, "soc"): 1.0, (0, "bd"): -0.25, (0, "bs"): 0.25}
    c1, s1, r1 = recursion["t1:soc_recursion"]
    assert r1 == 0.0 and c1[(0, "soc")] == -1.0

    masked = build_scenario([GEN_CHEAP], BessParams(40.0, 10.0), [80.0],
                            mask=MarketMask(False, True, True))
    ul2 = bilevel.build_ul_constraints(masked)
    assert ul2.bounds[(0, "sbid")] == (0.0, 0.0)
    assert ul2.bounds[(0, "dbid")] == (0.0, 0.0)
    assert not any("mode" in name for _, _, _, name in ul2.rows)


def test_soc_recursion_arithmetic_through_milp():
    # charging 40 MW for four 15-minute intervals accumulates 40 MWh
    gen = GeneratorParams("g1", 10.0, 480.0, 96.0, 48.0)
    scn = build_scenario([gen], BessParams(400.0, 40.0, soc_init=0.0),
                         [400.0] * 4, delta_t=0.25,
                         mask=MarketMask(True, False, False), beta=EAGER_BUYER)
    bl, out, sol = solve_and_extract(scn)
    soc = 0.0
    for s in sol.intervals:
        soc += (s.variables.p_bd - s.variables.p_bs) * 0.25
        assert s.soc == pytest.approx(soc, abs=1e-9)
        assert s.variables.p_bs * s.variables.p_bd == pytest.approx(0.0, abs=1e-9)


def test_arbitrage_solution_verifies():
    gen = GeneratorParams("g1", 10.0, 100.0, 20.0, 10.0)
    scn = build_scenario([gen], BessParams(40.0, 20.0), [40.0, 80.0],
                         delta_t=1.0, reserve_frac=0.1, regcap_frac=0.04,
                         ancillary_ratio=1.0, price_factors=[0.5, 1.0],
                         beta=EAGER_BUYER)
    bl, out, sol = solve_and_extract(scn)
    assert out.objective > 0.0
    rep = bilevel.verify_bilevel_solution(scn, bl, out, sol)
    assert rep.passed, rep.summary()
    assert rep.max_residuals["cs"] <= 1e-7
    assert rep.revenue_from_duals == pytest.approx(rep.revenue_milp, rel=1e-5)
    # revenue decomposes into the linearized per-interval values
    per_interval = sum(
        bilevel.direct_revenue_value(b.kkt.layout, _to_vec(b.kkt.layout, s.variables), s.row_duals)
        for b, s in zip(bl.blocks, sol.intervals)
    )
    assert per_interval == pytest.approx(out.objective, rel=1e-6)


def test_participation_monotonicity_small():
    gen = GeneratorParams("g1", 10.0, 100.0, 20.0, 10.0)
    objs = {}
    for label, mask in (("e", MarketMask(True, False, False)),
                        ("er", MarketMask(True, True, False)),
                        ("all", MarketMask(True, True, True))):
        scn = build_scenario([gen], BessParams(40.0, 20.0, soc_init=10.0),
                             [40.0, 80.0], delta_t=1.0, reserve_frac=0.1,
                             regcap_frac=0.04, ancillary_ratio=1.0,
                             price_factors=[0.5, 1.0], mask=mask,
                             beta=EAGER_BUYER)
        _, out, _ = solve_and_extract(scn)
        objs[label] = out.objective
    assert objs["e"] <= objs["er"] + 1e-7
    assert objs["er"] <= objs["all"] + 1e-7


def test_verify_flags_corrupted_award():
    gen = GeneratorParams("g1", 10.0, 100.0, 20.0, 10.0)
    scn = build_scenario([gen], BessParams(40.0, 20.0), [40.0, 80.0],
                         delta_t=1.0, price_factors=[0.5, 1.0],
                         mask=MarketMask(True, False, False), beta=EAGER_BUYER)
    bl, out, sol = solve_and_extract(scn)
    sol.intervals[1].variables.p_gs[0] += 5.0
    rep = bilevel.verify_bilevel_solution(scn, bl, out, sol)
    assert not rep.passed
    # the corrupted dispatch breaks the power balance row
    assert any("balance" in m for m in rep.mismatches), rep.mismatches


def test_verify_flags_truncated_dual():
    gen = GeneratorParams("g1", 10.0, 100.0, 20.0, 10.0)
    scn = build_scenario([gen], BessParams(40.0, 20.0, soc_init=40.0), [80.0],
                         delta_t=1.0, mask=MarketMask(True, False, False))
    bl, out, sol = solve_and_extract(scn)
    assert out.objective > 0.0
    sol.intervals[0].row_duals[bl.blocks[0].kkt.layout.row_balance] = 0.0
    rep = bilevel.verify_bilevel_solution(scn, bl, out, sol)
    assert not rep.passed


def test_degenerate_tie_passes_with_note():
    # two identical generators produce tied clearing optima
    twin_a = GeneratorParams("a", 10.0, 100.0, 20.0, 10.0)
    twin_b = GeneratorParams("b", 10.0, 100.0, 20.0, 10.0)
    scn = build_scenario([twin_a, twin_b], BessParams(40.0, 20.0, soc_init=40.0),
                         [150.0], delta_t=1.0, mask=MarketMask(True, False, False))
    bl, out, sol = solve_and_extract(scn)
    rep = bilevel.verify_bilevel_solution(scn, bl, out, sol)
    assert rep.passed, rep.summary()


def test_terminal_soc_equality_option():
    gen = GeneratorParams("g1", 10.0, 100.0, 20.0, 10.0)
    scn = build_scenario([gen], BessParams(40.0, 20.0, soc_init=10.0),
                         [40.0, 80.0], delta_t=1.0, price_factors=[0.5, 1.0],
                         mask=MarketMask(True, False, False), beta=EAGER_BUYER)
    _, out_free, sol_free = solve_and_extract(scn)
    _, out_pin, sol_pin = solve_and_extract(scn, terminal_soc_equality=True)
    assert sol_pin.intervals[-1].soc == pytest.approx(10.0, abs=1e-7)
    assert out_pin.objective <= out_free.objective + 1e-7


def test_invalid_scenario_rejected():
    gen = GeneratorParams("g1", 10.0, 50.0, 20.0, 10.0)
    scn = build_scenario([gen], BessParams(40.0, 20.0), [100.0])
    with pytest.raises(bilevel.BilevelError, match="invalid scenario"):
        bilevel.assemble_milp(scn)


def _to_vec(layout, v):
    x = np.zeros(layout.n_cols)
    for j in range(layout.n_gens):
        x[layout.col_gen(j, 0)] = v.p_gs[j]
        x[layout.col_gen(j, 1)] = v.p_grs[j]
        x[layout.col_gen(j, 2)] = v.p_grgc[j]
        x[layout.col_gen(j, 3)] = v.p_grgm[j]
    x[layout.col_bs] = v.p_bs
    x[layout.col_bd] = v.p_bd
    x[layout.col_brs] = v.p_brs
    x[layout.col_brgc] = v.p_brgc
    x[layout.col_brgm] = v.p_brgm
    return x
