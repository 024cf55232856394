"""Shared scenario builders for the test suite."""

from bessbid.scenario import (
    BessParams,
    BessPriceBids,
    GeneratorParams,
    IntervalData,
    MarketMask,
    Scenario,
)

GEN_CHEAP = GeneratorParams("a", 10.0, 100.0, 20.0, 10.0)
GEN_DEAR = GeneratorParams("b", 20.0, 100.0, 20.0, 10.0)


def build_scenario(gens, bess, loads, delta_t=0.25, reserve_frac=0.0,
                   regcap_frac=0.0, mileage_factor=1.75, ancillary_ratio=0.0,
                   price_factors=None, mask=MarketMask(), beta=BessPriceBids()):
    """Scenario from explicit loads; requirements scale with load, energy bids
    scale with optional per-interval price factors."""
    intervals = []
    for t, load in enumerate(loads):
        pf = 1.0 if price_factors is None else price_factors[t]
        e_bids = tuple(g.base_price_bid * pf for g in gens)
        regcap = regcap_frac * load
        intervals.append(IntervalData(
            index=t, delta_t=delta_t, load=float(load),
            reserve_req=reserve_frac * load, regcap_req=regcap,
            mileage_req=mileage_factor * regcap,
            gen_energy_bids=e_bids,
            gen_reserve_bids=tuple(0.15 * ancillary_ratio * b for b in e_bids),
            gen_regcap_bids=tuple(0.4 * ancillary_ratio * b for b in e_bids),
            gen_mileage_bids=tuple(0.07 * ancillary_ratio * b for b in e_bids),
            bess_price_bids=beta,
        ))
    return Scenario(generators=tuple(gens), bess=bess,
                    intervals=tuple(intervals), market_mask=mask)
