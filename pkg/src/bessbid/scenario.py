"""Instance data and scenario synthesis from normalized price/load patterns.

A :class:`Scenario` carries everything one optimization run needs: the
generator fleet, the storage unit, per-interval loads, ancillary requirements,
and all price bids. Synthesis maps a normalized daily pattern onto a peak
load and per-generator base bids; ancillary prices and requirements are fixed
fractions of the energy bid and of load.
"""

from __future__ import annotations

import importlib.resources
import logging
from dataclasses import dataclass, replace

import numpy as np
import yaml

log = logging.getLogger(__name__)

SCHEMA_TAG = "bessbid-scenario/1"


class ScenarioError(ValueError):
    """Invalid scenario data or document."""


@dataclass(frozen=True)
class GeneratorParams:
    gen_id: str
    base_price_bid: float   # $/MWh
    p_max: float            # MW
    reserve_ramp: float     # MW
    regulation_ramp: float  # MW
    p_min: float = 0.0      # MW
    mileage_multiplier: float = 10.0


@dataclass(frozen=True)
class BessParams:
    energy_capacity: float  # MWh
    power_rate: float       # MW, charge and discharge limit
    soc_init: float = 0.0   # MWh
    soc_min: float = 0.0    # MWh
    soc_max: float | None = None  # MWh, defaults to energy_capacity
    mileage_multiplier: float = 10.0

    def __post_init__(self) -> None:
        if self.soc_max is None:
            object.__setattr__(self, "soc_max", self.energy_capacity)


@dataclass(frozen=True)
class MarketMask:
    """BESS participation flags; generators always clear in every market."""

    energy: bool = True
    reserve: bool = True
    regulation: bool = True

    @classmethod
    def from_case(cls, case: int) -> "MarketMask":
        table = {
            1: cls(True, False, False),
            2: cls(True, True, False),
            3: cls(True, False, True),
            4: cls(True, True, True),
        }
        if case not in table:
            raise ScenarioError(f"case must be 1..4, got {case}")
        return table[case]

    def label(self) -> str:
        for case in (1, 2, 3, 4):
            if self == MarketMask.from_case(case):
                return f"case{case}"
        parts = [n for n, on in (("energy", self.energy), ("reserve", self.reserve),
                                 ("regulation", self.regulation)) if on]
        return "+".join(parts) if parts else "none"


@dataclass(frozen=True)
class BessPriceBids:
    """Price bids of the storage unit, $/MWh (quantity bids live upstream)."""

    sell: float = 0.0
    buy: float = 0.0
    reserve: float = 0.0
    regcap: float = 0.0
    mileage: float = 0.0


@dataclass(frozen=True)
class IntervalData:
    index: int
    delta_t: float          # hours
    load: float             # MW
    reserve_req: float      # MW
    regcap_req: float       # MW
    mileage_req: float      # MW
    gen_energy_bids: tuple[float, ...]    # $/MWh per generator
    gen_reserve_bids: tuple[float, ...]
    gen_regcap_bids: tuple[float, ...]
    gen_mileage_bids: tuple[float, ...]
    bess_price_bids: BessPriceBids = BessPriceBids()


@dataclass(frozen=True)
class Scenario:
    generators: tuple[GeneratorParams, ...]
    bess: BessParams
    intervals: tuple[IntervalData, ...]
    market_mask: MarketMask = MarketMask()

    @property
    def n_intervals(self) -> int:
        return len(self.intervals)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    def with_mask(self, mask: MarketMask) -> "Scenario":
        return replace(self, market_mask=mask)


@dataclass(frozen=True)
class PriceRatios:
    """Ancillary price bids as multiples of each unit's energy bid."""

    reserve: float = 0.15
    regcap: float = 0.4
    mileage: float = 0.07


@dataclass(frozen=True)
class RequirementFractions:
    """System requirements as fractions of interval load."""

    reserve: float = 0.10
    regcap: float = 0.04
    mileage_mult: float = 1.75  # mileage requirement / regcap requirement


# five-unit reference fleet used by synthesized studies
DEFAULT_GENERATOR_TABLE: tuple[GeneratorParams, ...] = (
    GeneratorParams("g1", 10.0, 400.0, 80.0, 40.0),
    GeneratorParams("g2", 14.0, 300.0, 60.0, 30.0),
    GeneratorParams("g3", 15.0, 210.0, 42.0, 21.0),
    GeneratorParams("g4", 30.0, 350.0, 70.0, 35.0),
    GeneratorParams("g5", 40.0, 270.0, 54.0, 27.0),
)

DEFAULT_BESS = BessParams(energy_capacity=400.0, power_rate=40.0)


def _read_pattern_file(path) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ScenarioError(f"unreadable pattern file {path}: {exc}") from exc
    values = []
    for ln, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            v = float(text)
        except ValueError:
            raise ScenarioError(f"{path} line {ln}: not a number: {text!r}") from None
        if not (0.0 <= v <= 1.0):
            raise ScenarioError(f"{path} line {ln}: value {v} outside [0, 1]")
        values.append(v)
    if not values:
        raise ScenarioError(f"{path}: empty pattern file")
    return np.array(values)


def load_patterns(price_pattern_file, load_pattern_file) -> tuple[np.ndarray, np.ndarray]:
    """Read normalized price and load patterns (one value in [0,1] per line).

    The two files must be the same length and the load pattern must reach 1.
    """
    price = _read_pattern_file(price_pattern_file)
    load = _read_pattern_file(load_pattern_file)
    if len(price) != len(load):
        raise ScenarioError(
            f"pattern length mismatch: {len(price)} price vs {len(load)} load values"
        )
    if abs(load.max() - 1.0) > 1e-9:
        raise ScenarioError(f"load pattern max is {load.max()!r}, expected 1.0")
    return price, load


def default_patterns() -> tuple[np.ndarray, np.ndarray]:
    """The packaged 96-interval daily patterns (peak spanning the 73rd interval)."""
    data = importlib.resources.files("bessbid") / "data"
    return load_patterns(str(data / "price_pattern.csv"), str(data / "load_pattern.csv"))


def synthesize_scenario(
    patterns: tuple[np.ndarray, np.ndarray],
    generator_table: tuple[GeneratorParams, ...] = DEFAULT_GENERATOR_TABLE,
    bess_params: BessParams = DEFAULT_BESS,
    peak_load_mw: float = 1000.0,
    ratios: PriceRatios = PriceRatios(),
    req_fracs: RequirementFractions = RequirementFractions(),
    delta_t: float = 0.25,
    market_mask: MarketMask = MarketMask(),
    bess_price_bids: BessPriceBids = BessPriceBids(),
) -> Scenario:
    """Deterministically build a scenario from normalized patterns.

    Loads scale the load pattern to ``peak_load_mw``; each generator's energy
    bid scales its base bid by the price pattern; ancillary bids and system
    requirements are fixed ratios of those. Raises when the result violates
    scenario feasibility invariants.
    """
    price_pattern, load_pattern = patterns
    if min(ratios.reserve, ratios.regcap, ratios.mileage) <= 0:
        raise ScenarioError("price ratios must be positive")
    if min(req_fracs.reserve, req_fracs.regcap, req_fracs.mileage_mult) <= 0:
        raise ScenarioError("requirement fractions must be positive")

    intervals = []
    for t, (pp, lp) in enumerate(zip(price_pattern, load_pattern)):
        energy_bids = tuple(float(g.base_price_bid * pp) for g in generator_table)
        load = float(peak_load_mw * lp)
        regcap = req_fracs.regcap * load
        intervals.append(IntervalData(
            index=t,
            delta_t=float(delta_t),
            load=load,
            reserve_req=req_fracs.reserve * load,
            regcap_req=regcap,
            mileage_req=req_fracs.mileage_mult * regcap,
            gen_energy_bids=energy_bids,
            gen_reserve_bids=tuple(ratios.reserve * b for b in energy_bids),
            gen_regcap_bids=tuple(ratios.regcap * b for b in energy_bids),
            gen_mileage_bids=tuple(ratios.mileage * b for b in energy_bids),
            bess_price_bids=bess_price_bids,
        ))

    scn = Scenario(
        generators=tuple(generator_table),
        bess=bess_params,
        intervals=tuple(intervals),
        market_mask=market_mask,
    )
    violations = validate_scenario(scn)
    if violations:
        raise ScenarioError("synthesized scenario is invalid: " + "; ".join(violations))
    return scn


def validate_scenario(scn: Scenario) -> list[str]:
    """Named invariant violations; empty list means the scenario is usable."""
    v: list[str] = []
    for g in scn.generators:
        if not (0.0 <= g.p_min <= g.p_max):
            v.append(f"{g.gen_id}: requires 0 <= p_min <= p_max, got ({g.p_min}, {g.p_max})")
        if g.reserve_ramp < 0 or g.regulation_ramp < 0:
            v.append(f"{g.gen_id}: ramps must be >= 0")
        if g.mileage_multiplier < 1:
            v.append(f"{g.gen_id}: mileage_multiplier must be >= 1")

    b = scn.bess
    if not (0.0 <= b.soc_min <= b.soc_init <= b.soc_max <= b.energy_capacity):
        v.append("bess: requires 0 <= soc_min <= soc_init <= soc_max <= energy_capacity")
    if b.power_rate <= 0:
        v.append("bess: power_rate must be > 0")
    if b.mileage_multiplier < 1:
        v.append("bess: mileage_multiplier must be >= 1")

    if not scn.intervals:
        v.append("scenario: needs at least one interval")
    n_gen = scn.n_generators
    sum_pmax = sum(g.p_max for g in scn.generators)
    sum_rs_ramp = sum(g.reserve_ramp for g in scn.generators)
    sum_rg_ramp = sum(g.regulation_ramp for g in scn.generators)
    sum_mileage_cap = sum(g.mileage_multiplier * g.regulation_ramp for g in scn.generators)
    for it in scn.intervals:
        tag = f"interval {it.index}"
        if it.load <= 0:
            v.append(f"{tag}: load must be > 0")
        if it.delta_t <= 0:
            v.append(f"{tag}: delta_t must be > 0")
        if min(it.reserve_req, it.regcap_req, it.mileage_req) < 0:
            v.append(f"{tag}: requirements must be >= 0")
        for name, bids in (("energy", it.gen_energy_bids), ("reserve", it.gen_reserve_bids),
                           ("regcap", it.gen_regcap_bids), ("mileage", it.gen_mileage_bids)):
            if len(bids) != n_gen:
                v.append(f"{tag}: {name} bid count {len(bids)} != {n_gen} generators")
        # feasibility of clearing without the storage unit
        if sum_pmax < it.load + it.reserve_req + it.regcap_req - 1e-9:
            v.append(
                f"{tag}: fleet p_max {sum_pmax} cannot cover load+reserve+regcap "
                f"{it.load + it.reserve_req + it.regcap_req}"
            )
        if it.reserve_req > sum_rs_ramp + 1e-9:
            v.append(f"{tag}: reserve_req {it.reserve_req} exceeds fleet reserve ramp {sum_rs_ramp}")
        if it.regcap_req > sum_rg_ramp + 1e-9:
            v.append(f"{tag}: regcap_req {it.regcap_req} exceeds fleet regulation ramp {sum_rg_ramp}")
        if it.mileage_req > sum_mileage_cap + 1e-9:
            v.append(f"{tag}: mileage_req {it.mileage_req} exceeds fleet mileage capability {sum_mileage_cap}")
    return v


# ---------------------------------------------------------------------------
# scenario document serialization
# ---------------------------------------------------------------------------

_UNITS = {
    "power": "MW",
    "energy": "MWh",
    "price": "$/MWh",
    "delta_t": "hours",
}


def scenario_to_text(scn: Scenario) -> str:
    doc = {
        "schema": SCHEMA_TAG,
        "units": dict(_UNITS),
        "market_mask": {
            "energy": scn.market_mask.energy,
            "reserve": scn.market_mask.reserve,
            "regulation": scn.market_mask.regulation,
        },
        "bess": {
            "energy_capacity": scn.bess.energy_capacity,
            "power_rate": scn.bess.power_rate,
            "soc_init": scn.bess.soc_init,
            "soc_min": scn.bess.soc_min,
            "soc_max": scn.bess.soc_max,
            "mileage_multiplier": scn.bess.mileage_multiplier,
        },
        "generators": [
            {
                "id": g.gen_id,
                "base_price_bid": g.base_price_bid,
                "p_max": g.p_max,
                "p_min": g.p_min,
                "reserve_ramp": g.reserve_ramp,
                "regulation_ramp": g.regulation_ramp,
                "mileage_multiplier": g.mileage_multiplier,
            }
            for g in scn.generators
        ],
        "intervals": [
            {
                "delta_t": it.delta_t,
                "load": it.load,
                "reserve_req": it.reserve_req,
                "regcap_req": it.regcap_req,
                "mileage_req": it.mileage_req,
                "gen_energy_bids": list(it.gen_energy_bids),
                "gen_reserve_bids": list(it.gen_reserve_bids),
                "gen_regcap_bids": list(it.gen_regcap_bids),
                "gen_mileage_bids": list(it.gen_mileage_bids),
                "bess_price_bids": {
                    "sell": it.bess_price_bids.sell,
                    "buy": it.bess_price_bids.buy,
                    "reserve": it.bess_price_bids.reserve,
                    "regcap": it.bess_price_bids.regcap,
                    "mileage": it.bess_price_bids.mileage,
                },
            }
            for it in scn.intervals
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None, width=100)


def save_scenario(scn: Scenario, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scenario_to_text(scn))
    log.info("wrote scenario: %s (%d intervals, %d generators)",
             path, scn.n_intervals, scn.n_generators)


def scenario_from_text(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"unparsable scenario document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    tag = doc.get("schema")
    if tag != SCHEMA_TAG:
        raise ScenarioError(f"unsupported schema tag {tag!r}, expected {SCHEMA_TAG!r}")
    try:
        mask = MarketMask(**doc["market_mask"])
        bd = doc["bess"]
        bess = BessParams(
            energy_capacity=bd["energy_capacity"], power_rate=bd["power_rate"],
            soc_init=bd["soc_init"], soc_min=bd["soc_min"], soc_max=bd["soc_max"],
            mileage_multiplier=bd["mileage_multiplier"],
        )
        gens = tuple(
            GeneratorParams(
                gen_id=g["id"], base_price_bid=g["base_price_bid"], p_max=g["p_max"],
                reserve_ramp=g["reserve_ramp"], regulation_ramp=g["regulation_ramp"],
                p_min=g["p_min"], mileage_multiplier=g["mileage_multiplier"],
            )
            for g in doc["generators"]
        )
        intervals = tuple(
            IntervalData(
                index=t, delta_t=it["delta_t"], load=it["load"],
                reserve_req=it["reserve_req"], regcap_req=it["regcap_req"],
                mileage_req=it["mileage_req"],
                gen_energy_bids=tuple(it["gen_energy_bids"]),
                gen_reserve_bids=tuple(it["gen_reserve_bids"]),
                gen_regcap_bids=tuple(it["gen_regcap_bids"]),
                gen_mileage_bids=tuple(it["gen_mileage_bids"]),
                bess_price_bids=BessPriceBids(**it["bess_price_bids"]),
            )
            for t, it in enumerate(doc["intervals"])
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"scenario document missing field: {exc}") from exc
    return Scenario(generators=gens, bess=bess, intervals=intervals, market_mask=mask)


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"unreadable scenario file {path}: {exc}") from exc
    return scenario_from_text(text)
