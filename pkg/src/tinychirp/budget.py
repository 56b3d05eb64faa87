"""Deployment-lifetime arithmetic: battery-days and storage-days from
per-stage energy constants and screening statistics.

The default cost table holds the values measured on an nRF52840-DK class
board (3-second segments). The duty-cycle model is deliberately simple:
two states, idle at a constant floor power plus a fixed energy packet
per screened segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

# Screening verdicts (shared vocabulary with tinychirp.pipeline).
DISCARDED_IDLE = "discarded_idle"
DISCARDED_BY_MODEL = "discarded_by_model"
STORED_DIRECT = "stored_direct"
STORED_AFTER_MODEL = "stored_after_model"
VERDICTS = (DISCARDED_IDLE, DISCARDED_BY_MODEL, STORED_DIRECT, STORED_AFTER_MODEL)

BASELINE_ONLY = "baseline_only"
SKIP_BASELINE = "skip_baseline"
FULL = "full"
POWER_SAVING = "power_saving"
VARIANTS = (BASELINE_ONLY, SKIP_BASELINE, FULL, POWER_SAVING)


class BudgetError(Exception):
    pass


class InconsistentCounts(BudgetError):
    pass


class ZeroCapacity(BudgetError):
    pass


@dataclass(frozen=True)
class StageCost:
    memory_kb: float
    storage_kb: float
    latency_inference_ms: float
    latency_preprocess_ms: float
    power_mw: float
    energy_inference_mj: float
    energy_total_mj: float

    def __post_init__(self):
        if self.energy_total_mj < self.energy_inference_mj:
            raise ValueError("total energy cannot be below inference energy")


@dataclass(frozen=True)
class EnergyTable:
    stages: Dict[str, StageCost]
    idle_power_mw: float

    def cost(self, stage: str) -> StageCost:
        if stage not in self.stages:
            raise BudgetError(f"no cost entry for stage {stage!r}")
        return self.stages[stage]


# Measured on an nrf52840dk (Cortex-M4 @ 64 MHz, 256 KB RAM).
NRF52840DK = EnergyTable(
    stages={
        "baseline": StageCost(67.216, 20.34, 213.755, 2.0, 9.900, 2.116, 2.136),
        "cnn_mel": StageCost(104.328, 37.868, 406.146, 1980.259, 17.820, 7.238, 42.525),
        "cnn_time": StageCost(75.564, 24.104, 1490.687, 2.0, 17.160, 25.580, 25.614),
        "transformer_time": StageCost(83.468, 24.712, 1079.293, 2.0, 17.820, 19.233, 19.268),
    },
    idle_power_mw=6.270,
)


def session_energy(
    counts: Dict[str, int],
    table: EnergyTable = NRF52840DK,
    variant: str = FULL,
    model: str = "transformer_time",
    idle_gap_s: float = 0.0,
) -> float:
    """Total attributed energy (mJ) for a batch of screening verdicts.

    Every segment that ran the gate costs one baseline packet; segments
    that reached the model add one model packet (under skip-baseline the
    gate never ran, so only the model packet applies). ``idle_gap_s``
    adds the idle floor for non-processing wall-clock time.
    """
    if variant not in VARIANTS:
        raise BudgetError(f"unknown variant {variant!r}")
    for verdict, n in counts.items():
        if verdict not in VERDICTS:
            raise BudgetError(f"unknown verdict {verdict!r}")
        if n < 0:
            raise InconsistentCounts(f"negative count for {verdict}")

    model_verdicts = counts.get(DISCARDED_BY_MODEL, 0) + counts.get(STORED_AFTER_MODEL, 0)
    if variant == BASELINE_ONLY and model_verdicts:
        raise InconsistentCounts("baseline-only run reports model verdicts")
    if variant == SKIP_BASELINE and (
        counts.get(DISCARDED_IDLE, 0) or counts.get(STORED_DIRECT, 0)
    ):
        raise InconsistentCounts("skip-baseline run reports gate verdicts")
    if variant == FULL and counts.get(STORED_DIRECT, 0):
        raise InconsistentCounts("full variant cannot store without the model")

    baseline_mj = table.cost("baseline").energy_total_mj
    model_mj = table.cost(model).energy_total_mj if model_verdicts else 0.0

    gated = 0 if variant == SKIP_BASELINE else sum(counts.values())
    total = gated * baseline_mj + model_verdicts * model_mj
    total += table.idle_power_mw * idle_gap_s  # mW * s = mJ
    return total


@dataclass(frozen=True)
class DeploymentProfile:
    """Everything the lifetime estimator needs; all knobs are explicit
    because the field hardware (battery chemistry, card size, channel
    count) varies between deployments."""

    battery_mwh: float
    sd_bytes: float
    record_rate_bytes_per_s: float
    segment_s: float = 3.0
    active_fraction: float = 1.0  # fraction of segments past the gate
    store_fraction: float = 1.0  # fraction of segments ultimately stored
    variant: str = FULL
    model: str = "transformer_time"
    table: EnergyTable = field(default_factory=lambda: NRF52840DK)
    idle_power_mw: Optional[float] = None  # None: take the table's floor
    model_fraction: Optional[float] = None  # power-saving only; see below

    def __post_init__(self):
        for name in ("active_fraction", "store_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class LifetimeEstimate:
    storage_days: float
    battery_days: float
    limiting_factor: str
    daily_energy_mj: float


def estimate_lifetime(profile: DeploymentProfile) -> LifetimeEstimate:
    """Two-state duty-cycle estimate of the deployment horizon.

    storage_days = sd_bytes / (store_fraction * record_rate * 86400);
    battery_days divides the battery (mWh -> mJ) by the daily energy:
    the idle floor over 24 h plus one screening packet per segment.
    Under power-saving, the fraction routed through the model defaults
    to max(active - stored, 0), i.e. stored-direct segments skip it.
    """
    if profile.battery_mwh <= 0 or profile.sd_bytes <= 0:
        raise ZeroCapacity("battery and storage capacities must be positive")
    if profile.record_rate_bytes_per_s <= 0:
        raise ZeroCapacity("record rate must be positive")

    daily_bytes = profile.store_fraction * profile.record_rate_bytes_per_s * 86400.0
    storage_days = profile.sd_bytes / daily_bytes if daily_bytes > 0 else math.inf

    baseline_mj = profile.table.cost("baseline").energy_total_mj
    if profile.variant == BASELINE_ONLY:
        per_segment = baseline_mj
        model_mj = 0.0
    elif profile.variant == SKIP_BASELINE:
        per_segment = profile.table.cost(profile.model).energy_total_mj
    elif profile.variant == FULL:
        model_mj = profile.table.cost(profile.model).energy_total_mj
        per_segment = baseline_mj + profile.active_fraction * model_mj
    else:  # power saving
        mf = profile.model_fraction
        if mf is None:
            mf = max(profile.active_fraction - profile.store_fraction, 0.0)
        per_segment = baseline_mj + mf * profile.table.cost(profile.model).energy_total_mj

    idle_mw = (
        profile.table.idle_power_mw
        if profile.idle_power_mw is None
        else profile.idle_power_mw
    )
    segments_per_day = 86400.0 / profile.segment_s
    daily_energy_mj = idle_mw * 86400.0 + segments_per_day * per_segment
    battery_days = profile.battery_mwh * 3600.0 / daily_energy_mj

    return LifetimeEstimate(
        storage_days=storage_days,
        battery_days=battery_days,
        limiting_factor="storage" if storage_days <= battery_days else "battery",
        daily_energy_mj=daily_energy_mj,
    )
