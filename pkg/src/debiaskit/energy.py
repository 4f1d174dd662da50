"""Per-stage energy accounting and carbon conversion.

Emissions are carbon intensity (grams CO2-equivalent per kWh, default the
global average of 475) times energy consumed. Arithmetic runs on exact
rationals so per-stage reports are strictly linear: merging two ledgers and
reporting gives the same grams as summing the two reports.

Energy itself is estimated as wall time times a configured device power
draw; hardware counters vary by environment, so the estimation method is
recorded alongside the numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Union

DEFAULT_CARBON_INTENSITY_G_PER_KWH = 475.0

Number = Union[int, float, Fraction]


@dataclass
class StageEnergy:
    stage: str
    energy_kwh: Fraction
    duration_hours: Fraction

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "energy_kwh": float(self.energy_kwh),
            "duration_hours": float(self.duration_hours),
        }


@dataclass
class EnergyLedger:
    entries: list[StageEnergy] = field(default_factory=list)
    carbon_intensity: Fraction = Fraction(475)
    estimation_method: str = "wall-clock x device-watts"

    def add(self, stage: str, energy_kwh: Number, duration_hours: Number) -> None:
        energy = Fraction(energy_kwh)
        if energy < 0:
            raise ValueError(f"stage {stage!r}: energy must be >= 0, got {float(energy)}")
        self.entries.append(StageEnergy(stage, energy, Fraction(duration_hours)))

    def total_kwh(self) -> Fraction:
        return sum((e.energy_kwh for e in self.entries), Fraction(0))

    def merged(self, other: "EnergyLedger") -> "EnergyLedger":
        """Stage-wise sum of two ledgers (intensities must match)."""
        if self.carbon_intensity != other.carbon_intensity:
            raise ValueError("cannot merge ledgers with different carbon intensities")
        by_stage: dict[str, StageEnergy] = {}
        for entry in self.entries + other.entries:
            if entry.stage in by_stage:
                prev = by_stage[entry.stage]
                by_stage[entry.stage] = StageEnergy(
                    entry.stage,
                    prev.energy_kwh + entry.energy_kwh,
                    prev.duration_hours + entry.duration_hours,
                )
            else:
                by_stage[entry.stage] = entry
        out = EnergyLedger(carbon_intensity=self.carbon_intensity,
                           estimation_method=self.estimation_method)
        out.entries = list(by_stage.values())
        return out


@dataclass
class CarbonReport:
    per_stage: list[tuple[str, Fraction]]  # (stage, grams CO2eq)
    total_grams: Fraction
    intensity: Fraction

    def to_dict(self) -> dict:
        return {
            "per_stage": [{"stage": s, "grams_co2eq": float(g)} for s, g in self.per_stage],
            "total_grams_co2eq": float(self.total_grams),
            "carbon_intensity_g_per_kwh": float(self.intensity),
        }


def estimate_energy_kwh(duration_s: Number, device_watts: Number) -> Fraction:
    """watts x seconds, expressed in kWh."""
    return Fraction(device_watts) * Fraction(duration_s) / Fraction(3_600_000)


def carbon_report(ledger: EnergyLedger) -> CarbonReport:
    """grams = intensity x kWh per stage; totals are additive by construction."""
    per_stage = []
    total = Fraction(0)
    for entry in ledger.entries:
        if entry.energy_kwh < 0:
            raise ValueError(f"stage {entry.stage!r}: negative energy")
        grams = ledger.carbon_intensity * entry.energy_kwh
        per_stage.append((entry.stage, grams))
        total += grams
    return CarbonReport(per_stage=per_stage, total_grams=total, intensity=ledger.carbon_intensity)


def write_ledger(ledger: EnergyLedger, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "carbon_intensity_g_per_kwh": float(ledger.carbon_intensity),
        "estimation_method": ledger.estimation_method,
        "entries": [e.to_dict() for e in ledger.entries],
        "total_kwh": float(ledger.total_kwh()),
        "report": carbon_report(ledger).to_dict(),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_ledger(path: Path | str) -> EnergyLedger:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    ledger = EnergyLedger(
        carbon_intensity=Fraction(payload["carbon_intensity_g_per_kwh"]),
        estimation_method=payload.get("estimation_method", ""),
    )
    for e in payload.get("entries", []):
        ledger.add(e["stage"], e["energy_kwh"], e["duration_hours"])
    return ledger
