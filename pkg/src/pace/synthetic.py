"""Deterministic synthetic cycling fleet for tests, demos and benchmarks.

Each cell follows a two-term fade curve (linear plus quadratic in cycle
number) and its circuit parameters drift with that fade: the RC pair's
resistance grows and its capacitance shrinks as health declines, while the
series resistance spikes briefly at the start of life and then stays
nearly flat.  The open-circuit voltage is almost constant across life and
varies more cell to cell than it decays within one cell, so absolute
voltage readings identify the cell, not its health.  Per-cycle current
profiles are a rest phase followed by a two-level discharge; the two
distinct discharge currents plus the rest step make all four circuit
parameters identifiable from a single cycle.

The discharge current is jittered cycle to cycle, so sensor summaries
(mean voltage in particular) carry load noise that the circuit fit
removes because it conditions on the measured current; that asymmetry is
what makes the fitted parameters worth having.

Everything derives from one integer seed via named spawn keys, so the same
spec always produces bit-identical fleets regardless of generation order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Cell, CycleRecord
from .ecm import CurrentProfile, EcmParams, simulate_thevenin


@dataclass(frozen=True)
class FleetSpec:
    n_train: int = 8
    n_test: int = 2
    cycles: int = 400
    seed: int = 7
    # Per-cycle excitation: rest, then a high discharge step, then a low one.
    rest_samples: int = 8
    hi_samples: int = 40
    lo_samples: int = 32
    dt_s: float = 10.0
    hi_current_a: float = 2.0
    lo_current_a: float = 0.8
    current_jitter: float = 0.12
    nominal_capacity_ah: float = 1.1
    ambient_c: float = 30.0
    voltage_noise_v: float = 1e-3
    temperature_noise_c: float = 0.25
    capacity_noise: float = 5e-4


@dataclass(frozen=True)
class CellTruth:
    """Ground-truth trajectories behind one generated cell."""

    soh: np.ndarray
    v0: np.ndarray
    r0: np.ndarray
    r1: np.ndarray
    c1: np.ndarray


def _fade_curve(rng: np.random.Generator, cycles: int) -> np.ndarray:
    # Total fade 0.20..0.32 split between linear and quadratic terms, so
    # cells at the same cycle count sit several SoH points apart and the
    # cycle counter is only a coarse health cue.
    total = rng.uniform(0.20, 0.32)
    linear_share = rng.uniform(0.30, 0.70)
    u = np.arange(cycles, dtype=np.float64) / max(cycles - 1, 1)
    return 1.0 - total * (linear_share * u + (1.0 - linear_share) * u * u)


def generate_cell(cell_id: str, spec: FleetSpec, cell_key: int, start_cycle: int = 0):
    """Build one cell's cycle records. Returns (records, truth)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0, cell_key)))

    soh = _fade_curve(rng, spec.cycles)
    wear = 1.0 - soh
    # Base circuit values sit in tight manufacturing bands: cells of one
    # model match to a few percent, so the aged drift dominates the spread.
    v0_fresh = rng.uniform(3.07, 3.13)
    r0_base = rng.uniform(0.016, 0.024)
    r1_base = rng.uniform(0.039, 0.043)
    c1_base = rng.uniform(1100.0, 1200.0)

    t_idx = np.arange(spec.cycles, dtype=np.float64)
    # OCV drift over a whole lifetime is smaller than the cell-to-cell
    # spread of v0_fresh; health lives in the RC pair, not the voltage level.
    v0_t = v0_fresh - 0.015 * wear
    r0_t = r0_base * (1.0 + 0.35 * np.exp(-t_idx / 15.0) + 0.10 * wear)
    r1_t = r1_base * (1.0 + 2.5 * wear)
    c1_t = c1_base * (1.0 - 0.80 * wear)

    n = spec.rest_samples + spec.hi_samples + spec.lo_samples
    local_t = np.arange(n, dtype=np.float64) * spec.dt_s
    cycle_span = (n + 20) * spec.dt_s

    records = []
    for k in range(spec.cycles):
        hi = spec.hi_current_a * (1.0 + rng.uniform(-spec.current_jitter, spec.current_jitter))
        lo = spec.lo_current_a * (1.0 + rng.uniform(-spec.current_jitter, spec.current_jitter))
        current = np.concatenate([
            np.zeros(spec.rest_samples),
            np.full(spec.hi_samples, hi),
            np.full(spec.lo_samples, lo),
        ])
        timestamps = (start_cycle + k) * cycle_span + local_t
        params = EcmParams(v0=v0_t[k], r0=r0_t[k], r1=r1_t[k], c1=c1_t[k])
        clean = simulate_thevenin(params, CurrentProfile(timestamps, current))
        voltage = clean + rng.normal(0.0, spec.voltage_noise_v, size=n)
        # Mild self-heating proportional to the load, on top of sensor noise.
        heat = 0.8 * np.cumsum(current) / np.sum(current + 1e-12) * (hi / spec.hi_current_a)
        temperature = spec.ambient_c + heat + rng.normal(0.0, spec.temperature_noise_c, size=n)
        capacity = spec.nominal_capacity_ah * soh[k] * (1.0 + rng.normal(0.0, spec.capacity_noise))
        records.append(CycleRecord(
            cell_id=cell_id,
            cycle_index=start_cycle + k,
            timestamps=timestamps,
            voltage=voltage,
            current=current,
            temperature=temperature,
            discharge_capacity_ah=float(capacity),
        ))
    truth = CellTruth(soh=soh, v0=v0_t, r0=r0_t, r1=r1_t, c1=c1_t)
    return records, truth


def generate_fleet(spec: FleetSpec = FleetSpec()) -> dict:
    """In-memory fleet keyed by cell id; train cells first, then test."""
    cells: dict[str, Cell] = {}
    total = spec.n_train + spec.n_test
    for i in range(total):
        cell_id = f"cell{i:02d}"
        split = "train" if i < spec.n_train else "test"
        records, _ = generate_cell(cell_id, spec, cell_key=i)
        cells[cell_id] = Cell(cell_id=cell_id, split=split, cycles=records)
    return cells


def write_fleet(cells: dict, out_dir) -> Path:
    """Write per-cell CSVs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for cell_id, cell in cells.items():
        ts_name = f"{cell_id}_timeseries.csv"
        sum_name = f"{cell_id}_summary.csv"
        with open(out_dir / ts_name, "w", encoding="utf-8", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle_index", "timestamp_s", "voltage_v", "current_a", "temperature_c"])
            for cyc in cell.cycles:
                for j in range(cyc.timestamps.size):
                    w.writerow([
                        cyc.cycle_index,
                        f"{cyc.timestamps[j]:.9g}",
                        f"{cyc.voltage[j]:.9g}",
                        f"{cyc.current[j]:.9g}",
                        f"{cyc.temperature[j]:.9g}",
                    ])
        with open(out_dir / sum_name, "w", encoding="utf-8", newline="\n") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle_index", "discharge_capacity_ah"])
            for cyc in cell.cycles:
                w.writerow([cyc.cycle_index, f"{cyc.discharge_capacity_ah:.9g}"])
        manifest[cell_id] = {
            "timeseries": ts_name,
            "summary": sum_name,
            "split": cell.split,
        }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest_path
