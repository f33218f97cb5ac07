"""Cycling-data ingestion and window assembly.

The on-disk layout is deliberately plain so any cycler export can be
massaged into it:

* a fleet manifest: JSON object mapping cell id to
  ``{"timeseries": path, "summary": path, "split": "train"|"test"}``,
  paths resolved relative to the manifest file;
* per cell, a time-series CSV with header
  ``cycle_index,timestamp_s,voltage_v,current_a,temperature_c``;
* per cell, a summary CSV with header
  ``cycle_index,discharge_capacity_ah``.

State of health is the discharge capacity of a cycle divided by the first
cycle's capacity.  Model inputs are one row per cycle with eight columns:
three sensor summaries (mean discharge voltage, mean discharge current,
max temperature), a scaled cycle counter, and the four fitted circuit
parameters.  Windows stack ``window`` consecutive cycle rows; targets are
the SoH values 1..max(horizon) cycles past the window's last cycle.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, DomainError, InputError

logger = logging.getLogger(__name__)

TIMESERIES_HEADER = ["cycle_index", "timestamp_s", "voltage_v", "current_a", "temperature_c"]
SUMMARY_HEADER = ["cycle_index", "discharge_capacity_ah"]

FEATURE_NAMES = (
    "mean_voltage",
    "mean_current",
    "max_temperature",
    "cycle_id",
    "v0",
    "r0",
    "r1",
    "c1",
)
# Columns a physics-free model is left with.
SENSOR_FEATURES = FEATURE_NAMES[:4]
ECM_FEATURES = FEATURE_NAMES[4:]

# Scale for the cycle-counter feature; on the order of the longest
# observed cell life, so the column stays O(1).
CYCLE_ID_SCALE = 2300.0

# Labels above this are treated as measurement blunders, not capacity
# recovery.
SOH_CEILING = 1.05


@dataclass
class CycleRecord:
    cell_id: str
    cycle_index: int
    timestamps: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray
    discharge_capacity_ah: float


@dataclass
class Cell:
    cell_id: str
    split: str
    cycles: list = field(default_factory=list)

    @property
    def cycle_indices(self) -> np.ndarray:
        return np.array([c.cycle_index for c in self.cycles], dtype=np.int64)


def load_manifest(path) -> dict:
    """Read and validate a fleet manifest; paths come back resolved."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON: {exc}", path=str(path)) from exc
    if not isinstance(raw, dict) or not raw:
        raise DataFormatError("manifest must be a non-empty JSON object", path=str(path))

    base = path.parent
    entries = {}
    for cell_id, entry in raw.items():
        if not isinstance(entry, dict):
            raise DataFormatError(f"entry for {cell_id!r} is not an object", path=str(path))
        missing = {"timeseries", "summary", "split"} - entry.keys()
        if missing:
            raise DataFormatError(
                f"entry for {cell_id!r} missing keys {sorted(missing)}", path=str(path)
            )
        if entry["split"] not in ("train", "test"):
            raise DataFormatError(
                f"entry for {cell_id!r} has unknown split {entry['split']!r}", path=str(path)
            )
        entries[cell_id] = {
            "timeseries": base / entry["timeseries"],
            "summary": base / entry["summary"],
            "split": entry["split"],
        }
    return entries


def _parse_float(value: str, column: str, path: str, line: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataFormatError(
            f"column {column!r}: could not parse {value!r}", path=path, line=line
        ) from None


def _read_timeseries(path: Path, cell_id: str) -> dict:
    """Parse a time-series CSV into cycle_index -> column arrays."""
    per_cycle: dict[int, list] = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise InputError(f"time-series file not found for {cell_id}: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TIMESERIES_HEADER:
            raise DataFormatError(
                f"expected header {','.join(TIMESERIES_HEADER)}, got {header!r}",
                path=str(path), line=1,
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise DataFormatError(
                    f"expected 5 fields, got {len(rec)}", path=str(path), line=lineno
                )
            try:
                idx = int(rec[0])
            except ValueError:
                raise DataFormatError(
                    f"column 'cycle_index': could not parse {rec[0]!r}",
                    path=str(path), line=lineno,
                ) from None
            vals = [
                _parse_float(rec[j], TIMESERIES_HEADER[j], str(path), lineno)
                for j in range(1, 5)
            ]
            per_cycle.setdefault(idx, []).append(vals)
    if not per_cycle:
        raise DataFormatError("time-series file has no data rows", path=str(path))
    return per_cycle


def _read_summary(path: Path, cell_id: str) -> dict:
    caps: dict[int, float] = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise InputError(f"summary file not found for {cell_id}: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SUMMARY_HEADER:
            raise DataFormatError(
                f"expected header {','.join(SUMMARY_HEADER)}, got {header!r}",
                path=str(path), line=1,
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataFormatError(
                    f"expected 2 fields, got {len(rec)}", path=str(path), line=lineno
                )
            try:
                idx = int(rec[0])
            except ValueError:
                raise DataFormatError(
                    f"column 'cycle_index': could not parse {rec[0]!r}",
                    path=str(path), line=lineno,
                ) from None
            if idx in caps:
                raise DataFormatError(
                    f"duplicate cycle {idx} for cell {cell_id}", path=str(path), line=lineno
                )
            caps[idx] = _parse_float(rec[1], "discharge_capacity_ah", str(path), lineno)
    if not caps:
        raise DataFormatError("summary file has no data rows", path=str(path))
    return caps


def load_cells(manifest_path) -> dict:
    """Load every cell named by a manifest.

    Returns an ordered dict of cell id to :class:`Cell` with cycles sorted
    ascending regardless of on-disk order.  Raises InputError for missing
    files or mismatched cycle sets and DataFormatError (with file and line)
    for unparsable rows.
    """
    entries = load_manifest(manifest_path)
    cells: dict[str, Cell] = {}
    for cell_id, entry in entries.items():
        per_cycle = _read_timeseries(entry["timeseries"], cell_id)
        caps = _read_summary(entry["summary"], cell_id)
        ts_cycles = set(per_cycle)
        cap_cycles = set(caps)
        if ts_cycles != cap_cycles:
            odd = sorted(ts_cycles ^ cap_cycles)[:5]
            raise InputError(
                f"cell {cell_id}: cycle sets differ between time-series and summary "
                f"(first differences: {odd})"
            )
        cell = Cell(cell_id=cell_id, split=entry["split"])
        for idx in sorted(per_cycle):
            arr = np.array(per_cycle[idx], dtype=np.float64)
            t = arr[:, 0]
            if t.size > 1 and not np.all(np.diff(t) > 0):
                raise InputError(
                    f"cell {cell_id} cycle {idx}: timestamps not strictly increasing"
                )
            cell.cycles.append(CycleRecord(
                cell_id=cell_id,
                cycle_index=idx,
                timestamps=t,
                voltage=arr[:, 1],
                current=arr[:, 2],
                temperature=arr[:, 3],
                discharge_capacity_ah=caps[idx],
            ))
        cells[cell_id] = cell
    return cells


def compute_soh(cell: Cell) -> np.ndarray:
    """SoH per cycle: capacity over first-cycle capacity.

    Raises DomainError when the reference capacity is non-positive or any
    label falls outside (0, SOH_CEILING].
    """
    if not cell.cycles:
        raise InputError(f"cell {cell.cell_id} has no cycles")
    caps = np.array([c.discharge_capacity_ah for c in cell.cycles], dtype=np.float64)
    q0 = caps[0]
    if not np.isfinite(q0) or q0 <= 0:
        raise DomainError(f"cell {cell.cell_id}: first-cycle capacity {q0} is not positive")
    soh = caps / q0
    if np.any(~np.isfinite(soh)) or np.any(soh <= 0):
        raise DomainError(f"cell {cell.cell_id}: non-positive SoH label")
    if np.any(soh > SOH_CEILING):
        bad = int(np.argmax(soh > SOH_CEILING))
        raise DomainError(
            f"cell {cell.cell_id} cycle {cell.cycles[bad].cycle_index}: "
            f"SoH {soh[bad]:.4f} above ceiling {SOH_CEILING}"
        )
    return soh


def cycle_sensor_summary(record: CycleRecord) -> tuple:
    """(mean voltage, mean current, max temperature) over the discharge
    samples of a cycle; falls back to the whole cycle when no sample has
    positive current."""
    mask = record.current > 0
    if not np.any(mask):
        mask = np.ones_like(record.current, dtype=bool)
    return (
        float(np.mean(record.voltage[mask])),
        float(np.mean(record.current[mask])),
        float(np.max(record.temperature[mask])),
    )


def feature_matrix(cell: Cell, ecm_rows) -> np.ndarray:
    """Per-cycle 8-column feature rows for one cell.

    ``ecm_rows`` must cover exactly the cell's cycles (one row per cycle,
    matched on cycle_index).
    """
    by_cycle = {r.cycle_index: r for r in ecm_rows if r.cell_id == cell.cell_id}
    out = np.empty((len(cell.cycles), len(FEATURE_NAMES)), dtype=np.float64)
    for i, cyc in enumerate(cell.cycles):
        row = by_cycle.get(cyc.cycle_index)
        if row is None:
            raise InputError(
                f"cell {cell.cell_id}: no fitted parameters for cycle {cyc.cycle_index}"
            )
        mean_v, mean_i, max_t = cycle_sensor_summary(cyc)
        out[i] = (
            mean_v,
            mean_i,
            max_t,
            cyc.cycle_index / CYCLE_ID_SCALE,
            row.v0,
            row.r0,
            row.r1,
            row.c1,
        )
    return out


@dataclass
class WindowSet:
    """A batch of fixed-length cycle windows with multi-horizon targets."""

    features: np.ndarray      # [N, W, F] float32
    targets: np.ndarray       # [N, H] float32, H = max horizon
    cell_ids: np.ndarray      # [N] str
    anchors: np.ndarray       # [N] int64, cycle_index of each window's last cycle
    feature_names: tuple = FEATURE_NAMES

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def window(self) -> int:
        return int(self.features.shape[1])

    def take(self, index) -> "WindowSet":
        return WindowSet(
            self.features[index],
            self.targets[index],
            self.cell_ids[index],
            self.anchors[index],
            self.feature_names,
        )

    def take_features(self, columns) -> "WindowSet":
        """Column-subset view, e.g. dropping the circuit parameters."""
        names = tuple(self.feature_names[c] for c in columns)
        return WindowSet(
            np.ascontiguousarray(self.features[:, :, columns]),
            self.targets, self.cell_ids, self.anchors, names,
        )

    @classmethod
    def concat(cls, parts) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise InputError("no windows to concatenate")
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise InputError("cannot concatenate windows with different feature sets")
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.cell_ids for p in parts]),
            np.concatenate([p.anchors for p in parts]),
            names,
        )

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            features=self.features,
            targets=self.targets,
            cell_ids=self.cell_ids,
            anchors=self.anchors,
            feature_names=np.array(self.feature_names),
        )

    @classmethod
    def load(cls, path) -> "WindowSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                z["features"],
                z["targets"],
                z["cell_ids"],
                z["anchors"],
                tuple(str(n) for n in z["feature_names"]),
            )


def _check_horizons(horizons) -> list:
    hs = list(horizons)
    if not hs:
        raise InputError("horizons must be non-empty")
    if any(int(h) != h or h < 1 for h in hs):
        raise InputError(f"horizons must be positive integers, got {hs}")
    if sorted(set(hs)) != hs:
        raise InputError(f"horizons must be sorted and unique, got {hs}")
    return [int(h) for h in hs]


def build_cell_windows(
    features: np.ndarray,
    labels: np.ndarray,
    window: int,
    horizons,
    cell_id: str = "",
    cycle_indices=None,
) -> WindowSet:
    """Slide a ``window``-cycle input over one cell's feature rows.

    Window anchors run from position ``window - 1`` through
    ``n - 1 - max(horizons)`` so every target exists; each target vector
    holds SoH at 1..max(horizons) cycles past the anchor.  Returns an
    empty set when the cell is too short.
    """
    horizons = _check_horizons(horizons)
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.float64)
    if feats.ndim != 2:
        raise InputError("per-cycle features must be a 2-D matrix")
    if labs.shape[0] != feats.shape[0]:
        raise InputError("features and labels must cover the same cycles")
    if window < 1:
        raise InputError(f"window must be positive, got {window}")
    n = feats.shape[0]
    hmax = horizons[-1]
    if cycle_indices is None:
        cycle_indices = np.arange(n)
    cycle_indices = np.asarray(cycle_indices, dtype=np.int64)

    first = window - 1
    last = n - 1 - hmax
    count = max(0, last - first + 1)
    f_dim = feats.shape[1]
    x = np.empty((count, window, f_dim), dtype=np.float32)
    y = np.empty((count, hmax), dtype=np.float32)
    anchors = np.empty(count, dtype=np.int64)
    for j, a in enumerate(range(first, last + 1)):
        x[j] = feats[a - window + 1:a + 1]
        y[j] = labs[a + 1:a + 1 + hmax]
        anchors[j] = cycle_indices[a]
    ids = np.full(count, cell_id, dtype=f"<U{max(1, len(cell_id))}")
    return WindowSet(x, y, ids, anchors)


@dataclass
class Normalizer:
    """Per-feature z-score transform, fitted on training windows only."""

    mean: np.ndarray          # [F] float64
    std: np.ndarray           # [F] float64
    feature_names: tuple = FEATURE_NAMES

    @classmethod
    def fit(cls, windows: WindowSet) -> "Normalizer":
        flat = windows.features.reshape(-1, windows.features.shape[-1]).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        dead = np.flatnonzero(std <= 0)
        if dead.size:
            names = [windows.feature_names[i] for i in dead]
            raise DomainError(f"zero variance in feature column(s) {names}")
        return cls(mean=mean, std=std, feature_names=windows.feature_names)

    def apply(self, windows: WindowSet) -> WindowSet:
        if windows.features.shape[-1] != self.mean.shape[0]:
            raise InputError(
                f"normalizer fitted on {self.mean.shape[0]} features, "
                f"got {windows.features.shape[-1]}"
            )
        x = (windows.features.astype(np.float64) - self.mean) / self.std
        return WindowSet(
            x.astype(np.float32), windows.targets, windows.cell_ids,
            windows.anchors, windows.feature_names,
        )

    def apply_array(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return x.astype(np.float32)

    def invert(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64) * self.std + self.mean
        return x.astype(np.float32)

    def take(self, columns) -> "Normalizer":
        return Normalizer(
            self.mean[list(columns)],
            self.std[list(columns)],
            tuple(self.feature_names[c] for c in columns),
        )

    def to_dict(self) -> dict:
        # float() round-trips float64 exactly through JSON
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        missing = {"mean", "std", "feature_names"} - set(data)
        if missing:
            raise DataFormatError(f"normalizer dict missing {sorted(missing)}")
        mean = np.array(data["mean"], dtype=np.float64)
        std = np.array(data["std"], dtype=np.float64)
        names = tuple(str(n) for n in data["feature_names"])
        if not mean.shape == std.shape == (len(names),):
            raise DataFormatError("normalizer mean/std/name lengths disagree")
        return cls(mean=mean, std=std, feature_names=names)


def split_dataset(cells: dict, train_ids, test_ids) -> tuple:
    """Partition cells by id; its errors catch leakage mistakes early."""
    train_ids = list(train_ids)
    test_ids = list(test_ids)
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise InputError(f"cells in both splits: {sorted(overlap)}")
    unknown = (set(train_ids) | set(test_ids)) - set(cells)
    if unknown:
        raise InputError(f"unknown cell ids: {sorted(unknown)}")
    return [cells[c] for c in train_ids], [cells[c] for c in test_ids]


@dataclass
class PreparedData:
    train: WindowSet
    test: WindowSet
    window: int
    horizons: tuple
    feature_names: tuple = FEATURE_NAMES


def prepare_data(cells: dict, ecm_rows, window: int, horizons) -> PreparedData:
    """Assemble train/test window sets from loaded cells and fitted rows.

    Cells too short to produce a single window are skipped with a warning.
    Targets are raw SoH fractions; callers normalize features afterwards
    with statistics fitted on the training set alone.
    """
    horizons = _check_horizons(horizons)
    by_split = {"train": [], "test": []}
    for cell in cells.values():
        feats = feature_matrix(cell, ecm_rows)
        labels = compute_soh(cell)
        ws = build_cell_windows(
            feats, labels, window, horizons, cell.cell_id, cell.cycle_indices
        )
        if len(ws) == 0:
            logger.warning(
                "cell %s: %d cycles is too short for window %d + horizon %d; skipped",
                cell.cell_id, len(cell.cycles), window, horizons[-1],
            )
            continue
        by_split[cell.split].append(ws)
    if not by_split["train"]:
        raise InputError("no training windows could be built")
    if not by_split["test"]:
        raise InputError("no test windows could be built")
    return PreparedData(
        train=WindowSet.concat(by_split["train"]),
        test=WindowSet.concat(by_split["test"]),
        window=window,
        horizons=tuple(horizons),
    )


def save_prepared(prepared: PreparedData, path) -> None:
    """Persist both window sets plus the windowing metadata as one npz."""
    payload = {}
    for split in ("train", "test"):
        ws = getattr(prepared, split)
        payload[f"{split}_features"] = ws.features
        payload[f"{split}_targets"] = ws.targets
        payload[f"{split}_cell_ids"] = ws.cell_ids
        payload[f"{split}_anchors"] = ws.anchors
    payload["window"] = np.int64(prepared.window)
    payload["horizons"] = np.array(prepared.horizons, dtype=np.int64)
    payload["feature_names"] = np.array(prepared.feature_names)
    np.savez_compressed(path, **payload)


def load_prepared(path) -> PreparedData:
    try:
        z = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise InputError(f"prepared dataset not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"not a prepared dataset: {exc}", path=str(path)) from exc
    with z:
        try:
            names = tuple(str(n) for n in z["feature_names"])
            sets = {
                split: WindowSet(
                    z[f"{split}_features"],
                    z[f"{split}_targets"],
                    z[f"{split}_cell_ids"],
                    z[f"{split}_anchors"],
                    names,
                )
                for split in ("train", "test")
            }
            return PreparedData(
                train=sets["train"],
                test=sets["test"],
                window=int(z["window"]),
                horizons=tuple(int(h) for h in z["horizons"]),
                feature_names=names,
            )
        except KeyError as exc:
            raise DataFormatError(
                f"prepared dataset missing array {exc}", path=str(path)
            ) from None
