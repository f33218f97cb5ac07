"""Streaming inference over newline-delimited per-sample sensor records.

Input lines carry one sensor sample each:

    timestamp_s,voltage_v,current_a,temperature_c,cycle_index

A cycle is complete when the cycle index increases (or the stream ends).
Each completed cycle is fitted to the first-order circuit model
warm-started from the previous cycle, summarized into the 8-feature row,
and appended to a ring buffer of the model's window length.  Once the
buffer is full every completed cycle emits one prediction line; before
that, ``<cycle>,warming_up`` lines mark the cold start.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dataset import (CYCLE_ID_SCALE, CycleRecord, FEATURE_NAMES, Normalizer,
                      cycle_sensor_summary)
from .ecm import ExtractOptions, IncrementalExtractor
from .errors import InputError
from .model import PaceModel
from .nn import no_grad

logger = logging.getLogger(__name__)

STREAM_HEADER = "timestamp_s,voltage_v,current_a,temperature_c,cycle_index"
STREAM_COLUMNS = 5


@dataclass
class StreamStats:
    """Counters the caller can inspect after (or while) consuming lines."""

    lines_read: int = 0
    malformed: int = 0
    cycles_completed: int = 0
    predictions: int = 0


@dataclass
class _CycleBuffer:
    index: int
    timestamps: list = field(default_factory=list)
    voltage: list = field(default_factory=list)
    current: list = field(default_factory=list)
    temperature: list = field(default_factory=list)

    def add(self, ts, v, i, t) -> None:
        self.timestamps.append(ts)
        self.voltage.append(v)
        self.current.append(i)
        self.temperature.append(t)

    def record(self) -> CycleRecord:
        # capacity is unknown mid-stream; predictions never read it
        return CycleRecord(
            cell_id="stream",
            cycle_index=self.index,
            timestamps=np.array(self.timestamps, dtype=np.float64),
            voltage=np.array(self.voltage, dtype=np.float64),
            current=np.array(self.current, dtype=np.float64),
            temperature=np.array(self.temperature, dtype=np.float64),
            discharge_capacity_ah=float("nan"),
        )


def parse_sample(line: str):
    """One CSV sample -> (ts, v, i, t, cycle) or None when malformed."""
    parts = line.split(",")
    if len(parts) != STREAM_COLUMNS:
        return None
    try:
        ts, v, i, t = (float(p) for p in parts[:4])
        cycle = int(parts[4])
    except ValueError:
        return None
    if not all(np.isfinite(x) for x in (ts, v, i, t)):
        return None
    return ts, v, i, t, cycle


def stream_infer(model: PaceModel, normalizer: Normalizer, lines,
                 horizons=(1, 30, 50),
                 options: ExtractOptions = ExtractOptions(),
                 stats: StreamStats | None = None):
    """Yield one output line per completed cycle.

    ``lines`` is any iterable of text lines (file handle, pipe, list).
    Malformed lines are skipped and counted in ``stats.malformed``; a
    decreasing cycle index aborts the stream with InputError.  The final
    in-flight cycle is completed by the end of the stream.
    """
    cfg = model.config
    if cfg.features != len(FEATURE_NAMES):
        raise InputError(
            f"stream inference needs the {len(FEATURE_NAMES)}-feature model, "
            f"checkpoint has {cfg.features}")
    if normalizer.mean.shape[0] != cfg.features:
        raise InputError("normalizer and model disagree on feature count")
    horizons = tuple(int(h) for h in horizons)
    try:
        columns = [cfg.horizons.index(h) for h in horizons]
    except ValueError:
        raise InputError(
            f"requested horizons {horizons} not all in model horizons") from None

    stats = stats if stats is not None else StreamStats()
    extractor = IncrementalExtractor(options)
    window: deque = deque(maxlen=cfg.window)
    pending: _CycleBuffer | None = None

    def finish(buf: _CycleBuffer) -> str:
        record = buf.record()
        row = extractor.push(record)
        mean_v, mean_i, max_t = cycle_sensor_summary(record)
        feats = (mean_v, mean_i, max_t, buf.index / CYCLE_ID_SCALE,
                 row.v0, row.r0, row.r1, row.c1)
        # Round to float32 first: batch windows are stored in float32, and
        # stream/batch parity requires normalizing identical inputs.
        window.append(np.array(feats, dtype=np.float32))
        stats.cycles_completed += 1
        if len(window) < cfg.window:
            return f"{buf.index},warming_up"
        x = normalizer.apply_array(np.stack(window))[None, :, :]
        with no_grad():
            pred = model.forward(x, training=False, clamp=True).data[0]
        stats.predictions += 1
        values = ",".join("%.9g" % pred[c] for c in columns)
        return f"{buf.index},{values}"

    for raw in lines:
        stats.lines_read += 1
        line = raw.strip()
        if not line or line == STREAM_HEADER:
            continue
        sample = parse_sample(line)
        if sample is None:
            stats.malformed += 1
            logger.warning("line %d: malformed sample skipped: %r",
                           stats.lines_read, line[:80])
            continue
        ts, v, i, t, cycle = sample
        if pending is not None and cycle < pending.index:
            raise InputError(
                f"line {stats.lines_read}: cycle_index decreased "
                f"{pending.index} -> {cycle}")
        if pending is None or cycle > pending.index:
            if pending is not None:
                yield finish(pending)
            pending = _CycleBuffer(index=cycle)
        pending.add(ts, v, i, t)

    if pending is not None:
        yield finish(pending)
    if stats.malformed:
        logger.warning("stream ended: %d of %d lines malformed",
                       stats.malformed, stats.lines_read)
