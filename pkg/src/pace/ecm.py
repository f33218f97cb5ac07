"""First-order Thevenin equivalent-circuit model: simulation and fitting.

The circuit is an open-circuit voltage source ``v0`` in series with a
resistance ``r0`` and one RC pair ``(r1, c1)``.  Sign convention: positive
current discharges the cell, so the terminal voltage is

    v_out(t) = v0 - i(t) * r0 - v1(t)
    dv1/dt   = -v1 / (r1 * c1) + i(t) / c1

Simulation uses the exact zero-order-hold discretisation of the RC state,
which is closed-form for piecewise-constant current, so irregular sample
spacing is handled without integration error.  Fitting runs a
Levenberg-Marquardt loop on the log of the parameters, which keeps every
iterate positive without explicit bound handling.

All computation here is float64; this is the physics side of the package.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DataFormatError,
    DegenerateFitError,
    DomainError,
    InputError,
    InsufficientDataError,
)

logger = logging.getLogger(__name__)

# Sensible starting point for 1.1 Ah LFP-style cells: mid-band magnitudes
# for each parameter.  Fits for subsequent cycles warm-start from the
# previous cycle, so this only matters for the first cycle of a cell.
DEFAULT_INIT = (3.1, 0.02, 0.05, 1000.0)


@dataclass(frozen=True)
class EcmParams:
    """Equivalent-circuit parameters: volts, ohms, ohms, farads."""

    v0: float
    r0: float
    r1: float
    c1: float

    def validate(self) -> "EcmParams":
        vals = (self.v0, self.r0, self.r1, self.c1)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"non-finite circuit parameter in {vals}")
        if not all(v > 0 for v in vals):
            raise DomainError(f"circuit parameters must be positive, got {vals}")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.v0, self.r0, self.r1, self.c1], dtype=np.float64)


@dataclass(frozen=True)
class CurrentProfile:
    """Sampled current excitation: timestamps in seconds, current in amps."""

    timestamps: np.ndarray
    current: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        i = np.asarray(self.current, dtype=np.float64)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "current", i)
        if t.ndim != 1 or i.ndim != 1:
            raise InputError("profile timestamps and current must be 1-D")
        if t.shape != i.shape:
            raise InputError(
                f"profile length mismatch: {t.shape[0]} timestamps, {i.shape[0]} currents"
            )
        if t.size == 0:
            raise InputError("empty current profile")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(i)):
            raise InputError("profile contains non-finite values")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise InputError("profile timestamps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.timestamps.size)


@dataclass
class EcmFitResult:
    params: EcmParams
    rmse_voltage: float
    iterations: int
    converged: bool
    # Sum-of-squares after every accepted step, starting with the initial
    # value.  Diagnostic only; not serialised.
    ssr_trace: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 200
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e12
    # Relative drop in the residual sum of squares below which the fit is
    # declared converged.
    rtol: float = 1e-9
    fd_rel_step: float = 1e-6
    v1_initial: float = 0.0
    min_samples: int = 8


def _simulate_batch(params: np.ndarray, profile: CurrentProfile, v1_initial: float) -> np.ndarray:
    """Simulate ``P`` parameter sets at once; returns voltages [P, n].

    params is a [P, 4] array of (v0, r0, r1, c1) rows.  The RC state update
    is sequential in time but vectorised across parameter sets, which is
    what the fitter's finite-difference Jacobian wants.
    """
    t = profile.timestamps
    i = profile.current
    n = t.size
    v0 = params[:, 0:1]
    r0 = params[:, 1:2]
    r1 = params[:, 2]
    c1 = params[:, 3]

    out = np.empty((params.shape[0], n), dtype=np.float64)
    v1 = np.full(params.shape[0], float(v1_initial), dtype=np.float64)
    out[:, 0] = v0[:, 0] - i[0] * r0[:, 0] - v1
    if n > 1:
        # An overflowing time constant behaves as an infinitely slow RC
        # pair (decay factor 1) and an underflowing one as an instant RC
        # pair (decay factor 0); both are the correct limits, and fitter
        # trial points can reach such magnitudes.
        with np.errstate(over="ignore", under="ignore", divide="ignore"):
            tau = r1 * c1
            dt = np.diff(t)
            # decay[:, k] advances the RC state across (t[k], t[k+1]].
            decay = np.exp(-dt[None, :] / tau[:, None])
            for k in range(1, n):
                a = decay[:, k - 1]
                v1 = a * v1 + i[k - 1] * r1 * (1.0 - a)
                out[:, k] = v0[:, 0] - i[k] * r0[:, 0] - v1
    return out


def simulate_thevenin(
    params: EcmParams, profile: CurrentProfile, v1_initial: float = 0.0
) -> np.ndarray:
    """Terminal voltage of the circuit under the given current profile.

    The first sample is taken at ``profile.timestamps[0]`` with the RC
    voltage equal to ``v1_initial``; each later sample holds the previous
    current value constant over the interval (zero-order hold).
    """
    params.validate()
    if not math.isfinite(v1_initial):
        raise InputError("v1_initial must be finite")
    return _simulate_batch(params.as_array()[None, :], profile, v1_initial)[0]


def fit_ecm(
    measured_voltage: np.ndarray,
    profile: CurrentProfile,
    init: EcmParams,
    options: FitOptions = FitOptions(),
) -> EcmFitResult:
    """Fit circuit parameters to a measured voltage trace.

    Levenberg-Marquardt on theta = log(v0, r0, r1, c1): the Jacobian is
    built by forward finite differences (relative step ``fd_rel_step``),
    damping starts at ``lambda_init`` and moves by ``lambda_up`` /
    ``lambda_down`` on rejected / accepted steps.  Accepted steps never
    increase the residual.  Stops when the relative residual drop falls
    below ``rtol`` or after ``max_iterations``; the best parameters found
    are returned either way, with ``converged`` telling them apart.

    Raises InsufficientDataError for traces shorter than
    ``options.min_samples``, InputError on shape/finiteness problems and
    DegenerateFitError when the damped normal equations stay unsolvable
    (or produce non-finite trial residuals) all the way up to
    ``lambda_max``.
    """
    y = np.asarray(measured_voltage, dtype=np.float64)
    if y.ndim != 1:
        raise InputError("measured voltage must be 1-D")
    if y.size != len(profile):
        raise InputError(
            f"voltage/profile length mismatch: {y.size} vs {len(profile)}"
        )
    if y.size < options.min_samples:
        raise InsufficientDataError(
            f"need at least {options.min_samples} samples to fit, got {y.size}"
        )
    if not np.all(np.isfinite(y)):
        raise InputError("measured voltage contains non-finite values")
    init.validate()

    v1_init = options.v1_initial

    def residual(theta: np.ndarray) -> np.ndarray:
        # Trial overflow is expected and handled by step rejection.
        with np.errstate(over="ignore", invalid="ignore"):
            return _simulate_batch(np.exp(theta)[None, :], profile, v1_init)[0] - y

    def make_result(theta: np.ndarray, ssr: float, iters: int, conv: bool, trace: list) -> EcmFitResult:
        p = np.exp(theta)
        rmse = math.sqrt(max(ssr, 0.0) / y.size) if math.isfinite(ssr) else float("inf")
        return EcmFitResult(
            params=EcmParams(*(float(v) for v in p)),
            rmse_voltage=rmse,
            iterations=iters,
            converged=conv,
            ssr_trace=trace,
        )

    theta = np.log(init.as_array())
    r = residual(theta)
    with np.errstate(over="ignore"):
        ssr = float(r @ r)
    trace = [ssr]
    if ssr == 0.0:
        return make_result(theta, ssr, 0, True, trace)

    lam = options.lambda_init
    iterations = 0
    converged = False

    for it in range(1, options.max_iterations + 1):
        iterations = it
        steps = options.fd_rel_step * np.maximum(np.abs(theta), 1.0)
        perturbed = theta[None, :] + np.diag(steps)
        sims = _simulate_batch(np.exp(perturbed), profile, v1_init)
        base = r + y
        jac = (sims - base[None, :]).T / steps[None, :]
        grad = jac.T @ r
        jtj = jac.T @ jac
        # Marquardt scaling, floored so a zero-sensitivity column (its
        # gradient is zero anyway) cannot make the damped system singular.
        diag = np.diag(jtj).copy()
        diag = np.maximum(diag, max(float(diag.max()), 1.0) * 1e-14)

        accepted = False
        solver_failed = False
        theta_new = r_new = None
        ssr_new = math.inf
        while True:
            damped = jtj + lam * np.diag(diag)
            try:
                delta = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                delta = None
            # Steps leaving the representable log-parameter range would
            # exponentiate to inf/0; treat them like solver failures.
            bad = delta is None or not np.all(np.isfinite(delta))
            if not bad:
                theta_new = theta + delta
                bad = bool(np.any(np.abs(theta_new) > 700.0))
            if bad:
                solver_failed = True
            else:
                r_new = residual(theta_new)
                with np.errstate(over="ignore"):
                    ssr_new = float(r_new @ r_new)
                if math.isfinite(ssr_new) and ssr_new <= ssr:
                    accepted = True
                    break
                solver_failed = solver_failed or not math.isfinite(ssr_new)
            lam *= options.lambda_up
            if lam > options.lambda_max:
                break

        if not accepted:
            if solver_failed:
                raise DegenerateFitError(
                    "damped normal equations unsolvable up to lambda_max",
                    last_result=make_result(theta, ssr, iterations, False, trace),
                )
            # Finite steps exist but none improve the residual: stuck at a
            # (possibly flat) local minimum.  Report what we have.
            break

        drop = ssr - ssr_new
        theta = theta_new
        r = r_new
        ssr = ssr_new
        trace.append(ssr)
        lam = max(lam / options.lambda_down, 1e-15)
        if ssr == 0.0 or drop <= options.rtol * max(trace[-2], 1e-300):
            converged = True
            break

    return make_result(theta, ssr, iterations, converged, trace)


@dataclass(frozen=True)
class ExtractOptions:
    default_init: EcmParams = EcmParams(*DEFAULT_INIT)
    # Which samples of a cycle to fit: "discharge" (current > 0, the
    # default), "charge" (current < 0) or "full".
    segment: str = "discharge"
    # Accepted fits must land in this open-circuit-voltage band; anything
    # outside is treated as a failed fit.
    v0_band: tuple = (1.5, 5.0)
    fit: FitOptions = FitOptions()

    def __post_init__(self):
        if self.segment not in ("discharge", "charge", "full"):
            raise InputError(f"unknown fit segment {self.segment!r}")


@dataclass
class CycleFeatureRow:
    """Per-cycle circuit parameters plus fit diagnostics."""

    cell_id: str
    cycle_index: int
    v0: float
    r0: float
    r1: float
    c1: float
    fit_rmse: float
    converged: bool


def _segment_mask(current: np.ndarray, segment: str) -> np.ndarray:
    if segment == "discharge":
        return current > 0
    if segment == "charge":
        return current < 0
    return np.ones_like(current, dtype=bool)


def _round9(value: float) -> float:
    """Quantize to the 9 significant digits the feature table carries.

    Extraction rows are quantized at the source so a row is the same
    float64 whether it stayed in memory or round-tripped through CSV;
    without this, CSV rounding can flip the float32 feature value by one
    ulp and break stream/batch prediction parity.
    """
    return float("%.9g" % value)


class IncrementalExtractor:
    """Per-cycle fit chain that works one cycle at a time.

    Each fit warm-starts from the previous accepted fit.  A cycle whose
    fit fails (exception, non-finite result, or v0 outside
    ``options.v0_band``) gets the last accepted row carried forward with
    ``converged=False``; a failing first cycle falls back to
    ``options.default_init`` with a NaN rmse.  Extraction never aborts
    on a single bad cycle.  Both the batch extractor and the streaming
    CLI push cycles through this class, so the two paths produce
    identical parameter chains by construction.
    """

    def __init__(self, options: ExtractOptions = ExtractOptions()):
        self.options = options
        self._warm = options.default_init
        self._last_accepted: CycleFeatureRow | None = None

    def push(self, cyc) -> CycleFeatureRow:
        options = self.options
        mask = _segment_mask(np.asarray(cyc.current, dtype=np.float64), options.segment)
        result = None
        try:
            prof = CurrentProfile(
                np.asarray(cyc.timestamps, dtype=np.float64)[mask],
                np.asarray(cyc.current, dtype=np.float64)[mask],
            )
            volt = np.asarray(cyc.voltage, dtype=np.float64)[mask]
            result = fit_ecm(volt, prof, self._warm, options.fit)
        except (InputError, DomainError, DegenerateFitError) as exc:
            logger.warning(
                "cell %s cycle %d: fit failed (%s); carrying forward",
                cyc.cell_id, cyc.cycle_index, exc,
            )

        ok = (
            result is not None
            and all(math.isfinite(v) for v in result.params.as_array())
            and options.v0_band[0] <= result.params.v0 <= options.v0_band[1]
        )
        if ok:
            p = result.params
            row = CycleFeatureRow(
                cell_id=cyc.cell_id,
                cycle_index=int(cyc.cycle_index),
                v0=_round9(p.v0), r0=_round9(p.r0),
                r1=_round9(p.r1), c1=_round9(p.c1),
                fit_rmse=_round9(result.rmse_voltage),
                converged=result.converged,
            )
            self._warm = p  # warm start keeps full precision
            self._last_accepted = row
        elif self._last_accepted is not None:
            row = replace(
                self._last_accepted,
                cycle_index=int(cyc.cycle_index),
                converged=False,
            )
        else:
            d = options.default_init
            row = CycleFeatureRow(
                cell_id=cyc.cell_id,
                cycle_index=int(cyc.cycle_index),
                v0=_round9(d.v0), r0=_round9(d.r0),
                r1=_round9(d.r1), c1=_round9(d.c1),
                fit_rmse=float("nan"),
                converged=False,
            )
        return row


def extract_cycle_features(cycles, options: ExtractOptions = ExtractOptions()) -> list:
    """Fit the circuit to every cycle of one cell, in cycle order.

    ``cycles`` is a sequence of records with ``cell_id``, ``cycle_index``,
    ``timestamps``, ``voltage`` and ``current`` attributes; see
    ``IncrementalExtractor`` for the warm-start and failure semantics.
    """
    cycles = list(cycles)
    if not cycles:
        raise InputError("cannot extract features from an empty cell")
    cycles.sort(key=lambda c: c.cycle_index)
    extractor = IncrementalExtractor(options)
    return [extractor.push(cyc) for cyc in cycles]


FEATURE_TABLE_HEADER = ["cell_id", "cycle_index", "v0", "r0", "r1", "c1", "fit_rmse", "converged"]


def write_feature_table(rows, path) -> None:
    """Write fitted per-cycle parameters as CSV (9 significant digits)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_TABLE_HEADER)
        for r in rows:
            writer.writerow([
                r.cell_id,
                r.cycle_index,
                f"{r.v0:.9g}",
                f"{r.r0:.9g}",
                f"{r.r1:.9g}",
                f"{r.c1:.9g}",
                f"{r.fit_rmse:.9g}",
                "true" if r.converged else "false",
            ])


def read_feature_table(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FEATURE_TABLE_HEADER:
            raise DataFormatError(
                f"unexpected feature table header {header!r}", path=str(path), line=1
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(FEATURE_TABLE_HEADER):
                raise DataFormatError(
                    f"expected {len(FEATURE_TABLE_HEADER)} fields, got {len(rec)}",
                    path=str(path), line=lineno,
                )
            try:
                rows.append(CycleFeatureRow(
                    cell_id=rec[0],
                    cycle_index=int(rec[1]),
                    v0=float(rec[2]),
                    r0=float(rec[3]),
                    r1=float(rec[4]),
                    c1=float(rec[5]),
                    fit_rmse=float(rec[6]),
                    converged=rec[7] == "true",
                ))
            except ValueError as exc:
                raise DataFormatError(str(exc), path=str(path), line=lineno) from exc
    return rows
