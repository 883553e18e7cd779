"""
Staging and linearization: a first guess for every stage's A, Ea and h
from an ARC trace.

Within stage ``i`` the heat release is assumed to raise the cell from
``T_start`` to ``T_end`` with the conversion factor taken as 1, so that

    dT/dt = (T_end - T_start) * A * exp(-Ea / (k_b * T))

and ``ln(dT/dt)`` is a straight line in ``1/T``.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.stats
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InsufficientDataError, InvalidInputError, StagingError
from .helper import K_B, celsius_to_kelvin, kelvin_to_celsius
from .kinetics import CellProperties, Direction, ReactionSystem, StageKinetics
from .trace import ArcTrace


DEFAULT_RATE_WINDOW = 11
DEFAULT_R2_THRESHOLD = 0.5
#: temperature dips up to this many noise standard deviations pass the monotonicity check
DEFAULT_NOISE_FACTOR = 6.


def estimate_rate(trace: ArcTrace, window: int = DEFAULT_RATE_WINDOW) -> ArcTrace:
    """
    Return a copy of ``trace`` with ``rates`` set to the least-squares slope of
    T over t in a window of ``window`` samples around each point. The first and
    last ``window // 2`` points use the first and last full window.

    Works on non-uniform sampling and is exact for affine T(t).
    """
    window = int(window)
    if window < 3 or window % 2 == 0:
        raise InvalidInputError(f"rate window must be odd and >= 3, got {window}")
    if len(trace) < window:
        raise InvalidInputError(f"trace has {len(trace)} samples, fewer than the rate window {window}")

    t = sliding_window_view(trace.times, window)
    T = sliding_window_view(trace.temperatures, window)
    dt = t - t.mean(axis=1, keepdims=True)
    dT = T - T.mean(axis=1, keepdims=True)
    slopes = (dt * dT).sum(axis=1) / (dt * dt).sum(axis=1)

    half = window // 2
    rates = np.concatenate([
        np.full(half, slopes[0]),
        slopes,
        np.full(half, slopes[-1]),
    ])
    return trace.with_rates(rates)


@dataclass(frozen=True)
class StagePartition:
    """
    Staging temperatures ``[T_start, T_1, ..., T_end]`` in K.
    """
    boundaries: Tuple[float, ...]

    def __post_init__(self):
        boundaries = tuple(float(b) for b in self.boundaries)
        if len(boundaries) < 2:
            raise InvalidInputError(f"a partition needs at least two boundaries, got {boundaries}")
        if not all(math.isfinite(b) and b > 0 for b in boundaries):
            raise InvalidInputError(f"boundaries must be positive kelvin, got {boundaries}")
        if any(b1 <= b0 for b0, b1 in zip(boundaries, boundaries[1:])):
            raise InvalidInputError(f"boundaries must be strictly increasing, got {boundaries}")
        object.__setattr__(self, "boundaries", boundaries)

    @classmethod
    def from_celsius(cls, boundaries: Sequence[float]) -> "StagePartition":
        return cls(tuple(celsius_to_kelvin(float(b)) for b in boundaries))

    @property
    def n_stages(self) -> int:
        return len(self.boundaries) - 1

    @property
    def T_start(self) -> float:
        return self.boundaries[0]

    @property
    def T_end(self) -> float:
        return self.boundaries[-1]

    def stage_window(self, index: int) -> Tuple[float, float]:
        """(T_start, T_end) of the 0-based stage"""
        return self.boundaries[index], self.boundaries[index + 1]

    def to_dict(self) -> dict:
        return {
            "boundaries_K": list(self.boundaries),
            "boundaries_C": [kelvin_to_celsius(b) for b in self.boundaries],
        }


def noise_level(temperatures: Sequence[float]) -> float:
    """
    Standard deviation in K of white noise on a smooth temperature record,
    from the median absolute deviation of the second differences.

    The second difference of independent noise of deviation σ has deviation
    ``σ * sqrt(6)``; the smooth signal barely contributes to it.
    """
    temperatures = np.asarray(temperatures, dtype=float)
    if len(temperatures) < 3:
        return 0.
    second = np.diff(temperatures, n=2)
    return float(scipy.stats.median_abs_deviation(second, scale="normal")) / math.sqrt(6.)


def monotone_tolerance(temperatures: Sequence[float], factor: float = DEFAULT_NOISE_FACTOR) -> float:
    """
    Largest sample-to-sample drop in K that noise explains: ``factor`` standard
    deviations of the difference of two noisy samples. 0 for a clean record.
    """
    return factor * math.sqrt(2.) * noise_level(temperatures)


def partition(trace: ArcTrace, part: StagePartition, monotone_tol: Optional[float] = None) -> List[ArcTrace]:
    """
    Split the trace into one segment per stage.

    Segment ``i`` holds the samples with ``T_i <= T < T_(i+1)``, the last
    segment also includes ``T_end``. Within the window, the temperature may
    not drop by more than ``monotone_tol`` K from one sample to the next.
    Without ``monotone_tol`` the limit follows from the window's noise level,
    see :func:`monotone_tolerance`.
    """
    temperatures = trace.temperatures
    if not len(trace):
        raise StagingError("empty trace")
    T_min, T_max = float(temperatures.min()), float(temperatures.max())
    if part.T_start < T_min or part.T_end > T_max:
        raise StagingError(
            f"boundaries [{part.T_start}, {part.T_end}] K outside of the trace range [{T_min}, {T_max}] K"
        )

    first = int(np.nonzero(temperatures >= part.T_start)[0][0])
    after = np.nonzero(temperatures[first:] > part.T_end)[0]
    stop = first + int(after[0]) if len(after) else len(trace)
    if monotone_tol is None:
        monotone_tol = monotone_tolerance(temperatures[first:stop])
    drops = np.nonzero(np.diff(temperatures[first:stop]) < -monotone_tol)[0]
    if len(drops):
        index = first + int(drops[0]) + 1
        raise StagingError(
            f"temperature decreases at sample {index} ({temperatures[index - 1]} -> {temperatures[index]} K, "
            f"tolerance {monotone_tol:.3g} K)",
            index=index,
        )

    windowed = trace.subset(slice(first, stop))
    T = windowed.temperatures
    segments = []
    for i in range(part.n_stages):
        lo, hi = part.stage_window(i)
        if i == part.n_stages - 1:
            mask = (T >= lo) & (T <= hi)
        else:
            mask = (T >= lo) & (T < hi)
        segments.append(windowed.subset(mask))
    return segments


def stage_enthalpy(cell: CellProperties, T_start: float, T_end: float) -> float:
    """Heat in J that raises the cell from ``T_start`` to ``T_end``"""
    if T_end < T_start:
        raise InvalidInputError(f"T_end {T_end} K is below T_start {T_start} K")
    return cell.heat_capacity * (T_end - T_start)


@dataclass(frozen=True)
class LinearFitResult:
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "slope_K": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "n_excluded": self.n_excluded,
        }


def linearized_fit(
        segment: ArcTrace,
        cell: CellProperties,
        T_start: float,
        T_end: float,
) -> Tuple[float, float, LinearFitResult]:
    """
    Fit ``ln(dT/dt) = ln(A * (T_end - T_start)) - Ea / (k_b * T)``.

    Points with a rate <= 0 are left out and counted.

    :return: tuple of (A in 1/s, Ea in J, LinearFitResult)
    """
    if segment.rates is None:
        raise InvalidInputError("segment has no rates, run estimate_rate first")
    delta_T = T_end - T_start
    if not delta_T > 0:
        raise InvalidInputError(f"T_end {T_end} K must be above T_start {T_start} K")

    usable = segment.rates > 0
    n_points = int(np.count_nonzero(usable))
    n_excluded = len(segment) - n_points
    if n_points < 2:
        raise InsufficientDataError(
            f"{n_points} samples with positive rate, at least 2 are required",
            n_points=n_points,
        )
    x = 1. / segment.temperatures[usable]
    y = np.log(segment.rates[usable])
    if np.ptp(x) == 0:
        raise InsufficientDataError("all usable samples share one temperature", n_points=n_points)

    slope, intercept = np.polyfit(x, y, deg=1)
    residual = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(residual ** 2))
    r_squared = 1. if ss_tot == 0 else min(1., max(0., 1. - ss_res / ss_tot))

    with np.errstate(over="ignore"):
        freq_factor = float(np.exp(intercept) / delta_T)
    activation_energy = float(-slope * K_B)
    return freq_factor, activation_energy, LinearFitResult(
        slope=float(slope),
        intercept=float(intercept),
        r_squared=r_squared,
        n_points=n_points,
        n_excluded=n_excluded,
    )


@dataclass(frozen=True)
class StageOrders:
    """Reaction orders, initial progress and direction of one stage, inputs to the initializer"""
    m: float = 0.
    n: float = 1.
    c0: float = 1.
    direction: Optional[Union[Direction, str]] = None

    def to_dict(self) -> dict:
        direction = self.direction
        if isinstance(direction, Direction):
            direction = direction.value
        return {"m": self.m, "n": self.n, "c0": self.c0, "direction": direction}


@dataclass(frozen=True)
class StageInitRecord:
    stage: int
    T_start: float
    T_end: float
    enthalpy: float
    fit: Optional[LinearFitResult]
    substituted: bool = False
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "T_start_C": kelvin_to_celsius(self.T_start),
            "T_end_C": kelvin_to_celsius(self.T_end),
            "h": self.enthalpy,
            "fit": self.fit.to_dict() if self.fit else None,
            "substituted": self.substituted,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class InitReport:
    stages: Tuple[StageInitRecord, ...]

    @property
    def substituted(self) -> Tuple[int, ...]:
        """1-based indices of stages that took over the previous stage's A and Ea"""
        return tuple(r.stage for r in self.stages if r.substituted)

    def to_dict(self) -> dict:
        return {"stages": [r.to_dict() for r in self.stages]}


def initialize(
        trace: ArcTrace,
        part: StagePartition,
        cell: CellProperties,
        orders: Sequence[StageOrders],
        window: int = DEFAULT_RATE_WINDOW,
        r2_threshold: float = DEFAULT_R2_THRESHOLD,
        monotone_tol: Optional[float] = None,
) -> ReactionSystem:
    """
    Build a ReactionSystem from the linearized fit of each stage.

    A stage whose fit has r² below ``r2_threshold`` (or no usable fit at all)
    takes over the previous stage's A and Ea.
    """
    return initialize_with_report(trace, part, cell, orders, window, r2_threshold, monotone_tol)[0]


def initialize_with_report(
        trace: ArcTrace,
        part: StagePartition,
        cell: CellProperties,
        orders: Sequence[StageOrders],
        window: int = DEFAULT_RATE_WINDOW,
        r2_threshold: float = DEFAULT_R2_THRESHOLD,
        monotone_tol: Optional[float] = None,
) -> Tuple[ReactionSystem, InitReport]:
    orders = list(orders)
    if len(orders) != part.n_stages:
        raise InvalidInputError(
            f"{len(orders)} stage orders given for a partition with {part.n_stages} stages"
        )
    if trace.rates is None:
        trace = estimate_rate(trace, window)
    segments = partition(trace, part, monotone_tol=monotone_tol)

    stages = []
    records = []
    for i, (segment, order) in enumerate(zip(segments, orders)):
        T_start, T_end = part.stage_window(i)
        enthalpy = stage_enthalpy(cell, T_start, T_end)
        fit, reason = None, ""
        try:
            A, Ea, fit = linearized_fit(segment, cell, T_start, T_end)
            if fit.r_squared < r2_threshold:
                reason = f"r² {fit.r_squared:.3f} below {r2_threshold}"
            elif not (Ea > 0 and math.isfinite(A) and A > 0):
                reason = f"non-physical fit A={A}, Ea={Ea}"
        except InsufficientDataError as e:
            if i == 0:
                e.stage = 1
                raise e.with_context("stage 1")
            reason = str(e)

        substituted = bool(reason)
        if substituted:
            if i == 0:
                raise InsufficientDataError(f"stage 1: {reason}", stage=1, n_points=fit.n_points)
            A, Ea = stages[-1].freq_factor, stages[-1].activation_energy

        try:
            stages.append(StageKinetics(
                freq_factor=A,
                activation_energy=Ea,
                enthalpy=enthalpy,
                order_m=order.m,
                order_n=order.n,
                c0=order.c0,
                direction=order.direction,
            ))
        except InvalidInputError as e:
            raise e.with_context(f"stage {i + 1}")
        records.append(StageInitRecord(
            stage=i + 1, T_start=T_start, T_end=T_end, enthalpy=enthalpy,
            fit=fit, substituted=substituted, reason=reason,
        ))

    return ReactionSystem(tuple(stages), cell), InitReport(tuple(records))
