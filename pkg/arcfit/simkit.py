"""
Lumped simulations of a fitted model: ARC exotherm, heat-wait-seek,
oven exposure and a recorded chamber temperature, plus synthetic traces.
"""
import dataclasses
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .esdirk import (
    EventSpec, StagesComplete, TemperatureCeiling, Tolerances, Trajectory, integrate, sample,
)
from .helper import celsius_to_kelvin, kelvin_to_celsius
from .kinetics import (
    ADIABATIC, AmbientModel, CellProperties, Oven, Ramp, ReactionSystem, ThermalOde, TracedAmbient,
)
from .trace import ArcTrace, Provenance


#: self-heating rate in K/s that counts as thermal runaway (10 K/min)
DEFAULT_ONSET_RATE = 10. / 60.
DEFAULT_COMPLETION_TOL = 1e-6


def _labelled(traj: Trajectory, phase: str) -> Trajectory:
    return traj.replace(phases=(phase, ) * len(traj))


def _run(system, ambient, y0, t_span, tol, events=(), max_steps=10 ** 6):
    ode = ThermalOde(system, ambient)
    if tol is None:
        tol = Tolerances.thermal(system.n_stages)
    return integrate(ode.rhs, y0, t_span, tol=tol, events=events, jac=ode.jac, max_steps=max_steps)


def _initial_vector(system: ReactionSystem, T0: float) -> np.ndarray:
    if not T0 > 0:
        raise InvalidInputError(f"T0 must be positive kelvin, got {T0}")
    return np.append(system.c0, float(T0))


def simulate_exotherm(
        system: ReactionSystem,
        T0: float,
        t_end: float,
        tol: Optional[Tolerances] = None,
        completion_tol: float = DEFAULT_COMPLETION_TOL,
        t_start: float = 0.,
) -> Trajectory:
    """
    Adiabatic self-heating from ``T0`` until every stage is within
    ``completion_tol`` of completion or ``t_end``.
    """
    event = StagesComplete(system.completion_state(), completion_tol)
    traj = _run(system, ADIABATIC, _initial_vector(system, T0), (t_start, t_end), tol, [event])
    return _labelled(traj, "exotherm")


@dataclass(frozen=True)
class HwsProtocol:
    """
    Heat-wait-seek settings. Temperatures in K, durations in s, rates in K/s.
    """
    step_increment: float = 5.
    wait_duration: float = 2400.
    seek_duration: float = 600.
    exotherm_threshold: float = 0.02 / 60.
    start_temperature: float = celsius_to_kelvin(50.)
    heating_rate: float = 2. / 60.
    max_steps: int = 100

    def __post_init__(self):
        for name in ("step_increment", "wait_duration", "seek_duration",
                     "start_temperature", "heating_rate"):
            value = float(getattr(self, name))
            if not value > 0:
                raise InvalidInputError(f"{name} must be positive, got {value}")
            object.__setattr__(self, name, value)
        if not self.exotherm_threshold >= 0:
            raise InvalidInputError(f"exotherm_threshold must be >= 0, got {self.exotherm_threshold}")
        if int(self.max_steps) < 1:
            raise InvalidInputError(f"max_steps must be >= 1, got {self.max_steps}")
        object.__setattr__(self, "exotherm_threshold", float(self.exotherm_threshold))
        object.__setattr__(self, "max_steps", int(self.max_steps))

    def to_dict(self) -> dict:
        return {
            "step_increment_K": self.step_increment,
            "wait_duration_s": self.wait_duration,
            "seek_duration_s": self.seek_duration,
            "exotherm_threshold_K_per_s": self.exotherm_threshold,
            "start_temperature_C": kelvin_to_celsius(self.start_temperature),
            "heating_rate_K_per_s": self.heating_rate,
            "max_steps": self.max_steps,
        }


class HwsSimulator:
    """
    Runs the heat-wait-seek search of an ARC on a lumped model.

    Starting at the protocol's start temperature, every cycle waits, then
    seeks. If the mean self-heating rate over the seek window reaches the
    threshold, the calorimeter switches to exotherm mode (adiabatic) for the
    rest of the run, otherwise it heats by one increment and repeats.
    """

    def __init__(
            self,
            system: ReactionSystem,
            protocol: Optional[HwsProtocol] = None,
            tol: Optional[Tolerances] = None,
            completion_tol: float = DEFAULT_COMPLETION_TOL,
            verbose: bool = False,
    ):
        self.system = system
        self.protocol = protocol or HwsProtocol()
        self.tol = tol
        self.completion_tol = completion_tol
        self.verbose = verbose

    def run(self, t_end: float) -> Trajectory:
        protocol = self.protocol
        system = self.system
        y = _initial_vector(system, protocol.start_temperature)
        t = 0.
        parts = []
        exotherm_time = None
        exotherm_temperature = None
        cycles = 0

        def segment(ambient, duration, phase, events=()):
            nonlocal t, y
            end = min(t + duration, t_end)
            traj = _run(system, ambient, y, (t, end), self.tol, events)
            parts.append(_labelled(traj, phase))
            t = traj.t_end
            y = traj.states[-1].copy()
            return traj

        while t < t_end and cycles < protocol.max_steps:
            cycles += 1
            segment(ADIABATIC, protocol.wait_duration, "wait")
            if t >= t_end:
                break
            seek_start_T, seek_start_t = y[-1], t
            segment(ADIABATIC, protocol.seek_duration, "seek")
            mean_rate = (y[-1] - seek_start_T) / max(t - seek_start_t, 1e-300)
            if mean_rate >= protocol.exotherm_threshold:
                exotherm_time, exotherm_temperature = t, float(y[-1])
                self._log(f"exotherm detected at {kelvin_to_celsius(y[-1]):.2f} °C, t={t:.0f} s")
                if t < t_end:
                    segment(
                        ADIABATIC, t_end - t, "exotherm",
                        [StagesComplete(system.completion_state(), self.completion_tol)],
                    )
                break
            if t >= t_end:
                break
            target = y[-1] + protocol.step_increment
            self._log(f"cycle {cycles}: heating to {kelvin_to_celsius(target):.2f} °C")
            # the heater stops at the target, the time cap only guards a runaway heater
            segment(
                Ramp(protocol.heating_rate),
                10. * protocol.step_increment / protocol.heating_rate,
                "heat",
                [TemperatureCeiling(target)],
            )

        traj = Trajectory.concat(parts)
        return traj.with_info(
            exotherm_time=exotherm_time,
            exotherm_temperature=exotherm_temperature,
            cycles=cycles,
        )

    def _log(self, *args):
        if self.verbose:
            print(*args, file=sys.stderr)


def simulate_hws(
        system: ReactionSystem,
        protocol: Optional[HwsProtocol] = None,
        t_end: float = 1e6,
        cell: Optional[CellProperties] = None,
        tol: Optional[Tolerances] = None,
        verbose: bool = False,
) -> Trajectory:
    """
    Heat-wait-seek run with phase labels per sample. ``info`` holds the
    time and temperature at which exotherm mode started, or None.
    """
    if cell is not None:
        system = system.with_cell(cell)
    return HwsSimulator(system, protocol, tol, verbose=verbose).run(t_end)


@dataclass(frozen=True, eq=False)
class SelfHeatingThreshold(EventSpec):
    """
    The reactions' heat release over the heat capacity, that is dT/dt
    without any exchange, reaching ``rate`` K/s.
    """
    system: ReactionSystem
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise InvalidInputError(f"onset rate must be positive, got {self.rate}")
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "_ode", ThermalOde(self.system))

    def value(self, t, y, dy):
        return float(self.self_heating(y) - self.rate)

    def self_heating(self, y: np.ndarray) -> float:
        n = self.system.n_stages
        return self._ode.heat_release(y[:n], y[n]) / self.system.cell.heat_capacity

    def to_dict(self):
        return {"variant": "self_heating_threshold", "rate": self.rate}


def self_heating_rates(system: ReactionSystem, traj: Trajectory) -> np.ndarray:
    """Adiabatic dT/dt in K/s at every sample of ``traj``"""
    ode = ThermalOde(system)
    n = system.n_stages
    return np.array([ode.heat_release(y[:n], y[n]) for y in traj.states]) / system.cell.heat_capacity


def onset_time(
        traj: Trajectory,
        threshold: float = DEFAULT_ONSET_RATE,
        system: Optional[ReactionSystem] = None,
) -> Optional[float]:
    """
    First time the heating rate reaches ``threshold`` K/s, linearly
    interpolated between samples, None if it never does.

    With ``system`` the rate is the self-heating of the reactions, otherwise
    the trajectory's dT/dt. The two agree in adiabatic runs.
    """
    rates = traj.rates if system is None else self_heating_rates(system, traj)
    above = np.nonzero(rates >= threshold)[0]
    if not len(above):
        return None
    k = int(above[0])
    if k == 0:
        return traj.t_start
    r0, r1 = rates[k - 1], rates[k]
    t0, t1 = traj.times[k - 1], traj.times[k]
    return float(t0 + (threshold - r0) / (r1 - r0) * (t1 - t0))


def peak_temperature(traj: Trajectory) -> float:
    return float(np.max(traj.temperatures))


def _with_onset(system, ambient, y0, t_span, tol, onset_rate, phase):
    """Integrate, stopping exactly at the onset to record it, then go on"""
    first = _run(system, ambient, y0, t_span, tol, [SelfHeatingThreshold(system, onset_rate)])
    onset = None
    parts = [_labelled(first, phase)]
    if first.event is not None:
        onset = first.event.time
        if onset < t_span[1]:
            rest = _run(system, ambient, first.states[-1], (onset, t_span[1]), tol)
            parts.append(_labelled(rest, phase))
    traj = Trajectory.concat(parts)
    return traj.with_info(onset_time=onset, onset_rate=onset_rate, peak_temperature=peak_temperature(traj))


def simulate_oven(
        system: ReactionSystem,
        T_oven: float,
        T0: float,
        t_end: float,
        cell: Optional[CellProperties] = None,
        tol: Optional[Tolerances] = None,
        onset_rate: float = DEFAULT_ONSET_RATE,
) -> Trajectory:
    """
    Cell placed in an oven at ``T_oven``. ``info["onset_time"]`` is the first
    time the reactions heat the cell by ``onset_rate`` (10 K/min by default),
    or None. The oven's own heating does not count towards the onset.
    """
    if cell is not None:
        system = system.with_cell(cell)
    ambient = Oven(T_oven)
    return _with_onset(system, ambient, _initial_vector(system, T0), (0., t_end), tol, onset_rate, "oven")


def simulate_arc(
        system: ReactionSystem,
        chamber: TracedAmbient,
        T0: Optional[float] = None,
        t_end: Optional[float] = None,
        cell: Optional[CellProperties] = None,
        tol: Optional[Tolerances] = None,
        onset_rate: float = DEFAULT_ONSET_RATE,
) -> Trajectory:
    """
    Cell exchanging heat with a recorded chamber temperature. Starts at the
    chamber's first sample unless ``T0`` is given and runs to its last sample
    unless ``t_end`` is given.
    """
    if cell is not None:
        system = system.with_cell(cell)
    t_start = float(chamber.times[0])
    if T0 is None:
        T0 = chamber.temperature_at(t_start)
    if t_end is None:
        t_end = float(chamber.times[-1])
    return _with_onset(system, chamber, _initial_vector(system, T0), (t_start, t_end), tol, onset_rate, "arc")


@dataclass(frozen=True, eq=False)
class OvenResult:
    T_oven: float
    onset_time: Optional[float]
    peak_temperature: float
    trajectory: Trajectory

    def to_dict(self) -> dict:
        return {
            "T_oven_C": kelvin_to_celsius(self.T_oven),
            "onset_time_s": self.onset_time,
            "peak_temperature_C": kelvin_to_celsius(self.peak_temperature),
        }


def oven_sweep(
        system: ReactionSystem,
        oven_temperatures: Sequence[float],
        T0: float = celsius_to_kelvin(25.),
        t_end: float = 7200.,
        cell: Optional[CellProperties] = None,
        tol: Optional[Tolerances] = None,
        onset_rate: float = DEFAULT_ONSET_RATE,
        workers: int = 1,
) -> List[OvenResult]:
    """Independent oven runs, one per temperature, in input order"""

    def run(T_oven):
        traj = simulate_oven(system, T_oven, T0, t_end, cell, tol, onset_rate)
        return OvenResult(T_oven, traj.info["onset_time"], traj.info["peak_temperature"], traj)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, oven_temperatures))
    return [run(T) for T in oven_temperatures]


def synth_trace(
        system: ReactionSystem,
        mode: str = "adiabatic",
        noise_std: float = 0.,
        sample_dt: float = 10.,
        seed: int = 0,
        T0: Optional[float] = None,
        t_end: float = 4e4,
        protocol: Optional[HwsProtocol] = None,
        cell: Optional[CellProperties] = None,
        tol: Optional[Tolerances] = None,
) -> ArcTrace:
    """
    Simulate and sample a calorimeter record every ``sample_dt`` seconds,
    with independent Gaussian noise of ``noise_std`` K on the temperatures.

    ``mode`` is ``"adiabatic"`` (exotherm from ``T0``) or ``"hws"``
    (heat-wait-seek with ``protocol``, ``T0`` overrides its start temperature).
    """
    if not sample_dt > 0:
        raise InvalidInputError(f"sample_dt must be positive, got {sample_dt}")
    if not noise_std >= 0:
        raise InvalidInputError(f"noise_std must be >= 0, got {noise_std}")
    if cell is not None:
        system = system.with_cell(cell)

    if mode == "adiabatic":
        if T0 is None:
            raise InvalidInputError("adiabatic synthesis needs T0")
        traj = simulate_exotherm(system, T0, t_end, tol)
    elif mode == "hws":
        protocol = protocol or HwsProtocol()
        if T0 is not None:
            protocol = dataclasses.replace(protocol, start_temperature=T0)
        traj = simulate_hws(system, protocol, t_end, tol=tol)
    else:
        raise InvalidInputError(f"unknown synthesis mode '{mode}', expected 'adiabatic' or 'hws'")

    times = traj.t_start + sample_dt * np.arange(int(np.floor((traj.t_end - traj.t_start) / sample_dt)) + 1)
    times = times[times <= traj.t_end]
    temperatures = sample(traj, times)[:, -1]
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        temperatures = temperatures + rng.normal(0., noise_std, len(times))

    provenance = Provenance.synthetic(
        seed,
        mode=mode,
        noise_std=float(noise_std),
        sample_dt=float(sample_dt),
        T0=None if T0 is None else float(T0),
        t_end=float(t_end),
        system=system.to_dict(),
    )
    return ArcTrace(times, temperatures, provenance=provenance)
