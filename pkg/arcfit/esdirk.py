"""
Adaptive ESDIRK integration of stiff systems.

The scheme is Kværnø's seven-stage ESDIRK method of order 5 with an
embedded order-4 solution (explicit first stage, stiffly accurate,
L-stable), see

    A. Kværnø, "Singly diagonally implicit Runge-Kutta methods with an
    explicit first stage", BIT Numerical Mathematics 44 (2004), 489-502.

Stage equations are solved by Newton iteration on ``I - h*gamma*J`` with an
LU factorization that is shared by all stages of a step and refreshed only
when an iteration stalls. Dense output between accepted steps is a quintic
Hermite polynomial built from y, y' and y'' at both ends.

Forward sensitivities ``S = dy/dp`` are carried along by differentiating the
converged stage equations (staggered direct method), which makes them the
exact derivative of the discrete solution for the accepted step sequence.
"""
import dataclasses
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import InvalidInputError, RangeError, SingularSystemError, StiffnessError
from .helper import frozen_array
from .kinetics import ThermalState


RhsFunction = Callable[[float, np.ndarray], np.ndarray]
JacFunction = Callable[[float, np.ndarray], np.ndarray]


# --- Kværnø 5(4) tableau ---

_GAMMA = 0.26
_C = np.array([0., 0.52, 1.230333209967908, 0.8957659843500759, 0.43639360985864756, 1., 1.])
_A = np.array([
    [0., 0., 0., 0., 0., 0., 0.],
    [_GAMMA, _GAMMA, 0., 0., 0., 0., 0.],
    [0.13, 0.84033320996790809, _GAMMA, 0., 0., 0., 0.],
    [0.22371961478320505, 0.47675532319799699, -0.06470895363112615, _GAMMA, 0., 0., 0.],
    [0.16648564323248321, 0.10450018841591720, 0.03631482272098715, -0.13090704451073998,
     _GAMMA, 0., 0.],
    [0.13855640231268224, 0., -0.04245337201752043, 0.02446657898003141, 0.61943039072480676,
     _GAMMA, 0.],
    [0.13659751177640291, 0., -0.05496908796538376, -0.04118626728321046, 0.62993304899016403,
     0.06962479448202728, _GAMMA],
])
_B = _A[-1].copy()
_B_EMBEDDED = _A[-2].copy()
_E = _B - _B_EMBEDDED
_STAGES = len(_C)
#: order of the embedded solution plus one, for the step-size controller
_ERROR_ORDER = 5


@dataclass(frozen=True, eq=False)
class Tolerances:
    rtol: float = 1e-6
    atol: Union[float, Sequence[float]] = 1e-9

    def __post_init__(self):
        rtol = float(self.rtol)
        if not (math.isfinite(rtol) and rtol > 0):
            raise InvalidInputError(f"rtol must be positive, got {self.rtol}")
        atol = np.array(self.atol, dtype=float)
        if not (np.all(np.isfinite(atol)) and np.all(atol > 0)):
            raise InvalidInputError(f"atol must be positive, got {self.atol}")
        object.__setattr__(self, "rtol", rtol)
        object.__setattr__(self, "atol", float(atol) if atol.ndim == 0 else tuple(atol.tolist()))

    @classmethod
    def thermal(
            cls,
            n_stages: int,
            rtol: float = 1e-6,
            atol_c: float = 1e-9,
            atol_T: float = 1e-6,
    ) -> "Tolerances":
        """Tolerances for a ``[c_1, ..., c_N, T]`` state"""
        return cls(rtol, (atol_c, ) * n_stages + (atol_T, ))

    def atol_for(self, dim: int) -> np.ndarray:
        atol = np.array(self.atol, dtype=float)
        if atol.ndim == 0:
            return np.full(dim, float(atol))
        if len(atol) != dim:
            raise InvalidInputError(f"atol has {len(atol)} components, state has {dim}")
        return atol

    def scaled(self, factor: float) -> "Tolerances":
        atol = np.array(self.atol, dtype=float) * factor
        return Tolerances(self.rtol * factor, float(atol) if atol.ndim == 0 else tuple(atol.tolist()))

    def to_dict(self) -> dict:
        return {"rtol": self.rtol, "atol": self.atol}


# --- events ---

class EventSpec:
    """
    A threshold crossing that ends the integration. ``value`` is negative
    before the event and crosses to >= 0 when it happens.
    """
    uses_derivative = False

    def value(self, t: float, y: np.ndarray, dy: Optional[np.ndarray]) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise InvalidInputError(f"{name} must be positive, got {value}")
    return value


@dataclass(frozen=True)
class TemperatureCeiling(EventSpec):
    temperature: float

    def __post_init__(self):
        object.__setattr__(self, "temperature", _positive("temperature", self.temperature))

    def value(self, t, y, dy):
        return float(y[-1] - self.temperature)

    def to_dict(self):
        return {"variant": "temperature_ceiling", "temperature": self.temperature}


@dataclass(frozen=True)
class RateThreshold(EventSpec):
    rate: float
    uses_derivative = True

    def __post_init__(self):
        object.__setattr__(self, "rate", _positive("rate", self.rate))

    def value(self, t, y, dy):
        return float(dy[-1] - self.rate)

    def to_dict(self):
        return {"variant": "rate_threshold", "rate": self.rate}


@dataclass(frozen=True)
class TimeLimit(EventSpec):
    time: float

    def __post_init__(self):
        object.__setattr__(self, "time", _positive("time", self.time))

    def value(self, t, y, dy):
        return float(t - self.time)

    def to_dict(self):
        return {"variant": "time_limit", "time": self.time}


@dataclass(frozen=True, eq=False)
class StagesComplete(EventSpec):
    """All progress variables within ``tol`` of their completed value"""
    completion: np.ndarray
    tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "completion", frozen_array(self.completion))
        object.__setattr__(self, "tol", _positive("tol", self.tol))

    def value(self, t, y, dy):
        n = len(self.completion)
        return float(self.tol - np.max(np.abs(y[:n] - self.completion)))

    def to_dict(self):
        return {"variant": "stages_complete", "tol": self.tol, "completion": self.completion.tolist()}


@dataclass(frozen=True, eq=False)
class EventRecord:
    event: EventSpec
    time: float
    state: np.ndarray

    def to_dict(self) -> dict:
        return {
            "event": self.event.to_dict(),
            "time": self.time,
            "state": np.asarray(self.state).tolist(),
        }


# --- trajectory ---

@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Dense integrator output.

    ``states`` and ``derivatives`` are ``(len(times), dim)``; the second
    derivatives enable quintic interpolation, without them it is cubic.
    ``sensitivities`` is ``(len(times), dim, P)`` when carried.
    """
    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    second_derivatives: Optional[np.ndarray] = None
    sensitivities: Optional[np.ndarray] = None
    sensitivity_derivatives: Optional[np.ndarray] = None
    step_stats: Mapping[str, int] = field(default_factory=dict)
    event: Optional[EventRecord] = None
    phases: Optional[Tuple[str, ...]] = None
    info: Mapping = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(len(times), -1)
        if len(times) < 1 or states.shape[0] != len(times):
            raise InvalidInputError(
                f"trajectory needs one state per time, got {len(times)} times and {states.shape[0]} states"
            )
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", frozen_array(times))
        object.__setattr__(self, "states", frozen_array(states))
        for name in ("derivatives", "second_derivatives"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float).reshape(states.shape)
                object.__setattr__(self, name, frozen_array(value))
        for name in ("sensitivities", "sensitivity_derivatives"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=float)
                if value.shape[:2] != states.shape:
                    raise InvalidInputError(f"{name} shape {value.shape} does not match states {states.shape}")
                object.__setattr__(self, name, frozen_array(value))
        if self.phases is not None:
            phases = tuple(self.phases)
            if len(phases) != len(times):
                raise InvalidInputError(f"{len(phases)} phase labels for {len(times)} samples")
            object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "step_stats", dict(self.step_stats))
        object.__setattr__(self, "info", dict(self.info))

    def __len__(self):
        return len(self.times)

    def __repr__(self):
        return (
            f"{self.__class__.__name__}(n={len(self)}, t=[{self.t_start}, {self.t_end}], "
            f"dim={self.dim}, event={self.event.event if self.event else None})"
        )

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def n_stages(self) -> int:
        return self.dim - 1

    @property
    def temperatures(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def rates(self) -> np.ndarray:
        """dT/dt in K/s"""
        return self.derivatives[:, -1]

    @property
    def final_state(self) -> ThermalState:
        return self.state_at(len(self) - 1)

    def concentrations(self, stage: int) -> np.ndarray:
        """Progress variable of the 0-based ``stage``, unclamped"""
        return self.states[:, stage]

    def state_at(self, index: int) -> ThermalState:
        return ThermalState.from_vector(self.states[index])

    def replace(self, **kwargs) -> "Trajectory":
        return dataclasses.replace(self, **kwargs)

    def with_info(self, **info) -> "Trajectory":
        merged = dict(self.info)
        merged.update(info)
        return dataclasses.replace(self, info=merged)

    def interpolate(self, t: float) -> np.ndarray:
        """State vector at time ``t`` from the dense output"""
        k, s, h = self._locate(t)
        if s is None:
            return self.states[k].copy()
        y0, y1 = self.states[k], self.states[k + 1]
        d0, d1 = self.derivatives[k], self.derivatives[k + 1]
        if self.second_derivatives is not None:
            a0, a1 = self.second_derivatives[k], self.second_derivatives[k + 1]
            return _quintic_hermite(s, h, y0, d0, a0, y1, d1, a1)
        return _cubic_hermite(s, h, y0, d0, y1, d1)

    def interpolate_sensitivity(self, t: float) -> np.ndarray:
        if self.sensitivities is None:
            raise InvalidInputError("trajectory carries no sensitivities")
        k, s, h = self._locate(t)
        if s is None:
            return self.sensitivities[k].copy()
        return _cubic_hermite(
            s, h,
            self.sensitivities[k], self.sensitivity_derivatives[k],
            self.sensitivities[k + 1], self.sensitivity_derivatives[k + 1],
        )

    def _locate(self, t: float):
        t = float(t)
        times = self.times
        if not (times[0] <= t <= times[-1]):
            raise RangeError(f"time {t} outside of trajectory range [{times[0]}, {times[-1]}]")
        k = int(np.searchsorted(times, t, side="right")) - 1
        if times[k] == t:
            return k, None, None
        h = times[k + 1] - times[k]
        return k, (t - times[k]) / h, h

    @classmethod
    def concat(cls, parts: Sequence["Trajectory"]) -> "Trajectory":
        """
        Join consecutive trajectories. A part starting where the previous one ended
        loses its first sample.
        """
        parts = [p for p in parts if p is not None]
        if not parts:
            raise InvalidInputError("nothing to concatenate")
        keys = ("times", "states", "derivatives", "second_derivatives")
        chunks = {key: [] for key in keys}
        phases = []
        with_phases = any(p.phases is not None for p in parts)
        with_second = all(p.second_derivatives is not None for p in parts)
        stats = {}
        last_time = None
        for part in parts:
            start = 0
            if last_time is not None:
                if part.times[0] < last_time:
                    raise InvalidInputError("trajectories to concatenate overlap in time")
                if part.times[0] == last_time:
                    start = 1
            chunks["times"].append(part.times[start:])
            chunks["states"].append(part.states[start:])
            chunks["derivatives"].append(part.derivatives[start:])
            if with_second:
                chunks["second_derivatives"].append(part.second_derivatives[start:])
            if with_phases:
                labels = part.phases or ("", ) * len(part)
                phases.extend(labels[start:])
            for key, value in part.step_stats.items():
                stats[key] = stats.get(key, 0) + value
            last_time = part.times[-1]

        info = {}
        for part in parts:
            info.update(part.info)
        return cls(
            times=np.concatenate(chunks["times"]),
            states=np.concatenate(chunks["states"]),
            derivatives=np.concatenate(chunks["derivatives"]),
            second_derivatives=np.concatenate(chunks["second_derivatives"]) if with_second else None,
            step_stats=stats,
            event=parts[-1].event,
            phases=tuple(phases) if with_phases else None,
            info=info,
        )

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "derivatives": self.derivatives.tolist(),
            "step_stats": dict(self.step_stats),
            "event": self.event.to_dict() if self.event else None,
            "phases": list(self.phases) if self.phases else None,
            "info": dict(self.info),
        }


def _cubic_hermite(s, h, y0, d0, y1, d1):
    s2 = s * s
    s3 = s2 * s
    return (
        (2 * s3 - 3 * s2 + 1) * y0
        + (s3 - 2 * s2 + s) * h * d0
        + (-2 * s3 + 3 * s2) * y1
        + (s3 - s2) * h * d1
    )


def _quintic_hermite(s, h, y0, d0, a0, y1, d1, a1):
    s2 = s * s
    s3 = s2 * s
    s4 = s3 * s
    s5 = s4 * s
    return (
        (1 - 10 * s3 + 15 * s4 - 6 * s5) * y0
        + (s - 6 * s3 + 8 * s4 - 3 * s5) * h * d0
        + 0.5 * (s2 - 3 * s3 + 3 * s4 - s5) * h * h * a0
        + 0.5 * (s3 - 2 * s4 + s5) * h * h * a1
        + (-4 * s3 + 7 * s4 - 3 * s5) * h * d1
        + (10 * s3 - 15 * s4 + 6 * s5) * y1
    )


def sample(traj: Trajectory, times: Sequence[float]) -> np.ndarray:
    """
    State vectors at ``times`` from the dense output, one row per time.

    Raises RangeError for times outside of the trajectory.
    """
    return np.array([traj.interpolate(t) for t in np.atleast_1d(np.asarray(times, dtype=float))])


def sample_states(traj: Trajectory, times: Sequence[float]) -> List[ThermalState]:
    return [ThermalState.from_vector(y) for y in sample(traj, times)]


# --- integrator ---

def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


class _Step:
    """Data of one step attempt"""
    __slots__ = ("t", "h", "y_new", "err", "stage_times", "stage_values", "stage_slopes", "newton")

    def __init__(self):
        self.stage_values = []
        self.stage_slopes = []
        self.newton = 0


class Integrator:
    """
    Adaptive ESDIRK integrator.

    :param rhs: callable ``f(t, y) -> dy/dt``
    :param jac: optional callable ``J(t, y) -> df/dy``, forward differences otherwise
    :param tol: Tolerances
    :param max_steps: int, accepted + rejected steps before a StiffnessError
    :param min_step: float, smallest step in seconds before giving up
    :param max_step: float, largest step
    :param first_step: optional float, initial step
    :param fixed_step: optional float, disables error control and steps with this size
    :param verbose: bool, print progress to stderr
    """

    SAFETY = 0.9
    MIN_FACTOR = 0.2
    MAX_FACTOR = 5.
    NEWTON_TOL = 1e-3
    MAX_NEWTON = 8

    def __init__(
            self,
            rhs: RhsFunction,
            jac: Optional[JacFunction] = None,
            tol: Optional[Tolerances] = None,
            max_steps: int = 10 ** 6,
            min_step: float = 1e-12,
            max_step: float = math.inf,
            first_step: Optional[float] = None,
            fixed_step: Optional[float] = None,
            verbose: bool = False,
    ):
        self.rhs = rhs
        self.jac = jac
        self.tol = tol or Tolerances()
        self.max_steps = int(max_steps)
        self.min_step = float(min_step)
        self.max_step = float(max_step)
        self.first_step = first_step
        self.fixed_step = fixed_step
        self.verbose = bool(verbose)
        self._stats = {}

    def integrate(
            self,
            y0: Union[ThermalState, Sequence[float]],
            t_span: Tuple[float, float],
            events: Sequence[EventSpec] = (),
            stops: Optional[Sequence[float]] = None,
            param_jac: Optional[JacFunction] = None,
            s0: Optional[np.ndarray] = None,
    ) -> Trajectory:
        """
        Integrate from ``t_span[0]`` to ``t_span[1]`` or the first triggered event.

        :param stops: times the step sequence must land on exactly
        :param param_jac: callable ``(t, y) -> df/dp`` of shape ``(dim, P)``,
            enables forward sensitivities
        :param s0: initial sensitivities ``(dim, P)``, zero by default
        """
        if isinstance(y0, ThermalState):
            y0 = y0.to_vector()
        y = np.array(y0, dtype=float).reshape(-1)
        t0, t_end = (float(v) for v in t_span)
        if not (math.isfinite(t0) and math.isfinite(t_end) and t0 < t_end):
            raise InvalidInputError(f"t_span must be finite and increasing, got {t_span}")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError(f"initial state must be finite, got {y}")
        dim = len(y)
        self._atol = self.tol.atol_for(dim)
        self._rtol = self.tol.rtol
        self._stats = {
            "accepted": 0, "rejected": 0, "newton_iterations": 0,
            "jacobian_evaluations": 0, "rhs_evaluations": 0, "lu_decompositions": 0,
        }

        stop_times = np.unique(np.asarray(stops if stops is not None else [], dtype=float))
        stop_times = stop_times[(stop_times > t0) & (stop_times < t_end)]
        stop_times = np.append(stop_times, t_end)
        stop_index = 0

        t = t0
        f = self._rhs(t, y)
        jac = self._jac(t, y, f)
        f2 = self._second_derivative(t, y, f, jac)

        with_sens = param_jac is not None
        if with_sens:
            fp = np.asarray(param_jac(t, y), dtype=float).reshape(dim, -1)
            sens = np.zeros_like(fp) if s0 is None else np.array(s0, dtype=float).reshape(fp.shape)
            dsens = jac @ sens + fp

        out_t, out_y, out_f, out_f2 = [t], [y.copy()], [f.copy()], [f2.copy()]
        out_s, out_ds = ([sens.copy()], [dsens.copy()]) if with_sens else (None, None)

        def build(event=None) -> Trajectory:
            return Trajectory(
                times=np.array(out_t), states=np.array(out_y),
                derivatives=np.array(out_f), second_derivatives=np.array(out_f2),
                sensitivities=np.array(out_s) if with_sens else None,
                sensitivity_derivatives=np.array(out_ds) if with_sens else None,
                step_stats=dict(self._stats), event=event,
            )

        event_values = [ev.value(t, y, f) for ev in events]
        for ev, g in zip(events, event_values):
            if g >= 0:
                return build(EventRecord(ev, t, y.copy()))

        if self.fixed_step:
            h = float(self.fixed_step)
        elif self.first_step:
            h = float(self.first_step)
        else:
            h = self._initial_step(y, f)
        h = min(h, self.max_step, t_end - t0)
        err_prev = 1.
        previous_rejected = False

        while t < t_end:
            if self._stats["accepted"] + self._stats["rejected"] >= self.max_steps:
                raise StiffnessError(
                    f"maximum number of steps ({self.max_steps}) exceeded at t={t}",
                    trajectory=build(), time=t,
                )

            next_stop = stop_times[stop_index]
            remaining = next_stop - t
            landing = False
            if h >= remaining * (1. - 1e-12):
                h = remaining
                landing = True
            elif not self.fixed_step and h > 0.5 * remaining:
                h = 0.5 * remaining

            step = self._attempt(t, y, f, jac, h)

            if step is None:
                # Newton failed even with a fresh Jacobian
                self._stats["rejected"] += 1
                h *= 0.25
                previous_rejected = True
                if h < self.min_step or t + h == t:
                    raise SingularSystemError(
                        f"Newton iteration does not converge at t={t} with step {h}",
                        trajectory=build(), time=t,
                    )
                continue

            if self.fixed_step:
                err_norm = 0.
            else:
                scale = self._atol + self._rtol * np.maximum(np.abs(y), np.abs(step.y_new))
                err_norm = _rms(step.err / scale)
                if not math.isfinite(err_norm):
                    err_norm = math.inf

            if err_norm > 1.:
                self._stats["rejected"] += 1
                if math.isfinite(err_norm):
                    factor = max(self.MIN_FACTOR, self.SAFETY * err_norm ** (-1. / _ERROR_ORDER))
                else:
                    factor = self.MIN_FACTOR
                h *= factor
                previous_rejected = True
                if h < self.min_step or t + h == t:
                    raise StiffnessError(
                        f"step size {h} below the floor at t={t}",
                        trajectory=build(), time=t,
                    )
                continue

            # accepted
            t_new = next_stop if landing else t + h
            y_new = step.y_new
            f_new = self._rhs(t_new, y_new)
            jac_new = self._jac(t_new, y_new, f_new)
            f2_new = self._second_derivative(t_new, y_new, f_new, jac_new)
            self._stats["accepted"] += 1

            if with_sens:
                sens, dsens = self._propagate_sensitivities(
                    step, t, y, jac, sens, param_jac, t_new, y_new, jac_new,
                )

            event_record = None
            if events:
                event_record = self._check_events(
                    events, event_values, t, y, f, f2, t_new, y_new, f_new, f2_new,
                )

            if event_record is not None:
                t_e = event_record.time
                if t_e > t:
                    s = (t_e - t) / (t_new - t)
                    y_e = event_record.state
                    f_e = self._rhs(t_e, y_e)
                    jac_e = self._jac(t_e, y_e, f_e)
                    out_t.append(t_e)
                    out_y.append(y_e.copy())
                    out_f.append(f_e)
                    out_f2.append(self._second_derivative(t_e, y_e, f_e, jac_e))
                    if with_sens:
                        s_e = _cubic_hermite(s, t_new - t, out_s[-1], out_ds[-1], sens, dsens)
                        out_s.append(s_e)
                        out_ds.append(jac_e @ s_e + np.asarray(param_jac(t_e, y_e)).reshape(s_e.shape))
                self._log(f"event {event_record.event} at t={t_e}")
                return build(event_record)

            out_t.append(t_new)
            out_y.append(y_new.copy())
            out_f.append(f_new.copy())
            out_f2.append(f2_new.copy())
            if with_sens:
                out_s.append(sens.copy())
                out_ds.append(dsens.copy())

            event_values = [ev.value(t_new, y_new, f_new) for ev in events]
            t, y, f, f2, jac = t_new, y_new, f_new, f2_new, jac_new
            if landing:
                stop_index = min(stop_index + 1, len(stop_times) - 1)

            if not self.fixed_step:
                err_norm = max(err_norm, 1e-4)
                factor = (
                    self.SAFETY
                    * err_norm ** (-0.7 / _ERROR_ORDER)
                    * err_prev ** (0.4 / _ERROR_ORDER)
                )
                factor = min(self.MAX_FACTOR, max(self.MIN_FACTOR, factor))
                if previous_rejected:
                    factor = min(1., factor)
                h = min(h * factor, self.max_step)
                err_prev = err_norm
            previous_rejected = False

            if self._stats["accepted"] % 1000 == 0:
                self._log(f"t={t:.6g} h={h:.3g} steps={self._stats['accepted']}")

        return build()

    def _attempt(self, t, y, f, jac, h) -> Optional[_Step]:
        dim = len(y)
        hg = h * _GAMMA
        identity = np.eye(dim)
        lu = self._factorize(identity - hg * jac)
        lu_fresh = True

        step = _Step()
        step.t = t
        step.h = h
        step.stage_times = t + _C * h
        step.stage_values.append(y)
        step.stage_slopes.append(f)
        scale = self._atol + self._rtol * np.abs(y)

        for i in range(1, _STAGES):
            t_i = step.stage_times[i]
            z = y + h * sum(_A[i, j] * step.stage_slopes[j] for j in range(i))
            guess = z + hg * step.stage_slopes[i - 1]
            result = self._newton(t_i, z, guess, hg, lu, scale)
            if result is None:
                # refresh the Jacobian at the current guess once
                jac_i = self._jac(t_i, guess, None)
                lu = self._factorize(identity - hg * jac_i)
                lu_fresh = False
                result = self._newton(t_i, z, guess, hg, lu, scale)
                if result is None:
                    return None
            Y, iterations = result
            step.newton += iterations
            step.stage_values.append(Y)
            step.stage_slopes.append(self._rhs(t_i, Y))

        slopes = np.array(step.stage_slopes)
        step.y_new = y + h * (_B @ slopes)
        step.err = h * (_E @ slopes)
        if not lu_fresh:
            self._log(f"Jacobian refreshed within step at t={t}")
        return step

    def _newton(self, t_i, z, Y, hg, lu, scale):
        previous = None
        for iteration in range(self.MAX_NEWTON):
            F = self._rhs(t_i, Y)
            residual = Y - z - hg * F
            delta = scipy.linalg.lu_solve(lu, -residual)
            Y = Y + delta
            self._stats["newton_iterations"] += 1
            norm = _rms(delta / scale)
            if not (math.isfinite(norm) and np.all(np.isfinite(Y))):
                return None
            if norm <= self.NEWTON_TOL:
                return Y, iteration + 1
            if previous is not None and norm >= previous:
                return None
            previous = norm
        return None

    def _propagate_sensitivities(self, step, t, y, jac, sens, param_jac, t_new, y_new, jac_new):
        h = step.h
        hg = h * _GAMMA
        dim = len(y)
        identity = np.eye(dim)
        slopes = [jac @ sens + np.asarray(param_jac(t, y)).reshape(sens.shape)]
        for i in range(1, _STAGES):
            t_i = step.stage_times[i]
            Y = step.stage_values[i]
            jac_i = self._jac(t_i, Y, None)
            fp_i = np.asarray(param_jac(t_i, Y)).reshape(sens.shape)
            sz = sens + h * sum(_A[i, j] * slopes[j] for j in range(i))
            s_i = np.linalg.solve(identity - hg * jac_i, sz + hg * fp_i)
            slopes.append(jac_i @ s_i + fp_i)
        sens_new = sens + h * sum(_B[j] * slopes[j] for j in range(_STAGES))
        dsens_new = jac_new @ sens_new + np.asarray(param_jac(t_new, y_new)).reshape(sens.shape)
        return sens_new, dsens_new

    def _check_events(self, events, values, t, y, f, f2, t_new, y_new, f_new, f2_new):
        h = t_new - t
        first = None
        for ev, g_old in zip(events, values):
            g_new = ev.value(t_new, y_new, f_new)
            if not (g_old < 0 <= g_new):
                continue

            def g(tau, ev=ev):
                s = (tau - t) / h
                y_tau = _quintic_hermite(s, h, y, f, f2, y_new, f_new, f2_new)
                dy = self._rhs(tau, y_tau) if ev.uses_derivative else None
                return ev.value(tau, y_tau, dy)

            if g(t_new) < 0:
                t_e = t_new
            else:
                t_e = scipy.optimize.brentq(g, t, t_new, xtol=1e-12 * max(1., abs(t_new)), rtol=4 * np.finfo(float).eps)
            if first is None or t_e < first[1]:
                first = (ev, t_e)

        if first is None:
            return None
        ev, t_e = first
        if t_e >= t_new:
            state = y_new.copy()
            t_e = t_new
        else:
            s = (t_e - t) / h
            state = _quintic_hermite(s, h, y, f, f2, y_new, f_new, f2_new)
        return EventRecord(ev, t_e, state)

    def _initial_step(self, y, f) -> float:
        scale = self._atol + self._rtol * np.abs(y)
        d0 = _rms(y / scale)
        d1 = _rms(f / scale)
        if d0 < 1e-5 or d1 < 1e-5:
            return 1e-6
        return 0.01 * d0 / d1

    def _rhs(self, t, y) -> np.ndarray:
        self._stats["rhs_evaluations"] += 1
        return np.asarray(self.rhs(t, y), dtype=float)

    def _jac(self, t, y, f) -> np.ndarray:
        self._stats["jacobian_evaluations"] += 1
        if self.jac is not None:
            return np.asarray(self.jac(t, y), dtype=float)
        if f is None:
            f = self._rhs(t, y)
        dim = len(y)
        jac = np.empty((dim, dim))
        for j in range(dim):
            delta = math.sqrt(np.finfo(float).eps) * max(abs(y[j]), self._atol[j] * 1e3, 1e-8)
            yj = y.copy()
            yj[j] += delta
            jac[:, j] = (self._rhs(t, yj) - f) / delta
        return jac

    def _second_derivative(self, t, y, f, jac) -> np.ndarray:
        # y'' = J f + df/dt
        delta = 1e-7 * max(1., abs(t))
        ft = (self._rhs(t + delta, y) - f) / delta
        return jac @ f + ft

    def _factorize(self, matrix):
        self._stats["lu_decompositions"] += 1
        return scipy.linalg.lu_factor(matrix, check_finite=False)

    def _log(self, *args):
        if self.verbose:
            print(*args, file=sys.stderr)


def integrate(
        rhs: RhsFunction,
        y0: Union[ThermalState, Sequence[float]],
        t_span: Tuple[float, float],
        tol: Optional[Tolerances] = None,
        events: Sequence[EventSpec] = (),
        jac: Optional[JacFunction] = None,
        **kwargs,
) -> Trajectory:
    """
    Integrate ``dy/dt = rhs(t, y)``, see :class:`Integrator` for the keyword arguments.

    ``stops``, ``param_jac`` and ``s0`` are passed on to :meth:`Integrator.integrate`.
    """
    if tol is None and isinstance(y0, ThermalState):
        tol = Tolerances.thermal(y0.n_stages)
    integrate_kwargs = {
        key: kwargs.pop(key)
        for key in ("stops", "param_jac", "s0")
        if key in kwargs
    }
    integrator = Integrator(rhs, jac=jac, tol=tol, **kwargs)
    return integrator.integrate(y0, t_span, events=events, **integrate_kwargs)
