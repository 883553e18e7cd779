"""
The lumped thermal-runaway model.

Every stage ``i`` carries a progress variable ``c_i`` in [0, 1] and reacts at

    r_i = c_i^n_i * (1 - c_i)^m_i * A_i * exp(-Ea_i / (k_b * T))

which is never negative. A consuming stage (m = 0) moves ``c`` from its
initial value toward 0, a converting stage (m > 0) toward 1. Each stage
releases ``h_i * r_i`` watts and the cell temperature follows

    m_cell * c_p * dT/dt = sum_i h_i * r_i + Q_diss

Activation energies are stored per molecule in joules and always paired
with the Boltzmann constant.
"""
import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError
from .helper import K_B, SIGMA, frozen_array


#: trainable parameters per stage, in ParamVector order
PARAMETER_NAMES = ("A", "Ea", "h", "m", "n")


def _require_finite(name: str, value: float) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")
    return value


class Direction(enum.Enum):
    CONSUMING = "consuming"
    CONVERTING = "converting"

    @classmethod
    def for_order_m(cls, order_m: float) -> "Direction":
        return cls.CONVERTING if order_m > 0 else cls.CONSUMING

    @property
    def sign(self) -> float:
        return -1.0 if self is Direction.CONSUMING else 1.0

    @property
    def completed_value(self) -> float:
        return 0.0 if self is Direction.CONSUMING else 1.0


@dataclass(frozen=True)
class CellProperties:
    mass: float
    specific_heat: float
    surface_area: float
    emissivity: float = 0.8
    conv_coeff: float = 10.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, _require_finite(f.name, getattr(self, f.name)))
        if self.mass <= 0 or self.specific_heat <= 0 or self.surface_area <= 0:
            raise InvalidInputError(
                f"mass, specific_heat and surface_area must be positive, got {self!r}"
            )
        if not 0. <= self.emissivity <= 1.:
            raise InvalidInputError(f"emissivity must be in [0, 1], got {self.emissivity}")
        if self.conv_coeff < 0:
            raise InvalidInputError(f"conv_coeff must be >= 0, got {self.conv_coeff}")

    @property
    def heat_capacity(self) -> float:
        """m_cell * c_p in J/K"""
        return self.mass * self.specific_heat

    def replace(self, **kwargs) -> "CellProperties":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class StageKinetics:
    freq_factor: float
    activation_energy: float
    enthalpy: float
    order_m: float = 0.
    order_n: float = 1.
    c0: float = 1.
    direction: Optional[Direction] = None

    def __post_init__(self):
        for name in ("freq_factor", "activation_energy", "enthalpy", "order_m", "order_n", "c0"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))

        direction = self.direction
        if direction is None:
            direction = Direction.for_order_m(self.order_m)
        elif isinstance(direction, str):
            try:
                direction = Direction(direction.lower())
            except ValueError:
                raise InvalidInputError(f"unknown stage direction '{direction}'")
        object.__setattr__(self, "direction", direction)

        if self.freq_factor <= 0 or self.activation_energy <= 0:
            raise InvalidInputError(
                f"freq_factor and activation_energy must be positive, got "
                f"A={self.freq_factor}, Ea={self.activation_energy}"
            )
        if self.enthalpy < 0:
            raise InvalidInputError(f"enthalpy must be >= 0, got {self.enthalpy}")
        if self.order_m < 0 or self.order_n < 0:
            raise InvalidInputError(
                f"reaction orders must be >= 0, got m={self.order_m}, n={self.order_n}"
            )
        if not 0. <= self.c0 <= 1.:
            raise InvalidInputError(f"c0 must be in [0, 1], got {self.c0}")
        if (self.order_m > 0) != (direction is Direction.CONVERTING):
            raise InvalidInputError(
                f"a {direction.value} stage requires "
                f"{'m > 0' if direction is Direction.CONVERTING else 'm = 0'}, got m={self.order_m}"
            )

    @property
    def sign(self) -> float:
        return self.direction.sign

    @property
    def activation_temperature(self) -> float:
        """Ea / k_b in kelvin"""
        return self.activation_energy / K_B

    def replace(self, **kwargs) -> "StageKinetics":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "A": self.freq_factor,
            "Ea": self.activation_energy,
            "Ea_over_kb_K": self.activation_temperature,
            "h": self.enthalpy,
            "m": self.order_m,
            "n": self.order_n,
            "c0": self.c0,
            "direction": self.direction.value,
        }


@dataclass(frozen=True)
class ReactionSystem:
    stages: Tuple[StageKinetics, ...]
    cell: CellProperties

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise InvalidInputError("a reaction system needs at least one stage")
        for i, stage in enumerate(stages):
            if not isinstance(stage, StageKinetics):
                raise InvalidInputError(f"stage {i + 1} is not a StageKinetics: {stage!r}")
        object.__setattr__(self, "stages", stages)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def dim(self) -> int:
        return len(self.stages) + 1

    @property
    def c0(self) -> np.ndarray:
        return np.array([s.c0 for s in self.stages])

    def completion_state(self) -> np.ndarray:
        return np.array([s.direction.completed_value for s in self.stages])

    def is_complete(self, concentrations: Sequence[float], tol: float = 1e-6) -> bool:
        c = np.asarray(concentrations, dtype=float)
        return bool(np.all(np.abs(c - self.completion_state()) <= tol))

    def initial_state(self, temperature: float) -> "ThermalState":
        return ThermalState(tuple(self.c0), temperature)

    def total_enthalpy(self) -> float:
        return float(sum(s.enthalpy for s in self.stages))

    def with_stages(self, stages: Iterable[StageKinetics]) -> "ReactionSystem":
        return ReactionSystem(tuple(stages), self.cell)

    def with_cell(self, cell: CellProperties) -> "ReactionSystem":
        return ReactionSystem(self.stages, cell)

    def to_dict(self) -> dict:
        return {
            "cell": self.cell.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
        }


@dataclass(frozen=True)
class ThermalState:
    concentrations: Tuple[float, ...]
    temperature: float

    def __post_init__(self):
        conc = []
        for i, c in enumerate(self.concentrations):
            c = _require_finite(f"concentration {i + 1}", c)
            conc.append(min(1., max(0., c)))
        object.__setattr__(self, "concentrations", tuple(conc))
        temperature = _require_finite("temperature", self.temperature)
        if temperature <= 0:
            raise InvalidInputError(f"temperature must be positive, got {temperature}")
        object.__setattr__(self, "temperature", temperature)

    @classmethod
    def from_vector(cls, y: Sequence[float]) -> "ThermalState":
        return cls(tuple(y[:-1]), y[-1])

    @property
    def n_stages(self) -> int:
        return len(self.concentrations)

    def to_vector(self) -> np.ndarray:
        return np.array(self.concentrations + (self.temperature, ), dtype=float)

    def to_dict(self) -> dict:
        return {
            "concentrations": list(self.concentrations),
            "temperature": self.temperature,
        }


# --- ambient models ---

class AmbientModel:
    """
    Heat exchanged with the surroundings, in watts (positive heats the cell).
    """
    is_adiabatic = False

    def flux(self, cell: CellProperties, temperature: float, t: float) -> float:
        raise NotImplementedError

    def flux_derivative(self, cell: CellProperties, temperature: float, t: float) -> float:
        """d(flux)/dT"""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Adiabatic(AmbientModel):
    is_adiabatic = True

    def flux(self, cell, temperature, t):
        return 0.

    def flux_derivative(self, cell, temperature, t):
        return 0.

    def to_dict(self):
        return {"variant": "adiabatic"}


ADIABATIC = Adiabatic()


@dataclass(frozen=True)
class Oven(AmbientModel):
    temperature: float

    def __post_init__(self):
        temperature = _require_finite("oven temperature", self.temperature)
        if temperature <= 0:
            raise InvalidInputError(f"oven temperature must be positive, got {temperature}")
        object.__setattr__(self, "temperature", temperature)

    def flux(self, cell, temperature, t):
        return dissipative_flux(cell, temperature, self.temperature)

    def flux_derivative(self, cell, temperature, t):
        return -cell.surface_area * (
            cell.conv_coeff + 4. * cell.emissivity * SIGMA * temperature ** 3
        )

    def to_dict(self):
        return {"variant": "oven", "T_inf": self.temperature}


@dataclass(frozen=True, eq=False)
class TracedAmbient(AmbientModel):
    """
    Far-field temperature given by samples, linearly interpolated
    and held constant outside the sampled range.
    """
    times: np.ndarray
    temperatures: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        temperatures = np.asarray(self.temperatures, dtype=float)
        if times.ndim != 1 or times.shape != temperatures.shape or len(times) < 1:
            raise InvalidInputError("traced ambient needs equally long, non-empty time and temperature arrays")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(temperatures))):
            raise InvalidInputError("traced ambient contains non-finite values")
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError("traced ambient times must be strictly increasing")
        if np.any(temperatures <= 0):
            raise InvalidInputError("traced ambient temperatures must be positive")
        object.__setattr__(self, "times", frozen_array(times))
        object.__setattr__(self, "temperatures", frozen_array(temperatures))

    @classmethod
    def from_function(cls, func: Callable[[float], float], times: Sequence[float]) -> "TracedAmbient":
        return cls(np.asarray(times, dtype=float), np.array([func(t) for t in times], dtype=float))

    def temperature_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.temperatures))

    def flux(self, cell, temperature, t):
        return dissipative_flux(cell, temperature, self.temperature_at(t))

    def flux_derivative(self, cell, temperature, t):
        return -cell.surface_area * (
            cell.conv_coeff + 4. * cell.emissivity * SIGMA * temperature ** 3
        )

    def to_dict(self):
        return {
            "variant": "traced",
            "times": self.times.tolist(),
            "temperatures": self.temperatures.tolist(),
        }


@dataclass(frozen=True)
class Ramp(AmbientModel):
    """
    A heater that raises the cell temperature by ``rate`` K/s on top of the chemistry,
    without any other exchange.
    """
    rate: float

    def __post_init__(self):
        rate = _require_finite("ramp rate", self.rate)
        if rate < 0:
            raise InvalidInputError(f"ramp rate must be >= 0, got {rate}")
        object.__setattr__(self, "rate", rate)

    def flux(self, cell, temperature, t):
        return cell.heat_capacity * self.rate

    def flux_derivative(self, cell, temperature, t):
        return 0.

    def to_dict(self):
        return {"variant": "ramp", "rate": self.rate}


# --- scalar operations ---

def stage_rate(stage: StageKinetics, c: float, temperature: float) -> float:
    """
    Reaction rate of one stage in 1/s, always >= 0.

    ``c`` is clamped to [0, 1]; 0^0 is 1.
    """
    c = _require_finite("c", c)
    temperature = _require_finite("T", temperature)
    if temperature <= 0:
        raise InvalidInputError(f"T must be positive, got {temperature}")
    c = min(1., max(0., c))
    return float(
        _conversion_factor(c, stage.order_m, stage.order_n)
        * stage.freq_factor * math.exp(-stage.activation_energy / (K_B * temperature))
    )


def stage_heat_rate(stage: StageKinetics, rate: float) -> float:
    """Heat released by one stage in W"""
    rate = _require_finite("rate", rate)
    if rate < 0:
        raise InvalidInputError(f"rate must be >= 0, got {rate}")
    return stage.enthalpy * rate


def dissipative_flux(cell: CellProperties, temperature: float, ambient_temperature: float) -> float:
    """
    Convective and radiative exchange with a far field at ``ambient_temperature``, in W.
    Negative when the cell is hotter than the far field.
    """
    temperature = _require_finite("T", temperature)
    ambient_temperature = _require_finite("T_inf", ambient_temperature)
    if temperature <= 0 or ambient_temperature <= 0:
        raise InvalidInputError(
            f"temperatures must be positive, got T={temperature}, T_inf={ambient_temperature}"
        )
    return cell.surface_area * (
        cell.conv_coeff * (ambient_temperature - temperature)
        + cell.emissivity * SIGMA * (ambient_temperature ** 4 - temperature ** 4)
    )


def system_rhs(
        system: ReactionSystem,
        state: ThermalState,
        ambient: AmbientModel = ADIABATIC,
        t: float = 0.,
) -> np.ndarray:
    """
    Time derivative of ``[c_1, ..., c_N, T]``.
    """
    if state.n_stages != system.n_stages:
        raise InvalidInputError(
            f"state has {state.n_stages} concentrations, system has {system.n_stages} stages"
        )
    return ThermalOde(system, ambient).rhs(t, state.to_vector())


def system_jacobian(system, state, ambient=ADIABATIC, t=0.) -> np.ndarray:
    return ThermalOde(system, ambient).jac(t, state.to_vector())


def system_param_jacobian(system, state, ambient=ADIABATIC, t=0.) -> np.ndarray:
    return ThermalOde(system, ambient).param_jac(t, state.to_vector())


def _conversion_factor(c, order_m, order_n):
    return np.power(c, order_n) * np.power(1. - c, order_m)


def _power_derivative(x, p):
    """d(x^p)/dx for x in [0, 1], taken as 0 where it is not finite"""
    with np.errstate(divide="ignore", invalid="ignore"):
        value = p * np.power(x, p - 1.)
    value = np.where(x > 0, value, np.where(p == 1., 1., 0.))
    return np.where(p == 0., 0., value)


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.where(x > 0, np.log(np.where(x > 0, x, 1.)), 0.)


class ThermalOde:
    """
    Right-hand side of the lumped model and its analytic derivatives,
    with the stage parameters unpacked into arrays once.

    The state vector is ``[c_1, ..., c_N, T]``. Parameter derivatives
    are taken with respect to ``[log A, log Ea, log h, m, n]`` per stage,
    stage after stage.
    """

    def __init__(self, system: ReactionSystem, ambient: AmbientModel = ADIABATIC):
        self.system = system
        self.ambient = ambient
        self.cell = system.cell
        self.n = system.n_stages
        self.dim = self.n + 1
        stages = system.stages
        self._A = np.array([s.freq_factor for s in stages])
        self._Ea = np.array([s.activation_energy for s in stages])
        self._h = np.array([s.enthalpy for s in stages])
        self._m = np.array([s.order_m for s in stages])
        self._n = np.array([s.order_n for s in stages])
        self._sign = np.array([s.sign for s in stages])
        self._capacity = self.cell.heat_capacity

    def rates(self, c: np.ndarray, temperature: float) -> np.ndarray:
        cc = np.clip(c, 0., 1.)
        return _conversion_factor(cc, self._m, self._n) * self._A * np.exp(-self._Ea / (K_B * temperature))

    def heat_release(self, c: np.ndarray, temperature: float) -> float:
        return float(self._h @ self.rates(c, temperature))

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        n = self.n
        temperature = y[n]
        r = self.rates(y[:n], temperature)
        dy = np.empty(self.dim)
        dy[:n] = self._sign * r
        dy[n] = (self._h @ r + self.ambient.flux(self.cell, temperature, t)) / self._capacity
        return dy

    def jac(self, t: float, y: np.ndarray) -> np.ndarray:
        n = self.n
        c = y[:n]
        temperature = y[n]
        cc = np.clip(c, 0., 1.)
        k = self._A * np.exp(-self._Ea / (K_B * temperature))
        f = _conversion_factor(cc, self._m, self._n)
        df = (
            _power_derivative(cc, self._n) * np.power(1. - cc, self._m)
            - np.power(cc, self._n) * _power_derivative(1. - cc, self._m)
        )
        # the clamp is flat outside [0, 1]
        df = np.where((c >= 0.) & (c <= 1.), df, 0.)
        dr_dc = k * df
        dr_dT = f * k * self._Ea / (K_B * temperature ** 2)

        jac = np.zeros((self.dim, self.dim))
        idx = np.arange(n)
        jac[idx, idx] = self._sign * dr_dc
        jac[idx, n] = self._sign * dr_dT
        jac[n, idx] = self._h * dr_dc / self._capacity
        jac[n, n] = (
            self._h @ dr_dT + self.ambient.flux_derivative(self.cell, temperature, t)
        ) / self._capacity
        return jac

    def param_jac(self, t: float, y: np.ndarray) -> np.ndarray:
        n = self.n
        c = y[:n]
        temperature = y[n]
        cc = np.clip(c, 0., 1.)
        r = self.rates(c, temperature)

        dr = np.zeros((n, len(PARAMETER_NAMES)))
        dr[:, 0] = r
        dr[:, 1] = -r * self._Ea / (K_B * temperature)
        dr[:, 3] = r * _safe_log(1. - cc)
        dr[:, 4] = r * _safe_log(cc)

        out = np.zeros((self.dim, n * len(PARAMETER_NAMES)))
        for i in range(n):
            cols = slice(i * 5, i * 5 + 5)
            out[i, cols] = self._sign[i] * dr[i]
            out[n, cols] = self._h[i] * dr[i] / self._capacity
            out[n, i * 5 + 2] = self._h[i] * r[i] / self._capacity
        return out
