"""
One-dimensional radial conduction in a cylindrical cell with the
decomposition heat released inside the jellyroll.

Finite volumes on rings ``[r_i, r_(i+1)]`` of a cylinder of length ``L``::

    C_i dT_i/dt = sum_j G_ij (T_j - T_i) + Q_boundary,i + S_i

with log-radial conductances between ring centers, and

    S_i = V_i / V_jellyroll * sum_k h_k r_k(c_ik, T_i)

where every jellyroll ring carries its own progress variables ``c_ik``.
Time stepping is backward Euler, the coupled nonlinear system of a step is
solved by Newton iteration on a sparse Jacobian.
"""
import math
import sys
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import InvalidInputError, SolverError
from .helper import SIGMA, frozen_array, kelvin_to_celsius
from .kinetics import ADIABATIC, AmbientModel, CellProperties, Oven, ReactionSystem, ThermalOde, TracedAmbient


@dataclass(frozen=True)
class RadialMaterial:
    density: float
    specific_heat: float
    conductivity: float

    def __post_init__(self):
        for name in ("density", "specific_heat", "conductivity"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise InvalidInputError(f"material {name} must be positive, got {value}")
            object.__setattr__(self, name, value)

    def to_dict(self) -> dict:
        return {"density": self.density, "specific_heat": self.specific_heat, "conductivity": self.conductivity}


#: steel can of a cylindrical cell
STEEL_CAN = RadialMaterial(density=7917., specific_heat=460., conductivity=14.)
#: through-plane conductivity of a wound jellyroll in W/(m·K)
JELLYROLL_RADIAL_CONDUCTIVITY = 0.3


@dataclass(frozen=True, eq=False)
class RadialModel:
    """
    Ring edges in m (starting at 0), one material and one source flag per ring.
    """
    edges: np.ndarray
    materials: Tuple[RadialMaterial, ...]
    source: np.ndarray
    length: float
    emissivity: float = 0.8
    conv_coeff: float = 10.

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        materials = tuple(self.materials)
        source = np.asarray(self.source, dtype=bool)
        if edges.ndim != 1 or len(edges) < 2 or edges[0] != 0.:
            raise InvalidInputError("ring edges must be a 1-D array starting at 0")
        if np.any(np.diff(edges) <= 0):
            raise InvalidInputError("ring edges must be strictly increasing")
        n = len(edges) - 1
        if len(materials) != n or len(source) != n:
            raise InvalidInputError(
                f"{n} rings need {n} materials and source flags, got {len(materials)} and {len(source)}"
            )
        if not all(isinstance(m, RadialMaterial) for m in materials):
            raise InvalidInputError("materials must be RadialMaterial instances")
        if not (self.length > 0 and 0 <= self.emissivity <= 1 and self.conv_coeff >= 0):
            raise InvalidInputError(
                f"invalid length {self.length}, emissivity {self.emissivity} or conv_coeff {self.conv_coeff}"
            )
        if np.any(source):
            source_materials = {materials[i] for i in np.nonzero(source)[0]}
            if len(source_materials) != 1:
                raise InvalidInputError("the heat source must sit in rings of one material, the jellyroll")
        object.__setattr__(self, "edges", frozen_array(edges))
        object.__setattr__(self, "materials", materials)
        object.__setattr__(self, "source", frozen_array(source, dtype=bool))

    @classmethod
    def for_21700(
            cls,
            cell: CellProperties,
            node_count: int = 40,
            height: float = 0.07,
            can_thickness: float = 2.5e-4,
            radial_conductivity: float = JELLYROLL_RADIAL_CONDUCTIVITY,
            match_heat_capacity: bool = True,
    ) -> "RadialModel":
        """
        A cylindrical cell whose lateral area equals the cell's surface area:
        ``node_count - 1`` jellyroll rings inside one steel can ring.

        The jellyroll density is the cell mass left after the can over the
        jellyroll volume. Its specific heat is chosen so the total heat
        capacity equals the cell's, or taken from the cell when
        ``match_heat_capacity`` is False.
        """
        if int(node_count) < 2:
            raise InvalidInputError(f"node_count must be >= 2, got {node_count}")
        radius = cell.surface_area / (2. * math.pi * height)
        inner = radius - can_thickness
        if not inner > 0:
            raise InvalidInputError(f"can thickness {can_thickness} m exceeds the radius {radius} m")
        n_jelly = int(node_count) - 1
        edges = np.append(np.linspace(0., inner, n_jelly + 1), radius)

        can_volume = math.pi * (radius ** 2 - inner ** 2) * height
        can_mass = STEEL_CAN.density * can_volume
        jelly_volume = math.pi * inner ** 2 * height
        jelly_mass = cell.mass - can_mass
        if not jelly_mass > 0:
            raise InvalidInputError(f"the can ({can_mass:.4g} kg) is heavier than the cell ({cell.mass} kg)")
        if match_heat_capacity:
            specific_heat = (cell.heat_capacity - can_mass * STEEL_CAN.specific_heat) / jelly_mass
        else:
            specific_heat = cell.specific_heat
        jellyroll = RadialMaterial(jelly_mass / jelly_volume, specific_heat, radial_conductivity)

        return cls(
            edges=edges,
            materials=(jellyroll, ) * n_jelly + (STEEL_CAN, ),
            source=np.array([True] * n_jelly + [False]),
            length=height,
            emissivity=cell.emissivity,
            conv_coeff=cell.conv_coeff,
        )

    @property
    def node_count(self) -> int:
        return len(self.edges) - 1

    @property
    def radius(self) -> float:
        return float(self.edges[-1])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def volumes(self) -> np.ndarray:
        return math.pi * (self.edges[1:] ** 2 - self.edges[:-1] ** 2) * self.length

    @property
    def heat_capacities(self) -> np.ndarray:
        """ρ c_p V per ring in J/K"""
        rho_c = np.array([m.density * m.specific_heat for m in self.materials])
        return rho_c * self.volumes

    @property
    def surface_area(self) -> float:
        return 2. * math.pi * self.radius * self.length

    def conductances(self) -> np.ndarray:
        """Thermal conductance in W/K between ring i and i+1"""
        centers = self.centers
        k = np.array([m.conductivity for m in self.materials])
        inner = np.log(self.edges[1:-1] / centers[:-1]) / (2. * math.pi * k[:-1] * self.length)
        outer = np.log(centers[1:] / self.edges[1:-1]) / (2. * math.pi * k[1:] * self.length)
        return 1. / (inner + outer)

    def surface_resistance(self) -> float:
        """Conduction resistance in K/W from the outer ring's center to the surface"""
        k = self.materials[-1].conductivity
        return math.log(self.radius / self.centers[-1]) / (2. * math.pi * k * self.length)

    def refined(self, factor: int = 2) -> "RadialModel":
        """Every ring split into ``factor`` rings of equal width"""
        edges = [0.]
        materials, source = [], []
        for i in range(self.node_count):
            sub = np.linspace(self.edges[i], self.edges[i + 1], factor + 1)[1:]
            edges.extend(sub)
            materials.extend([self.materials[i]] * factor)
            source.extend([bool(self.source[i])] * factor)
        return RadialModel(np.array(edges), tuple(materials), np.array(source), self.length,
                           self.emissivity, self.conv_coeff)

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "radius_m": self.radius,
            "length_m": self.length,
            "edges_m": self.edges.tolist(),
            "materials": [m.to_dict() for m in self.materials],
            "source": self.source.tolist(),
            "emissivity": self.emissivity,
            "conv_coeff": self.conv_coeff,
        }


@dataclass(frozen=True, eq=False)
class RadialResult:
    """
    Ring temperatures over time. ``boundary_heat`` and ``source_heat`` are
    the heat in J that entered through the surface and was released by
    the reactions up to each time.
    """
    times: np.ndarray
    radii: np.ndarray
    volumes: np.ndarray
    heat_capacities: np.ndarray
    temperatures: np.ndarray
    concentrations: Optional[np.ndarray]
    boundary_heat: np.ndarray
    source_heat: np.ndarray

    def __post_init__(self):
        for name in ("times", "radii", "volumes", "heat_capacities", "temperatures",
                     "boundary_heat", "source_heat"):
            object.__setattr__(self, name, frozen_array(getattr(self, name)))
        if self.concentrations is not None:
            object.__setattr__(self, "concentrations", frozen_array(self.concentrations))

    def __len__(self):
        return len(self.times)

    @property
    def mean_temperature(self) -> np.ndarray:
        """Volume-averaged temperature per time"""
        return self.temperatures @ self.volumes / self.volumes.sum()

    @property
    def capacity_mean_temperature(self) -> np.ndarray:
        """Heat-capacity weighted mean temperature per time"""
        return self.temperatures @ self.heat_capacities / self.heat_capacities.sum()

    @property
    def peak_temperature(self) -> float:
        return float(self.temperatures.max())

    def enthalpy_change(self) -> np.ndarray:
        """Sensible heat gained since the start, per time, in J"""
        return (self.temperatures - self.temperatures[0]) @ self.heat_capacities

    def energy_residual(self) -> float:
        """Relative mismatch of the final heat balance"""
        gained = self.enthalpy_change()[-1]
        supplied = self.boundary_heat[-1] + self.source_heat[-1]
        scale = max(abs(gained), abs(self.boundary_heat[-1]), abs(self.source_heat[-1]), 1e-300)
        return float(abs(gained - supplied) / scale)

    def to_dict(self) -> dict:
        return {
            "n_times": len(self),
            "t_end_s": float(self.times[-1]),
            "peak_temperature_C": kelvin_to_celsius(self.peak_temperature),
            "final_mean_temperature_C": kelvin_to_celsius(float(self.mean_temperature[-1])),
            "boundary_heat_J": float(self.boundary_heat[-1]),
            "source_heat_J": float(self.source_heat[-1]),
            "energy_residual": self.energy_residual(),
        }


def _far_field(ambient: AmbientModel, t: float) -> float:
    if isinstance(ambient, Oven):
        return ambient.temperature
    if isinstance(ambient, TracedAmbient):
        return ambient.temperature_at(t)
    raise InvalidInputError(f"radial boundary needs an Oven or TracedAmbient, got {ambient!r}")


class RadialSolver:
    """
    Adaptive backward Euler integration of a RadialModel.

    :param model: RadialModel
    :param system: ReactionSystem for the source, None for pure conduction
    :param ambient: Oven or TracedAmbient, the far field
    :param boundary: ``"exchange"`` for convection and radiation at the surface,
        ``"fixed"`` to hold the surface at the far-field temperature
    :param max_dT: float, largest accepted temperature change of a ring per step
    :param max_dc: float, largest accepted progress change per step
    """

    MAX_NEWTON = 25

    def __init__(
            self,
            model: RadialModel,
            system: Optional[ReactionSystem],
            ambient: Union[Oven, TracedAmbient],
            boundary: str = "exchange",
            dt_initial: float = 1.,
            dt_min: float = 1e-6,
            dt_max: float = 60.,
            max_dT: float = 2.,
            max_dc: float = 0.05,
            verbose: bool = False,
    ):
        if boundary not in ("exchange", "fixed"):
            raise InvalidInputError(f"boundary must be 'exchange' or 'fixed', got '{boundary}'")
        if not 0 < dt_min <= dt_initial <= dt_max:
            raise InvalidInputError(f"need 0 < dt_min <= dt_initial <= dt_max, got {dt_min}, {dt_initial}, {dt_max}")
        _far_field(ambient, 0.)
        self.model = model
        self.system = system if system is not None and np.any(model.source) else None
        self.ambient = ambient
        self.boundary = boundary
        self.dt_initial = dt_initial
        self.dt_min = dt_min
        self.dt_max = dt_max
        self.max_dT = max_dT
        self.max_dc = max_dc
        self.verbose = verbose

        self._n = model.node_count
        self._capacity = model.heat_capacities
        self._G = model.conductances()
        self._source_nodes = np.nonzero(model.source)[0]
        volumes = model.volumes
        self._share = volumes[self._source_nodes] / volumes[self._source_nodes].sum() \
            if len(self._source_nodes) else np.zeros(0)
        if self.system is not None:
            self._ode = ThermalOde(self.system, ADIABATIC)
            self._stages = self.system.n_stages
            self._cell_capacity = self.system.cell.heat_capacity
        else:
            self._ode = None
            self._stages = 0

    # --- pieces of the residual ---

    def _boundary(self, T_outer: float, t: float) -> Tuple[float, float]:
        """Heat flow into the outer ring in W and its derivative by T_outer"""
        model = self.model
        T_inf = _far_field(self.ambient, t)
        r_half = model.surface_resistance()
        if self.boundary == "fixed":
            return (T_inf - T_outer) / r_half, -1. / r_half
        area = model.surface_area
        # radiation written as an exact temperature-dependent coefficient
        h_rad = model.emissivity * SIGMA * (T_inf ** 2 + T_outer ** 2) * (T_inf + T_outer)
        dh_rad = model.emissivity * SIGMA * (2. * T_outer * (T_inf + T_outer) + (T_inf ** 2 + T_outer ** 2))
        h_eff = model.conv_coeff + h_rad
        if h_eff <= 0:
            return 0., 0.
        resistance = r_half + 1. / (h_eff * area)
        q = (T_inf - T_outer) / resistance
        dresistance = -dh_rad / (h_eff ** 2 * area)
        dq = -1. / resistance - q * dresistance / resistance
        return q, dq

    def _sources(self, T, c):
        """Per source ring: heat in W, d/dT, d/dc, dc/dt, d(dc/dt)/dT, d(dc/dt)/dc"""
        ode = self._ode
        n = self._stages
        k = len(self._source_nodes)
        S = np.zeros(k)
        dS_dT = np.zeros(k)
        dS_dc = np.zeros((k, n))
        f = np.zeros((k, n))
        df_dT = np.zeros((k, n))
        df_dc = np.zeros((k, n))
        for j, node in enumerate(self._source_nodes):
            y = np.append(c[j], T[node])
            rhs = ode.rhs(0., y)
            jac = ode.jac(0., y)
            weight = self._share[j] * self._cell_capacity
            S[j] = weight * rhs[n]
            dS_dT[j] = weight * jac[n, n]
            dS_dc[j] = weight * jac[n, :n]
            f[j] = rhs[:n]
            df_dT[j] = jac[:n, n]
            df_dc[j] = np.diag(jac[:n, :n])
        return S, dS_dT, dS_dc, f, df_dT, df_dc

    def _conduction(self, T):
        flow = self._G * (T[1:] - T[:-1])
        out = np.zeros(self._n)
        out[:-1] += flow
        out[1:] -= flow
        return out

    def _step(self, T_old, c_old, t_new, dt):
        """One backward Euler step, returns (T, c, q_boundary, source_power) or None"""
        n_nodes = self._n
        n = self._stages
        k = len(self._source_nodes)
        T = T_old.copy()
        c = c_old.copy()
        G = self._G
        C = self._capacity
        size = n_nodes + k * n

        for iteration in range(self.MAX_NEWTON):
            q, dq = self._boundary(T[-1], t_new)
            residual_T = C * (T - T_old) / dt - self._conduction(T)
            residual_T[-1] -= q
            rows, cols, vals = [], [], []
            diag = C / dt
            diag[:-1] += G
            diag[1:] += G
            diag[-1] -= dq
            rows.extend(range(n_nodes))
            cols.extend(range(n_nodes))
            vals.extend(diag)
            rows.extend(range(n_nodes - 1))
            cols.extend(range(1, n_nodes))
            vals.extend(-G)
            rows.extend(range(1, n_nodes))
            cols.extend(range(n_nodes - 1))
            vals.extend(-G)

            power = 0.
            residual_c = np.zeros(0)
            if k:
                S, dS_dT, dS_dc, f, df_dT, df_dc = self._sources(T, c)
                power = float(S.sum())
                residual_T[self._source_nodes] -= S
                residual_c = ((c - c_old) / dt - f).reshape(-1)
                for j, node in enumerate(self._source_nodes):
                    rows.append(node)
                    cols.append(node)
                    vals.append(-dS_dT[j])
                    for s in range(n):
                        col = n_nodes + j * n + s
                        # temperature row, progress column
                        rows.append(node)
                        cols.append(col)
                        vals.append(-dS_dc[j, s])
                        # progress row
                        rows.append(col)
                        cols.append(col)
                        vals.append(1. / dt - df_dc[j, s])
                        rows.append(col)
                        cols.append(node)
                        vals.append(-df_dT[j, s])

            residual = np.concatenate([residual_T, residual_c])
            if not np.all(np.isfinite(residual)):
                return None
            jac = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))
            delta = scipy.sparse.linalg.spsolve(jac, -residual)
            if not np.all(np.isfinite(delta)):
                return None
            T = T + delta[:n_nodes]
            if k:
                c = c + delta[n_nodes:].reshape(k, n)
            if np.any(T <= 0):
                return None
            if np.max(np.abs(delta[:n_nodes])) < 1e-9 * max(1., np.max(T)) and \
                    (not k or np.max(np.abs(delta[n_nodes:])) < 1e-12):
                q, _ = self._boundary(T[-1], t_new)
                if k:
                    power = float(self._sources(T, c)[0].sum())
                return T, c, q, power

        self._failed_node = int(np.argmax(np.abs(residual[:n_nodes])))
        return None

    def run(self, T0: Union[float, Sequence[float]], t_end: float, t_start: float = 0.) -> RadialResult:
        model = self.model
        T = np.array(np.broadcast_to(np.asarray(T0, dtype=float), (self._n, )))
        if np.any(T <= 0):
            raise InvalidInputError("initial temperatures must be positive kelvin")
        if not t_end > t_start:
            raise InvalidInputError(f"t_end {t_end} must be after t_start {t_start}")
        k = len(self._source_nodes)
        c = np.tile(self.system.c0, (k, 1)) if self._ode is not None else np.zeros((0, 0))

        times, temps, concs = [t_start], [T.copy()], [c.copy()]
        boundary_heat, source_heat = [0.], [0.]
        t = t_start
        dt = min(self.dt_initial, t_end - t_start)
        self._failed_node = None
        steps = 0

        while t < t_end:
            dt = min(dt, t_end - t)
            result = self._step(T, c, t + dt, dt)
            if result is not None:
                T_new, c_new, q, power = result
                dT = np.max(np.abs(T_new - T))
                dc = np.max(np.abs(c_new - c)) if k else 0.
                if dT > self.max_dT or dc > self.max_dc:
                    result = None

            if result is None:
                dt *= 0.5
                if dt < self.dt_min:
                    node = self._failed_node if self._failed_node is not None else int(np.argmax(np.abs(T - np.mean(T))))
                    raise SolverError(
                        f"step size fell below {self.dt_min} s at t={t} s", node=node, time=t,
                    )
                continue

            t += dt
            T, c = T_new, c_new
            times.append(t)
            temps.append(T.copy())
            concs.append(c.copy())
            boundary_heat.append(boundary_heat[-1] + q * dt)
            source_heat.append(source_heat[-1] + power * dt)
            steps += 1
            if steps % 500 == 0:
                self._log(f"t={t:.1f} s dt={dt:.3g} T_max={kelvin_to_celsius(T.max()):.1f} °C")

            growth = 2. if dT == 0 else min(2., 0.8 * self.max_dT / dT)
            if k and dc > 0:
                growth = min(growth, 0.8 * self.max_dc / dc)
            dt = min(self.dt_max, max(self.dt_min, dt * max(growth, 0.5)))

        return RadialResult(
            times=np.array(times),
            radii=model.centers,
            volumes=model.volumes,
            heat_capacities=model.heat_capacities,
            temperatures=np.array(temps),
            concentrations=np.array(concs) if k else None,
            boundary_heat=np.array(boundary_heat),
            source_heat=np.array(source_heat),
        )

    def _log(self, *args):
        if self.verbose:
            print(*args, file=sys.stderr)


def simulate_radial(
        model: RadialModel,
        system: Optional[ReactionSystem],
        T_oven: Union[float, TracedAmbient],
        T0: float,
        t_end: float,
        boundary: str = "exchange",
        verbose: bool = False,
        **solver_kwargs,
) -> RadialResult:
    """
    Radial temperature field of a cell in an oven at ``T_oven`` K (or a
    recorded chamber temperature), starting uniformly at ``T0``.
    ``system`` None switches the source off.
    """
    ambient = T_oven if isinstance(T_oven, TracedAmbient) else Oven(T_oven)
    solver = RadialSolver(model, system, ambient, boundary=boundary, verbose=verbose, **solver_kwargs)
    return solver.run(T0, t_end)
