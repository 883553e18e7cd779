"""
Loss and gradient of a predicted temperature history against data.

Parameters are trained in a transformed space: ``log A``, ``log Ea`` and
``log h`` per stage plus the orders ``m`` and ``n`` as they are.
The gradient comes from forward sensitivities carried through the
integrator, ``fd_gradient`` is the finite-difference cross-check.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import IntegrationError, InvalidInputError, RangeError
from .esdirk import Tolerances, Trajectory, integrate
from .helper import frozen_array
from .kinetics import (
    ADIABATIC, PARAMETER_NAMES, AmbientModel, CellProperties, Direction,
    ReactionSystem, StageKinetics, ThermalOde,
)
from .trace import ArcTrace


N_PER_STAGE = len(PARAMETER_NAMES)
LOG_ENTRIES = (0, 1, 2)
#: lowest order m of a trained converting stage, keeps it self-limiting
MIN_CONVERTING_ORDER = 1e-3
#: lowest order n of a trained consuming stage
MIN_CONSUMING_ORDER = 1e-3


def default_mask(stages: Sequence[StageKinetics]) -> np.ndarray:
    """
    Trainable flags: A and Ea always, h where it is positive, m only for
    converting stages, n only where it is neither 0 nor 1.
    """
    mask = []
    for stage in stages:
        mask.extend([
            True, True,
            stage.enthalpy > 0,
            stage.direction is Direction.CONVERTING,
            stage.order_n not in (0., 1.),
        ])
    return np.array(mask, dtype=bool)


def _stage_values(stage: StageKinetics) -> List[float]:
    return [
        math.log(stage.freq_factor),
        math.log(stage.activation_energy),
        # a stage without heat release has no log h, the entry stays frozen at 0
        math.log(stage.enthalpy) if stage.enthalpy > 0 else 0.,
        stage.order_m,
        stage.order_n,
    ]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Flat vector of transformed stage parameters, five entries per stage
    in the order ``log A, log Ea, log h, m, n``.

    ``mask`` flags the trainable entries, ``stages`` holds the stages the
    vector was made from; their directions and initial progress are kept
    and entries still equal to the original value map back to the
    original number exactly.
    """
    values: np.ndarray
    mask: np.ndarray
    stages: Tuple[StageKinetics, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        values = np.array(self.values, dtype=float).reshape(-1)
        mask = np.array(self.mask, dtype=bool).reshape(-1)
        size = N_PER_STAGE * len(stages)
        if len(values) != size or len(mask) != size:
            raise InvalidInputError(
                f"{len(stages)} stages need {size} values and mask entries, "
                f"got {len(values)} and {len(mask)}"
            )
        if not np.all(np.isfinite(values)):
            bad = [self._name(i) for i in np.nonzero(~np.isfinite(values))[0]]
            raise InvalidInputError(f"parameter values must be finite: {', '.join(bad)}")
        for i, stage in enumerate(stages):
            if stage.direction is Direction.CONSUMING and mask[i * N_PER_STAGE + 3]:
                raise InvalidInputError(f"order m of consuming stage {i + 1} can not be trainable")
            if stage.enthalpy == 0 and mask[i * N_PER_STAGE + 2]:
                raise InvalidInputError(f"h of stage {i + 1} is 0 and can not be trainable")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "values", frozen_array(values))
        object.__setattr__(self, "mask", frozen_array(mask, dtype=bool))

    @classmethod
    def from_stages(cls, stages: Sequence[StageKinetics], mask: Optional[Sequence[bool]] = None) -> "ParamVector":
        stages = tuple(stages)
        values = []
        for stage in stages:
            values.extend(_stage_values(stage))
        if mask is None:
            mask = default_mask(stages)
        return cls(np.array(values), mask, stages)

    @classmethod
    def from_system(cls, system: ReactionSystem, mask: Optional[Sequence[bool]] = None) -> "ParamVector":
        return cls.from_stages(system.stages, mask)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"{self.__class__.__name__}({self.n_stages} stages, {self.n_trainable} trainable)"

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_trainable(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def trainable_indices(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]

    @property
    def names(self) -> List[str]:
        return [self._name(i) for i in range(len(self.values))]

    @staticmethod
    def _name(index: int) -> str:
        return f"{PARAMETER_NAMES[index % N_PER_STAGE]}_{index // N_PER_STAGE + 1}"

    def layout(self, stage: int) -> dict:
        """Offsets of the 0-based stage's entries"""
        return {name: stage * N_PER_STAGE + j for j, name in enumerate(PARAMETER_NAMES)}

    def lower_bounds(self) -> np.ndarray:
        lower = np.full(len(self.values), -np.inf)
        for i, stage in enumerate(self.stages):
            base = i * N_PER_STAGE
            if stage.direction is Direction.CONVERTING:
                lower[base + 3] = MIN_CONVERTING_ORDER
                lower[base + 4] = 0.
            else:
                lower[base + 3] = 0.
                lower[base + 4] = MIN_CONSUMING_ORDER
        return lower

    def clamp(self, values: np.ndarray) -> np.ndarray:
        """Lift trainable entries to their lower bound, frozen entries are returned as stored"""
        values = np.array(values, dtype=float)
        clamped = np.maximum(values, self.lower_bounds())
        return np.where(self.mask, clamped, self.values)

    def with_values(self, values: Sequence[float]) -> "ParamVector":
        return ParamVector(values, self.mask, self.stages)

    def with_mask(self, mask: Sequence[bool]) -> "ParamVector":
        return ParamVector(self.values, mask, self.stages)

    def to_stages(self) -> Tuple[StageKinetics, ...]:
        stages = []
        for i, template in enumerate(self.stages):
            original = _stage_values(template)
            current = self.values[i * N_PER_STAGE:(i + 1) * N_PER_STAGE]
            raw = [template.freq_factor, template.activation_energy, template.enthalpy,
                   template.order_m, template.order_n]
            out = []
            for j, (value, orig, exact) in enumerate(zip(current, original, raw)):
                if value == orig:
                    out.append(exact)
                elif j in LOG_ENTRIES:
                    out.append(math.exp(value))
                else:
                    out.append(float(value))
            stages.append(StageKinetics(
                freq_factor=out[0],
                activation_energy=out[1],
                enthalpy=out[2],
                order_m=out[3],
                order_n=out[4],
                c0=template.c0,
                direction=template.direction,
            ))
        return tuple(stages)

    def to_system(self, cell: CellProperties) -> ReactionSystem:
        return ReactionSystem(self.to_stages(), cell)

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "values": self.values.tolist(),
            "mask": self.mask.tolist(),
        }


@dataclass(frozen=True, eq=False)
class LossReport:
    loss: float
    gradient: np.ndarray
    n_timesteps: int
    trajectory: Optional[Trajectory] = None

    @property
    def rmse(self) -> float:
        return math.sqrt(self.loss)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "rmse": self.rmse,
            "gradient": np.asarray(self.gradient).tolist(),
            "n_timesteps": self.n_timesteps,
        }


def trajectory_loss(pred: Trajectory, data: ArcTrace) -> float:
    """
    Mean squared temperature difference in K² over the data's timestamps,
    predictions taken from the dense output.
    """
    if not len(data):
        raise InvalidInputError("no data to compare against")
    if data.times[0] < pred.t_start or data.times[-1] > pred.t_end:
        raise RangeError(
            f"prediction covers [{pred.t_start}, {pred.t_end}] s, "
            f"data spans [{data.times[0]}, {data.times[-1]}] s"
        )
    predicted = np.array([pred.interpolate(t)[-1] for t in data.times])
    return float(np.mean((predicted - data.temperatures) ** 2))


def resample(data: ArcTrace, dt: float) -> ArcTrace:
    """Linear interpolation of the data onto a uniform grid of spacing ``dt``"""
    if not dt > 0:
        raise InvalidInputError(f"resample step must be positive, got {dt}")
    times = np.arange(data.times[0], data.times[-1], dt)
    if times[-1] < data.times[-1]:
        times = np.append(times, data.times[-1])
    return ArcTrace(times, np.interp(times, data.times, data.temperatures), provenance=data.provenance)


def _check_layout(system: ReactionSystem, params: ParamVector):
    if params.n_stages != system.n_stages:
        raise InvalidInputError(
            f"parameter vector has {params.n_stages} stages, system has {system.n_stages}"
        )


def _predict(system, data, params, tol, ambient, with_sensitivities, max_steps):
    model = params.to_system(system.cell)
    ode = ThermalOde(model, ambient)
    trainable = params.trainable_indices
    y0 = np.append(model.c0, data.temperatures[0])
    if tol is None:
        tol = Tolerances.thermal(model.n_stages)

    param_jac = None
    if with_sensitivities and len(trainable):
        def param_jac(t, y):
            return ode.param_jac(t, y)[:, trainable]

    try:
        return integrate(
            ode.rhs, y0, (float(data.times[0]), float(data.times[-1])),
            tol=tol, jac=ode.jac, stops=data.times[1:-1], param_jac=param_jac,
            max_steps=max_steps,
        )
    except IntegrationError as e:
        values = ", ".join(f"{n}={v:.6g}" for n, v in zip(params.names, params.values))
        raise e.with_context(f"parameters {values}")


def predict(
        system: ReactionSystem,
        data: ArcTrace,
        tol: Optional[Tolerances] = None,
        ambient: AmbientModel = ADIABATIC,
        max_steps: int = 10 ** 6,
) -> Trajectory:
    """The trajectory the loss compares against ``data``"""
    return _predict(system, data, ParamVector.from_system(system), tol, ambient, False, max_steps)


def grad_loss(
        system: ReactionSystem,
        data: ArcTrace,
        params: ParamVector,
        tol: Optional[Tolerances] = None,
        ambient: AmbientModel = ADIABATIC,
        resample_dt: Optional[float] = None,
        max_steps: int = 10 ** 6,
) -> LossReport:
    """
    Loss and its gradient with respect to ``params``.

    The kinetics come from ``params``, the cell from ``system``. The
    prediction starts at the data's first sample with the stages' initial
    progress and lands exactly on every data timestamp, so the gradient is
    the derivative of the discrete solution. Frozen entries get 0.
    """
    _check_layout(system, params)
    if resample_dt:
        data = resample(data, resample_dt)
    if len(data) < 2:
        raise InvalidInputError("at least two data samples are needed")

    traj = _predict(system, data, params, tol, ambient, True, max_steps)
    index = np.searchsorted(traj.times, data.times)
    residual = traj.states[index, -1] - data.temperatures
    n = len(data)
    loss = float(np.mean(residual ** 2))

    gradient = np.zeros(len(params))
    if traj.sensitivities is not None:
        sens_T = traj.sensitivities[index, -1, :]
        gradient[params.trainable_indices] = 2. / n * (residual @ sens_T)
    return LossReport(loss, gradient, n, traj)


def central_differences(
        func: Callable[[np.ndarray], float],
        x: Sequence[float],
        h_rel: float = 1e-6,
        mask: Optional[Sequence[bool]] = None,
        workers: int = 1,
) -> np.ndarray:
    """
    Central difference gradient of ``func`` at ``x``, step ``h_rel * max(|x_i|, 1)``.
    Entries with a false ``mask`` are 0.
    """
    x = np.array(x, dtype=float)
    indices = range(len(x)) if mask is None else np.nonzero(np.asarray(mask, dtype=bool))[0]

    def partial(i: int) -> float:
        step = h_rel * max(abs(x[i]), 1.)
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        return (func(up) - func(down)) / (2. * step)

    gradient = np.zeros(len(x))
    indices = list(indices)
    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(partial, indices))
    else:
        results = [partial(i) for i in indices]
    for i, value in zip(indices, results):
        gradient[i] = value
    return gradient


def tight_tolerances(n_stages: int) -> Tolerances:
    return Tolerances.thermal(n_stages, rtol=1e-10, atol_c=1e-13, atol_T=1e-10)


def fd_gradient(
        system: ReactionSystem,
        data: ArcTrace,
        params: ParamVector,
        h_rel: float = 1e-6,
        tol: Optional[Tolerances] = None,
        ambient: AmbientModel = ADIABATIC,
        workers: int = 1,
        max_steps: int = 10 ** 6,
) -> np.ndarray:
    """
    Central differences of the loss on the transformed parameters,
    every evaluation at tight tolerance.
    """
    if not 1e-7 <= h_rel <= 1e-2:
        raise InvalidInputError(f"h_rel must be in [1e-7, 1e-2], got {h_rel}")
    _check_layout(system, params)
    tol = tol or tight_tolerances(system.n_stages)
    if tol.rtol > 1e-9:
        raise InvalidInputError(f"finite differences need rtol <= 1e-9, got {tol.rtol}")

    def loss(values):
        trial = ParamVector(values, params.mask, params.stages)
        traj = _predict(system, data, trial, tol, ambient, False, max_steps)
        return trajectory_loss(traj, data)

    return central_differences(loss, params.values, h_rel, params.mask, workers)


@dataclass(frozen=True)
class GradientCheckRow:
    name: str
    ad: float
    fd: float
    rel_err: float
    ok: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "ad": self.ad, "fd": self.fd, "rel_err": self.rel_err, "ok": self.ok}


@dataclass(frozen=True)
class GradientCheck:
    loss: float
    rows: Tuple[GradientCheckRow, ...]

    @property
    def ok(self) -> bool:
        return all(row.ok for row in self.rows)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "ok": self.ok, "rows": [r.to_dict() for r in self.rows]}


def gradient_check(
        system: ReactionSystem,
        data: ArcTrace,
        params: ParamVector,
        tol: Optional[Tolerances] = None,
        h_rel: float = 1e-6,
        rel_tol: float = 1e-4,
        abs_floor: float = 1e-8,
        ambient: AmbientModel = ADIABATIC,
        workers: int = 1,
) -> GradientCheck:
    """
    Compare ``grad_loss`` against ``fd_gradient`` for every trainable entry,
    both at tight tolerance unless ``tol`` is given.
    """
    tol = tol or tight_tolerances(system.n_stages)
    report = grad_loss(system, data, params, tol, ambient)
    fd = fd_gradient(system, data, params, h_rel, tol, ambient, workers)
    rows = []
    for i in params.trainable_indices:
        rel_err = abs(report.gradient[i] - fd[i]) / max(abs(fd[i]), abs_floor)
        rows.append(GradientCheckRow(
            name=params.names[i],
            ad=float(report.gradient[i]),
            fd=float(fd[i]),
            rel_err=float(rel_err),
            ok=bool(rel_err <= rel_tol),
        ))
    return GradientCheck(report.loss, tuple(rows))
