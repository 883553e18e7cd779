"""
Run configuration, read from one JSON file.

Temperatures are given in °C and held in K after loading. Unknown keys
are rejected with their dotted path, e.g. ``stages[1].Aa``. Every section
is turned into the domain objects while loading so that an accepted
configuration can not fail validation later.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ArcfitError, ConfigError, InvalidInputError
from .esdirk import Tolerances
from .helper import celsius_to_kelvin, sha256_bytes
from .kinetics import PARAMETER_NAMES, CellProperties, Direction, ReactionSystem, StageKinetics
from .linfit import DEFAULT_R2_THRESHOLD, DEFAULT_RATE_WINDOW, StageOrders, StagePartition
from .sensitivity import default_mask
from .simkit import DEFAULT_ONSET_RATE, HwsProtocol
from .trainer import TrainConfig


_MISSING = object()


class _Reader:
    """Typed access to one JSON object that remembers which keys were used"""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"expected an object, got {type(data).__name__}", path or None)
        self.data = data
        self.path = path
        self._used = set()

    def key_path(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind: type = float, default: Any = _MISSING) -> Any:
        self._used.add(key)
        if key not in self.data or self.data[key] is None:
            if default is _MISSING:
                raise ConfigError("required key is missing", self.key_path(key))
            return default
        return _convert(self.data[key], kind, self.key_path(key))

    def get_list(self, key: str, kind: type = float, default: Any = _MISSING) -> Any:
        self._used.add(key)
        if key not in self.data or self.data[key] is None:
            if default is _MISSING:
                raise ConfigError("required key is missing", self.key_path(key))
            return default
        value = self.data[key]
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", self.key_path(key))
        return [_convert(v, kind, f"{self.key_path(key)}[{i}]") for i, v in enumerate(value)]

    def section(self, key: str) -> "_Reader":
        self._used.add(key)
        return _Reader(self.data.get(key) or {}, self.key_path(key))

    def sections(self, key: str) -> List["_Reader"]:
        self._used.add(key)
        value = self.data.get(key) or []
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", self.key_path(key))
        return [_Reader(v, f"{self.key_path(key)}[{i}]") for i, v in enumerate(value)]

    def done(self):
        unknown = sorted(set(self.data) - self._used)
        if unknown:
            raise ConfigError("unknown key", self.key_path(unknown[0]))


def _convert(value: Any, kind: type, path: str) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", path)
        return value
    if kind in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        if kind is int:
            if float(value) != int(value):
                raise ConfigError(f"expected an integer, got {value!r}", path)
            return int(value)
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    raise TypeError(kind)


class _building:
    """Turns domain validation errors into ConfigErrors at ``path``"""

    def __init__(self, path: str):
        self.path = path

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, InvalidInputError):
            raise ConfigError(str(exc), self.path) from exc
        return False


@dataclass(frozen=True)
class StageSpec:
    direction: Direction
    m: float
    n: float
    c0: float
    freq_factor: Optional[float] = None
    activation_energy: Optional[float] = None
    enthalpy: Optional[float] = None
    trainable: Dict[str, bool] = field(default_factory=dict)

    @property
    def orders(self) -> StageOrders:
        return StageOrders(m=self.m, n=self.n, c0=self.c0, direction=self.direction)

    @property
    def has_kinetics(self) -> bool:
        return None not in (self.freq_factor, self.activation_energy, self.enthalpy)

    def to_stage(self) -> StageKinetics:
        return StageKinetics(
            freq_factor=self.freq_factor,
            activation_energy=self.activation_energy,
            enthalpy=self.enthalpy,
            order_m=self.m,
            order_n=self.n,
            c0=self.c0,
            direction=self.direction,
        )


@dataclass(frozen=True)
class IngestSettings:
    time_column: str = "time_s"
    temp_column: str = "temp_C"
    temp_unit: str = "C"
    time_unit: str = "s"
    rate_column: Optional[str] = None
    time_format: str = "numeric"

    def to_kwargs(self) -> dict:
        return {
            "time_column": self.time_column,
            "temp_column": self.temp_column,
            "temp_unit": self.temp_unit,
            "time_unit": self.time_unit,
            "rate_column": self.rate_column,
            "time_format": self.time_format,
        }


@dataclass(frozen=True)
class AmbientSettings:
    variant: str = "adiabatic"
    #: far-field temperature in K for the oven variant
    temperature: Optional[float] = None
    chamber_csv: Optional[str] = None


@dataclass(frozen=True)
class SimulateSettings:
    T0: Optional[float] = None
    t_end: float = 4e4
    oven_temperatures: Tuple[float, ...] = tuple(celsius_to_kelvin(t) for t in (160., 200., 240.))
    onset_rate: float = DEFAULT_ONSET_RATE


@dataclass(frozen=True)
class RadialSettings:
    node_count: int = 40
    height: float = 0.07
    can_thickness: float = 2.5e-4
    radial_conductivity: float = 0.3
    match_heat_capacity: bool = True
    boundary: str = "exchange"


@dataclass(frozen=True)
class SynthSettings:
    mode: str = "adiabatic"
    noise_std: float = 0.
    sample_dt: float = 10.
    seed: int = 0
    T0: Optional[float] = None
    t_end: float = 4e4


@dataclass(frozen=True)
class GradcheckSettings:
    h_rel: float = 1e-6
    rel_tol: float = 1e-4
    abs_floor: float = 1e-8
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    cell: CellProperties
    stages: Tuple[StageSpec, ...]
    partition: Optional[StagePartition] = None
    rate_window: int = DEFAULT_RATE_WINDOW
    r2_threshold: float = DEFAULT_R2_THRESHOLD
    #: None estimates it from the trace's noise
    monotone_tol: Optional[float] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    init_method: str = "linear"
    tol: Optional[Tolerances] = None
    ingest: IngestSettings = field(default_factory=IngestSettings)
    ambient: AmbientSettings = field(default_factory=AmbientSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    hws: HwsProtocol = field(default_factory=HwsProtocol)
    radial: RadialSettings = field(default_factory=RadialSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)
    output_dir: str = "."
    sha256: Optional[str] = None

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def orders(self) -> List[StageOrders]:
        return [s.orders for s in self.stages]

    def tolerances(self) -> Tolerances:
        return self.tol or Tolerances.thermal(self.n_stages)

    def has_kinetics(self) -> bool:
        return all(s.has_kinetics for s in self.stages)

    def system(self) -> ReactionSystem:
        """The ReactionSystem given by the stages' A, Ea and h"""
        missing = [i + 1 for i, s in enumerate(self.stages) if not s.has_kinetics]
        if missing:
            raise ConfigError(
                f"A, Ea and h are needed for stages {', '.join(map(str, missing))}", "stages",
            )
        return ReactionSystem(tuple(s.to_stage() for s in self.stages), self.cell)

    def mask(self, stages: Sequence[StageKinetics]) -> np.ndarray:
        """Default trainable flags, overridden per stage by ``trainable``"""
        mask = default_mask(stages)
        for i, spec in enumerate(self.stages):
            for name, flag in spec.trainable.items():
                mask[i * len(PARAMETER_NAMES) + PARAMETER_NAMES.index(name)] = flag
        return mask


def _read_cell(r: _Reader) -> CellProperties:
    with _building(r.path):
        cell = CellProperties(
            mass=r.get("mass"),
            specific_heat=r.get("specific_heat"),
            surface_area=r.get("surface_area"),
            emissivity=r.get("emissivity", default=0.8),
            conv_coeff=r.get("conv_coeff", default=10.),
        )
    r.done()
    return cell


def _read_stage(r: _Reader) -> StageSpec:
    direction = r.get("direction", str, default=None)
    m = r.get("m", default=0.)
    if direction is None:
        direction = Direction.for_order_m(m)
    else:
        try:
            direction = Direction(direction.lower())
        except ValueError:
            raise ConfigError(f"expected 'consuming' or 'converting', got '{direction}'", r.key_path("direction"))

    trainable_reader = r.section("trainable")
    trainable = {}
    for name in PARAMETER_NAMES:
        flag = trainable_reader.get(name, bool, default=None)
        if flag is not None:
            trainable[name] = flag
    trainable_reader.done()
    if direction is Direction.CONSUMING and trainable.get("m"):
        raise ConfigError("order m of a consuming stage can not be trainable", trainable_reader.key_path("m"))

    spec = StageSpec(
        direction=direction,
        m=m,
        n=r.get("n", default=1.),
        c0=r.get("c0", default=1.),
        freq_factor=r.get("A", default=None),
        activation_energy=r.get("Ea", default=None),
        enthalpy=r.get("h", default=None),
        trainable=trainable,
    )
    r.done()
    if spec.enthalpy == 0 and trainable.get("h"):
        raise ConfigError("h of a stage without heat release can not be trainable", trainable_reader.key_path("h"))
    with _building(r.path):
        # orders and direction are checked by building a stage with placeholder kinetics
        StageKinetics(
            freq_factor=spec.freq_factor or 1.,
            activation_energy=spec.activation_energy or 1e-19,
            enthalpy=spec.enthalpy if spec.enthalpy is not None else 0.,
            order_m=spec.m, order_n=spec.n, c0=spec.c0, direction=spec.direction,
        )
    return spec


def _read_train(r: _Reader, tol: Optional[Tolerances]) -> Tuple[TrainConfig, str]:
    defaults = TrainConfig()
    init_method = r.get("init", str, default="linear")
    if init_method not in ("linear", "config"):
        raise ConfigError(f"expected 'linear' or 'config', got '{init_method}'", r.key_path("init"))
    with _building(r.path):
        config = TrainConfig(
            steps=r.get("steps", int, defaults.steps),
            lr0=r.get("lr0", float, defaults.lr0),
            decay_factor=r.get("decay_factor", float, defaults.decay_factor),
            decay_every=r.get("decay_every", int, defaults.decay_every),
            beta1=r.get("beta1", float, defaults.beta1),
            beta2=r.get("beta2", float, defaults.beta2),
            epsilon=r.get("epsilon", float, defaults.epsilon),
            tol=tol,
            seed=r.get("seed", int, defaults.seed),
            rollback=r.get("rollback", bool, defaults.rollback),
            max_halvings=r.get("max_halvings", int, defaults.max_halvings),
            early_stop=r.get("early_stop", bool, defaults.early_stop),
            patience=r.get("patience", int, defaults.patience),
            min_delta=r.get("min_delta", float, defaults.min_delta),
            resample_dt=r.get("loss_resample_dt", float, defaults.resample_dt),
            max_integrator_steps=r.get("max_integrator_steps", int, defaults.max_integrator_steps),
            checkpoint_every=r.get("checkpoint_every", int, defaults.checkpoint_every),
            restarts=r.get("restarts", int, defaults.restarts),
            restart_noise=r.get("restart_noise", float, defaults.restart_noise),
        )
    r.done()
    return config, init_method


def _read_tolerances(r: _Reader, n_stages: int) -> Optional[Tolerances]:
    if not r.data:
        return None
    with _building(r.path):
        tol = Tolerances.thermal(
            n_stages,
            rtol=r.get("rtol", default=1e-6),
            atol_c=r.get("atol_c", default=1e-9),
            atol_T=r.get("atol_T", default=1e-6),
        )
    r.done()
    return tol


def _read_ingest(r: _Reader) -> IngestSettings:
    settings = IngestSettings(
        time_column=r.get("time_column", str, "time_s"),
        temp_column=r.get("temp_column", str, "temp_C"),
        temp_unit=r.get("temp_unit", str, "C"),
        time_unit=r.get("time_unit", str, "s"),
        rate_column=r.get("rate_column", str, None),
        time_format=r.get("time_format", str, "numeric"),
    )
    for key, value, allowed in (
            ("temp_unit", settings.temp_unit, ("C", "K")),
            ("time_unit", settings.time_unit, ("s", "min")),
            ("time_format", settings.time_format, ("numeric", "datetime")),
    ):
        if value not in allowed:
            raise ConfigError(f"expected one of {', '.join(allowed)}, got '{value}'", r.key_path(key))
    r.done()
    return settings


def _read_ambient(r: _Reader) -> AmbientSettings:
    variant = r.get("variant", str, "adiabatic")
    if variant not in ("adiabatic", "oven", "traced"):
        raise ConfigError(f"expected adiabatic, oven or traced, got '{variant}'", r.key_path("variant"))
    T_inf = r.get("T_inf_C", default=None)
    chamber = r.get("chamber_csv", str, None)
    if variant == "oven" and T_inf is None:
        raise ConfigError("the oven variant needs T_inf_C", r.key_path("T_inf_C"))
    if variant == "traced" and chamber is None:
        raise ConfigError("the traced variant needs chamber_csv", r.key_path("chamber_csv"))
    r.done()
    return AmbientSettings(variant, None if T_inf is None else celsius_to_kelvin(T_inf), chamber)


def _read_simulate(r: _Reader) -> SimulateSettings:
    defaults = SimulateSettings()
    T0 = r.get("T0_C", default=None)
    ovens = r.get_list("oven_temps_C", default=None)
    settings = SimulateSettings(
        T0=None if T0 is None else celsius_to_kelvin(T0),
        t_end=r.get("t_end_s", default=defaults.t_end),
        oven_temperatures=defaults.oven_temperatures if ovens is None else tuple(celsius_to_kelvin(t) for t in ovens),
        onset_rate=r.get("onset_rate_K_per_min", default=defaults.onset_rate * 60.) / 60.,
    )
    if not settings.t_end > 0 or not settings.onset_rate > 0:
        raise ConfigError("t_end_s and onset_rate_K_per_min must be positive", r.path)
    r.done()
    return settings


def _read_hws(r: _Reader) -> HwsProtocol:
    defaults = HwsProtocol()
    with _building(r.path):
        protocol = HwsProtocol(
            step_increment=r.get("step_increment_K", default=defaults.step_increment),
            wait_duration=r.get("wait_duration_s", default=defaults.wait_duration),
            seek_duration=r.get("seek_duration_s", default=defaults.seek_duration),
            exotherm_threshold=r.get("exotherm_threshold_K_per_min", default=defaults.exotherm_threshold * 60.) / 60.,
            start_temperature=celsius_to_kelvin(r.get("start_temperature_C", default=50.)),
            heating_rate=r.get("heating_rate_K_per_min", default=defaults.heating_rate * 60.) / 60.,
            max_steps=r.get("max_steps", int, defaults.max_steps),
        )
    r.done()
    return protocol


def _read_radial(r: _Reader) -> RadialSettings:
    defaults = RadialSettings()
    settings = RadialSettings(
        node_count=r.get("node_count", int, defaults.node_count),
        height=r.get("height_m", default=defaults.height),
        can_thickness=r.get("can_thickness_m", default=defaults.can_thickness),
        radial_conductivity=r.get("radial_conductivity", default=defaults.radial_conductivity),
        match_heat_capacity=r.get("match_heat_capacity", bool, defaults.match_heat_capacity),
        boundary=r.get("boundary", str, defaults.boundary),
    )
    if settings.node_count < 2:
        raise ConfigError("at least 2 nodes are needed", r.key_path("node_count"))
    if settings.boundary not in ("exchange", "fixed"):
        raise ConfigError(f"expected 'exchange' or 'fixed', got '{settings.boundary}'", r.key_path("boundary"))
    if not (settings.height > 0 and settings.can_thickness > 0 and settings.radial_conductivity > 0):
        raise ConfigError("height_m, can_thickness_m and radial_conductivity must be positive", r.path)
    r.done()
    return settings


def _read_synth(r: _Reader) -> SynthSettings:
    defaults = SynthSettings()
    T0 = r.get("T0_C", default=None)
    settings = SynthSettings(
        mode=r.get("mode", str, defaults.mode),
        noise_std=r.get("noise_std_K", default=defaults.noise_std),
        sample_dt=r.get("sample_dt_s", default=defaults.sample_dt),
        seed=r.get("seed", int, defaults.seed),
        T0=None if T0 is None else celsius_to_kelvin(T0),
        t_end=r.get("t_end_s", default=defaults.t_end),
    )
    if settings.mode not in ("adiabatic", "hws"):
        raise ConfigError(f"expected 'adiabatic' or 'hws', got '{settings.mode}'", r.key_path("mode"))
    if not (settings.sample_dt > 0 and settings.noise_std >= 0 and settings.t_end > 0):
        raise ConfigError("sample_dt_s and t_end_s must be positive, noise_std_K >= 0", r.path)
    r.done()
    return settings


def _read_gradcheck(r: _Reader) -> GradcheckSettings:
    defaults = GradcheckSettings()
    settings = GradcheckSettings(
        h_rel=r.get("h_rel", default=defaults.h_rel),
        rel_tol=r.get("rel_tol", default=defaults.rel_tol),
        abs_floor=r.get("abs_floor", default=defaults.abs_floor),
        workers=r.get("workers", int, defaults.workers),
    )
    if not 1e-7 <= settings.h_rel <= 1e-2:
        raise ConfigError(f"must be in [1e-7, 1e-2], got {settings.h_rel}", r.key_path("h_rel"))
    r.done()
    return settings


def parse_config(data: dict, sha256: Optional[str] = None) -> RunConfig:
    root = _Reader(data, "")
    cell = _read_cell(root.section("cell"))

    stages = tuple(_read_stage(s) for s in root.sections("stages"))
    if not stages:
        raise ConfigError("at least one stage is required", "stages")

    staging = root.section("staging")
    boundaries = staging.get_list("boundaries_C", default=None)
    partition = None
    if boundaries is not None:
        with _building(staging.key_path("boundaries_C")):
            partition = StagePartition.from_celsius(boundaries)
        if partition.n_stages != len(stages):
            raise ConfigError(
                f"{len(boundaries)} boundaries make {partition.n_stages} stages, {len(stages)} are configured",
                staging.key_path("boundaries_C"),
            )
    rate_window = staging.get("rate_window", int, DEFAULT_RATE_WINDOW)
    if rate_window < 3 or rate_window % 2 == 0:
        raise ConfigError(f"must be odd and >= 3, got {rate_window}", staging.key_path("rate_window"))
    r2_threshold = staging.get("r2_threshold", default=DEFAULT_R2_THRESHOLD)
    monotone_tol = staging.get("monotone_tol_K", default=None)
    if monotone_tol is not None and not monotone_tol >= 0:
        raise ConfigError(f"must be >= 0 or null, got {monotone_tol}", staging.key_path("monotone_tol_K"))
    staging.done()

    tol = _read_tolerances(root.section("integrator"), len(stages))
    train, init_method = _read_train(root.section("train"), tol)

    config = RunConfig(
        cell=cell,
        stages=stages,
        partition=partition,
        rate_window=rate_window,
        r2_threshold=r2_threshold,
        monotone_tol=monotone_tol,
        train=train,
        init_method=init_method,
        tol=tol,
        ingest=_read_ingest(root.section("data")),
        ambient=_read_ambient(root.section("ambient")),
        simulate=_read_simulate(root.section("simulate")),
        hws=_read_hws(root.section("hws")),
        radial=_read_radial(root.section("radial")),
        synth=_read_synth(root.section("synth")),
        gradcheck=_read_gradcheck(root.section("gradcheck")),
        output_dir=root.get("output_dir", str, "."),
        sha256=sha256,
    )
    root.get("description", str, None)
    root.done()

    if init_method == "config" and not config.has_kinetics():
        raise ConfigError("train.init is 'config' but not every stage has A, Ea and h", "train.init")
    if init_method == "linear" and partition is None:
        raise ConfigError("the linear initializer needs staging.boundaries_C", "staging.boundaries_C")
    if config.has_kinetics():
        try:
            config.system()
        except ArcfitError as e:
            raise ConfigError(str(e), "stages") from e
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Read a RunConfig from a JSON file.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(f"{path}: can not read: {e.strerror or e}")
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: not valid JSON: {e}")
    return parse_config(data, sha256=sha256_bytes(raw))
