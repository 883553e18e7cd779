"""
Reading and writing the files arcfit works with.

All CSV files may start with ``#`` comment lines. Floats are written with
``repr`` so they read back to the same double.
"""
import io
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ._version import version
from .errors import DataFileError, InvalidInputError, OutputFileError
from .esdirk import Trajectory
from .helper import (
    ZERO_CELSIUS, elapsed_seconds, format_float, kelvin_to_celsius, sha256_bytes, to_json,
)
from .kinetics import CellProperties, ReactionSystem, StageKinetics, TracedAmbient
from .linfit import InitReport
from .radial import RadialResult
from .sensitivity import GradientCheck
from .simkit import OvenResult
from .trace import ArcTrace, Provenance, TraceKind
from .trainer import Checkpoint, TrainHistory


VERSION_STRING = ".".join(str(v) for v in version)

TRACE_COLUMNS = ("time_s", "temp_C")
RATE_COLUMN = "rate_C_per_min"
PARAMETER_COLUMNS = ("stage", "method", "ic", "A", "Ea", "Ea_over_kb_K", "h", "m", "n")


def _read_input(path: Union[str, Path]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataFileError(f"can not read: {e.strerror or e}", str(path))


@contextmanager
def _output(path: Union[str, Path]):
    """Opens ``path`` for text writing, parent directories are created"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="\n", encoding="utf-8") as fp:
            yield fp
    except OSError as e:
        raise OutputFileError(f"can not write: {e.strerror or e}", str(path))


def _read_frame(raw: bytes, path: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(io.BytesIO(raw), comment="#", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataFileError("file is empty", path)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataFileError(f"not a readable CSV: {e}", path)
    df.columns = [str(c).strip() for c in df.columns]
    if df.empty:
        raise DataFileError("no data rows", path)
    return df


def _require_columns(df: pd.DataFrame, columns: Iterable[str], path: str):
    for column in columns:
        if column not in df.columns:
            raise DataFileError(
                f"column is missing, found {', '.join(df.columns)}", path, column=column,
            )


def _numeric(df: pd.DataFrame, column: str) -> np.ndarray:
    return pd.to_numeric(df[column], errors="coerce").to_numpy(dtype=float)


def _datetime_seconds(values: Sequence, path: str, column: str) -> np.ndarray:
    """Seconds since the first parseable timestamp, NaN for unparseable ones"""
    stamps = [None if pd.isna(v) else str(v) for v in values]
    seconds = np.full(len(stamps), np.nan)
    valid = []
    for i, stamp in enumerate(stamps):
        if stamp is None:
            continue
        try:
            elapsed_seconds([stamp])
        except (ValueError, OverflowError):
            continue
        valid.append(i)
    if valid:
        try:
            seconds[valid] = elapsed_seconds([stamps[i] for i in valid])
        except TypeError:
            raise DataFileError("naive and timezone-aware timestamps are mixed", path, column=column)
    return seconds


def ingest_csv(
        path: Union[str, Path],
        time_column: str = "time_s",
        temp_column: str = "temp_C",
        temp_unit: str = "C",
        time_unit: str = "s",
        rate_column: Optional[str] = None,
        time_format: str = "numeric",
) -> ArcTrace:
    """
    Read a calorimeter record into an ArcTrace in s and K.

    :param time_column: str, name of the time column
    :param temp_column: str, name of the temperature column
    :param temp_unit: ``"C"`` or ``"K"``
    :param time_unit: ``"s"`` or ``"min"``, ignored for datetime columns
    :param rate_column: str, optional self-heating rate column in °C/min
    :param time_format: ``"numeric"`` or ``"datetime"`` for wall-clock
        timestamps, which are converted to seconds since the first row
    :return: ArcTrace, rows with a non-finite value are dropped and counted
        in ``provenance.dropped_rows``
    """
    if temp_unit not in ("C", "K"):
        raise InvalidInputError(f"temp_unit must be 'C' or 'K', got '{temp_unit}'")
    if time_unit not in ("s", "min"):
        raise InvalidInputError(f"time_unit must be 's' or 'min', got '{time_unit}'")
    if time_format not in ("numeric", "datetime"):
        raise InvalidInputError(f"time_format must be 'numeric' or 'datetime', got '{time_format}'")

    path = str(path)
    raw = _read_input(path)
    df = _read_frame(raw, path)
    columns = [time_column, temp_column] + ([rate_column] if rate_column else [])
    _require_columns(df, columns, path)

    if time_format == "datetime":
        times = _datetime_seconds(df[time_column].tolist(), path, time_column)
    else:
        times = _numeric(df, time_column)
        if time_unit == "min":
            times = times * 60.
    temperatures = _numeric(df, temp_column)
    if temp_unit == "C":
        temperatures = temperatures + ZERO_CELSIUS
    rates = None
    if rate_column:
        rates = _numeric(df, rate_column) / 60.

    valid = np.isfinite(times) & np.isfinite(temperatures)
    if rates is not None:
        valid &= np.isfinite(rates)
    dropped = int(np.count_nonzero(~valid))
    if not valid.any():
        raise DataFileError("no row has finite values", path)

    # 1-based data row numbers, header excluded
    rows = np.arange(1, len(df) + 1)[valid]
    times, temperatures = times[valid], temperatures[valid]
    if rates is not None:
        rates = rates[valid]

    steps = np.diff(times)
    if np.any(steps <= 0):
        k = int(np.argmax(steps <= 0)) + 1
        problem = "duplicate timestamp" if steps[k - 1] == 0 else "time decreases"
        raise DataFileError(problem, path, row=int(rows[k]), column=time_column)
    if np.any(temperatures <= 0):
        k = int(np.argmax(temperatures <= 0))
        raise DataFileError("temperature below absolute zero", path, row=int(rows[k]), column=temp_column)

    provenance = Provenance(
        TraceKind.EXPERIMENTAL,
        source_sha256=sha256_bytes(raw),
        dropped_rows=dropped,
    )
    return ArcTrace(times, temperatures, rates, provenance)


def provenance_header(
        input_sha256: Optional[str] = None,
        config_sha256: Optional[str] = None,
        seed: Optional[int] = None,
        params: Optional[Mapping] = None,
) -> List[str]:
    """
    ``#`` comment lines naming the arcfit version, the input and config
    hashes, the seed and any generator parameters
    """
    lines = [f"# arcfit {VERSION_STRING}"]
    if input_sha256 is not None:
        lines.append(f"# input_sha256 {input_sha256}")
    if config_sha256 is not None:
        lines.append(f"# config_sha256 {config_sha256}")
    if seed is not None:
        lines.append(f"# seed {seed}")
    for key, value in (params or {}).items():
        if isinstance(value, (dict, list, tuple)):
            value = json.dumps(value, sort_keys=True, separators=(",", ":"))
        lines.append(f"# {key} {value}")
    return lines


def trace_header(trace: ArcTrace, config_sha256: Optional[str] = None) -> List[str]:
    provenance = trace.provenance
    lines = provenance_header(
        input_sha256=provenance.source_sha256,
        config_sha256=config_sha256,
        seed=provenance.seed,
        params=provenance.params,
    )
    lines.insert(1, f"# kind {provenance.kind.value}")
    if provenance.dropped_rows:
        lines.append(f"# dropped_rows {provenance.dropped_rows}")
    return lines


def _write_rows(fp, header: Sequence[str], columns: Sequence[str], rows: Iterable[Sequence]):
    for line in header:
        fp.write(line + "\n")
    fp.write(",".join(columns) + "\n")
    for row in rows:
        fp.write(",".join(_cell(v) for v in row) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def export_csv(trace: ArcTrace, path: Union[str, Path], config_sha256: Optional[str] = None):
    """
    Write ``time_s,temp_C[,rate_C_per_min]`` with the trace's provenance
    as comment lines.
    """
    columns = list(TRACE_COLUMNS)
    data = [trace.times, trace.temperatures_C]
    if trace.rates is not None:
        columns.append(RATE_COLUMN)
        data.append(trace.rate_C_per_min)
    with _output(path) as fp:
        _write_rows(fp, trace_header(trace, config_sha256), columns, zip(*data))


def trajectory_columns(n_stages: int, with_phase: bool = False) -> List[str]:
    columns = ["time_s", "temp_K", "dTdt_K_per_s"] + [f"c_{i + 1}" for i in range(n_stages)]
    if with_phase:
        columns.append("phase")
    return columns


def write_trajectory_csv(traj: Trajectory, path: Union[str, Path], header: Sequence[str] = ()):
    """``time_s,temp_K,dTdt_K_per_s,c_1..c_N`` plus ``phase`` if the trajectory is labelled"""
    n = traj.n_stages
    columns = trajectory_columns(n, traj.phases is not None)

    def rows():
        for k, t in enumerate(traj.times):
            row = [t, traj.states[k, -1], traj.derivatives[k, -1]] + list(traj.states[k, :n])
            if traj.phases is not None:
                row.append(traj.phases[k])
            yield row

    with _output(path) as fp:
        _write_rows(fp, header, columns, rows())


def read_trajectory_csv(path: Union[str, Path]) -> pd.DataFrame:
    """
    Read a trajectory CSV back as a DataFrame with the float columns
    ``time_s``, ``temp_K``, ``dTdt_K_per_s`` and the ``c_i`` columns.
    """
    path = str(path)
    df = _read_frame(_read_input(path), path)
    _require_columns(df, ("time_s", "temp_K", "dTdt_K_per_s"), path)
    for column in df.columns:
        if column == "phase":
            continue
        values = pd.to_numeric(df[column], errors="coerce")
        bad = np.nonzero(~np.isfinite(values.to_numpy(dtype=float)))[0]
        if len(bad):
            raise DataFileError("not a finite number", path, row=int(bad[0]) + 1, column=column)
        df[column] = values.astype(float)
    if np.any(np.diff(df["time_s"].to_numpy()) <= 0):
        raise DataFileError("times must be strictly increasing", path, column="time_s")
    return df


def read_chamber_csv(
        path: Union[str, Path],
        time_column: str = "time_s",
        temp_column: str = "temp_C",
        temp_unit: str = "C",
        time_unit: str = "s",
        time_format: str = "numeric",
) -> TracedAmbient:
    """A recorded chamber temperature as the far field of a simulation"""
    trace = ingest_csv(
        path, time_column=time_column, temp_column=temp_column,
        temp_unit=temp_unit, time_unit=time_unit, time_format=time_format,
    )
    return TracedAmbient(trace.times, trace.temperatures)


# --- fit results ---

def parameter_rows(system: ReactionSystem, method: str) -> List[dict]:
    """One row per stage with the columns of ``PARAMETER_COLUMNS``"""
    rows = []
    for i, stage in enumerate(system.stages):
        values = stage.to_dict()
        rows.append({
            "stage": i + 1,
            "method": method,
            "ic": stage.c0,
            "A": values["A"],
            "Ea": values["Ea"],
            "Ea_over_kb_K": values["Ea_over_kb_K"],
            "h": values["h"],
            "m": values["m"],
            "n": values["n"],
        })
    return rows


@dataclass(frozen=True, eq=False)
class FitReport:
    """
    Parameter tables before and after training, the loss summary and
    the provenance. Holds no timestamps so equal runs give equal reports.
    """
    initial: ReactionSystem
    final: ReactionSystem
    history: TrainHistory
    initial_method: str = "linear"
    init_report: Optional[InitReport] = None
    input_sha256: Optional[str] = None
    config_sha256: Optional[str] = None
    seed: Optional[int] = None
    extra: Mapping = field(default_factory=dict)

    @property
    def rmse(self) -> float:
        return self.history.rmse

    def rows(self) -> List[dict]:
        return parameter_rows(self.initial, self.initial_method) + parameter_rows(self.final, "crnn")

    def to_dict(self) -> dict:
        return {
            "stages": self.rows(),
            "loss": self.history.to_dict(),
            "rmse_K": self.rmse,
            "initializer": self.init_report.to_dict() if self.init_report else None,
            "cell": self.final.cell.to_dict(),
            "provenance": {
                "arcfit_version": VERSION_STRING,
                "input_sha256": self.input_sha256,
                "config_sha256": self.config_sha256,
                "seed": self.seed,
            },
            **self.extra,
        }

    def __repr__(self):
        return f"{self.__class__.__name__}(stages={self.final.n_stages}, rmse={self.rmse:.4g} K)"


def _write_json(data: dict, path: Union[str, Path]):
    with _output(path) as fp:
        fp.write(to_json(data, indent=2))
        fp.write("\n")


def _read_json(path: Union[str, Path]) -> dict:
    raw = _read_input(path)
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFileError(f"not valid JSON: {e}", str(path))


def write_fit_report(report: FitReport, path: Union[str, Path]):
    _write_json(report.to_dict(), path)


def read_fit_report(path: Union[str, Path]) -> dict:
    return _read_json(path)


def system_from_report(path: Union[str, Path], cell: CellProperties, method: str = "crnn") -> ReactionSystem:
    """The ReactionSystem of the ``method`` rows of a written FitReport"""
    data = read_fit_report(path)
    try:
        rows = [row for row in data["stages"] if row["method"] == method]
        stages = tuple(
            StageKinetics(
                freq_factor=row["A"], activation_energy=row["Ea"], enthalpy=row["h"],
                order_m=row["m"], order_n=row["n"], c0=row["ic"],
            )
            for row in sorted(rows, key=lambda r: r["stage"])
        )
    except (KeyError, TypeError) as e:
        raise DataFileError(f"not a fit report: {e!r}", str(path))
    except InvalidInputError as e:
        raise DataFileError(str(e), str(path))
    if not stages:
        raise DataFileError(f"no '{method}' rows", str(path))
    return ReactionSystem(stages, cell)


def write_parameters_csv(
        rows: Sequence[Mapping], path: Union[str, Path], header: Sequence[str] = (),
):
    with _output(path) as fp:
        _write_rows(fp, header, PARAMETER_COLUMNS, ([row[c] for c in PARAMETER_COLUMNS] for row in rows))


def write_loss_history_csv(history: TrainHistory, path: Union[str, Path], header: Sequence[str] = ()):
    with _output(path) as fp:
        _write_rows(
            fp, header, ("step", "loss_K2", "lr"),
            ((i, loss, lr) for i, (loss, lr) in enumerate(zip(history.losses, history.lrs))),
        )


def write_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]):
    _write_json(checkpoint.to_dict(), path)


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    data = _read_json(path)
    try:
        return Checkpoint.from_dict(data)
    except InvalidInputError as e:
        raise DataFileError(str(e), str(path))


def write_gradcheck_csv(check: GradientCheck, path: Union[str, Path], header: Sequence[str] = ()):
    with _output(path) as fp:
        _write_rows(
            fp, header, ("name", "ad", "fd", "rel_err", "ok"),
            ((r.name, r.ad, r.fd, r.rel_err, r.ok) for r in check.rows),
        )


def write_oven_summary_csv(results: Sequence[OvenResult], path: Union[str, Path], header: Sequence[str] = ()):
    def rows():
        for r in results:
            onset = r.onset_time if r.onset_time is not None else math.nan
            yield kelvin_to_celsius(r.T_oven), onset, kelvin_to_celsius(r.peak_temperature)

    with _output(path) as fp:
        _write_rows(fp, header, ("T_oven_C", "onset_time_s", "peak_temp_C"), rows())


def write_radial_csv(result: RadialResult, path: Union[str, Path], header: Sequence[str] = ()):
    """
    Mean and per-ring temperatures in K with the cumulative boundary
    and source heat in J. Ring radii are listed in the header.
    """
    n = result.temperatures.shape[1]
    columns = ["time_s", "mean_temp_K"] + [f"T_{i + 1}" for i in range(n)] + ["boundary_heat_J", "source_heat_J"]
    header = list(header) + ["# radii_m " + " ".join(format_float(r) for r in result.radii)]
    mean = result.mean_temperature

    def rows():
        for k, t in enumerate(result.times):
            yield [t, mean[k]] + list(result.temperatures[k]) + [result.boundary_heat[k], result.source_heat[k]]

    with _output(path) as fp:
        _write_rows(fp, header, columns, rows())
