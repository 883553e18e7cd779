import datetime
import hashlib
import json
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import dateutil.parser
import numpy as np


#: Boltzmann constant, J/K
K_B = 1.380649e-23
#: Stefan-Boltzmann constant, W/(m²·K⁴)
SIGMA = 5.670374419e-8
ZERO_CELSIUS = 273.15

_date_parser = dateutil.parser


def parse_datetime(s: str) -> datetime.datetime:
    return _date_parser.parse(s)


def elapsed_seconds(stamps: Sequence[str]) -> np.ndarray:
    """
    Convert wall-clock timestamps to seconds since the first one.

    Naive and aware timestamps can not be mixed.
    """
    dates = [parse_datetime(s) for s in stamps]
    if not dates:
        return np.zeros(0)
    first = dates[0]
    return np.array([(d - first).total_seconds() for d in dates], dtype=float)


def celsius_to_kelvin(value):
    if isinstance(value, (list, tuple)):
        return type(value)(v + ZERO_CELSIUS for v in value)
    return value + ZERO_CELSIUS


def kelvin_to_celsius(value):
    if isinstance(value, (list, tuple)):
        return type(value)(v - ZERO_CELSIUS for v in value)
    return value - ZERO_CELSIUS


def format_float(value: float) -> str:
    # repr() is the shortest string that reads back to the same double
    return repr(float(value))


def frozen_array(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return sha256_bytes(text.encode("utf-8"))


def _json_default(obj: Any):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def to_json(obj: Any, indent: Optional[int] = 2) -> str:
    return json.dumps(obj, indent=indent, default=_json_default)
