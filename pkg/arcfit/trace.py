import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, StagingError
from .helper import frozen_array, kelvin_to_celsius


class TraceKind(enum.Enum):
    EXPERIMENTAL = "experimental"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Provenance:
    """
    Where a trace came from.

    Synthetic traces carry the seed and the generator parameters,
    experimental ones the hash of the file they were read from.
    """
    kind: TraceKind = TraceKind.EXPERIMENTAL
    seed: Optional[int] = None
    params: Mapping = field(default_factory=dict)
    source_sha256: Optional[str] = None
    dropped_rows: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", TraceKind(self.kind))
        object.__setattr__(self, "params", dict(self.params))

    @classmethod
    def synthetic(cls, seed: int, **params) -> "Provenance":
        return cls(TraceKind.SYNTHETIC, seed=seed, params=params)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "seed": self.seed,
            "params": dict(self.params),
            "source_sha256": self.source_sha256,
            "dropped_rows": self.dropped_rows,
        }


@dataclass(frozen=True, eq=False)
class ArcTrace:
    """
    A temperature history: times in s (strictly increasing), temperatures in K
    and optionally the self-heating rate dT/dt in K/s.
    """
    times: np.ndarray
    temperatures: np.ndarray
    rates: Optional[np.ndarray] = None
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        temperatures = np.asarray(self.temperatures, dtype=float).reshape(-1)
        if len(times) != len(temperatures):
            raise InvalidInputError(
                f"trace has {len(times)} times but {len(temperatures)} temperatures"
            )
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(temperatures))):
            raise InvalidInputError("trace contains non-finite values")
        if np.any(temperatures <= 0):
            raise InvalidInputError("trace temperatures must be positive kelvin")
        if np.any(np.diff(times) <= 0):
            index = int(np.argmax(np.diff(times) <= 0)) + 1
            raise InvalidInputError(f"trace times must be strictly increasing, violated at index {index}")
        object.__setattr__(self, "times", frozen_array(times))
        object.__setattr__(self, "temperatures", frozen_array(temperatures))
        if self.rates is not None:
            rates = np.asarray(self.rates, dtype=float).reshape(-1)
            if len(rates) != len(times):
                raise InvalidInputError(f"trace has {len(times)} times but {len(rates)} rates")
            object.__setattr__(self, "rates", frozen_array(rates))

    def __len__(self):
        return len(self.times)

    def __repr__(self):
        if not len(self):
            return f"{self.__class__.__name__}(empty)"
        return (
            f"{self.__class__.__name__}(n={len(self)}, t=[{self.times[0]}, {self.times[-1]}] s, "
            f"T=[{self.temperatures.min():.2f}, {self.temperatures.max():.2f}] K, "
            f"{self.provenance.kind.value})"
        )

    @property
    def temperatures_C(self) -> np.ndarray:
        return kelvin_to_celsius(self.temperatures)

    @property
    def rate_C_per_min(self) -> Optional[np.ndarray]:
        return None if self.rates is None else self.rates * 60.

    def with_rates(self, rates: Sequence[float]) -> "ArcTrace":
        return dataclasses.replace(self, rates=np.asarray(rates, dtype=float))

    def with_provenance(self, provenance: Provenance) -> "ArcTrace":
        return dataclasses.replace(self, provenance=provenance)

    def subset(self, mask_or_index) -> "ArcTrace":
        return ArcTrace(
            times=self.times[mask_or_index],
            temperatures=self.temperatures[mask_or_index],
            rates=None if self.rates is None else self.rates[mask_or_index],
            provenance=self.provenance,
        )

    def window(self, T_start: float, T_end: float) -> "ArcTrace":
        """
        The samples from the first one reaching ``T_start`` up to the last
        one not above ``T_end``.
        """
        if not T_end > T_start:
            raise StagingError(f"window end {T_end} K must be above start {T_start} K")
        above = np.nonzero(self.temperatures >= T_start)[0]
        if not len(above):
            raise StagingError(f"trace never reaches {T_start} K")
        first = int(above[0])
        below = np.nonzero(self.temperatures[first:] <= T_end)[0]
        last = first + int(below[-1]) if len(below) else first
        return self.subset(slice(first, last + 1))

    def exotherm_window(self) -> "ArcTrace":
        """
        The longest stretch over which the temperature does not decrease,
        that is the self-heating part of an ARC record.
        """
        if len(self) < 2:
            return self
        rising = np.diff(self.temperatures) >= 0
        best_start, best_len = 0, 0
        start = 0
        for i, ok in enumerate(rising):
            if not ok:
                start = i + 1
                continue
            if i + 1 - start > best_len:
                best_start, best_len = start, i + 1 - start
        return self.subset(slice(best_start, best_start + best_len + 1))

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "temperatures": self.temperatures.tolist(),
            "rates": None if self.rates is None else self.rates.tolist(),
            "provenance": self.provenance.to_dict(),
        }
