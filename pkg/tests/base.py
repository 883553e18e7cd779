import os
import shutil
import secrets
import tempfile
import unittest
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from arcfit import fixtures
from arcfit.esdirk import Trajectory, sample
from arcfit.helper import celsius_to_kelvin
from arcfit.kinetics import CellProperties, ReactionSystem, StageKinetics
from arcfit.sensitivity import predict
from arcfit.trace import ArcTrace


SLOW_TESTS = os.environ.get("ARCFIT_SLOW_TESTS") == "1"


def slow_test(func):
    """Skip unless ARCFIT_SLOW_TESTS=1"""
    return unittest.skipUnless(SLOW_TESTS, "set ARCFIT_SLOW_TESTS=1 to run")(func)


class TempDir:
    """A scratch directory that is removed on exit"""

    def __init__(self):
        self.path = Path(tempfile.gettempdir()) / "py-arcfit" / secrets.token_hex(20)

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        shutil.rmtree(self.path)

    def write_file(self, name: Union[str, Path], content: Optional[Union[str, bytes]] = None) -> Path:
        name = Path(name)
        assert not name.is_absolute(), f"'name' must be a relative path, got '{name}'"
        full_name = self.path / name
        os.makedirs(full_name.parent, exist_ok=True)

        mode = "wb" if isinstance(content, bytes) else "w"

        with open(full_name, mode) as fp:
            if content:
                fp.write(content)
        return full_name


def single_stage(
        A: float = 1e10,
        Ea: float = 1.5e-19,
        h: float = 5000.,
        m: float = 0.,
        n: float = 1.,
        c0: float = 1.,
        cell: Optional[CellProperties] = None,
) -> ReactionSystem:
    return ReactionSystem(
        (StageKinetics(freq_factor=A, activation_energy=Ea, enthalpy=h, order_m=m, order_n=n, c0=c0), ),
        cell or fixtures.cell(),
    )


def linear_trace(times: Sequence[float], slope: float = 2., T0: float = 300.) -> ArcTrace:
    times = np.asarray(times, dtype=float)
    return ArcTrace(times, T0 + slope * times)


def sampled(system: ReactionSystem, times: Sequence[float], T0: float = 400.) -> ArcTrace:
    """The system's own adiabatic temperature history at ``times``"""
    times = np.asarray(times, dtype=float)
    traj = predict(system, ArcTrace(times, np.full(len(times), T0)))
    return ArcTrace(times, sample(traj, times)[:, -1])


class ArcfitTestCase(unittest.TestCase):

    T_START = celsius_to_kelvin(124.)

    def assertAllClose(self, expected, actual, rtol: float = 1e-7, atol: float = 0., msg: str = None):
        expected = np.asarray(expected, dtype=float)
        actual = np.asarray(actual, dtype=float)
        self.assertEqual(expected.shape, actual.shape, msg)
        if not np.allclose(actual, expected, rtol=rtol, atol=atol):
            diff = np.max(np.abs(actual - expected))
            self.fail(f"arrays differ by up to {diff} (rtol={rtol}, atol={atol})" + (f"\n{msg}" if msg else ""))

    def assertRelativeError(self, expected: float, actual: float, rel: float, msg: str = None):
        error = abs(actual - expected) / max(abs(expected), 1e-300)
        self.assertLessEqual(error, rel, f"expected {expected}, got {actual}, relative error {error}" + (f"\n{msg}" if msg else ""))

    def assertEnergyConserved(self, system: ReactionSystem, traj: Trajectory, rel: float = 1e-6):
        """m c_p (T_end - T_0) equals the heat released by all stages"""
        first, last = traj.states[0], traj.states[-1]
        n = system.n_stages
        gained = system.cell.heat_capacity * (last[n] - first[n])
        released = sum(
            stage.enthalpy * abs(last[i] - first[i])
            for i, stage in enumerate(system.stages)
        )
        scale = max(abs(released), 1e-12)
        self.assertLessEqual(
            abs(gained - released) / scale, rel,
            f"gained {gained} J, released {released} J",
        )

    def assertStrictlyIncreasing(self, values: Sequence[float]):
        values = np.asarray(values, dtype=float)
        self.assertTrue(np.all(np.diff(values) > 0), f"not strictly increasing: {values}")
