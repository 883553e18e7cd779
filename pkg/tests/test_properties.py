import math
import unittest

import numpy as np

try:
    from hypothesis import given, settings, strategies as st
except ImportError:
    raise unittest.SkipTest("hypothesis is not installed, see extras 'tests'")

from arcfit import fixtures
from arcfit.helper import K_B
from arcfit.kinetics import Direction, ReactionSystem, StageKinetics
from arcfit.simkit import simulate_exotherm

from tests.base import ArcfitTestCase


T0 = 400.


@st.composite
def stages(draw) -> StageKinetics:
    # activation temperature and the rate constant at T0 instead of A and Ea,
    #   which keeps every drawn system integrable within the run
    activation_temperature = draw(st.floats(8e3, 1.6e4))
    rate_at_start = 10 ** draw(st.floats(-6., -2.))
    converting = draw(st.booleans())
    if converting:
        m = draw(st.floats(0.5, 6.))
        n = draw(st.floats(0., 2.))
        c0 = draw(st.floats(0.01, 0.5))
    else:
        m = 0.
        n = draw(st.sampled_from([1., 0.5, 1.5, 2.]))
        c0 = 1.
    return StageKinetics(
        freq_factor=rate_at_start * math.exp(activation_temperature / T0),
        activation_energy=activation_temperature * K_B,
        enthalpy=draw(st.one_of(st.just(0.), st.floats(1., 2e4))),
        order_m=m,
        order_n=n,
        c0=c0,
        direction=Direction.CONVERTING if converting else Direction.CONSUMING,
    )


systems = st.lists(stages(), min_size=1, max_size=3).map(
    lambda s: ReactionSystem(tuple(s), fixtures.cell())
)


class TestAdiabaticInvariants(ArcfitTestCase):

    @settings(max_examples=100, deadline=None)
    @given(systems)
    def test_100_energy_is_conserved(self, system: ReactionSystem):
        traj = simulate_exotherm(system, T0, t_end=5000.)
        n = system.n_stages
        first, last = traj.states[0], traj.states[-1]
        gained = system.cell.heat_capacity * (last[n] - first[n])
        released = sum(s.enthalpy * abs(last[i] - first[i]) for i, s in enumerate(system.stages))
        # relative to the heat the stages can release in total
        capacity = sum(
            s.enthalpy * abs((0. if s.direction is Direction.CONSUMING else 1.) - first[i])
            for i, s in enumerate(system.stages)
        )
        self.assertLessEqual(abs(gained - released), 1e-6 * capacity, f"gained {gained} J, released {released} J")

    @settings(max_examples=100, deadline=None)
    @given(systems)
    def test_110_progress_stays_bounded(self, system: ReactionSystem):
        traj = simulate_exotherm(system, T0, t_end=5000.)
        n = system.n_stages
        concentrations = traj.states[:, :n]
        self.assertTrue(np.all(concentrations >= -1e-6))
        self.assertTrue(np.all(concentrations <= 1. + 1e-6))
        for i, stage in enumerate(system.stages):
            steps = np.diff(concentrations[:, i])
            if stage.direction is Direction.CONSUMING:
                self.assertTrue(np.all(steps <= 1e-6), f"stage {i + 1} grows")
            else:
                self.assertTrue(np.all(steps >= -1e-6), f"stage {i + 1} shrinks")
        # no heat sink in the adiabatic case
        self.assertTrue(np.all(np.diff(traj.temperatures) >= -1e-6))


if __name__ == "__main__":
    unittest.main()
