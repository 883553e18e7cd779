import math
import unittest

import numpy as np

from arcfit import fixtures
from arcfit.errors import InvalidInputError
from arcfit.helper import K_B
from arcfit.kinetics import (
    ADIABATIC, CellProperties, Direction, Oven, Ramp, StageKinetics, ThermalOde, ThermalState,
    TracedAmbient, dissipative_flux, stage_heat_rate, stage_rate, system_jacobian, system_rhs,
)

from tests.base import ArcfitTestCase, single_stage


class TestKinetics(ArcfitTestCase):

    def test_100_stage_rate(self):
        stage = StageKinetics(freq_factor=1.723e11, activation_energy=2.027e-19, enthalpy=8336.)
        self.assertRelativeError(1.978e-5, stage_rate(stage, 1., 400.), 5e-3)

        converting = StageKinetics(
            freq_factor=1.994e7, activation_energy=1.554e-19, enthalpy=15970., order_m=4.62, order_n=0., c0=0.04,
        )
        expected = 1.994e7 * 0.96 ** 4.62 * math.exp(-1.554e-19 / (K_B * 450.))
        self.assertRelativeError(expected, stage_rate(converting, 0.04, 450.), 1e-12)

    def test_110_stage_rate_zeros(self):
        consuming = StageKinetics(freq_factor=1e10, activation_energy=1.5e-19, enthalpy=100.)
        self.assertEqual(0., stage_rate(consuming, 0., 500.))
        converting = StageKinetics(freq_factor=1e10, activation_energy=1.5e-19, enthalpy=100., order_m=5., order_n=0.)
        self.assertEqual(0., stage_rate(converting, 1., 500.))
        # 0^0 is 1
        self.assertGreater(stage_rate(converting, 0., 500.), 0.)

    def test_120_stage_rate_clamps_progress(self):
        stage = StageKinetics(freq_factor=1e10, activation_energy=1.5e-19, enthalpy=100., order_m=2., order_n=1.5)
        self.assertEqual(0., stage_rate(stage, -0.1, 500.))
        self.assertEqual(0., stage_rate(stage, 1.1, 500.))
        for c in np.linspace(0., 1., 11):
            self.assertGreaterEqual(stage_rate(stage, c, 500.), 0.)
        with self.assertRaises(InvalidInputError):
            stage_rate(stage, 0.5, 0.)
        with self.assertRaises(InvalidInputError):
            stage_rate(stage, math.nan, 400.)

    def test_200_heat_rate(self):
        stage = fixtures.two_stage("crnn").stages[0]
        self.assertAlmostEqual(0.1649, stage_heat_rate(stage, 1.978e-5), places=4)
        self.assertEqual(0., stage_heat_rate(stage, 0.))
        inert = stage.replace(enthalpy=0.)
        self.assertEqual(0., stage_heat_rate(inert, 1.))
        with self.assertRaises(InvalidInputError):
            stage_heat_rate(stage, -1.)

    def test_300_dissipative_flux(self):
        cell = fixtures.cell()
        self.assertEqual(0., dissipative_flux(cell, 350., 350.))
        self.assertRelativeError(-8.28, dissipative_flux(cell, 400., 300.), 1e-2)

        no_exchange = cell.replace(emissivity=0., conv_coeff=0.)
        self.assertEqual(0., dissipative_flux(no_exchange, 600., 300.))
        # cooler cell gains heat
        self.assertGreater(dissipative_flux(cell, 300., 400.), 0.)

    def test_400_rhs_at_completion(self):
        system = fixtures.four_stage("crnn")
        state = ThermalState(tuple(system.completion_state()), 600.)
        self.assertAllClose(np.zeros(5), system_rhs(system, state), atol=0.)

    def test_410_rhs_single_stage(self):
        system = single_stage()
        stage = system.stages[0]
        state = ThermalState((0.7, ), 450.)
        r = stage_rate(stage, 0.7, 450.)
        dy = system_rhs(system, state)
        self.assertRelativeError(-r, dy[0], 1e-14)
        self.assertRelativeError(stage.enthalpy * r / system.cell.heat_capacity, dy[1], 1e-14)

    def test_420_rhs_four_stage(self):
        system = fixtures.four_stage("crnn")
        c = (1., 1., 0.04, 0.04)
        T = 397.15
        dy = system_rhs(system, ThermalState(c, T))
        heat = 0.
        for i, stage in enumerate(system.stages):
            r = stage_rate(stage, c[i], T)
            self.assertRelativeError(stage.sign * r, dy[i], 1e-12, f"stage {i + 1}")
            heat += stage.enthalpy * r
        self.assertRelativeError(heat / system.cell.heat_capacity, dy[4], 1e-12)

    def test_430_rhs_with_ambient(self):
        system = single_stage()
        state = ThermalState((0.5, ), 450.)
        adiabatic = system_rhs(system, state)
        oven = system_rhs(system, state, Oven(400.))
        flux = dissipative_flux(system.cell, 450., 400.)
        self.assertRelativeError(adiabatic[1] + flux / system.cell.heat_capacity, oven[1], 1e-12)

        ramp = system_rhs(system, state, Ramp(2. / 60.))
        self.assertRelativeError(adiabatic[1] + 2. / 60., ramp[1], 1e-12)

        traced = TracedAmbient(np.array([0., 100.]), np.array([300., 500.]))
        self.assertEqual(400., traced.temperature_at(50.))
        self.assertEqual(500., traced.temperature_at(1000.))
        with_trace = system_rhs(system, state, traced, t=50.)
        self.assertRelativeError(oven[1], with_trace[1], 1e-12)

    def test_500_jacobian_matches_differences(self):
        system = fixtures.four_stage("crnn")
        for ambient in (ADIABATIC, Oven(450.)):
            ode = ThermalOde(system, ambient)
            y = np.array([0.8, 0.9, 0.3, 0.2, 480.])
            jac = ode.jac(0., y)
            numeric = np.zeros((5, 5))
            for j in range(5):
                step = 1e-6 * max(abs(y[j]), 1.)
                up, down = y.copy(), y.copy()
                up[j] += step
                down[j] -= step
                numeric[:, j] = (ode.rhs(0., up) - ode.rhs(0., down)) / (2 * step)
            self.assertAllClose(numeric, jac, rtol=1e-5, atol=1e-12)
        self.assertAllClose(jac, system_jacobian(system, ThermalState.from_vector(y), Oven(450.)))

    def test_510_parameter_jacobian_matches_differences(self):
        system = fixtures.four_stage("crnn")
        y = np.array([0.8, 0.9, 0.3, 0.2, 480.])
        jac = ThermalOde(system).param_jac(0., y)
        self.assertEqual((5, 20), jac.shape)

        for i, stage in enumerate(system.stages):
            base = np.array([
                math.log(stage.freq_factor), math.log(stage.activation_energy), math.log(stage.enthalpy),
                stage.order_m, stage.order_n,
            ])

            def rhs(p):
                trial = stage.replace(
                    freq_factor=math.exp(p[0]), activation_energy=math.exp(p[1]), enthalpy=math.exp(p[2]),
                    order_m=p[3], order_n=p[4],
                )
                stages = list(system.stages)
                stages[i] = trial
                return ThermalOde(system.with_stages(stages)).rhs(0., y)

            for j in range(5):
                if j == 3 and stage.direction is Direction.CONSUMING:
                    continue
                step = 1e-7 * max(abs(base[j]), 1.)
                up, down = base.copy(), base.copy()
                up[j] += step
                down[j] -= step
                numeric = (rhs(up) - rhs(down)) / (2 * step)
                self.assertAllClose(numeric, jac[:, i * 5 + j], rtol=1e-5, atol=1e-14, msg=f"stage {i + 1} entry {j}")

    def test_600_validation(self):
        with self.assertRaises(InvalidInputError):
            StageKinetics(freq_factor=1e10, activation_energy=1e-19, enthalpy=1., direction=Direction.CONVERTING)
        with self.assertRaises(InvalidInputError):
            StageKinetics(freq_factor=1e10, activation_energy=1e-19, enthalpy=1., order_m=2., direction="consuming")
        with self.assertRaises(InvalidInputError):
            StageKinetics(freq_factor=1e10, activation_energy=1e-19, enthalpy=-1.)
        with self.assertRaises(InvalidInputError):
            StageKinetics(freq_factor=0., activation_energy=1e-19, enthalpy=1.)
        with self.assertRaises(InvalidInputError):
            StageKinetics(freq_factor=1e10, activation_energy=1e-19, enthalpy=1., c0=1.5)
        with self.assertRaises(InvalidInputError):
            CellProperties(mass=0., specific_heat=859., surface_area=1e-3)
        with self.assertRaises(InvalidInputError):
            CellProperties(mass=0.066, specific_heat=859., surface_area=1e-3, emissivity=1.2)

        stage = StageKinetics(freq_factor=1e10, activation_energy=1e-19, enthalpy=1., order_m=2.)
        self.assertIs(Direction.CONVERTING, stage.direction)
        self.assertEqual(1e-19 / K_B, stage.to_dict()["Ea_over_kb_K"])

    def test_700_system(self):
        system = fixtures.four_stage("linear")
        self.assertEqual(4, system.n_stages)
        self.assertAllClose([0., 0., 1., 1.], system.completion_state())
        self.assertTrue(system.is_complete([0., 1e-8, 1., 1.]))
        self.assertFalse(system.is_complete([0., 1e-3, 1., 1.]))
        state = system.initial_state(400.)
        self.assertEqual((1., 1., 0.04, 0.04), state.concentrations)
        self.assertAllClose([1., 1., 0.04, 0.04, 400.], state.to_vector())
        # stage 4 took over stage 3's Arrhenius constants
        self.assertEqual(system.stages[2].freq_factor, system.stages[3].freq_factor)


if __name__ == "__main__":
    unittest.main()
