import math
import unittest

import numpy as np

from arcfit import fixtures
from arcfit.errors import InvalidInputError, RangeError
from arcfit.esdirk import Tolerances
from arcfit.kinetics import ReactionSystem
from arcfit.sensitivity import (
    ParamVector, central_differences, default_mask, fd_gradient, grad_loss, gradient_check, predict,
    resample, trajectory_loss,
)
from arcfit.simkit import synth_trace
from arcfit.trace import ArcTrace
from arcfit.trainer import TrainConfig, Trainer

from tests.base import ArcfitTestCase, sampled, single_stage, slow_test


class TestSensitivity(ArcfitTestCase):

    def test_100_param_vector(self):
        system = fixtures.four_stage("crnn")
        params = ParamVector.from_system(system)
        self.assertEqual(20, len(params))
        self.assertEqual(["A_1", "Ea_1", "h_1", "m_1", "n_1"], params.names[:5])
        self.assertEqual(math.log(9.48e10), params.values[0])
        self.assertEqual(4.61, params.values[params.layout(3)["m"]])
        # exact round trip for untouched entries
        self.assertEqual(system.stages, params.to_stages())

        changed = params.values.copy()
        changed[0] = math.log(2e11)
        stage = params.with_values(changed).to_stages()[0]
        self.assertRelativeError(2e11, stage.freq_factor, 1e-12)
        self.assertEqual(system.stages[0].activation_energy, stage.activation_energy)

    def test_110_default_mask(self):
        mask = default_mask(fixtures.four_stage("crnn").stages)
        self.assertEqual(
            [
                True, True, True, False, False,
                True, True, True, False, False,
                True, True, True, True, True,
                True, True, True, True, False,
            ],
            mask.tolist(),
        )

    def test_120_param_vector_validation(self):
        system = fixtures.two_stage("crnn")
        params = ParamVector.from_system(system)
        mask = params.mask.copy()
        mask[3] = True
        with self.assertRaises(InvalidInputError):
            params.with_mask(mask)
        with self.assertRaises(InvalidInputError):
            ParamVector(params.values[:4], params.mask[:4], params.stages)
        values = params.values.copy()
        values[2] = math.nan
        with self.assertRaises(InvalidInputError):
            params.with_values(values)
        inert = ParamVector.from_stages([single_stage(h=0.).stages[0]])
        mask = inert.mask.copy()
        mask[2] = True
        with self.assertRaises(InvalidInputError):
            inert.with_mask(mask)

    def test_125_stage_without_heat_release(self):
        inert = single_stage(h=0.).stages[0]
        system = ReactionSystem((fixtures.two_stage("crnn").stages[0], inert), fixtures.cell())
        params = ParamVector.from_system(system)
        self.assertEqual([True, True, True, False, False, True, True, False, False, False], params.mask.tolist())
        self.assertEqual(0., params.to_stages()[1].enthalpy)

        faster = ReactionSystem((system.stages[0].replace(freq_factor=2e11), inert), fixtures.cell())
        data = sampled(faster, np.linspace(0., 600., 11), T0=self.T_START)
        report = grad_loss(system, data, params)
        self.assertEqual(0., report.gradient[7])
        self.assertTrue(np.all(np.isfinite(report.gradient)))
        fitted, history = Trainer(TrainConfig(steps=3, lr0=1e-2)).fit(data, system)
        self.assertEqual(0., fitted.stages[1].enthalpy)
        self.assertEqual(3, len(history))

    def test_130_clamp(self):
        params = ParamVector.from_system(fixtures.two_stage("crnn"))
        mask = params.mask.copy()
        mask[9] = True
        params = params.with_mask(mask)
        values = params.values.copy()
        values[8] = -1.
        values[9] = -1.
        values[4] = -1.
        clamped = params.clamp(values)
        self.assertEqual(1e-3, clamped[8])
        self.assertEqual(0., clamped[9])
        # frozen entries keep their value
        self.assertEqual(params.values[4], clamped[4])

    def test_200_trajectory_loss(self):
        system = single_stage()
        data = sampled(system, np.linspace(0., 300., 31))
        traj = predict(system, data)
        self.assertLessEqual(trajectory_loss(traj, data), 1e-16)

        shifted = ArcTrace(data.times, data.temperatures + 1.)
        self.assertAlmostEqual(1., trajectory_loss(traj, shifted), places=10)

        longer = ArcTrace(np.append(data.times, 400.), np.append(data.temperatures, 500.))
        with self.assertRaises(RangeError):
            trajectory_loss(traj, longer)

    def test_210_zero_residual_has_zero_gradient(self):
        system = single_stage()
        data = sampled(system, np.linspace(0., 300., 31))
        report = grad_loss(system, data, ParamVector.from_system(system))
        self.assertLessEqual(report.loss, 1e-14)
        self.assertAllClose(np.zeros(5), report.gradient, atol=1e-6)
        self.assertEqual(31, report.n_timesteps)

    def test_220_masked_gradient(self):
        system = single_stage()
        data = sampled(single_stage(A=1.5e10), np.linspace(0., 300., 31))
        params = ParamVector.from_system(system, mask=[True, False, False, False, False])
        report = grad_loss(system, data, params)
        self.assertGreater(report.loss, 0.)
        self.assertNotEqual(0., report.gradient[0])
        self.assertTrue(np.all(report.gradient[1:] == 0.))
        # too slow, more A lowers the loss
        self.assertLess(report.gradient[0], 0.)

    def test_230_layout_mismatch(self):
        data = sampled(single_stage(), np.linspace(0., 100., 11))
        with self.assertRaises(InvalidInputError):
            grad_loss(single_stage(), data, ParamVector.from_system(fixtures.two_stage()))

    def test_300_central_differences(self):
        def func(x):
            return x[0] ** 2 + 3. * x[1]

        self.assertAllClose([6., 3.], central_differences(func, [3., 0.]), rtol=1e-7)
        self.assertAllClose([6., 0.], central_differences(func, [3., 0.], mask=[True, False]), rtol=1e-7)
        self.assertAllClose([6., 3.], central_differences(func, [3., 0.], workers=2), rtol=1e-7)

    def test_310_fd_gradient_arguments(self):
        system = single_stage()
        data = sampled(system, np.linspace(0., 100., 11))
        params = ParamVector.from_system(system)
        with self.assertRaises(InvalidInputError):
            fd_gradient(system, data, params, h_rel=1.)
        with self.assertRaises(InvalidInputError):
            fd_gradient(system, data, params, tol=Tolerances.thermal(1))

    def test_400_gradient_matches_differences(self):
        system = single_stage()
        data = sampled(single_stage(A=1.3e10, h=5500.), np.linspace(0., 300., 31))
        check = gradient_check(system, data, ParamVector.from_system(system), rel_tol=1e-3)
        self.assertEqual(["A_1", "Ea_1", "h_1"], [row.name for row in check.rows])
        self.assertGreater(check.loss, 0.)
        for row in check.rows:
            self.assertTrue(row.ok, row)

    def test_410_gradient_with_orders(self):
        system = single_stage(m=1.5, n=0.5, c0=0.2)
        data = sampled(single_stage(A=1.2e10, m=1.5, n=0.5, c0=0.2), np.linspace(0., 300., 31))
        params = ParamVector.from_system(system)
        self.assertEqual(5, params.n_trainable)
        check = gradient_check(system, data, params, rel_tol=1e-3)
        for row in check.rows:
            self.assertTrue(row.ok, row)

    def test_500_resample(self):
        data = ArcTrace(np.array([0., 10., 25.]), np.array([300., 310., 340.]))
        uniform = resample(data, 5.)
        self.assertAllClose([0., 5., 10., 15., 20., 25.], uniform.times)
        self.assertAllClose([300., 305., 310., 320., 330., 340.], uniform.temperatures)
        with self.assertRaises(InvalidInputError):
            resample(data, 0.)

    @slow_test
    def test_600_fixture_gradients(self):
        for system, part in (
                (fixtures.two_stage("linear"), fixtures.two_stage_partition()),
                (fixtures.four_stage("linear"), fixtures.four_stage_partition()),
        ):
            truth = fixtures.two_stage("crnn") if system.n_stages == 2 else fixtures.four_stage("crnn")
            trace = synth_trace(truth, sample_dt=60., T0=part.T_start, t_end=4e4)
            data = trace.window(part.T_start, part.T_end)
            check = gradient_check(system, data, ParamVector.from_system(system))
            for row in check.rows:
                self.assertTrue(row.ok, row)


if __name__ == "__main__":
    unittest.main()
