import math
import unittest

import numpy as np

from arcfit import fixtures
from arcfit.errors import InvalidInputError, RangeError, StiffnessError
from arcfit.esdirk import (
    Integrator, RateThreshold, StagesComplete, TemperatureCeiling, TimeLimit, Tolerances, Trajectory,
    integrate, sample,
)
from arcfit.helper import celsius_to_kelvin
from arcfit.kinetics import ThermalOde

from tests.base import ArcfitTestCase, single_stage


TIGHT = Tolerances(rtol=1e-8, atol=1e-12)


def decay(t, y):
    return -y


def decay_jac(t, y):
    return np.array([[-1.]])


class TestEsdirk(ArcfitTestCase):

    def test_100_exponential_decay(self):
        traj = integrate(decay, [1.], (0., 1.), tol=TIGHT, jac=decay_jac)
        self.assertEqual(1., traj.t_end)
        self.assertLessEqual(abs(traj.states[-1, 0] - math.exp(-1.)), 1e-7)
        self.assertStrictlyIncreasing(traj.times)
        self.assertGreater(traj.step_stats["accepted"], 0)

    def test_110_numeric_jacobian(self):
        traj = integrate(decay, [1.], (0., 1.), tol=TIGHT)
        self.assertLessEqual(abs(traj.states[-1, 0] - math.exp(-1.)), 1e-7)

    def test_120_constant_rate(self):
        traj = integrate(lambda t, y: np.array([10.]), [300.], (0., 1.), tol=TIGHT)
        self.assertAlmostEqual(310., traj.states[-1, 0], places=9)

    def test_130_dense_output(self):
        traj = integrate(decay, [1.], (0., 1.), tol=TIGHT, jac=decay_jac)
        self.assertLessEqual(abs(sample(traj, [0.5])[0, 0] - math.exp(-.5)), 1e-6)

        times = np.linspace(0., 1., 21)
        values = sample(traj, times)
        self.assertEqual((21, 1), values.shape)
        self.assertAllClose(np.exp(-times), values[:, 0], rtol=1e-6)

        with self.assertRaises(RangeError):
            sample(traj, [1.5])

    def test_135_sample_at_step_times(self):
        traj = integrate(decay, [1.], (0., 1.), tol=TIGHT, jac=decay_jac)
        for k in (0, len(traj) // 2, len(traj) - 1):
            self.assertEqual(traj.states[k, 0], sample(traj, [traj.times[k]])[0, 0])

    def test_140_stops(self):
        stops = [0.1, 0.25, 0.7]
        traj = integrate(decay, [1.], (0., 1.), tol=TIGHT, jac=decay_jac, stops=stops)
        for stop in stops:
            self.assertIn(stop, traj.times.tolist())

    def test_200_temperature_ceiling(self):
        traj = integrate(
            lambda t, y: np.array([1.]), [0.], (0., 10.), tol=TIGHT,
            events=[TemperatureCeiling(5.)],
        )
        self.assertIsNotNone(traj.event)
        self.assertAlmostEqual(5., traj.event.time, places=8)
        self.assertAlmostEqual(5., traj.t_end, places=8)
        self.assertAlmostEqual(5., traj.states[-1, 0], places=8)

    def test_210_rate_threshold(self):
        traj = integrate(
            lambda t, y: y.copy(), [1.], (0., 5.), tol=TIGHT,
            events=[RateThreshold(math.e)],
        )
        self.assertLessEqual(abs(traj.event.time - 1.), 1e-6)

    def test_220_first_event_wins(self):
        traj = integrate(
            lambda t, y: np.array([1.]), [0.], (0., 10.), tol=TIGHT,
            events=[TemperatureCeiling(5.), TimeLimit(2.5)],
        )
        self.assertIsInstance(traj.event.event, TimeLimit)
        self.assertAlmostEqual(2.5, traj.t_end, places=8)

    def test_230_event_at_start(self):
        traj = integrate(
            lambda t, y: np.array([1.]), [10.], (0., 10.), tol=TIGHT,
            events=[TemperatureCeiling(5.)],
        )
        self.assertEqual(1, len(traj))
        self.assertEqual(0., traj.event.time)

    def test_240_stages_complete(self):
        system = single_stage(A=1e12, Ea=1.2e-19)
        ode = ThermalOde(system)
        traj = integrate(
            ode.rhs, system.initial_state(400.), (0., 1e6), jac=ode.jac,
            tol=Tolerances.thermal(1, rtol=1e-8, atol_c=1e-12, atol_T=1e-9),
            events=[StagesComplete(system.completion_state(), 1e-6)],
        )
        self.assertIsNotNone(traj.event)
        self.assertLess(traj.t_end, 1e6)
        self.assertLessEqual(traj.states[-1, 0], 1e-6 + 1e-9)
        self.assertEnergyConserved(system, traj, rel=1e-6)

    def test_250_four_stage_against_reference(self):
        system = fixtures.four_stage("crnn")
        ode = ThermalOde(system)
        y0 = system.initial_state(celsius_to_kelvin(124.))
        ceiling = [TemperatureCeiling(celsius_to_kelvin(200.))]
        reference = integrate(
            ode.rhs, y0, (0., 1e5), jac=ode.jac, events=ceiling,
            tol=Tolerances.thermal(4, rtol=1e-11, atol_c=1e-14, atol_T=1e-10),
        )
        traj = integrate(ode.rhs, y0, (0., 1e5), jac=ode.jac, events=ceiling, tol=Tolerances.thermal(4))
        self.assertIsNotNone(reference.event)
        times = reference.times[reference.times <= min(reference.t_end, traj.t_end)]
        error = np.abs(sample(traj, times)[:, -1] - reference.states[:len(times), -1])
        self.assertLessEqual(error.max(), 0.1)

    def test_260_tolerance_convergence(self):
        system = fixtures.four_stage("crnn")
        ode = ThermalOde(system)
        y0 = system.initial_state(celsius_to_kelvin(124.))
        base = Tolerances.thermal(4)
        hot = integrate(
            ode.rhs, y0, (0., 1e5), jac=ode.jac, tol=base,
            events=[TemperatureCeiling(celsius_to_kelvin(200.))],
        )
        t_end = hot.t_end
        reference = integrate(ode.rhs, y0, (0., t_end), jac=ode.jac, tol=base.scaled(1e-6))
        errors = []
        for rtol in (1e-4, 1e-5, 1e-6, 1e-7):
            traj = integrate(ode.rhs, y0, (0., t_end), jac=ode.jac, tol=base.scaled(rtol / base.rtol))
            errors.append(abs(traj.states[-1, -1] - reference.states[-1, -1]))
        for coarse, fine in zip(errors, errors[1:]):
            self.assertLessEqual(fine, coarse, errors)

    def test_270_restart_from_sampled_state(self):
        system = single_stage(h=50.)
        ode = ThermalOde(system)
        tol = Tolerances.thermal(1, rtol=1e-8, atol_c=1e-12, atol_T=1e-9)
        full = integrate(ode.rhs, system.initial_state(400.), (0., 200.), jac=ode.jac, tol=tol)
        for t_restart in (20., 55.5, 130.):
            resumed = integrate(ode.rhs, sample(full, [t_restart])[0], (t_restart, 200.), jac=ode.jac, tol=tol)
            times = np.linspace(t_restart, 200., 17)
            expected = sample(full, times)
            bound = 10. * (tol.atol_for(2) + tol.rtol * np.abs(expected))
            self.assertTrue(np.all(np.abs(sample(resumed, times) - expected) <= bound), f"restart at {t_restart}")

    def test_280_repeatable(self):
        system = fixtures.four_stage("crnn")
        ode = ThermalOde(system)
        y0 = system.initial_state(celsius_to_kelvin(124.))
        runs = [
            integrate(ode.rhs, y0, (0., 4e4), jac=ode.jac, tol=Tolerances.thermal(4), stops=[1e3, 2.5e4])
            for _ in range(2)
        ]
        self.assertTrue(np.array_equal(runs[0].times, runs[1].times))
        self.assertTrue(np.array_equal(runs[0].states, runs[1].states))
        self.assertEqual(runs[0].step_stats, runs[1].step_stats)

    def test_300_fixed_step_order(self):
        steps = np.array([0.25, 0.125, 0.0625])
        errors = []
        for h in steps:
            traj = Integrator(decay, jac=decay_jac, fixed_step=h).integrate([1.], (0., 2.))
            self.assertEqual(int(round(2. / h)), traj.step_stats["accepted"])
            errors.append(abs(traj.states[-1, 0] - math.exp(-2.)))
        order = np.polyfit(np.log(steps), np.log(errors), 1)[0]
        self.assertGreaterEqual(order, 4.5, errors)

    def test_310_stiff_problem(self):
        # fast mode -1e6, slow mode follows cos(t)
        def rhs(t, y):
            return np.array([-1e6 * (y[0] - math.cos(t))])

        traj = integrate(rhs, [0.], (0., 10.), tol=Tolerances(1e-6, 1e-9))
        self.assertLessEqual(abs(traj.states[-1, 0] - math.cos(10.)), 1e-4)
        # an explicit method would need about 1e7 steps
        self.assertLess(traj.step_stats["accepted"], 2000)

    def test_320_step_limit(self):
        with self.assertRaises(StiffnessError) as context:
            integrate(decay, [1.], (0., 100.), tol=TIGHT, jac=decay_jac, max_steps=5)
        self.assertIsNotNone(context.exception.trajectory)

    def test_400_sensitivity(self):
        # y' = -k y, dy/dk = -t exp(-k t)
        k = 1.

        def rhs(t, y):
            return -k * y

        traj = Integrator(rhs, jac=lambda t, y: np.array([[-k]]), tol=TIGHT).integrate(
            [1.], (0., 1.),
            param_jac=lambda t, y: np.array([[-y[0]]]),
        )
        self.assertEqual((len(traj), 1, 1), traj.sensitivities.shape)
        self.assertLessEqual(abs(traj.sensitivities[-1, 0, 0] + math.exp(-1.)), 1e-6)
        self.assertLessEqual(abs(traj.interpolate_sensitivity(0.5)[0, 0] + 0.5 * math.exp(-.5)), 1e-5)

    def test_500_trajectory_concat(self):
        first = integrate(decay, [1.], (0., 1.), tol=TIGHT, jac=decay_jac)
        second = integrate(decay, first.states[-1], (1., 2.), tol=TIGHT, jac=decay_jac)
        joined = Trajectory.concat([first, second])
        self.assertEqual(len(first) + len(second) - 1, len(joined))
        self.assertStrictlyIncreasing(joined.times)
        self.assertLessEqual(abs(joined.states[-1, 0] - math.exp(-2.)), 1e-7)
        with self.assertRaises(InvalidInputError):
            Trajectory.concat([second, first])

    def test_600_validation(self):
        with self.assertRaises(InvalidInputError):
            integrate(decay, [1.], (1., 0.))
        with self.assertRaises(InvalidInputError):
            integrate(decay, [math.nan], (0., 1.))
        with self.assertRaises(InvalidInputError):
            Tolerances(rtol=0.)
        with self.assertRaises(InvalidInputError):
            Tolerances(atol=(1e-9, 1e-6)).atol_for(3)
        with self.assertRaises(InvalidInputError):
            TemperatureCeiling(-1.)


if __name__ == "__main__":
    unittest.main()
