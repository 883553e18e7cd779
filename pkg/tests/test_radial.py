import math
import unittest

import numpy as np

from arcfit import fixtures
from arcfit.errors import InvalidInputError
from arcfit.esdirk import sample
from arcfit.helper import celsius_to_kelvin
from arcfit.kinetics import ADIABATIC, Oven, TracedAmbient
from arcfit.radial import RadialModel, RadialSolver, simulate_radial
from arcfit.simkit import simulate_oven

from tests.base import ArcfitTestCase, single_stage, slow_test


class TestRadial(ArcfitTestCase):

    def test_100_model(self):
        cell = fixtures.cell()
        model = RadialModel.for_21700(cell)
        self.assertEqual(40, model.node_count)
        self.assertEqual([True] * 39 + [False], model.source.tolist())
        self.assertRelativeError(cell.surface_area, model.surface_area, 1e-12)
        self.assertRelativeError(cell.heat_capacity, model.heat_capacities.sum(), 1e-12)
        self.assertRelativeError(math.pi * model.radius ** 2 * 0.07, model.volumes.sum(), 1e-12)
        self.assertTrue(np.all(model.conductances() > 0))

        unmatched = RadialModel.for_21700(cell, match_heat_capacity=False)
        self.assertEqual(cell.specific_heat, unmatched.materials[0].specific_heat)

        fine = model.refined(2)
        self.assertEqual(80, fine.node_count)
        self.assertRelativeError(model.heat_capacities.sum(), fine.heat_capacities.sum(), 1e-12)

    def test_110_model_validation(self):
        cell = fixtures.cell()
        with self.assertRaises(InvalidInputError):
            RadialModel.for_21700(cell, node_count=1)
        with self.assertRaises(InvalidInputError):
            RadialModel.for_21700(cell, can_thickness=0.02)
        with self.assertRaises(InvalidInputError):
            RadialModel.for_21700(cell.replace(mass=0.001))
        model = RadialModel.for_21700(cell, node_count=5)
        with self.assertRaises(InvalidInputError):
            RadialSolver(model, None, Oven(400.), boundary="insulated")
        with self.assertRaises(InvalidInputError):
            RadialSolver(model, None, ADIABATIC)
        with self.assertRaises(InvalidInputError):
            RadialSolver(model, None, Oven(400.), dt_initial=100., dt_max=10.)

    def test_200_energy_balance_without_source(self):
        model = RadialModel.for_21700(fixtures.cell(), node_count=20)
        result = simulate_radial(model, None, celsius_to_kelvin(200.), celsius_to_kelvin(25.), 600.)
        self.assertIsNone(result.concentrations)
        self.assertEqual(0., result.source_heat[-1])
        self.assertGreater(result.boundary_heat[-1], 0.)
        self.assertLessEqual(result.energy_residual(), 1e-2)
        # heat flows inwards, the surface is warmest
        last = result.temperatures[-1]
        self.assertTrue(np.all(np.diff(last) >= -1e-9))
        self.assertEqual(600., result.times[-1])

    def test_210_energy_balance_with_source(self):
        model = RadialModel.for_21700(fixtures.cell(), node_count=8)
        system = fixtures.two_stage("crnn")
        result = simulate_radial(model, system, celsius_to_kelvin(200.), celsius_to_kelvin(150.), 300.)
        self.assertEqual((len(result), 7, 2), result.concentrations.shape)
        self.assertGreater(result.source_heat[-1], 0.)
        self.assertLessEqual(result.energy_residual(), 1e-2)
        # consuming stage 1 goes down, converting stage 2 goes up
        self.assertTrue(np.all(result.concentrations[-1, :, 0] < 1.))
        self.assertTrue(np.all(result.concentrations[-1, :, 1] > 0.04))

    def test_300_inert_matches_lumped(self):
        cell = fixtures.cell()
        model = RadialModel.for_21700(cell, node_count=10, radial_conductivity=100.)
        T0, T_oven = 300., 310.
        result = simulate_radial(model, None, T_oven, T0, 600., dt_max=5.)
        lumped = simulate_oven(single_stage(h=0.), T_oven, T0, 600.)
        expected = sample(lumped, result.times)[:, -1]
        rise = expected[-1] - T0
        self.assertGreater(rise, 3.)
        self.assertLess(np.max(np.abs(result.capacity_mean_temperature - expected)), 0.02 * rise)

    def test_310_fixed_boundary(self):
        model = RadialModel.for_21700(fixtures.cell(), node_count=6)
        exchange = simulate_radial(model, None, 400., 300., 60.)
        fixed = simulate_radial(model, None, 400., 300., 60., boundary="fixed")
        self.assertGreater(fixed.temperatures[-1, -1], exchange.temperatures[-1, -1])
        self.assertLessEqual(fixed.temperatures.max(), 400. + 1e-9)

    def test_320_traced_far_field(self):
        model = RadialModel.for_21700(fixtures.cell(), node_count=6)
        chamber = TracedAmbient(np.array([0., 1000.]), np.array([400., 400.]))
        traced = simulate_radial(model, None, chamber, 300., 120.)
        oven = simulate_radial(model, None, 400., 300., 120.)
        self.assertAllClose(oven.temperatures[-1], traced.temperatures[-1], rtol=1e-12)
        summary = traced.to_dict()
        self.assertEqual(120., summary["t_end_s"])
        self.assertIn("energy_residual", summary)

    def test_330_grid_refinement(self):
        system = fixtures.two_stage("crnn")
        model = RadialModel.for_21700(fixtures.cell(), node_count=5)
        peaks = []
        for _ in range(4):
            # same time steps on every grid
            result = simulate_radial(
                model, system, celsius_to_kelvin(200.), celsius_to_kelvin(150.), 300.,
                dt_initial=1., dt_max=1., max_dT=1e3, max_dc=1.,
            )
            peaks.append(result.peak_temperature)
            model = model.refined(2)
        changes = np.abs(np.diff(peaks))
        self.assertTrue(np.all(np.diff(changes) < 0.), f"peaks {peaks}")

    @slow_test
    def test_400_source_matches_lumped_before_onset(self):
        cell = fixtures.cell()
        system = fixtures.two_stage("crnn")
        T0, T_oven = celsius_to_kelvin(60.), celsius_to_kelvin(120.)
        model = RadialModel.for_21700(cell)
        result = simulate_radial(model, system, T_oven, T0, 1800., dt_max=10.)
        lumped = simulate_oven(system, T_oven, T0, 1800.)
        self.assertIsNone(lumped.info["onset_time"])
        expected = sample(lumped, result.times)[:, -1]
        self.assertLess(np.max(np.abs(result.mean_temperature - expected)), 5.)


if __name__ == "__main__":
    unittest.main()
