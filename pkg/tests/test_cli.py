import contextlib
import copy
import io
import json
import unittest
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from arcfit.cli import EXIT_CANT_CREATE, EXIT_FAILURE, EXIT_NO_INPUT, EXIT_OK, EXIT_USAGE, main
from arcfit.io import export_csv, ingest_csv

from tests.base import ArcfitTestCase, TempDir, sampled, single_stage


CONFIG = {
    "cell": {"mass": 0.066, "specific_heat": 859., "surface_area": 4.618e-3},
    "stages": [{"m": 0., "n": 1., "A": 1.3e10, "Ea": 1.5e-19, "h": 5000.}],
    "train": {"init": "config", "steps": 3, "lr0": 0.01},
    "simulate": {"T0_C": 126.85, "t_end_s": 300.},
    "synth": {"T0_C": 126.85, "t_end_s": 300., "sample_dt_s": 10.},
    "gradcheck": {"rel_tol": 1e-3},
}


class TestCli(ArcfitTestCase):

    def run_cli(self, *argv) -> int:
        stderr = io.StringIO()
        with contextlib.redirect_stderr(stderr):
            code = main([str(a) for a in argv])
        self.stderr = stderr.getvalue()
        return code

    def write_config(self, tmp: TempDir, name: str = "config.json", **changes) -> Path:
        config = copy.deepcopy(CONFIG)
        for section, values in changes.items():
            config[section] = {**config.get(section, {}), **values}
        return tmp.write_file(name, json.dumps(config))

    def write_data(self, tmp: TempDir) -> Path:
        path = tmp.path / "data.csv"
        export_csv(sampled(single_stage(), np.linspace(0., 300., 31)), path)
        return path

    def data_lines(self, path: Path) -> List[str]:
        return [line for line in path.read_text().splitlines() if not line.startswith("#")]

    def test_100_usage_errors(self):
        self.assertEqual(EXIT_USAGE, self.run_cli())
        self.assertEqual(EXIT_USAGE, self.run_cli("frobnicate"))
        self.assertEqual(EXIT_USAGE, self.run_cli("fit", "--config", "x.json"))
        self.assertEqual(EXIT_USAGE, self.run_cli("simulate", "--config", "x.json", "--mode", "sideways"))
        self.assertIn("usage error", self.stderr)
        with TempDir() as tmp:
            config = self.write_config(tmp)
            data = self.write_data(tmp)
            self.assertEqual(EXIT_USAGE, self.run_cli("gradcheck", "--config", config, "--data", data, "--h-rel", "1"))
            self.assertEqual(EXIT_USAGE, self.run_cli("simulate", "--config", config, "--mode", "arc"))

    def test_110_input_errors(self):
        with TempDir() as tmp:
            self.assertEqual(
                EXIT_NO_INPUT,
                self.run_cli("simulate", "--config", tmp.path / "missing.json", "--mode", "exotherm"),
            )
            config = self.write_config(tmp)
            self.assertEqual(
                EXIT_NO_INPUT,
                self.run_cli("gradcheck", "--config", config, "--data", tmp.path / "missing.csv"),
            )
            bad = tmp.write_file("bad.json", json.dumps({**CONFIG, "extra": 1}))
            self.assertEqual(EXIT_NO_INPUT, self.run_cli("synth", "--config", bad))
            self.assertIn("extra", self.stderr)

    def test_120_output_errors(self):
        with TempDir() as tmp:
            config = self.write_config(tmp)
            blocker = tmp.write_file("blocker", "")
            self.assertEqual(EXIT_CANT_CREATE, self.run_cli("synth", "--config", config, "--out", blocker))

    def test_200_synth(self):
        with TempDir() as tmp:
            config = self.write_config(tmp)
            out = tmp.path / "out"
            self.assertEqual(EXIT_OK, self.run_cli("synth", "--config", config, "--out", out, "--seed", 3, "--noise", 0.5))
            text = (out / "synth.csv").read_text()
            trace = ingest_csv(out / "synth.csv")
        self.assertIn("# seed 3\n", text)
        self.assertIn("# config_sha256 ", text)
        self.assertGreater(len(trace), 2)
        self.assertAllClose(10. * np.arange(len(trace)), trace.times, rtol=0.)

    def test_300_simulate_and_plot(self):
        with TempDir() as tmp:
            config = self.write_config(tmp)
            out = tmp.path / "out"
            self.assertEqual(EXIT_OK, self.run_cli("simulate", "--config", config, "--mode", "exotherm", "--out", out))
            trajectory = out / "trajectory.csv"
            self.assertTrue(trajectory.exists())

            self.assertEqual(EXIT_OK, self.run_cli("plot", "--trajectory", trajectory, "--kind", "temp-vs-time"))
            svg = (out / "trajectory_temp-vs-time.svg").read_text()
            frame = pd.read_csv(out / "trajectory_temp-vs-time.csv")

            plots = tmp.path / "plots"
            self.assertEqual(EXIT_OK, self.run_cli(
                "plot", "--trajectory", trajectory, "--kind", "rate-vs-temp", "--out", plots,
            ))
            self.assertTrue((plots / "trajectory_rate-vs-temp.svg").exists())
            rates = pd.read_csv(plots / "trajectory_rate-vs-temp.csv")

        self.assertIn("<svg", svg)
        self.assertEqual(["time_s", "temp_K"], list(frame.columns))
        self.assertAlmostEqual(400., frame["temp_K"].iloc[0], places=10)
        self.assertEqual(["temp_K", "dTdt_K_per_s"], list(rates.columns))
        self.assertTrue(np.all(rates["dTdt_K_per_s"] > 0))

    def test_310_simulate_oven(self):
        with TempDir() as tmp:
            config = self.write_config(tmp, simulate={"T0_C": 100.})
            out = tmp.path / "out"
            self.assertEqual(EXIT_OK, self.run_cli(
                "simulate", "--config", config, "--mode", "oven", "--out", out,
                "--oven-temp", 120, "--oven-temp", 130, "--t-end", 600,
            ))
            summary = pd.read_csv(out / "oven_summary.csv", comment="#")
            trajectories = sorted(p.name for p in out.glob("trajectory_oven_*.csv"))
        self.assertEqual(["T_oven_C", "onset_time_s", "peak_temp_C"], list(summary.columns))
        self.assertAllClose([120., 130.], summary["T_oven_C"].to_numpy(), rtol=1e-12)
        self.assertEqual(2, len(trajectories))

    def test_400_gradcheck(self):
        with TempDir() as tmp:
            config = self.write_config(tmp)
            data = self.write_data(tmp)
            out = tmp.path / "out"
            self.assertEqual(EXIT_OK, self.run_cli("gradcheck", "--config", config, "--data", data, "--out", out))
            lines = self.data_lines(out / "gradcheck.csv")
            self.assertEqual("name,ad,fd,rel_err,ok", lines[0])
            self.assertEqual(["A_1", "Ea_1", "h_1"], [line.split(",")[0] for line in lines[1:]])
            self.assertTrue(all(line.endswith(",true") for line in lines[1:]))

            strict = self.write_config(tmp, "strict.json", gradcheck={"rel_tol": 1e-15, "abs_floor": 1e-30})
            self.assertEqual(EXIT_FAILURE, self.run_cli("gradcheck", "--config", strict, "--data", data, "--out", out))

    def test_500_fit(self):
        with TempDir() as tmp:
            config = self.write_config(tmp)
            data = self.write_data(tmp)
            out = tmp.path / "out"
            self.assertEqual(EXIT_OK, self.run_cli("fit", "--config", config, "--data", data, "--out", out))
            report = json.loads((out / "fit_report.json").read_text())
            history = self.data_lines(out / "loss_history.csv")
            self.assertTrue((out / "fit.svg").exists())
            self.assertTrue((out / "prediction.csv").exists())
        self.assertEqual(["config", "crnn"], [row["method"] for row in report["stages"]])
        self.assertEqual(3, report["loss"]["n_steps"])
        self.assertEqual(4, len(history))
        self.assertIn("rmse", self.stderr)


if __name__ == "__main__":
    unittest.main()
