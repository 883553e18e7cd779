"""
The ``arcfit`` command.

Every subcommand writes its results into the output directory and its
diagnostics to stderr. Exit codes: 0 success, 1 failure (for ``gradcheck``
a parameter outside the tolerance), 2 fit failure, 64 usage error,
66 unreadable input or config, 73 unwritable output.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from .config import RunConfig, load_config
from .errors import (
    ArcfitError, ConfigError, DataFileError, DivergedTrainingError, InsufficientDataError,
    IntegrationError, OutputFileError, StagingError, UsageError,
)
from .helper import celsius_to_kelvin, kelvin_to_celsius, to_json
from .io import (
    VERSION_STRING, FitReport, export_csv, ingest_csv, parameter_rows, provenance_header,
    read_chamber_csv, read_checkpoint, read_trajectory_csv, system_from_report, write_checkpoint,
    write_fit_report, write_gradcheck_csv, write_loss_history_csv, write_oven_summary_csv,
    write_parameters_csv, write_radial_csv, write_trajectory_csv,
)
from .kinetics import ADIABATIC, AmbientModel, Oven, ReactionSystem
from .linfit import InitReport, initialize_with_report
from .radial import RadialModel, simulate_radial
from .sensitivity import ParamVector, gradient_check, predict
from .simkit import oven_sweep, simulate_arc, simulate_exotherm, simulate_hws, synth_trace
from .svg import PLOT_KINDS, plot_trajectory, render_svg
from .trace import ArcTrace
from .trainer import Trainer


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_FIT_FAILED = 2
EXIT_USAGE = 64
EXIT_NO_INPUT = 66
EXIT_CANT_CREATE = 73


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="arcfit",
        description="Fit and simulate N-stage Arrhenius thermal-runaway kinetics from ARC records.",
    )
    parser.add_argument("--version", action="version", version=f"arcfit {VERSION_STRING}")

    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Print progress to stderr")
    common.add_argument("--out", type=Path, help="Output directory, defaults to the config's output_dir")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fit", parents=[common], help="Initialize by linear fits and train the kinetics")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="ARC record CSV")
    p.add_argument("--steps", type=int, help="Override train.steps")
    p.add_argument("--restarts", type=int, help="Override train.restarts")
    p.add_argument("--seed", type=int, help="Override train.seed")
    p.add_argument("--resume", type=Path, help="Checkpoint JSON to continue from")

    p = sub.add_parser("simulate", parents=[common], help="Simulate the configured kinetics")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--mode", choices=("exotherm", "hws", "oven", "radial", "arc"), required=True)
    p.add_argument(
        "--oven-temp", type=float, action="append", metavar="C",
        help="Oven temperature in °C, can be given multiple times",
    )
    p.add_argument("--chamber", type=Path, help="Chamber temperature CSV for --mode arc or radial")
    p.add_argument("--report", type=Path, help="Take the trained kinetics from this fit report")
    p.add_argument("--t-end", type=float, help="Override simulate.t_end_s")

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic ARC record")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--noise", type=float, help="Gaussian noise std in K, overrides synth.noise_std_K")
    p.add_argument("--seed", type=int, help="Overrides synth.seed")
    p.add_argument("--mode", choices=("adiabatic", "hws"), help="Overrides synth.mode")
    p.add_argument("--sample-dt", type=float, help="Overrides synth.sample_dt_s")

    p = sub.add_parser("gradcheck", parents=[common], help="Compare the gradient with finite differences")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--h-rel", type=float, help="Overrides gradcheck.h_rel")

    p = sub.add_parser("plot", parents=[common], help="Plot a trajectory CSV")
    p.add_argument("--trajectory", type=Path, required=True)
    p.add_argument("--kind", choices=PLOT_KINDS, required=True)

    return parser


class _Command:

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.verbose = args.verbose
        self.config: Optional[RunConfig] = None
        if getattr(args, "config", None) is not None:
            self.config = load_config(args.config)
            self._log(f"config {args.config} sha256 {self.config.sha256}")

    @property
    def out(self) -> Path:
        if self.args.out is not None:
            return self.args.out
        if self.config is not None:
            return Path(self.config.output_dir)
        return Path(".")

    def _log(self, *args):
        if self.verbose:
            print(*args, file=sys.stderr)

    def _wrote(self, path: Path):
        self._log(f"wrote {path}")

    def ambient(self) -> AmbientModel:
        settings = self.config.ambient
        if settings.variant == "oven":
            return Oven(settings.temperature)
        if settings.variant == "traced":
            return read_chamber_csv(settings.chamber_csv)
        return ADIABATIC

    def system(self) -> ReactionSystem:
        config = self.config
        if getattr(self.args, "report", None) is not None:
            return system_from_report(self.args.report, config.cell)
        return config.system()

    def read_data(self) -> Tuple[ArcTrace, ArcTrace]:
        """The whole record and the part the loss is computed on"""
        trace = ingest_csv(self.args.data, **self.config.ingest.to_kwargs())
        self._log(f"read {len(trace)} samples from {self.args.data}, dropped {trace.provenance.dropped_rows}")
        data = trace
        if self.config.partition is not None:
            part = self.config.partition
            data = trace.window(part.T_start, part.T_end)
        return trace, data

    def initial_system(self, trace: ArcTrace) -> Tuple[ReactionSystem, Optional[InitReport]]:
        config = self.config
        if config.init_method == "config":
            return config.system(), None
        system, report = initialize_with_report(
            trace, config.partition, config.cell, config.orders,
            window=config.rate_window, r2_threshold=config.r2_threshold, monotone_tol=config.monotone_tol,
        )
        for record in report.stages:
            if record.substituted:
                self._log(f"stage {record.stage}: took over the previous A and Ea ({record.reason})")
        return system, report

    def header(self, **params) -> List[str]:
        return provenance_header(config_sha256=self.config.sha256 if self.config else None, params=params)


def _fit(cmd: _Command) -> int:
    args, config = cmd.args, cmd.config
    train = config.train
    overrides = {k: v for k, v in (("steps", args.steps), ("restarts", args.restarts), ("seed", args.seed))
                 if v is not None}
    if overrides:
        try:
            train = train.replace(**overrides)
        except ArcfitError as e:
            raise UsageError(str(e))

    try:
        trace, data = cmd.read_data()
        init, init_report = cmd.initial_system(trace)
    except (StagingError, InsufficientDataError) as e:
        print(f"arcfit: initialization failed: {e}", file=sys.stderr)
        return EXIT_FIT_FAILED
    mask = config.mask(init.stages)
    cmd._log(f"initial {ParamVector.from_system(init, mask)!r}")

    out = cmd.out
    trainer = Trainer(train, ambient=cmd.ambient(), verbose=cmd.verbose)
    header = provenance_header(trace.provenance.source_sha256, config.sha256, train.seed)
    try:
        if train.restarts > 1:
            if args.resume is not None:
                raise UsageError("--resume can not be combined with restarts")
            final, history = trainer.fit_multistart(data, init, mask)
        else:
            resume = read_checkpoint(args.resume) if args.resume is not None else None
            final, history = trainer.fit(
                data, init, mask, resume=resume,
                on_checkpoint=lambda cp: write_checkpoint(cp, out / "checkpoint.json"),
            )
    except DivergedTrainingError as e:
        print(f"arcfit: fit failed: {e}", file=sys.stderr)
        if e.history is not None and len(e.history):
            write_loss_history_csv(e.history, out / "loss_history.csv", header)
            cmd._wrote(out / "loss_history.csv")
        if e.best is not None:
            write_parameters_csv(parameter_rows(e.best.to_system(init.cell), "best"), out / "parameters.csv", header)
            cmd._wrote(out / "parameters.csv")
        return EXIT_FIT_FAILED

    report = FitReport(
        initial=init,
        final=final,
        history=history,
        initial_method=config.init_method,
        init_report=init_report,
        input_sha256=trace.provenance.source_sha256,
        config_sha256=config.sha256,
        seed=train.seed,
    )
    write_fit_report(report, out / "fit_report.json")
    write_parameters_csv(report.rows(), out / "parameters.csv", header)
    write_loss_history_csv(history, out / "loss_history.csv", header)
    for name in ("fit_report.json", "parameters.csv", "loss_history.csv"):
        cmd._wrote(out / name)

    try:
        prediction = predict(final, data, config.tol, trainer.ambient)
    except IntegrationError as e:
        cmd._log(f"no comparison plot: {e}")
    else:
        write_trajectory_csv(prediction, out / "prediction.csv", header)
        render_svg(
            [
                ("data", data.times, data.temperatures_C),
                ("fit", prediction.times, kelvin_to_celsius(prediction.temperatures)),
            ],
            out / "fit.svg", xlabel="time [s]", ylabel="temperature [°C]",
        )
        cmd._wrote(out / "fit.svg")
    print(f"rmse {history.rmse:.4g} K after {len(history)} steps", file=sys.stderr)
    return EXIT_OK


def _simulate(cmd: _Command) -> int:
    args, config = cmd.args, cmd.config
    system = cmd.system()
    settings = config.simulate
    t_end = args.t_end if args.t_end is not None else settings.t_end
    tol = config.tol
    out = cmd.out
    header = cmd.header(mode=args.mode)

    def start_temperature(default: Optional[float]) -> float:
        T0 = settings.T0 if settings.T0 is not None else default
        if T0 is None:
            raise ConfigError("no start temperature, set simulate.T0_C or staging.boundaries_C", "simulate.T0_C")
        return T0

    oven_temperatures = tuple(celsius_to_kelvin(t) for t in args.oven_temp) if args.oven_temp \
        else settings.oven_temperatures

    if args.mode == "exotherm":
        T0 = start_temperature(config.partition.T_start if config.partition else None)
        traj = simulate_exotherm(system, T0, t_end, tol)
        write_trajectory_csv(traj, out / "trajectory.csv", header)
        cmd._wrote(out / "trajectory.csv")

    elif args.mode == "hws":
        traj = simulate_hws(system, config.hws, t_end, tol=tol, verbose=cmd.verbose)
        write_trajectory_csv(traj, out / "trajectory.csv", header)
        cmd._wrote(out / "trajectory.csv")
        exotherm = traj.info.get("exotherm_temperature")
        if exotherm is not None:
            cmd._log(f"exotherm detected at {kelvin_to_celsius(exotherm):.1f} °C")

    elif args.mode == "oven":
        T0 = start_temperature(celsius_to_kelvin(25.))
        results = oven_sweep(system, oven_temperatures, T0, t_end, tol=tol)
        for result in results:
            name = f"trajectory_oven_{kelvin_to_celsius(result.T_oven):g}C.csv"
            write_trajectory_csv(result.trajectory, out / name, cmd.header(mode="oven", T_oven_K=result.T_oven))
            cmd._wrote(out / name)
            cmd._log(to_json(result.to_dict(), indent=None))
        write_oven_summary_csv(results, out / "oven_summary.csv", header)
        cmd._wrote(out / "oven_summary.csv")

    elif args.mode == "radial":
        radial = config.radial
        model = RadialModel.for_21700(
            config.cell, node_count=radial.node_count, height=radial.height,
            can_thickness=radial.can_thickness, radial_conductivity=radial.radial_conductivity,
            match_heat_capacity=radial.match_heat_capacity,
        )
        chamber = args.chamber or config.ambient.chamber_csv
        if chamber is not None:
            far_field = read_chamber_csv(chamber)
        elif args.oven_temp:
            far_field = oven_temperatures[0]
        elif config.ambient.variant == "oven":
            far_field = config.ambient.temperature
        else:
            far_field = oven_temperatures[0]
        T0 = start_temperature(celsius_to_kelvin(25.))
        result = simulate_radial(model, system, far_field, T0, t_end, boundary=radial.boundary, verbose=cmd.verbose)
        write_radial_csv(result, out / "radial.csv", header)
        cmd._wrote(out / "radial.csv")
        cmd._log(to_json(result.to_dict(), indent=None))

    elif args.mode == "arc":
        chamber = args.chamber or config.ambient.chamber_csv
        if chamber is None:
            raise UsageError("--mode arc needs --chamber or ambient.chamber_csv")
        traj = simulate_arc(system, read_chamber_csv(chamber), T0=settings.T0, tol=tol)
        write_trajectory_csv(traj, out / "trajectory.csv", header)
        cmd._wrote(out / "trajectory.csv")

    return EXIT_OK


def _synth(cmd: _Command) -> int:
    args, config = cmd.args, cmd.config
    settings = config.synth
    mode = args.mode or settings.mode
    seed = args.seed if args.seed is not None else settings.seed
    noise = args.noise if args.noise is not None else settings.noise_std
    sample_dt = args.sample_dt if args.sample_dt is not None else settings.sample_dt
    T0 = settings.T0
    if T0 is None and mode == "adiabatic":
        if config.partition is None:
            raise ConfigError("no start temperature, set synth.T0_C or staging.boundaries_C", "synth.T0_C")
        T0 = config.partition.T_start

    trace = synth_trace(
        cmd.system(), mode=mode, noise_std=noise, sample_dt=sample_dt, seed=seed,
        T0=T0, t_end=settings.t_end, protocol=config.hws, tol=config.tol,
    )
    export_csv(trace, cmd.out / "synth.csv", config_sha256=config.sha256)
    cmd._wrote(cmd.out / "synth.csv")
    return EXIT_OK


def _gradcheck(cmd: _Command) -> int:
    args, config = cmd.args, cmd.config
    settings = config.gradcheck
    h_rel = args.h_rel if args.h_rel is not None else settings.h_rel
    if not 1e-7 <= h_rel <= 1e-2:
        raise UsageError(f"--h-rel must be in [1e-7, 1e-2], got {h_rel}")

    trace, data = cmd.read_data()
    system, _ = cmd.initial_system(trace)
    params = ParamVector.from_system(system, config.mask(system.stages))
    check = gradient_check(
        system, data, params, h_rel=h_rel, rel_tol=settings.rel_tol,
        abs_floor=settings.abs_floor, ambient=cmd.ambient(), workers=settings.workers,
    )
    header = provenance_header(trace.provenance.source_sha256, config.sha256)
    write_gradcheck_csv(check, cmd.out / "gradcheck.csv", header)
    cmd._wrote(cmd.out / "gradcheck.csv")
    for row in check.rows:
        if not row.ok:
            print(f"{row.name}: ad {row.ad:.8g} fd {row.fd:.8g} rel_err {row.rel_err:.3g}", file=sys.stderr)
    return EXIT_OK if check.ok else EXIT_FAILURE


def _plot(cmd: _Command) -> int:
    args = cmd.args
    trajectory = read_trajectory_csv(args.trajectory)
    out = args.out if args.out is not None else args.trajectory.parent
    stem = f"{args.trajectory.stem}_{args.kind}"
    frame = plot_trajectory(trajectory, args.kind, out / f"{stem}.svg")
    _write_frame(frame, out / f"{stem}.csv")
    cmd._wrote(out / f"{stem}.svg")
    return EXIT_OK


def _write_frame(frame, path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=None, lineterminator="\n")
    except OSError as e:
        raise OutputFileError(f"can not write: {e.strerror or e}", str(path))


COMMANDS = {
    "fit": _fit,
    "simulate": _simulate,
    "synth": _synth,
    "gradcheck": _gradcheck,
    "plot": _plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](_Command(args))
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFileError, ConfigError) as e:
        print(f"arcfit: {e}", file=sys.stderr)
        return EXIT_NO_INPUT
    except OutputFileError as e:
        print(f"arcfit: {e}", file=sys.stderr)
        return EXIT_CANT_CREATE
    except ArcfitError as e:
        print(f"arcfit: {e.__class__.__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
