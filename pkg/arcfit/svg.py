"""
Standalone SVG figures of trajectories and traces.

Figures are built on matplotlib's object API with the SVG canvas, so no
display or global pyplot state is involved. Metadata dates are left out
and ids are salted with a constant, which keeps equal input giving an
equal file.
"""
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
import numpy as np
import pandas as pd

from .errors import InvalidInputError, OutputFileError
from .helper import ZERO_CELSIUS


PLOT_KINDS = ("rate-vs-temp", "temp-vs-time")

#: (label, x, y) of one polyline
Series = Tuple[str, Sequence[float], Sequence[float]]


def plot_frame(trajectory: pd.DataFrame, kind: str) -> pd.DataFrame:
    """
    The columns of a trajectory table a plot of ``kind`` uses, unchanged.
    For ``rate-vs-temp`` rows with a rate that is not positive are left out.
    """
    if kind == "temp-vs-time":
        return trajectory[["time_s", "temp_K"]].reset_index(drop=True)
    if kind == "rate-vs-temp":
        frame = trajectory[["temp_K", "dTdt_K_per_s"]]
        return frame[frame["dTdt_K_per_s"] > 0].reset_index(drop=True)
    raise InvalidInputError(f"unknown plot kind '{kind}', expected one of {', '.join(PLOT_KINDS)}")


def plot_series(frame: pd.DataFrame, kind: str, label: str = "") -> Series:
    """The plot frame in display units: °C over s, or °C/min over °C"""
    if kind == "temp-vs-time":
        return label, frame["time_s"].to_numpy(), frame["temp_K"].to_numpy() - ZERO_CELSIUS
    return label, frame["temp_K"].to_numpy() - ZERO_CELSIUS, frame["dTdt_K_per_s"].to_numpy() * 60.


def axis_labels(kind: str) -> Tuple[str, str]:
    if kind == "temp-vs-time":
        return "time [s]", "temperature [°C]"
    return "temperature [°C]", "self-heating rate [°C/min]"


def render_svg(
        series: Sequence[Series],
        path: Union[str, Path],
        xlabel: str = "",
        ylabel: str = "",
        log_y: bool = False,
        title: Optional[str] = None,
        markers: bool = False,
):
    """
    Write one figure with a polyline per series. ``log_y`` puts the y axis
    on a log scale, series values that are not positive are then skipped.
    """
    figure = Figure(figsize=(6.4, 4.4))
    FigureCanvasSVG(figure)
    ax = figure.add_subplot()
    labelled = False
    for label, x, y in series:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if log_y:
            keep = y > 0
            x, y = x[keep], y[keep]
        ax.plot(x, y, linewidth=1., marker="." if markers else None, markersize=2., label=label or None)
        labelled = labelled or bool(label)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if labelled:
        ax.legend()
    ax.grid(True, linewidth=.3)
    figure.tight_layout()

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with matplotlib.rc_context({"svg.hashsalt": "arcfit", "svg.fonttype": "none"}):
            figure.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise OutputFileError(f"can not write: {e.strerror or e}", str(path))


def plot_trajectory(trajectory: pd.DataFrame, kind: str, svg_path: Union[str, Path], title: Optional[str] = None) -> pd.DataFrame:
    """
    Render ``kind`` of a trajectory table to ``svg_path`` and return the
    plot-ready frame.
    """
    frame = plot_frame(trajectory, kind)
    if frame.empty:
        raise InvalidInputError(f"nothing to plot for '{kind}'")
    xlabel, ylabel = axis_labels(kind)
    render_svg(
        [plot_series(frame, kind)], svg_path,
        xlabel=xlabel, ylabel=ylabel, log_y=kind == "rate-vs-temp", title=title,
    )
    return frame
