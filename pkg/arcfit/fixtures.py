"""
Published reference models of a 21700 cell (0.066 kg, 4.5 Ah): a two-stage and a
four-stage model, each as found by the linearized initializer ("linear") and after
gradient training ("crnn").
"""
from typing import List

from .errors import InvalidInputError
from .kinetics import CellProperties, ReactionSystem, StageKinetics
from .linfit import StageOrders, StagePartition


TWO_STAGE_BOUNDARIES_C = (124., 167., 472.)
FOUR_STAGE_BOUNDARIES_C = (124., 161., 191., 257., 472.)

# (c0, A, Ea, h, m, n) per stage
_TWO_STAGE = {
    "linear": (
        (1.0, 2.1755e11, 1.9530e-19, 2434., 0., 1.),
        (0.04, 2.927e7, 1.474e-19, 16963., 5., 0.),
    ),
    "crnn": (
        (1.0, 1.723e11, 2.027e-19, 8336., 0., 1.),
        (0.04, 1.994e7, 1.554e-19, 15970., 4.62, 0.),
    ),
}

_FOUR_STAGE = {
    # stage 4 took over stage 3's A and Ea, its own fit was unusable
    "linear": (
        (1.0, 1.3859e11, 1.9209e-19, 2150., 0., 1.),
        (1.0, 4.620e7, 1.4174e-19, 1700., 0., 1.),
        (0.04, 2.371e11, 1.941e-19, 3685., 2., 2.),
        (0.04, 2.371e11, 1.941e-19, 11861., 5., 1.),
    ),
    "crnn": (
        (1.0, 9.480e10, 1.969e-19, 2212., 0., 1.),
        (1.0, 2.550e7, 1.462e-19, 1330., 0., 1.),
        (0.04, 3.936e10, 2.072e-19, 5696., 6.34, 1.94),
        (0.04, 2.831e11, 1.931e-19, 12980., 4.61, 1.),
    ),
}


def cell() -> CellProperties:
    return CellProperties(mass=0.066, specific_heat=859., surface_area=4.618e-3)


def _system(rows, cell_properties) -> ReactionSystem:
    return ReactionSystem(
        tuple(
            StageKinetics(freq_factor=A, activation_energy=Ea, enthalpy=h, order_m=m, order_n=n, c0=c0)
            for c0, A, Ea, h, m, n in rows
        ),
        cell_properties or cell(),
    )


def _rows(table: dict, method: str):
    try:
        return table[method]
    except KeyError:
        raise InvalidInputError(f"unknown fit method '{method}', expected one of {', '.join(table)}")


def two_stage(method: str = "crnn", cell_properties: CellProperties = None) -> ReactionSystem:
    return _system(_rows(_TWO_STAGE, method), cell_properties)


def four_stage(method: str = "crnn", cell_properties: CellProperties = None) -> ReactionSystem:
    return _system(_rows(_FOUR_STAGE, method), cell_properties)


def two_stage_partition() -> StagePartition:
    return StagePartition.from_celsius(TWO_STAGE_BOUNDARIES_C)


def four_stage_partition() -> StagePartition:
    return StagePartition.from_celsius(FOUR_STAGE_BOUNDARIES_C)


def _orders(rows) -> List[StageOrders]:
    return [StageOrders(m=m, n=n, c0=c0) for c0, A, Ea, h, m, n in rows]


def two_stage_orders() -> List[StageOrders]:
    """Orders and initial progress the initializer starts from"""
    return _orders(_TWO_STAGE["linear"])


def four_stage_orders() -> List[StageOrders]:
    return _orders(_FOUR_STAGE["linear"])

