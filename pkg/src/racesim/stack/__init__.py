"""Minimal autonomy stack driven by the simulator: localization, planning, control, supervision."""

from __future__ import annotations

from typing import Mapping

from ..plant import VehicleParams
from ..simbus import Node
from ..trackgeom import RacingLine, TrackModel
from .control import Controller
from .localization import LOC_SCHEMA, LocalizationFilter, LocMuxer
from .planning import Planner
from .supervision import MissionNode, SafetyNode

__all__ = [
    "Controller", "LOC_SCHEMA", "LocalizationFilter", "LocMuxer", "MissionNode", "Planner",
    "SafetyNode", "build_stack",
]


def build_stack(track: TrackModel, line: RacingLine, vehicle: VehicleParams, *, n_imus: int = 2,
                params: Mapping[str, Mapping] | None = None, ground_truth_mode: bool = False) -> list[Node]:
    """Stack nodes in registration order.

    The filter's /loc/odom output is remapped to /loc/odom_raw and the muxer
    republishes on /loc/odom. In ground-truth mode the filter is left out.
    """
    params = dict(params or {})
    muxer_params = dict(params.get("loc_muxer", {}))
    muxer_params.setdefault("ground_truth_mode", ground_truth_mode)
    nodes: list[Node] = []
    if not ground_truth_mode:
        loc = LocalizationFilter(params=params.get("localization"), n_imus=n_imus)
        loc.remap("/loc/odom", "/loc/odom_raw")
        nodes.append(loc)
    planner_params = {"vehicle_width": vehicle.width} | dict(params.get("planner", {}))
    nodes += [
        LocMuxer(params=muxer_params),
        Planner(line, track, params=planner_params),
        Controller(vehicle, params=params.get("controller")),
        SafetyNode(params=params.get("safety")),
        MissionNode(params=params.get("mission")),
    ]
    return nodes
