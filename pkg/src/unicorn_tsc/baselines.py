"""Classical controllers: Fixed-Time, Greedy and Max-Pressure.

All read the same detector-ranged queue counts the learning agents see. Ties
go to the lowest phase index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

from .netmodel import Intersection
from .simcore import SimState, advance, apply_actions, detector_read, init_sim, reward

CONTROLLERS = ("fixed", "greedy", "maxpressure")


class ControllerError(ValueError):
    pass


@dataclass
class ControllerState:
    kind: str
    pressure_reduce: str = "mean"  # or "sum"
    cursor: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CONTROLLERS:
            raise ControllerError(f"unknown controller {self.kind!r}; choose from {CONTROLLERS}")
        if self.pressure_reduce not in ("mean", "sum"):
            raise ControllerError(f"pressure_reduce must be 'mean' or 'sum'")


def _queue(st: SimState, lane: str) -> int:
    return detector_read(st, lane)[0]


def _argmax_first(values) -> int:
    best, best_val = 0, None
    for k, v in enumerate(values):
        if best_val is None or v > best_val:
            best, best_val = k, v
    return best


def fixed_time_action(ctrl: ControllerState, st: SimState, i: str, step: int) -> int:
    n = st.net.intersections[i].num_phases
    ctrl.cursor[i] = step % n
    return ctrl.cursor[i]


def phase_queue_sums(st: SimState, inter: Intersection):
    return [sum(_queue(st, inter.movements[m].in_lane) for m in ph.active_movements)
            for ph in inter.phases]


def greedy_action(st: SimState, i: str) -> int:
    return _argmax_first(phase_queue_sums(st, st.net.intersections[i]))


def phase_pressures(st: SimState, inter: Intersection, reduce: str = "mean"):
    out = []
    for ph in inter.phases:
        diffs = [_queue(st, inter.movements[m].in_lane) - _queue(st, inter.movements[m].out_lane)
                 for m in ph.active_movements]
        out.append(sum(diffs) / len(diffs) if reduce == "mean" else float(sum(diffs)))
    return out


def max_pressure_action(st: SimState, i: str, reduce: str = "mean") -> int:
    return _argmax_first(phase_pressures(st, st.net.intersections[i], reduce))


def controller_actions(ctrl: ControllerState, st: SimState, step: int) -> Dict[str, int]:
    acts = {}
    for i in st.net.intersection_ids:
        if ctrl.kind == "fixed":
            acts[i] = fixed_time_action(ctrl, st, i, step)
        elif ctrl.kind == "greedy":
            acts[i] = greedy_action(st, i)
        else:
            acts[i] = max_pressure_action(st, i, ctrl.pressure_reduce)
    return acts


def run_controller_episode(ctrl: ControllerState, net, flows, cfg, seed: int):
    """Simulate one full episode under ``ctrl``; returns (state, episode return)."""
    st = init_sim(net, flows, cfg, seed)
    total = 0.0
    for step in range(cfg.decisions_per_episode):
        apply_actions(st, controller_actions(ctrl, st, step))
        advance(st, cfg.ticks_per_decision)
        total += sum(reward(st, i) for i in st.net.intersection_ids)
    return st, total
