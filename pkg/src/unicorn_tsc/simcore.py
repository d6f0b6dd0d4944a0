"""Deterministic discrete-time, queue-based mesoscopic traffic simulator.

Vehicles travel at the lane speed limit until they reach the stop line or the
tail of the stop-line queue. Queues are vertical: queued vehicles occupy
fixed slots of ``veh_length`` metres back from the stop line and keep their
queued status until they discharge. A queued head vehicle crosses the stop
line when its movement is green, the lane's saturation-headway credit allows
it, and the next lane on its route has room.

Signals change phase only at decision boundaries. Switching to a different
phase inserts ``yellow_s`` seconds of no discharge before the new green.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .netmodel import Network, NetworkError, shortest_route

MOVING = 0
QUEUED = 1


class SimError(ValueError):
    """Invalid simulator configuration, flow, or control input."""


@dataclass(frozen=True)
class SimConfig:
    tick_s: float = 1.0
    decision_interval_s: float = 15.0
    yellow_s: float = 5.0
    horizon_s: float = 3600.0
    veh_length: float = 7.5
    saturation_headway_s: float = 2.0
    detector_range_m: float = 50.0

    @property
    def ticks_per_decision(self) -> int:
        return int(round(self.decision_interval_s / self.tick_s))

    @property
    def yellow_ticks(self) -> int:
        return int(round(self.yellow_s / self.tick_s))

    @property
    def horizon_ticks(self) -> int:
        return int(round(self.horizon_s / self.tick_s))

    @property
    def decisions_per_episode(self) -> int:
        return self.horizon_ticks // self.ticks_per_decision

    def validate(self) -> None:
        def multiple(x, of):
            r = x / of
            return abs(r - round(r)) < 1e-9

        if not self.tick_s > 0:
            raise SimError("tick_s must be > 0")
        if not self.decision_interval_s > 0 or not multiple(self.decision_interval_s, self.tick_s):
            raise SimError("decision_interval_s must be a positive multiple of tick_s")
        if self.yellow_s < 0 or not multiple(self.yellow_s, self.tick_s):
            raise SimError("yellow_s must be a non-negative multiple of tick_s")
        if not self.yellow_s < self.decision_interval_s:
            raise SimError(
                f"yellow_s ({self.yellow_s}) must be shorter than "
                f"decision_interval_s ({self.decision_interval_s})"
            )
        if not self.horizon_s > 0 or not multiple(self.horizon_s, self.tick_s):
            raise SimError("horizon_s must be a positive multiple of tick_s")
        if self.veh_length <= 0 or self.saturation_headway_s <= 0 or self.detector_range_m <= 0:
            raise SimError("veh_length, saturation_headway_s and detector_range_m must be > 0")


PRESETS = {
    # phase duration / yellow pairs used by the benchmark suites
    "resco": SimConfig(decision_interval_s=15.0, yellow_s=5.0),
    "ma2c": SimConfig(decision_interval_s=10.0, yellow_s=3.0),
}


@dataclass(frozen=True)
class RateEntry:
    origin: str
    destination: str
    veh_per_min: float
    start_s: float
    end_s: float


@dataclass(frozen=True)
class Departure:
    origin: str
    destination: str
    depart_s: float


@dataclass(frozen=True)
class FlowSpec:
    rates: Tuple[RateEntry, ...] = ()
    departures: Tuple[Departure, ...] = ()

    def expected_arrivals_per_minute(self, horizon_s: float) -> np.ndarray:
        """Expected network arrivals in each whole minute of the horizon."""
        minutes = max(1, int(math.ceil(horizon_s / 60.0)))
        counts = np.zeros(minutes)
        for r in self.rates:
            for k in range(minutes):
                lo, hi = 60.0 * k, min(60.0 * (k + 1), horizon_s)
                overlap = max(0.0, min(hi, r.end_s) - max(lo, r.start_s))
                counts[k] += r.veh_per_min * overlap / 60.0
        for d in self.departures:
            if 0 <= d.depart_s < horizon_s:
                counts[int(d.depart_s // 60.0)] += 1
        return counts


def flows_from_dict(raw) -> FlowSpec:
    if not isinstance(raw, dict):
        raise SimError("flow document must be an object")
    unknown = set(raw) - {"rates", "departures"}
    if unknown:
        raise SimError(f"flow document: unknown key(s) {sorted(unknown)}")
    rates = []
    for k, r in enumerate(raw.get("rates", [])):
        keys = {"origin", "destination", "veh_per_min", "start_s", "end_s"}
        if set(r) != keys:
            raise SimError(f"rates[{k}]: expected keys {sorted(keys)}")
        entry = RateEntry(
            r["origin"], r["destination"], float(r["veh_per_min"]),
            float(r["start_s"]), float(r["end_s"]),
        )
        if entry.veh_per_min < 0:
            raise SimError(f"rates[{k}]: veh_per_min must be >= 0")
        if not entry.start_s < entry.end_s:
            raise SimError(f"rates[{k}]: start_s must be < end_s")
        rates.append(entry)
    deps = []
    for k, d in enumerate(raw.get("departures", [])):
        keys = {"origin", "destination", "depart_s"}
        if set(d) != keys:
            raise SimError(f"departures[{k}]: expected keys {sorted(keys)}")
        deps.append(Departure(d["origin"], d["destination"], float(d["depart_s"])))
    deps.sort(key=lambda d: d.depart_s)
    return FlowSpec(tuple(rates), tuple(deps))


def parse_flows(document: str) -> FlowSpec:
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SimError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return flows_from_dict(raw)


def flows_to_dict(flows: FlowSpec) -> dict:
    return {
        "rates": [
            {"origin": r.origin, "destination": r.destination, "veh_per_min": r.veh_per_min,
             "start_s": r.start_s, "end_s": r.end_s}
            for r in flows.rates
        ],
        "departures": [
            {"origin": d.origin, "destination": d.destination, "depart_s": d.depart_s}
            for d in flows.departures
        ],
    }


@dataclass(slots=True, eq=False)
class Vehicle:
    id: int
    route: Tuple[str, ...]
    moves: Tuple[int, ...]
    free_flow_s: float
    depart_time: float
    route_pos: int = 0
    lane_offset: float = 0.0
    state: int = MOVING
    arrive_time: Optional[float] = None
    accumulated_stop_time: float = 0.0
    current_wait: float = 0.0
    disp: float = 0.0
    moved: bool = False

    @property
    def lane(self) -> str:
        return self.route[self.route_pos]


@dataclass
class SignalController:
    current_phase: int = 0
    pending_phase: Optional[int] = None
    yellow_remaining: float = 0.0
    green_remaining: float = 0.0

    @property
    def in_yellow(self) -> bool:
        return self.yellow_remaining > 1e-9


@dataclass(eq=False)
class _LaneState:
    id: str
    length: float
    speed: float
    capacity: int
    downstream: Optional[str]
    controlled: bool
    vehicles: List[Vehicle] = field(default_factory=list)
    n_queued: int = 0
    credit: float = 0.0
    reserved: int = 0


class Event(NamedTuple):
    time: float
    kind: str  # depart | arrive | discharge | yellow | green
    where: str
    data: tuple


@dataclass
class TripRecord:
    vehicle: int
    depart: float
    arrive: float
    free_flow: float


@dataclass
class SimState:
    net: Network
    flows: FlowSpec
    cfg: SimConfig
    rng: np.random.Generator
    seed: int
    tick_count: int = 0
    controllers: Dict[str, SignalController] = field(default_factory=dict)
    lanes: Dict[str, _LaneState] = field(default_factory=dict)
    routes: Dict[Tuple[str, str], Tuple[Tuple[str, ...], Tuple[int, ...], float]] = field(
        default_factory=dict
    )
    backlog: Dict[str, List[Tuple[str, str]]] = field(default_factory=dict)
    trip_ledger: List[TripRecord] = field(default_factory=list)
    injected: int = 0
    completed: int = 0
    next_departure: int = 0
    pending_events: List[Event] = field(default_factory=list)
    # per-tick samples for metrics
    queue_samples: List[int] = field(default_factory=list)
    speed_samples: List[float] = field(default_factory=list)
    wait_samples: List[float] = field(default_factory=list)
    # phase index -> movement activity, per intersection
    phase_active: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    _detector_cache: Tuple[int, Dict[str, Tuple[int, int, float]]] = (-1, {})

    @property
    def clock(self) -> float:
        return self.tick_count * self.cfg.tick_s

    @property
    def active_vehicles(self) -> int:
        return sum(len(ls.vehicles) for ls in self.lanes.values())

    def vehicles(self):
        for ls in self.lanes.values():
            yield from ls.vehicles

    def lane_vehicles(self, lane_id: str) -> List[Vehicle]:
        return self.lanes[lane_id].vehicles

    def invalidate_detectors(self) -> None:
        """Drop cached detector readings (needed only after editing lanes by hand)."""
        self._detector_cache = (-1, {})

    def on_decision_boundary(self) -> bool:
        return self.tick_count % self.cfg.ticks_per_decision == 0

    def green_movements(self, i: str) -> Optional[np.ndarray]:
        """Boolean activity of i's movements this tick, or None during yellow."""
        ctrl = self.controllers[i]
        if ctrl.in_yellow:
            return None
        return self.phase_active[i][ctrl.current_phase]


def init_sim(net: Network, flows: FlowSpec, cfg: SimConfig, seed: int) -> SimState:
    cfg.validate()
    st = SimState(net=net, flows=flows, cfg=cfg, rng=np.random.default_rng(seed), seed=seed)
    for iid, inter in net.intersections.items():
        st.controllers[iid] = SignalController(0, None, 0.0, cfg.decision_interval_s)
        acts = []
        for p in inter.phases:
            a = np.zeros(inter.num_movements, dtype=bool)
            a[list(p.active_movements)] = True
            acts.append(a)
        st.phase_active[iid] = acts
    for lid, lane in net.lanes.items():
        st.lanes[lid] = _LaneState(
            id=lid,
            length=lane.length,
            speed=lane.speed_limit,
            capacity=max(1, int(math.floor(lane.length / cfg.veh_length + 1e-9))),
            downstream=net.lane_downstream.get(lid),
            controlled=lane.signal_controlled,
        )
    entry = set(net.entry_lanes())
    move_index = {
        (mv.in_lane, mv.out_lane): mv.index
        for inter in net.intersections.values()
        for mv in inter.movements
    }
    ods = [(r.origin, r.destination) for r in flows.rates]
    ods += [(d.origin, d.destination) for d in flows.departures]
    for od in ods:
        if od in st.routes:
            continue
        origin, dest = od
        if origin not in net.lanes:
            raise SimError(f"flow origin {origin!r} is not a lane")
        if origin not in entry:
            raise SimError(f"flow origin {origin!r} is not a network-entry lane")
        route = shortest_route(net, origin, dest)
        if route is None:
            raise SimError(f"no route from {origin!r} to {dest!r}")
        moves = tuple(move_index[(a, b)] for a, b in zip(route, route[1:]))
        ff = sum(net.lanes[l].length / net.lanes[l].speed_limit for l in route)
        st.routes[od] = (tuple(route), moves, ff)
    for lid in sorted(entry, key=list(net.lanes).index):
        st.backlog[lid] = []
    return st


def apply_actions(st: SimState, actions: Dict[str, int]) -> None:
    """Set each listed intersection's phase for the coming decision interval."""
    if not st.on_decision_boundary():
        raise SimError(f"apply_actions called off a decision boundary (t={st.clock})")
    cfg = st.cfg
    for iid, phase in actions.items():
        if iid not in st.controllers:
            raise SimError(f"unknown intersection {iid!r}")
        n_phases = len(st.phase_active[iid])
        if not isinstance(phase, (int, np.integer)) or not 0 <= phase < n_phases:
            raise SimError(f"intersection {iid!r}: phase index {phase} out of range")
        phase = int(phase)
        ctrl = st.controllers[iid]
        if phase == ctrl.current_phase or cfg.yellow_ticks == 0:
            if phase != ctrl.current_phase:
                st.pending_events.append(Event(st.clock, "green", iid, (phase,)))
            ctrl.current_phase = phase
            ctrl.pending_phase = None
            ctrl.yellow_remaining = 0.0
            ctrl.green_remaining = cfg.decision_interval_s
        else:
            ctrl.pending_phase = phase
            ctrl.yellow_remaining = cfg.yellow_s
            ctrl.green_remaining = cfg.decision_interval_s - cfg.yellow_s
            st.pending_events.append(Event(st.clock, "yellow", iid, (ctrl.current_phase, phase)))


def _inject(st: SimState, t: float, dt: float, events: List[Event]) -> None:
    flows = st.flows
    arrivals: List[Tuple[str, str]] = []
    deps = flows.departures
    while st.next_departure < len(deps) and deps[st.next_departure].depart_s < t + dt - 1e-9:
        d = deps[st.next_departure]
        st.next_departure += 1
        arrivals.append((d.origin, d.destination))
    for r in flows.rates:
        if r.start_s <= t < r.end_s:
            expected = r.veh_per_min * dt / 60.0
            n = int(expected)
            if st.rng.random() < expected - n:
                n += 1
            arrivals.extend([(r.origin, r.destination)] * n)
        else:
            # one draw per entry per tick, active or not
            st.rng.random()
    for od in arrivals:
        st.backlog[od[0]].append(od)
    for lid, queue in st.backlog.items():
        if not queue:
            continue
        ls = st.lanes[lid]
        while queue and len(ls.vehicles) + ls.reserved < ls.capacity:
            od = queue.pop(0)
            route, moves, ff = st.routes[od]
            v = Vehicle(id=st.injected, route=route, moves=moves, free_flow_s=ff, depart_time=t)
            st.injected += 1
            ls.vehicles.append(v)
            events.append(Event(t, "depart", lid, (v.id,)))


def tick(st: SimState) -> List[Event]:
    """Advance the simulation by one tick; return the events it produced."""
    cfg = st.cfg
    dt = cfg.tick_s
    t = st.clock
    events: List[Event] = st.pending_events
    st.pending_events = []

    _inject(st, t, dt, events)

    green: Dict[str, Optional[np.ndarray]] = {
        iid: st.green_movements(iid) for iid in st.controllers
    }
    # saturation-flow credit per lane feeding an intersection
    cap = max(1.0, dt / cfg.saturation_headway_s)
    inc = dt / cfg.saturation_headway_s
    lane_green: Dict[str, bool] = {}
    for iid, inter in st.net.intersections.items():
        g = green[iid]
        for mv in inter.movements:
            if g is not None and g[mv.index]:
                lane_green[mv.in_lane] = True
    for ls in st.lanes.values():
        if ls.downstream is None:
            continue
        if not ls.controlled or lane_green.get(ls.id, False):
            ls.credit = min(cap, ls.credit + inc)
        else:
            ls.credit = 0.0

    for ls in st.lanes.values():
        for v in ls.vehicles:
            v.disp = 0.0
            v.moved = False

    transfers: List[Tuple[Vehicle, float]] = []
    L = cfg.veh_length

    def can_cross(v: Vehicle, ls: _LaneState) -> bool:
        if ls.credit < 1.0 - 1e-9:
            return False
        if ls.controlled:
            g = green[ls.downstream]
            if g is None or not g[v.moves[v.route_pos]]:
                return False
        nxt = st.lanes[v.route[v.route_pos + 1]]
        return len(nxt.vehicles) + nxt.reserved < nxt.capacity

    def cross(v: Vehicle, ls: _LaneState, when: float, leftover: float) -> None:
        ls.credit -= 1.0
        nxt = st.lanes[v.route[v.route_pos + 1]]
        nxt.reserved += 1
        v.state = MOVING
        v.moved = True
        events.append(Event(when, "discharge", ls.downstream, (ls.id, v.moves[v.route_pos], v.id)))
        transfers.append((v, leftover))

    def complete(v: Vehicle, when: float) -> None:
        v.arrive_time = when
        st.completed += 1
        st.trip_ledger.append(TripRecord(v.id, v.depart_time, when, v.free_flow_s))
        events.append(Event(when, "arrive", v.lane, (v.id,)))

    def advance_moving(v: Vehicle, ls: _LaneState, budget: float, nq: int) -> str:
        """Move v up to its limit; returns 'stay', 'queued', 'gone'."""
        limit = ls.length - nq * L
        if v.lane_offset >= limit - 1e-9:
            v.lane_offset = limit
            reach_time = 0.0
        else:
            reach = v.lane_offset + ls.speed * budget
            if reach < limit - 1e-9:
                v.disp += reach - v.lane_offset
                v.lane_offset = reach
                v.moved = True
                return "stay"
            reach_time = (limit - v.lane_offset) / ls.speed
            v.disp += limit - v.lane_offset
            v.lane_offset = limit
            v.moved = v.moved or reach_time > 0
        if nq == 0:
            when = t + (dt - budget) + reach_time
            if v.route_pos == len(v.route) - 1:
                complete(v, when)
                return "gone"
            if can_cross(v, ls):
                cross(v, ls, when, budget - reach_time)
                return "gone"
        v.state = QUEUED
        return "queued"

    for ls in st.lanes.values():
        if not ls.vehicles:
            continue
        kept: List[Vehicle] = []
        nq = 0
        for v in ls.vehicles:
            if v.state == QUEUED:
                if nq == 0:
                    if v.route_pos == len(v.route) - 1:
                        complete(v, t)
                        continue
                    if can_cross(v, ls):
                        cross(v, ls, t, 0.0)
                        continue
                v.lane_offset = ls.length - nq * L
                nq += 1
                kept.append(v)
                continue
            outcome = advance_moving(v, ls, dt, nq)
            if outcome == "gone":
                continue
            if outcome == "queued":
                nq += 1
            kept.append(v)
        ls.vehicles = kept
        ls.n_queued = nq

    k = 0
    while k < len(transfers):
        v, leftover = transfers[k]
        k += 1
        nxt = st.lanes[v.route[v.route_pos + 1]]
        nxt.reserved -= 1
        v.route_pos += 1
        v.lane_offset = 0.0
        outcome = advance_moving(v, nxt, leftover, nxt.n_queued)
        if outcome == "gone":
            continue
        if outcome == "queued":
            nxt.n_queued += 1
        nxt.vehicles.append(v)

    n_active = 0
    stopped = 0
    speed_sum = 0.0
    wait_sum = 0.0
    for ls in st.lanes.values():
        stopped += ls.n_queued
        for v in ls.vehicles:
            n_active += 1
            if v.moved:
                v.current_wait = 0.0
            else:
                v.current_wait += dt
                v.accumulated_stop_time += dt
            speed_sum += v.disp / dt
            wait_sum += v.current_wait
    st.queue_samples.append(stopped)
    if n_active:
        st.speed_samples.append(speed_sum / n_active)
        st.wait_samples.append(wait_sum / n_active)

    st.tick_count += 1
    for iid, ctrl in st.controllers.items():
        if ctrl.in_yellow:
            ctrl.yellow_remaining -= dt
            if not ctrl.in_yellow:
                ctrl.yellow_remaining = 0.0
                ctrl.current_phase = ctrl.pending_phase
                ctrl.pending_phase = None
                events.append(Event(st.clock, "green", iid, (ctrl.current_phase,)))
        else:
            ctrl.green_remaining = max(0.0, ctrl.green_remaining - dt)
    return events


def advance(st: SimState, n_ticks: int) -> List[Event]:
    events: List[Event] = []
    for _ in range(n_ticks):
        events.extend(tick(st))
    return events


def _detector_table(st: SimState) -> Dict[str, Tuple[int, int, float]]:
    stamp, table = st._detector_cache
    if stamp == st.tick_count:
        return table
    rng_m = st.cfg.detector_range_m
    L = st.cfg.veh_length
    table = {}
    for lid, ls in st.lanes.items():
        q = m = 0
        for v in ls.vehicles:
            if ls.length - v.lane_offset <= rng_m + 1e-9:
                if v.state == QUEUED:
                    q += 1
                else:
                    m += 1
        table[lid] = (q, m, min(1.0, (q + m) * L / rng_m))
    st._detector_cache = (st.tick_count, table)
    return table


def detector_read(st: SimState, lane_id: str) -> Tuple[int, int, float]:
    """(queue_count, moving_count, occupancy) within the detector range of a lane."""
    if lane_id not in st.lanes:
        raise SimError(f"unknown lane {lane_id!r}")
    return _detector_table(st)[lane_id]


def reward(st: SimState, i: str) -> float:
    """Negative number of queued vehicles detected on i's incoming and outgoing lanes."""
    try:
        inter = st.net.intersections[i]
    except KeyError:
        raise SimError(f"unknown intersection {i!r}") from None
    table = _detector_table(st)
    total = sum(table[l][0] for l in inter.incoming_lanes)
    total += sum(table[l][0] for l in inter.outgoing_lanes)
    return -float(total)


METRIC_COLUMNS = (
    "scenario", "seed", "queue_len_mean", "queue_len_std", "speed_mean", "speed_std",
    "int_delay_mean", "int_delay_std", "completion_rate", "trip_time_mean", "trip_time_std",
    "trip_delay_mean", "trip_delay_std",
)


@dataclass
class MetricsReport:
    queue_len_mean: float = 0.0
    queue_len_std: float = 0.0
    speed_mean: float = 0.0
    speed_std: float = 0.0
    int_delay_mean: float = 0.0
    int_delay_std: float = 0.0
    completion_rate: float = 0.0
    trip_time_mean: float = 0.0
    trip_time_std: float = 0.0
    trip_delay_mean: float = 0.0
    trip_delay_std: float = 0.0
    queue_len_per_int_mean: float = 0.0
    completed: int = 0
    injected: int = 0

    def row(self, scenario: str, seed) -> list:
        return [scenario, seed] + [getattr(self, c) for c in METRIC_COLUMNS[2:]]


def _mean_std(xs) -> Tuple[float, float]:
    if len(xs) == 0:
        return 0.0, 0.0
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std())


def metrics_finalize(st: SimState, horizon: Optional[float] = None) -> MetricsReport:
    horizon = st.cfg.horizon_s if horizon is None else horizon
    rep = MetricsReport()
    if st.injected == 0:
        return rep
    rep.queue_len_mean, rep.queue_len_std = _mean_std(st.queue_samples)
    rep.speed_mean, rep.speed_std = _mean_std(st.speed_samples)
    rep.int_delay_mean, rep.int_delay_std = _mean_std(st.wait_samples)
    rep.completion_rate = st.completed / horizon
    times = [r.arrive - r.depart for r in st.trip_ledger]
    delays = [r.arrive - r.depart - r.free_flow for r in st.trip_ledger]
    rep.trip_time_mean, rep.trip_time_std = _mean_std(times)
    rep.trip_delay_mean, rep.trip_delay_std = _mean_std(delays)
    rep.queue_len_per_int_mean = rep.queue_len_mean / max(1, len(st.net.intersections))
    rep.completed = st.completed
    rep.injected = st.injected
    return rep


def format_value(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(rows: Sequence[Sequence]) -> str:
    """Serialize metric rows (as produced by MetricsReport.row) with the fixed header."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([format_value(x) for x in r])
    return buf.getvalue()


def snapshot(st: SimState) -> bytes:
    """Canonical byte image of the mutable simulation state."""
    doc = {
        "tick": st.tick_count,
        "injected": st.injected,
        "completed": st.completed,
        "next_departure": st.next_departure,
        "rng": st.rng.bit_generator.state,
        "controllers": {k: vars(c) for k, c in st.controllers.items()},
        "lanes": {
            lid: {
                "credit": ls.credit,
                "n_queued": ls.n_queued,
                "vehicles": [
                    [v.id, v.route_pos, v.lane_offset, v.state, v.current_wait,
                     v.accumulated_stop_time, v.depart_time]
                    for v in ls.vehicles
                ],
            }
            for lid, ls in st.lanes.items()
        },
        "backlog": st.backlog,
        "trips": [vars(r) for r in st.trip_ledger],
    }
    return json.dumps(doc, sort_keys=True, default=str).encode()


def digest(st: SimState) -> str:
    return hashlib.sha256(snapshot(st)).hexdigest()
