"""Road-network data model, its JSON file format, and static per-intersection vectors.

A network is a set of signalized intersections joined by single lanes. Each
intersection lists its incoming and outgoing lanes, the movements (incoming
lane -> outgoing lane connections) it permits, and the phases that group
non-conflicting movements. Movement and phase orderings are the document
order and are the canonical ordering used by every encoded vector.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network documents."""


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    speed_limit: float
    signal_controlled: bool = True


@dataclass(frozen=True)
class Movement:
    index: int
    in_lane: str
    out_lane: str


@dataclass(frozen=True)
class Phase:
    index: int
    active_movements: Tuple[int, ...]


@dataclass(frozen=True)
class Intersection:
    id: str
    incoming_lanes: Tuple[str, ...]
    outgoing_lanes: Tuple[str, ...]
    movements: Tuple[Movement, ...]
    phases: Tuple[Phase, ...]
    phase_template_id: int = 0

    @property
    def num_movements(self) -> int:
        return len(self.movements)

    @property
    def num_phases(self) -> int:
        return len(self.phases)


@dataclass(frozen=True)
class Network:
    intersections: Dict[str, Intersection]
    lanes: Dict[str, Lane]
    adjacency: Dict[str, Tuple[str, ...]]
    lane_downstream: Dict[str, str] = field(default_factory=dict)
    lane_upstream: Dict[str, str] = field(default_factory=dict)

    @property
    def intersection_ids(self) -> List[str]:
        """Intersection ids in document order."""
        return list(self.intersections)

    def entry_lanes(self) -> List[str]:
        """Lanes no intersection feeds; vehicles enter the network here."""
        return [lid for lid in self.lanes if lid not in self.lane_upstream]

    def exit_lanes(self) -> List[str]:
        """Lanes no intersection consumes; vehicles leave the network here."""
        return [lid for lid in self.lanes if lid not in self.lane_downstream]


_TOP_KEYS = {"lanes", "intersections", "adjacency"}
_LANE_KEYS = {"id", "length_m", "speed_limit_mps", "signal_controlled"}
_INT_KEYS = {"id", "incoming", "outgoing", "movements", "phases", "phase_template_id"}
_MOVE_KEYS = {"in", "out"}


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise NetworkError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise NetworkError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise NetworkError(f"{where}: missing key(s) {sorted(missing)}")


def parse_network(document: str) -> Network:
    """Parse and validate a network document (JSON text)."""
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise NetworkError(
            f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return network_from_dict(raw)


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())


def network_from_dict(raw) -> Network:
    _check_keys(raw, _TOP_KEYS, _TOP_KEYS, "network")

    lanes: Dict[str, Lane] = {}
    for k, entry in enumerate(raw["lanes"]):
        where = f"lanes[{k}]"
        _check_keys(entry, _LANE_KEYS, {"id", "length_m", "speed_limit_mps"}, where)
        lid = entry["id"]
        if not isinstance(lid, str) or not lid:
            raise NetworkError(f"{where}: id must be a non-empty string")
        if lid in lanes:
            raise NetworkError(f"{where}: duplicate lane id {lid!r}")
        length = float(entry["length_m"])
        speed = float(entry["speed_limit_mps"])
        if not length > 0:
            raise NetworkError(f"{where}: length_m must be > 0")
        if not speed > 0:
            raise NetworkError(f"{where}: speed_limit_mps must be > 0")
        lanes[lid] = Lane(lid, length, speed, bool(entry.get("signal_controlled", True)))

    intersections: Dict[str, Intersection] = {}
    lane_downstream: Dict[str, str] = {}
    lane_upstream: Dict[str, str] = {}
    for k, entry in enumerate(raw["intersections"]):
        where = f"intersections[{k}]"
        _check_keys(entry, _INT_KEYS, _INT_KEYS - {"phase_template_id"}, where)
        iid = entry["id"]
        if not isinstance(iid, str) or not iid:
            raise NetworkError(f"{where}: id must be a non-empty string")
        if iid in intersections:
            raise NetworkError(f"{where}: duplicate intersection id {iid!r}")
        where = f"intersection {iid!r}"

        incoming = tuple(entry["incoming"])
        outgoing = tuple(entry["outgoing"])
        for group, name in ((incoming, "incoming"), (outgoing, "outgoing")):
            if len(set(group)) != len(group):
                raise NetworkError(f"{where}: duplicate lane in {name}")
            for lid in group:
                if lid not in lanes:
                    raise NetworkError(f"{where}: reference to unknown lane {lid!r}")
        for lid in incoming:
            if lid in lane_downstream:
                raise NetworkError(
                    f"{where}: lane {lid!r} is already incoming at {lane_downstream[lid]!r}"
                )
            lane_downstream[lid] = iid
        for lid in outgoing:
            if lid in lane_upstream:
                raise NetworkError(
                    f"{where}: lane {lid!r} is already outgoing at {lane_upstream[lid]!r}"
                )
            lane_upstream[lid] = iid

        movements = []
        seen_pairs = set()
        for m, mv in enumerate(entry["movements"]):
            _check_keys(mv, _MOVE_KEYS, _MOVE_KEYS, f"{where} movements[{m}]")
            pair = (mv["in"], mv["out"])
            for lid in pair:
                if lid not in lanes:
                    raise NetworkError(f"{where}: reference to unknown lane {lid!r}")
            if pair[0] not in incoming:
                raise NetworkError(f"{where}: movement {m} in-lane {pair[0]!r} is not incoming")
            if pair[1] not in outgoing:
                raise NetworkError(f"{where}: movement {m} out-lane {pair[1]!r} is not outgoing")
            if pair in seen_pairs:
                raise NetworkError(f"{where}: duplicate movement {pair}")
            seen_pairs.add(pair)
            movements.append(Movement(m, pair[0], pair[1]))
        if not movements:
            raise NetworkError(f"{where}: no movements")

        phases = []
        covered = set()
        if not entry["phases"]:
            raise NetworkError(f"{where}: at least one phase is required")
        for p, members in enumerate(entry["phases"]):
            if not members:
                raise NetworkError(f"{where}: empty phase {p}")
            for m in members:
                if not isinstance(m, int) or isinstance(m, bool):
                    raise NetworkError(f"{where}: phase {p} has a non-integer movement index")
                if not 0 <= m < len(movements):
                    raise NetworkError(
                        f"{where}: phase {p}: movement index out of range ({m} >= {len(movements)})"
                    )
            if len(set(members)) != len(members):
                raise NetworkError(f"{where}: phase {p} repeats a movement")
            covered.update(members)
            phases.append(Phase(p, tuple(members)))
        uncovered = sorted(set(range(len(movements))) - covered)
        if uncovered:
            raise NetworkError(f"{where}: movement(s) {uncovered} not covered by any phase")

        template = entry.get("phase_template_id", 0)
        if not isinstance(template, int) or template < 0:
            raise NetworkError(f"{where}: phase_template_id must be a non-negative integer")
        intersections[iid] = Intersection(
            iid, incoming, outgoing, tuple(movements), tuple(phases), template
        )

    adj_sets: Dict[str, set] = {iid: set() for iid in intersections}
    for k, pair in enumerate(raw["adjacency"]):
        if not isinstance(pair, list) or len(pair) != 2:
            raise NetworkError(f"adjacency[{k}]: expected a pair of intersection ids")
        a, b = pair
        for x in (a, b):
            if x not in intersections:
                raise NetworkError(f"adjacency[{k}]: unknown intersection {x!r}")
        if a == b:
            raise NetworkError(f"adjacency[{k}]: self-loop on {a!r}")
        adj_sets[a].add(b)
        adj_sets[b].add(a)

    for iid, inter in intersections.items():
        for mv in inter.movements:
            down = lane_downstream.get(mv.out_lane)
            if down is not None and down not in adj_sets[iid]:
                raise NetworkError(
                    f"intersection {iid!r}: out-lane {mv.out_lane!r} feeds {down!r}, "
                    "which is not listed as adjacent"
                )

    adjacency = {iid: tuple(sorted(v)) for iid, v in adj_sets.items()}
    return Network(intersections, lanes, adjacency, lane_downstream, lane_upstream)


def network_to_dict(net: Network) -> dict:
    pairs = sorted({tuple(sorted((a, b))) for a, nbrs in net.adjacency.items() for b in nbrs})
    return {
        "lanes": [
            {
                "id": lane.id,
                "length_m": lane.length,
                "speed_limit_mps": lane.speed_limit,
                "signal_controlled": lane.signal_controlled,
            }
            for lane in net.lanes.values()
        ],
        "intersections": [
            {
                "id": inter.id,
                "incoming": list(inter.incoming_lanes),
                "outgoing": list(inter.outgoing_lanes),
                "movements": [{"in": m.in_lane, "out": m.out_lane} for m in inter.movements],
                "phases": [list(p.active_movements) for p in inter.phases],
                "phase_template_id": inter.phase_template_id,
            }
            for inter in net.intersections.values()
        ],
        "adjacency": [list(p) for p in pairs],
    }


def serialize_network(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=2)


def _get(net: Network, i: str) -> Intersection:
    try:
        return net.intersections[i]
    except KeyError:
        raise NetworkError(f"unknown intersection {i!r}") from None


def phase_table(net: Network, i: str) -> np.ndarray:
    """Binary |P_i| x |M_i| matrix; row p marks the movements phase p releases."""
    inter = _get(net, i)
    table = np.zeros((inter.num_phases, inter.num_movements), dtype=np.float64)
    for p in inter.phases:
        table[p.index, list(p.active_movements)] = 1.0
    return table


def topology_vector(net: Network, i: str, catalog_size: int) -> np.ndarray:
    """[one_hot(template), L_in, V_in, N_l_in, N_m_in, L_out, V_out, N_l_out]."""
    inter = _get(net, i)
    if not 0 <= inter.phase_template_id < catalog_size:
        raise NetworkError(
            f"intersection {i!r}: phase_template_id {inter.phase_template_id} "
            f"out of range for catalog_size {catalog_size}"
        )
    one_hot = np.zeros(catalog_size)
    one_hot[inter.phase_template_id] = 1.0
    inc = [net.lanes[l] for l in inter.incoming_lanes]
    out = [net.lanes[l] for l in inter.outgoing_lanes]

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    stats = [
        mean([l.length for l in inc]),
        mean([l.speed_limit for l in inc]),
        float(len(inc)),
        float(inter.num_movements),
        mean([l.length for l in out]),
        mean([l.speed_limit for l in out]),
        float(len(out)),
    ]
    return np.concatenate([one_hot, np.asarray(stats)])


def neighbors(net: Network, i: str) -> List[str]:
    _get(net, i)
    return list(net.adjacency[i])


_LANE_SUFFIX = re.compile(r"_\d+$")


def road_of(lane_id: str) -> str:
    """Road a lane belongs to, by the ``<road>_<index>`` lane-id convention."""
    return _LANE_SUFFIX.sub("", lane_id)


def arm_count(net: Network, i: str) -> int:
    """Number of distinct incoming roads at an intersection."""
    inter = _get(net, i)
    return len({road_of(l) for l in inter.incoming_lanes})


def movement_caps(nets: Sequence[Network]) -> Tuple[int, int]:
    """Largest |M| and |P| over every intersection of the given networks."""
    m_max = max(i.num_movements for n in nets for i in n.intersections.values())
    p_max = max(i.num_phases for n in nets for i in n.intersections.values())
    return m_max, p_max


def lane_successors(net: Network) -> Dict[str, List[Tuple[str, str, int]]]:
    """lane -> [(out_lane, intersection id, movement index)] in document order."""
    succ: Dict[str, List[Tuple[str, str, int]]] = {lid: [] for lid in net.lanes}
    for inter in net.intersections.values():
        for mv in inter.movements:
            succ[mv.in_lane].append((mv.out_lane, inter.id, mv.index))
    return succ


def shortest_route(net: Network, origin: str, destination: str) -> Optional[List[str]]:
    """Free-flow-time shortest lane sequence from origin to destination, inclusive."""
    import heapq

    if origin not in net.lanes or destination not in net.lanes:
        return None
    order = {lid: k for k, lid in enumerate(net.lanes)}
    succ = lane_successors(net)

    def cost(lid):
        lane = net.lanes[lid]
        return lane.length / lane.speed_limit

    dist = {origin: cost(origin)}
    prev: Dict[str, str] = {}
    heap = [(dist[origin], order[origin], origin)]
    done = set()
    while heap:
        d, _, lid = heapq.heappop(heap)
        if lid in done:
            continue
        done.add(lid)
        if lid == destination:
            break
        for nxt, _, _ in succ[lid]:
            nd = d + cost(nxt)
            if nd < dist.get(nxt, float("inf")) - 1e-12:
                dist[nxt] = nd
                prev[nxt] = lid
                heapq.heappush(heap, (nd, order[nxt], nxt))
    if destination not in done:
        return None
    route = [destination]
    while route[-1] != origin:
        route.append(prev[route[-1]])
    return route[::-1]
