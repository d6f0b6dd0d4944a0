"""Synthetic networks and flows, plus the Table-I style scenario summary.

Builders return plain dicts in the network / flow file schemas so they can be
written to disk or parsed directly.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .netmodel import Network, arm_count, network_from_dict
from .simcore import FlowSpec, flows_from_dict

# phase-set shape catalog shared by all synthetic scenarios
TEMPLATE_4ARM_SPLIT = 0
TEMPLATE_3ARM_SPLIT = 1
TEMPLATE_4ARM_PAIRED = 2
TEMPLATE_OTHER = 3
DEFAULT_CATALOG_SIZE = 4

_DIRS = ("N", "E", "S", "W")
_OFFSETS = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}


def _lane(lid, length, speed, controlled=True):
    return {"id": lid, "length_m": float(length), "speed_limit_mps": float(speed),
            "signal_controlled": controlled}


def build_nodes(
    nodes: Dict[str, Dict[str, str]],
    lane_length: float = 200.0,
    speed: float = 13.89,
    phasing: str = "split",
    lengths: Optional[Dict[Tuple[str, str], float]] = None,
) -> dict:
    """Build a network from node -> {direction: neighbour id} maps.

    Neighbours that are not themselves keys of ``nodes`` are border stubs.
    Every directed link becomes one lane ``<from>-<to>_0``. Each incoming lane
    carries right/through/left movements to the other arms' outgoing lanes.
    ``phasing`` is "split" (one phase per arm) or "paired" (opposite arms
    together; only for 4-arm nodes).
    """
    lengths = lengths or {}
    lanes: Dict[str, dict] = {}
    inters = []
    adjacency = set()

    def link(a, b):
        lid = f"{a}-{b}_0"
        if lid not in lanes:
            controlled = b in nodes
            lanes[lid] = _lane(lid, lengths.get((a, b), lane_length), speed, controlled)
        return lid

    for node, arms in nodes.items():
        dirs = [d for d in _DIRS if d in arms]
        incoming = [link(arms[d], node) for d in dirs]
        outgoing = [link(node, arms[d]) for d in dirs]
        movements = []
        by_arm: Dict[str, List[int]] = {d: [] for d in dirs}
        for a, d in enumerate(dirs):
            k = _DIRS.index(d)
            # right, through, left as seen by traffic arriving from arm d
            for turn in (3, 2, 1):
                target = _DIRS[(k + turn) % 4]
                if target in arms:
                    by_arm[d].append(len(movements))
                    movements.append({"in": incoming[a], "out": outgoing[dirs.index(target)]})
        if phasing == "paired" and len(dirs) == 4:
            phases = [by_arm["N"] + by_arm["S"], by_arm["E"] + by_arm["W"]]
            template = TEMPLATE_4ARM_PAIRED
        else:
            phases = [by_arm[d] for d in dirs]
            template = {4: TEMPLATE_4ARM_SPLIT, 3: TEMPLATE_3ARM_SPLIT}.get(len(dirs), TEMPLATE_OTHER)
        inters.append({
            "id": node, "incoming": incoming, "outgoing": outgoing,
            "movements": movements, "phases": phases, "phase_template_id": template,
        })
        for nb in arms.values():
            if nb in nodes:
                adjacency.add(tuple(sorted((node, nb))))
    return {"lanes": list(lanes.values()), "intersections": inters,
            "adjacency": [list(p) for p in sorted(adjacency)]}


def grid_nodes(rows: int, cols: int) -> Dict[str, Dict[str, str]]:
    def name(r, c):
        return f"I{r}{c}" if rows <= 10 and cols <= 10 else f"I{r}_{c}"

    nodes = {}
    for r in range(rows):
        for c in range(cols):
            arms = {}
            for d, (dr, dc) in _OFFSETS.items():
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    arms[d] = name(rr, cc)
                else:
                    arms[d] = f"B{d}{r}{c}"
            nodes[name(r, c)] = arms
    return nodes


def grid_network(rows: int, cols: int, **kw) -> dict:
    return build_nodes(grid_nodes(rows, cols), **kw)


def single_intersection(arms: int = 4, **kw) -> dict:
    dirs = _DIRS if arms == 4 else ("N", "E", "W") if arms == 3 else ("N", "S")
    return build_nodes({"C": {d: f"B{d}" for d in dirs}}, **kw)


def corridor_nodes(n: int) -> Dict[str, Dict[str, str]]:
    nodes = {}
    for k in range(n):
        arms = {"N": f"BN{k}", "S": f"BS{k}"}
        arms["W"] = f"I{k - 1}" if k > 0 else "BW"
        arms["E"] = f"I{k + 1}" if k < n - 1 else "BE"
        nodes[f"I{k}"] = arms
    return nodes


def mixed_nodes() -> Dict[str, Dict[str, str]]:
    """A 4-arm/4-phase node joined to a 3-arm/3-phase node (T junction)."""
    return {
        "X": {"N": "BNX", "E": "T", "S": "BSX", "W": "BWX"},
        "T": {"N": "BNT", "E": "BET", "W": "X"},
    }


def fig2_three_arm() -> dict:
    """3-arm node with two lanes per arm: 6 in, 6 out, 12 movements, 3 phases."""
    arms = ("W", "E", "S")
    lanes, incoming, outgoing = [], [], []
    for a in arms:
        for k in range(2):
            for lid, group in ((f"{a}in_{k}", incoming), (f"{a}out_{k}", outgoing)):
                lanes.append(_lane(lid, 150.0 + 25 * k, 13.89))
                group.append(lid)
    movements, phases = [], []
    for a in arms:
        members = []
        for k in range(2):
            for b in arms:
                if b != a:
                    members.append(len(movements))
                    movements.append({"in": f"{a}in_{k}", "out": f"{b}out_{k}"})
        phases.append(members)
    return {
        "lanes": lanes,
        "intersections": [{
            "id": "T", "incoming": incoming, "outgoing": outgoing, "movements": movements,
            "phases": phases, "phase_template_id": TEMPLATE_3ARM_SPLIT,
        }],
        "adjacency": [],
    }


def poisson_flows(
    nodes: Dict[str, Dict[str, str]],
    total_veh_per_min: float,
    horizon_s: float = 3600.0,
    turn_share: float = 0.0,
    weights: Optional[Dict[str, float]] = None,
) -> dict:
    """Rate-based flows spread over the border entry lanes of a node map."""
    ods = straight_ods(nodes, turn_share)
    entries = sorted({o for o, _, _ in ods})
    weights = weights or {}
    wsum = sum(weights.get(e, 1.0) for e in entries)
    rates = []
    for o, d, share in ods:
        rate = total_veh_per_min * weights.get(o, 1.0) / wsum * share
        if rate > 0:
            rates.append({"origin": o, "destination": d, "veh_per_min": rate,
                          "start_s": 0.0, "end_s": float(horizon_s)})
    return {"rates": rates, "departures": []}


def straight_ods(nodes: Dict[str, Dict[str, str]], turn_share: float = 0.0):
    """OD pairs from every border entry: straight through, plus turning shares."""
    ods = []
    exits_all = []
    for node, arms in nodes.items():
        for d, nb in arms.items():
            if nb not in nodes:
                exits_all.append(f"{node}-{nb}_0")
    for node, arms in nodes.items():
        for d, nb in arms.items():
            if nb in nodes:
                continue
            entry = f"{nb}-{node}_0"
            heading = _DIRS[(_DIRS.index(d) + 2) % 4]
            cur = node
            straight = None
            for _ in range(len(nodes) + 1):
                nxt = nodes[cur].get(heading)
                if nxt is None:
                    break
                if nxt not in nodes:
                    straight = f"{cur}-{nxt}_0"
                    break
                cur = nxt
            uturn = f"{node}-{nb}_0"
            others = [x for x in exits_all if x not in (straight, uturn)]
            if straight is None:
                ods.extend((entry, x, 1.0 / len(others)) for x in others)
                continue
            ods.append((entry, straight, 1.0 - turn_share if others else 1.0))
            if turn_share > 0 and others:
                ods.extend((entry, x, turn_share / len(others)) for x in others)
    return ods


def deterministic_flows(
    nodes: Dict[str, Dict[str, str]], headway_s: float, horizon_s: float = 3600.0,
    offset_s: float = 0.0,
) -> dict:
    """Explicit departures at a fixed headway from each border entry, straight through."""
    deps = []
    ods = [od for od in straight_ods(nodes) if od[2] == 1.0]
    for k, (o, d, _) in enumerate(ods):
        t = offset_s + k * headway_s / max(1, len(ods))
        while t < horizon_s:
            deps.append({"origin": o, "destination": d, "depart_s": round(t, 6)})
            t += headway_s
    deps.sort(key=lambda x: x["depart_s"])
    return {"rates": [], "departures": deps}


def random_intersection_network(rng: np.random.Generator, n_movements: int, n_phases: int,
                                template_id: Optional[int] = None) -> dict:
    """One intersection with exactly the requested |M| and |P| (|P| <= |M|)."""
    n_in = int(rng.integers(1, n_movements + 1))
    n_in = min(n_in, 6)
    incoming = [f"in{k}_0" for k in range(n_in)]
    n_out = int(math.ceil(n_movements / n_in))
    outgoing = [f"out{k}_0" for k in range(n_out)]
    pairs = [(a, b) for a in incoming for b in outgoing]
    rng.shuffle(pairs)
    # every incoming lane gets at least one movement
    chosen = [(a, outgoing[int(rng.integers(n_out))]) for a in incoming]
    for p in pairs:
        if len(chosen) >= n_movements:
            break
        if p not in chosen:
            chosen.append(p)
    chosen = [(str(a), str(b)) for a, b in chosen[:n_movements]]
    movements = [{"in": a, "out": b} for a, b in chosen]
    n_phases = min(n_phases, n_movements)
    order = rng.permutation(n_movements)
    groups = [[int(m)] for m in order[:n_phases]]
    for m in order[n_phases:]:
        groups[int(rng.integers(n_phases))].append(int(m))
    for g in groups:
        extra = rng.integers(n_movements, size=int(rng.integers(0, 2)))
        for m in extra:
            if int(m) not in g:
                g.append(int(m))
    lanes = [_lane(l, float(rng.uniform(60, 400)), float(rng.uniform(8, 20)),
                   bool(rng.random() < 0.8)) for l in incoming + outgoing]
    tpl = int(rng.integers(DEFAULT_CATALOG_SIZE)) if template_id is None else template_id
    return {
        "lanes": lanes,
        "intersections": [{
            "id": "R", "incoming": incoming, "outgoing": outgoing, "movements": movements,
            "phases": groups, "phase_template_id": tpl,
        }],
        "adjacency": [],
    }


def difficulty_tag(n_intersections: int, mean_rate: float) -> str:
    if mean_rate >= 60.0 and n_intersections >= 20:
        return "hard"
    if mean_rate >= 40.0:
        return "medium"
    return "easy"


def scenario_summary(net: Network, flows: FlowSpec, horizon_s: float = 3600.0) -> dict:
    """Network-structure and arrival-rate statistics in the benchmark-table layout."""
    arms = [arm_count(net, i) for i in net.intersections]
    per_min = flows.expected_arrivals_per_minute(horizon_s)
    n = len(net.intersections)
    summary = {
        "total_int": n,
        "arm2": sum(a == 2 for a in arms),
        "arm3": sum(a == 3 for a in arms),
        "arm4": sum(a == 4 for a in arms),
        "volume": float(per_min.sum()),
        "rate_mean": float(per_min.mean()),
        "rate_std": float(per_min.std()),
        "rate_max": float(per_min.max()),
        "rate_min": float(per_min.min()),
    }
    homogeneous = len(set(i.phase_template_id for i in net.intersections.values())) == 1 and \
        len(set(arms)) == 1
    summary["homogeneous"] = homogeneous
    summary["difficulty"] = difficulty_tag(n, summary["rate_mean"])
    return summary


def toy_grid(total_veh_per_min: float = 20.0, horizon_s: float = 3600.0,
             turn_share: float = 0.2, **kw) -> Tuple[dict, dict]:
    nodes = grid_nodes(2, 2)
    return build_nodes(nodes, **kw), poisson_flows(nodes, total_veh_per_min, horizon_s, turn_share)


def toy_mixed(total_veh_per_min: float = 12.0, horizon_s: float = 3600.0,
              turn_share: float = 0.2) -> Tuple[dict, dict]:
    nodes = mixed_nodes()
    return build_nodes(nodes), poisson_flows(nodes, total_veh_per_min, horizon_s, turn_share)


def toy_corridor(n: int = 2, total_veh_per_min: float = 12.0, horizon_s: float = 3600.0,
                 turn_share: float = 0.2, **kw) -> Tuple[dict, dict]:
    nodes = corridor_nodes(n)
    return build_nodes(nodes, **kw), poisson_flows(nodes, total_veh_per_min, horizon_s, turn_share)


def random_scenario(rng: np.random.Generator, horizon_s: float = 3600.0) -> Tuple[dict, dict]:
    """A small random network (grid, corridor or mixed) with random flows."""
    kind = int(rng.integers(3))
    if kind == 0:
        nodes = grid_nodes(int(rng.integers(1, 3)), int(rng.integers(1, 4)))
    elif kind == 1:
        nodes = corridor_nodes(int(rng.integers(1, 4)))
    else:
        nodes = mixed_nodes()
    length = float(rng.uniform(60.0, 300.0))
    speed = float(rng.uniform(8.0, 16.0))
    net = build_nodes(nodes, lane_length=length, speed=speed)
    rate = float(rng.uniform(2.0, 40.0))
    flows = poisson_flows(nodes, rate, horizon_s, float(rng.uniform(0.0, 0.4)))
    return net, flows
