"""Unified movement-based vectors and fixed-shape padding for shared policies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .netmodel import Network, NetworkError, phase_table, topology_vector
from .simcore import SimState, detector_read

N_FEATURES = 8
COUNT_SCALE = 10.0
# divisors for the topology-vector statistics after the one-hot block
_TOPO_SCALE = np.array([100.0, 10.0, 10.0, 10.0, 100.0, 10.0, 10.0])


class EncodeError(ValueError):
    pass


def _inter(net: Network, i: str):
    try:
        return net.intersections[i]
    except KeyError:
        raise EncodeError(f"unknown intersection {i!r}") from None


def traffic_state_vector(st: SimState, i: str) -> np.ndarray:
    """|M_i| x 8 rows [A, Q_in, Q_out, N_in, N_out, O_in, O_out, C_out] (raw units)."""
    inter = _inter(st.net, i)
    green = st.green_movements(i)
    out = np.zeros((inter.num_movements, N_FEATURES))
    for mv in inter.movements:
        q_in, n_in, o_in = detector_read(st, mv.in_lane)
        q_out, n_out, o_out = detector_read(st, mv.out_lane)
        a = 1.0 if green is not None and green[mv.index] else 0.0
        c = 1.0 if st.net.lanes[mv.out_lane].signal_controlled else 0.0
        out[mv.index] = (a, q_in, q_out, n_in, n_out, o_in, o_out, c)
    return out


def scale_state(S: np.ndarray) -> np.ndarray:
    """Counts / 10; activation, occupancy and control flags untouched."""
    S = np.array(S, dtype=np.float64, copy=True)
    S[..., 1:5] /= COUNT_SCALE
    return S


def scale_topology(I: np.ndarray, catalog_size: int) -> np.ndarray:
    I = np.array(I, dtype=np.float64, copy=True)
    I[catalog_size:] /= _TOPO_SCALE
    return I


def neighbor_action_vector(st: SimState, i: str) -> np.ndarray:
    """1 where the movement's out-lane is released by the downstream neighbour's green."""
    net = st.net
    inter = _inter(net, i)
    u = np.zeros(inter.num_movements)
    active_lanes = {}
    for mv in inter.movements:
        j = net.lane_downstream.get(mv.out_lane)
        if j is None:
            continue
        if j not in active_lanes:
            g = st.green_movements(j)
            lanes = set()
            if g is not None:
                for m2 in net.intersections[j].movements:
                    if g[m2.index]:
                        lanes.add(m2.in_lane)
            active_lanes[j] = lanes
        if mv.out_lane in active_lanes[j]:
            u[mv.index] = 1.0
    return u


@dataclass
class AgentObservation:
    """Per-intersection, unpadded (scaled) observation."""

    S: np.ndarray  # |M| x 8
    G: np.ndarray  # |P| x |M|
    I: np.ndarray  # catalog_size + 7
    U: np.ndarray  # |M|

    @property
    def true_M(self) -> int:
        return self.S.shape[0]

    @property
    def true_P(self) -> int:
        return self.G.shape[0]


def observe(st: SimState, i: str, catalog_size: int) -> AgentObservation:
    return AgentObservation(
        S=scale_state(traffic_state_vector(st, i)),
        G=phase_table(st.net, i),
        I=scale_topology(topology_vector(st.net, i, catalog_size), catalog_size),
        U=neighbor_action_vector(st, i),
    )


@dataclass
class EncodedObservation:
    """Batch of padded observations; leading axis is the batch."""

    S: np.ndarray  # B x M_max x 8
    G: np.ndarray  # B x P_max x M_max
    I: np.ndarray  # B x (catalog_size + 7)
    U: np.ndarray  # B x M_max
    movement_mask: np.ndarray  # B x M_max
    phase_mask: np.ndarray  # B x P_max
    true_M: np.ndarray
    true_P: np.ndarray

    @property
    def batch(self) -> int:
        return self.S.shape[0]

    @property
    def M_max(self) -> int:
        return self.S.shape[1]

    @property
    def P_max(self) -> int:
        return self.G.shape[1]

    def take(self, idx) -> "EncodedObservation":
        idx = np.asarray(idx)
        return EncodedObservation(
            self.S[idx], self.G[idx], self.I[idx], self.U[idx], self.movement_mask[idx],
            self.phase_mask[idx], self.true_M[idx], self.true_P[idx],
        )

    @staticmethod
    def concat(parts: Sequence["EncodedObservation"]) -> "EncodedObservation":
        return EncodedObservation(*[
            np.concatenate([getattr(p, f) for p in parts])
            for f in ("S", "G", "I", "U", "movement_mask", "phase_mask", "true_M", "true_P")
        ])


def pad_and_mask(obs: Sequence[AgentObservation], M_max: int, P_max: int) -> EncodedObservation:
    B = len(obs)
    n_i = obs[0].I.shape[0] if B else 0
    S = np.zeros((B, M_max, N_FEATURES))
    G = np.zeros((B, P_max, M_max))
    I = np.zeros((B, n_i))
    U = np.zeros((B, M_max))
    mm = np.zeros((B, M_max))
    pm = np.zeros((B, P_max))
    tm = np.zeros(B, dtype=np.int64)
    tp = np.zeros(B, dtype=np.int64)
    for b, o in enumerate(obs):
        m, p = o.true_M, o.true_P
        if m > M_max or p > P_max:
            raise EncodeError(
                f"observation {b} exceeds caps: |M|={m} (M_max={M_max}), |P|={p} (P_max={P_max})"
            )
        S[b, :m] = o.S
        G[b, :p, :m] = o.G
        I[b] = o.I
        U[b, :m] = o.U
        mm[b, :m] = 1.0
        pm[b, :p] = 1.0
        tm[b], tp[b] = m, p
    return EncodedObservation(S, G, I, U, mm, pm, tm, tp)


def unpad(batch: EncodedObservation) -> List[AgentObservation]:
    out = []
    for b in range(batch.batch):
        m, p = int(batch.true_M[b]), int(batch.true_P[b])
        out.append(AgentObservation(
            batch.S[b, :m].copy(), batch.G[b, :p, :m].copy(), batch.I[b].copy(),
            batch.U[b, :m].copy(),
        ))
    return out


def build_ise_input(S: np.ndarray, G_row: np.ndarray, I: np.ndarray) -> np.ndarray:
    """[flatten(S), G_row, I] for one phase; S is M_max x 8, G_row is M_max."""
    S = np.asarray(S)
    G_row = np.asarray(G_row)
    if S.ndim != 2 or S.shape[1] != N_FEATURES or G_row.shape != (S.shape[0],):
        raise EncodeError(f"shape mismatch: S {S.shape}, G row {G_row.shape}")
    return np.concatenate([S.reshape(-1), G_row, np.asarray(I)])


def ise_input_dim(M_max: int, catalog_size: int) -> int:
    return N_FEATURES * M_max + M_max + catalog_size + 7
