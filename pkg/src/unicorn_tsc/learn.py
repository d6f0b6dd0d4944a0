"""Rollouts, advantage estimation, PPO, the contrastive latent loss, and training."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Adam, Tensor, backward, no_grad
from .autodiff import tensor as T
from .encode import (N_FEATURES, AgentObservation, EncodedObservation, neighbor_action_vector,
                     pad_and_mask, scale_state, scale_topology, traffic_state_vector)
from .netmodel import Network, movement_caps, phase_table, topology_vector
from .simcore import (FlowSpec, MetricsReport, SimConfig, SimState, advance, apply_actions,
                      init_sim, metrics_finalize, reward)
from .unicornnet import ModelConfig, UnicornNet, elbo_loss

LOG_COLUMNS = ("iter", "scenario", "mean_return", "L_p", "L_v", "L_e", "L_vae", "L_cont", "wall_s")


class TrainingError(RuntimeError):
    pass


class ContrastiveError(ValueError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.95
    lam: float = 0.98
    lr_actor: float = 1e-4
    lr_critic: float = 2e-4
    clip_eps: float = 0.2
    epochs: int = 6
    c1: float = 0.5
    c2: float = 2e-3
    c3: float = 2e-4
    c4: float = 1e-5
    tau_cont: float = 0.2
    contrastive_batch: int = 256
    iterations: int = 300
    seed: int = 0
    # knobs the method leaves open
    minibatch_size: Optional[int] = None  # None: one full-batch step per epoch
    value_target: str = "td"  # "td": r + gamma * V_old(s'); "gae": GAE returns
    reward_scale: float = 1.0
    max_grad_norm: Optional[float] = None
    rollout_horizon_s: Optional[float] = None  # shorter training episodes
    checkpoint_every: int = 0
    d: int = 64
    d_vae: int = 16

    def validate(self) -> None:
        if not (0 < self.gamma <= 1) or not (0 < self.lam <= 1):
            raise TrainingError("gamma and lam must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise TrainingError("clip_eps must be positive")
        if self.epochs < 1 or self.iterations < 0:
            raise TrainingError("epochs must be >= 1 and iterations >= 0")
        if self.value_target not in ("td", "gae"):
            raise TrainingError(f"value_target must be 'td' or 'gae', got {self.value_target!r}")
        if self.contrastive_batch < 2:
            raise TrainingError("contrastive_batch must be >= 2")
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise TrainingError("minibatch_size must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise TrainingError(f"unknown train keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


# -- environments -------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    net: Network
    flows: FlowSpec
    tag: str = ""


class Env:
    """One simulator instance exposing every intersection as an agent."""

    def __init__(self, scenario: Scenario, sim_cfg: SimConfig, M_max: int, P_max: int,
                 catalog_size: int):
        self.scenario = scenario
        self.sim_cfg = sim_cfg
        self.M_max, self.P_max = M_max, P_max
        self.catalog_size = catalog_size
        self.ids = scenario.net.intersection_ids
        self.st: Optional[SimState] = None
        # phase tables and topology vectors never change within a scenario
        self._static = {i: (phase_table(scenario.net, i),
                            scale_topology(topology_vector(scenario.net, i, catalog_size),
                                           catalog_size))
                        for i in self.ids}

    @property
    def n_agents(self) -> int:
        return len(self.ids)

    def reset(self, seed: int) -> EncodedObservation:
        self.st = init_sim(self.scenario.net, self.scenario.flows, self.sim_cfg, seed)
        return self.observe()

    def observe(self) -> EncodedObservation:
        obs = []
        for i in self.ids:
            G, I = self._static[i]
            obs.append(AgentObservation(S=scale_state(traffic_state_vector(self.st, i)), G=G, I=I,
                                        U=neighbor_action_vector(self.st, i)))
        return pad_and_mask(obs, self.M_max, self.P_max)

    def step(self, actions: Sequence[int]) -> np.ndarray:
        apply_actions(self.st, dict(zip(self.ids, (int(a) for a in actions))))
        advance(self.st, self.sim_cfg.ticks_per_decision)
        return np.array([reward(self.st, i) for i in self.ids])


# -- trajectories -------------------------------------------------------------

@dataclass
class ContrastiveBuffer:
    """(intersection, step, latent) entries for one episode; ``rows`` index the batch."""

    agents: List[str] = field(default_factory=list)
    steps: List[int] = field(default_factory=list)
    latents: List[np.ndarray] = field(default_factory=list)
    rows: List[int] = field(default_factory=list)

    def push(self, agent: str, step: int, mu: np.ndarray, row: int = -1) -> None:
        self.agents.append(agent)
        self.steps.append(step)
        self.latents.append(np.asarray(mu, dtype=np.float64))
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.agents)

    def clear(self) -> None:
        self.agents.clear()
        self.steps.clear()
        self.latents.clear()
        self.rows.clear()

    def validate(self) -> None:
        if len(set(zip(self.agents, self.steps))) != len(self):
            raise ContrastiveError("duplicate (intersection, step) entry in contrastive buffer")


@dataclass
class TrajectoryBatch:
    """One episode; transition rows are ordered step-major (row = t * N + agent)."""

    obs: EncodedObservation
    next_S: np.ndarray  # rows x (M_max * 8), flattened padded next state
    h_in: np.ndarray  # rows x d
    actions: np.ndarray
    log_prob_old: np.ndarray
    rewards: np.ndarray  # T x N (unscaled)
    values: np.ndarray  # (T + 1) x N, last row is the bootstrap value
    mu_selected: np.ndarray  # rows x d_vae
    dones: np.ndarray  # T
    agent_ids: List[str]
    scenario: str
    buffer: ContrastiveBuffer

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_agents(self) -> int:
        return self.rewards.shape[1]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


def collect_rollout(env: Env, net: UnicornNet, rng: np.random.Generator, n_steps: int,
                    seed: int, mode: str = "sample") -> TrajectoryBatch:
    obs = env.reset(seed)
    N = env.n_agents
    h = net.initial_hidden(N)
    obs_seq, hs, acts, logps, vals, rews, mus = [], [], [], [], [], [], []
    buffer = ContrastiveBuffer()
    for t in range(n_steps):
        steps = net.act(obs, h, rng, mode)
        a = np.array([s.action for s in steps])
        r = env.step(a)
        obs_seq.append(obs)
        hs.append(h)
        acts.append(a)
        logps.append([s.log_prob for s in steps])
        vals.append([s.value for s in steps])
        rews.append(r)
        for b, s in enumerate(steps):
            mu = s.mu[s.action]
            mus.append(mu)
            buffer.push(env.ids[b], t, mu, row=t * N + b)
        h = np.stack([s.gru_hidden for s in steps])
        obs = env.observe()
    obs_seq.append(obs)
    # bootstrap value of the state the episode was cut at
    final = net.act(obs, h, rng, mode)
    vals.append([s.value for s in final])
    next_S = np.concatenate([
        (o.S * o.movement_mask[..., None]).reshape(N, -1) for o in obs_seq[1:]
    ])
    dones = np.zeros(n_steps, dtype=bool)
    dones[-1] = True
    return TrajectoryBatch(
        obs=EncodedObservation.concat(obs_seq[:-1]),
        next_S=next_S,
        h_in=np.concatenate(hs),
        actions=np.concatenate(acts),
        log_prob_old=np.asarray(logps, dtype=np.float64).reshape(-1),
        rewards=np.asarray(rews, dtype=np.float64),
        values=np.asarray(vals, dtype=np.float64),
        mu_selected=np.asarray(mus),
        dones=dones,
        agent_ids=list(env.ids),
        scenario=env.scenario.name,
        buffer=buffer,
    )


# -- advantages ---------------------------------------------------------------

def compute_gae(rewards, values, gamma: float, lam: float):
    """GAE over axis 0; ``values`` carries one extra (bootstrap) row. Not normalized."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1 or values.shape[1:] != rewards.shape[1:]:
        raise TrainingError(f"values must have one more step than rewards: "
                            f"{values.shape} vs {rewards.shape}")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values[:-1]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


# -- losses -------------------------------------------------------------------

def clipped_surrogate(ratio: Tensor, adv: np.ndarray, eps: float) -> Tensor:
    """Per-sample min(k A, clip(k, 1-eps, 1+eps) A)."""
    return T.minimum(ratio * adv, T.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def cosine_matrix(Z: Tensor) -> Tensor:
    norms = T.sqrt((Z * Z).sum(axis=-1, keepdims=True))
    Zn = Z / norms
    return Zn @ Zn.transpose()


def ntxent_from_latents(Z, anchors, positives, tau: float) -> Tensor:
    """Mean over anchors of -log(exp(s_ap / tau) / sum_{k != a} exp(s_ak / tau))."""
    Z = Z if isinstance(Z, Tensor) else Tensor(np.asarray(Z, dtype=np.float64))
    n = Z.shape[0]
    anchors = np.asarray(anchors, dtype=np.int64)
    positives = np.asarray(positives, dtype=np.int64)
    if len(anchors) == 0:
        raise ContrastiveError("no anchor has a positive partner")
    if np.any(anchors == positives):
        raise ContrastiveError("an anchor cannot be its own positive")
    sims = cosine_matrix(Z) * (1.0 / tau)
    not_self = 1.0 - np.eye(n)
    logp = T.masked_log_softmax(sims[anchors], not_self[anchors])
    return -(logp[np.arange(len(anchors)), positives]).mean()


def sample_contrastive(buffer: ContrastiveBuffer, rng: np.random.Generator, batch_size: int):
    """Pick up to ``batch_size`` entries and pair each anchor with a same-intersection positive.

    Returns (entry indices, anchor positions, positive positions), positions
    being offsets into the returned index list.
    """
    n = len(buffer)
    if len(set(buffer.agents)) < 2:
        raise ContrastiveError("contrastive buffer needs at least two intersections")
    idx = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
    by_agent: Dict[str, List[int]] = {}
    for pos, k in enumerate(idx):
        by_agent.setdefault(buffer.agents[k], []).append(pos)
    anchors, positives = [], []
    for pos, k in enumerate(idx):
        mates = [q for q in by_agent[buffer.agents[k]] if q != pos]
        if mates:
            anchors.append(pos)
            positives.append(mates[int(rng.integers(len(mates)))])
    if not anchors:
        raise ContrastiveError("insufficient entries for any positive pair")
    return idx, np.array(anchors), np.array(positives)


def ntxent_loss(buffer: ContrastiveBuffer, rng: np.random.Generator, batch_size: int = 256,
                tau: float = 0.2) -> float:
    """NT-Xent over the buffer's stored latents."""
    idx, anchors, positives = sample_contrastive(buffer, rng, batch_size)
    Z = np.stack([buffer.latents[k] for k in idx])
    with no_grad():
        return float(ntxent_from_latents(Z, anchors, positives, tau).data)


@dataclass
class UpdateData:
    """Concatenated transitions of all episodes in one iteration."""

    obs: EncodedObservation
    next_S: np.ndarray
    h_in: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    advantages: np.ndarray  # normalized
    value_targets: np.ndarray
    source: np.ndarray  # batch index of each row

    @property
    def size(self) -> int:
        return len(self.actions)


def prepare_update(batches: Sequence[TrajectoryBatch], cfg: TrainConfig) -> UpdateData:
    advs, targets = [], []
    for b in batches:
        r = b.rewards * cfg.reward_scale
        v = b.values
        adv, ret = compute_gae(r, v, cfg.gamma, cfg.lam)
        if cfg.value_target == "td":
            tgt = r + cfg.gamma * v[1:]
        else:
            tgt = ret
        advs.append(adv.reshape(-1))
        targets.append(tgt.reshape(-1))
    return UpdateData(
        obs=EncodedObservation.concat([b.obs for b in batches]),
        next_S=np.concatenate([b.next_S for b in batches]),
        h_in=np.concatenate([b.h_in for b in batches]),
        actions=np.concatenate([b.actions for b in batches]),
        log_prob_old=np.concatenate([b.log_prob_old for b in batches]),
        advantages=normalize_advantages(np.concatenate(advs)),
        value_targets=np.concatenate(targets),
        source=np.concatenate([np.full(len(b.actions), k) for k, b in enumerate(batches)]),
    )


def ppo_losses(data: UpdateData, net: UnicornNet, cfg: TrainConfig, idx=None, rng=None):
    """Per-sample loss terms (policy, value, entropy, VAE) for rows ``idx``."""
    idx = np.arange(data.size) if idx is None else np.asarray(idx)
    rng = np.random.default_rng(0) if rng is None else rng
    obs = data.obs.take(idx)
    out = net.forward(obs, data.h_in[idx], rng=rng)
    B = len(idx)
    rows = np.arange(B)
    a = data.actions[idx]
    logp = out.log_policy[rows, a]
    ratio = T.exp(logp - data.log_prob_old[idx])
    p_terms = -clipped_surrogate(ratio, data.advantages[idx], cfg.clip_eps)
    v_terms = T.square(out.value - data.value_targets[idx])
    ent = -(out.policy * out.log_policy).sum(axis=-1)
    mask = np.repeat(obs.movement_mask, N_FEATURES, axis=-1)
    pred = out.preds[rows, a]
    tgt = data.next_S[idx][:, : pred.shape[-1]]
    vae_terms = _elbo_terms(pred, tgt, out.mu[rows, a], out.logvar[rows, a], mask)
    return {"p": p_terms, "v": v_terms, "e": ent, "vae": vae_terms}


def _elbo_terms(pred, target, mu, logvar, mask) -> Tensor:
    diff = pred - target
    mse = (T.square(diff) * mask).sum(axis=-1) * (1.0 / np.maximum(mask.sum(axis=-1), 1.0))
    kl = (T.exp(logvar) + mu * mu - 1.0 - logvar).sum(axis=-1) * 0.5
    return mse + kl


def combined_loss(L_p, L_v, L_e, L_vae, L_cont, cfg: TrainConfig):
    return L_p + cfg.c1 * L_v - cfg.c2 * L_e + cfg.c3 * L_vae + cfg.c4 * L_cont


def contrastive_term(net: UnicornNet, batch: TrajectoryBatch, rng: np.random.Generator,
                     cfg: TrainConfig) -> Tensor:
    """NT-Xent on latents recomputed under the current parameters."""
    idx, anchors, positives = sample_contrastive(batch.buffer, rng, cfg.contrastive_batch)
    rows = np.array([batch.buffer.rows[k] for k in idx])
    mu, _ = net.encode_phases(batch.obs.take(rows))
    Z = mu[np.arange(len(rows)), batch.actions[rows]]
    return ntxent_from_latents(Z, anchors, positives, cfg.tau_cont)


def update(net: UnicornNet, opt: Adam, batches: Sequence[TrajectoryBatch], cfg: TrainConfig,
           rng: np.random.Generator, iteration: int = 0):
    """Run the PPO epochs; returns per-episode losses recorded on the first epoch."""
    data = prepare_update(batches, cfg)
    use_cont = cfg.c4 > 0
    mb = data.size if cfg.minibatch_size is None else min(cfg.minibatch_size, data.size)
    logged = {k: np.zeros(data.size) for k in ("p", "v", "e", "vae")}
    cont_logged = [[] for _ in batches]
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.size) if mb < data.size else np.arange(data.size)
        for start in range(0, data.size, mb):
            idx = order[start:start + mb]
            terms = ppo_losses(data, net, cfg, idx, rng)
            means = {k: v.mean() for k, v in terms.items()}
            L_cont = Tensor(0.0)
            if use_cont:
                parts = []
                for k, b in enumerate(batches):
                    try:
                        parts.append(contrastive_term(net, b, rng, cfg))
                    except ContrastiveError:
                        continue
                    if epoch == 0:
                        cont_logged[k].append(float(parts[-1].data))
                if parts:
                    L_cont = parts[0]
                    for p in parts[1:]:
                        L_cont = L_cont + p
                    L_cont = L_cont * (1.0 / len(parts))
            loss = combined_loss(means["p"], means["v"], means["e"], means["vae"], L_cont, cfg)
            if not np.isfinite(loss.data):
                comp = {k: float(v.data) for k, v in means.items()}
                raise TrainingError(f"non-finite loss at iteration {iteration}, epoch {epoch}: "
                                    f"total={float(loss.data)}, components={comp}, "
                                    f"L_cont={float(L_cont.data)}")
            if epoch == 0:
                for k, v in terms.items():
                    logged[k][idx] = v.data
            opt.zero_grad()
            backward(loss)
            if cfg.max_grad_norm is not None:
                opt.clip_grad_norm(cfg.max_grad_norm)
            opt.step()
    per_episode = []
    for k, b in enumerate(batches):
        sel = data.source == k
        per_episode.append({
            "L_p": float(logged["p"][sel].mean()),
            "L_v": float(logged["v"][sel].mean()),
            "L_e": float(logged["e"][sel].mean()),
            "L_vae": float(logged["vae"][sel].mean()),
            "L_cont": float(np.mean(cont_logged[k])) if cont_logged[k] else 0.0,
        })
    return per_episode


# -- training -----------------------------------------------------------------

def scenario_caps(scenarios: Sequence[Scenario]) -> Tuple[int, int]:
    return movement_caps([s.net for s in scenarios])


def rollout_steps(sim_cfg: SimConfig, horizon_s: Optional[float] = None) -> int:
    horizon = sim_cfg.horizon_s if horizon_s is None else horizon_s
    return max(1, int(round(horizon / sim_cfg.tick_s)) // sim_cfg.ticks_per_decision)


def episode_seed(base: int, iteration: int, scenario_index: int) -> int:
    return (base * 1_000_003 + iteration * 101 + scenario_index) % (2 ** 63)


def build_model(scenarios: Sequence[Scenario], catalog_size: int, cfg: TrainConfig) -> UnicornNet:
    M_max, P_max = scenario_caps(scenarios)
    return UnicornNet(ModelConfig(M_max, P_max, catalog_size, d=cfg.d, d_vae=cfg.d_vae),
                      seed=cfg.seed)


def make_optimizer(net: UnicornNet, cfg: TrainConfig) -> Adam:
    actor, critic = net.param_groups()
    return Adam([{"params": actor, "lr": cfg.lr_actor}, {"params": critic, "lr": cfg.lr_critic}])


def train(cfg: TrainConfig, scenarios: Sequence[Scenario], sim_cfg: SimConfig,
          catalog_size: int, log_path=None, checkpoint_dir=None, net: Optional[UnicornNet] = None,
          progress=None):
    """Train one shared model; with several scenarios each iteration visits all of them."""
    cfg.validate()
    if not scenarios:
        raise TrainingError("at least one scenario is required")
    net = build_model(scenarios, catalog_size, cfg) if net is None else net
    mc = net.cfg
    envs = [Env(s, sim_cfg, mc.M_max, mc.P_max, mc.catalog_size) for s in scenarios]
    opt = make_optimizer(net, cfg)
    rng = np.random.default_rng(cfg.seed)
    n_steps = rollout_steps(sim_cfg, cfg.rollout_horizon_s)
    log: List[dict] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            batches = [collect_rollout(env, net, rng, n_steps, episode_seed(cfg.seed, it, k))
                       for k, env in enumerate(envs)]
            losses = update(net, opt, batches, cfg, rng, it)
            wall = time.perf_counter() - t0
            for b, ls in zip(batches, losses):
                row = {"iter": it, "scenario": b.scenario, "mean_return": b.episode_return,
                       **ls, "wall_s": wall}
                log.append(row)
                if writer is not None:
                    writer.writerow([row[c] if c != "wall_s" else f"{wall:.3f}" for c in LOG_COLUMNS])
            if fh is not None:
                fh.flush()
            if progress is not None:
                progress(it, log[-len(batches):])
            if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                net.save(Path(checkpoint_dir) / f"checkpoint_{it + 1:05d}.bin")
    finally:
        if fh is not None:
            fh.close()
    return net, log


# -- evaluation ---------------------------------------------------------------

@dataclass
class EpisodeResult:
    scenario: str
    seed: int
    metrics: MetricsReport
    episode_return: float


def evaluate_policy(net: UnicornNet, scenario: Scenario, sim_cfg: SimConfig, seed: int,
                    mode: str = "greedy") -> EpisodeResult:
    mc = net.cfg
    env = Env(scenario, sim_cfg, mc.M_max, mc.P_max, mc.catalog_size)
    rng = np.random.default_rng(seed)
    obs = env.reset(seed)
    h = net.initial_hidden(env.n_agents)
    total = 0.0
    for _ in range(sim_cfg.decisions_per_episode):
        steps = net.act(obs, h, rng, mode)
        total += float(env.step([s.action for s in steps]).sum())
        h = np.stack([s.gru_hidden for s in steps])
        obs = env.observe()
    return EpisodeResult(scenario.name, seed, metrics_finalize(env.st), total)
