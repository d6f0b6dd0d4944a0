"""The shared Unicorn policy/value network.

Three parts, all shared by every intersection:

* general feature extraction: MLP over the flattened movement states, a GRU
  over decision steps, and phase-queried cross-attention yielding one
  feature row per phase;
* intersection-specific extraction: a VAE per phase over
  ``[S, G_p, I]`` whose latent means form the phase's specific features and
  whose decoder predicts the next movement states;
* heads: a per-phase linear policy logit, and a value computed from the
  phase features attended against the neighbour-action embedding.

Inputs may be padded to ``(M_max, P_max)`` or left at the intersection's own
``(|M|, |P|)``; the unpadded path uses the matching sub-blocks of the
shape-dependent weights, so both give the same outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (MLP, Adam, CrossAttention, GRUCell, Linear, Module, Tensor,
                       load_checkpoint, no_grad, save_checkpoint)
from .autodiff import tensor as T
from .encode import N_FEATURES, EncodedObservation, ise_input_dim


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    M_max: int
    P_max: int
    catalog_size: int
    d: int = 64
    d_vae: int = 16
    heads: int = 4
    hidden: int = 64
    vae_hidden: int = 64

    @property
    def n_topology(self) -> int:
        return self.catalog_size + 7


@dataclass
class ForwardOut:
    h_sp: Tensor
    gru_hidden: Tensor
    mu: Tensor
    logvar: Tensor
    z: Tensor
    preds: Tensor
    h_int: Tensor
    logits: Tensor
    policy: Tensor
    log_policy: Tensor
    value: Tensor


@dataclass
class AgentStep:
    h_sp: np.ndarray
    h_int: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    next_state_preds: np.ndarray
    policy: np.ndarray
    value: float
    gru_hidden: np.ndarray
    action: int
    log_prob: float


class UnicornNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, dv, h = cfg.d, cfg.d_vae, cfg.hidden
        if d % cfg.heads or (d + dv) % cfg.heads:
            raise ModelError("d and d + d_vae must be divisible by the number of heads")
        self.cfg = cfg
        self.mlp_s = MLP(N_FEATURES * cfg.M_max, h, d, rng)
        self.gru = GRUCell(d, d, rng)
        self.mlp_p = MLP(cfg.M_max, h, d, rng)
        self.gfe_att = CrossAttention(d, d, d, cfg.heads, rng)
        self.encoder = MLP(ise_input_dim(cfg.M_max, cfg.catalog_size), cfg.vae_hidden, 2 * dv, rng)
        self.decoder = MLP(dv, cfg.vae_hidden, N_FEATURES * cfg.M_max, rng)
        self.mlp_a = MLP(cfg.M_max, h, d, rng)
        self.act_att = CrossAttention(d + dv, d, d + dv, cfg.heads, rng)
        self.f_pi = Linear(d + dv, 1, rng)
        self.f_v = Linear(2 * (d + dv), 1, rng)

    # parameters following the critic learning rate
    CRITIC_PREFIXES = ("f_v.", "mlp_a.", "act_att.")

    def param_groups(self):
        actor, critic = [], []
        for name, p in self.named_parameters():
            (critic if name.startswith(self.CRITIC_PREFIXES) else actor).append(p)
        return actor, critic

    # -- index helpers for unpadded inputs ------------------------------
    def _check(self, obs: EncodedObservation):
        M, P = obs.M_max, obs.P_max
        cfg = self.cfg
        if M > cfg.M_max or P > cfg.P_max:
            raise ModelError(f"observation caps ({M}, {P}) exceed model caps "
                             f"({cfg.M_max}, {cfg.P_max})")
        if obs.I.shape[-1] != cfg.n_topology:
            raise ModelError(f"topology width {obs.I.shape[-1]} != {cfg.n_topology}")
        return M, P

    def _rows(self, M):
        cfg = self.cfg
        if M == cfg.M_max:
            return None, None, None, None
        s_rows = np.arange(N_FEATURES * M)
        m_rows = np.arange(M)
        enc_rows = np.concatenate([
            s_rows,
            N_FEATURES * cfg.M_max + m_rows,
            (N_FEATURES + 1) * cfg.M_max + np.arange(cfg.n_topology),
        ])
        return s_rows, m_rows, enc_rows, s_rows

    # -- sub-networks -----------------------------------------------------
    def gfe_forward(self, obs: EncodedObservation, gru_hidden):
        M, P = self._check(obs)
        s_rows, m_rows, _, _ = self._rows(M)
        B = obs.batch
        S_flat = Tensor((obs.S * obs.movement_mask[..., None]).reshape(B, -1))
        h_s = self.mlp_s(S_flat, rows=s_rows)
        h_prev = gru_hidden if isinstance(gru_hidden, Tensor) else Tensor(gru_hidden)
        h_new = self.gru(h_s, h_prev)
        h_p = self.mlp_p(Tensor(obs.G), rows=m_rows)
        kv = h_new.reshape(B, 1, self.cfg.d)
        h_sp = self.gfe_att(h_p, kv, np.ones((B, 1)))
        h_sp = h_sp * obs.phase_mask[..., None]
        return h_sp, h_new

    def ise_inputs(self, obs: EncodedObservation) -> np.ndarray:
        B, P, M = obs.batch, obs.P_max, obs.M_max
        S_flat = (obs.S * obs.movement_mask[..., None]).reshape(B, 1, -1)
        return np.concatenate([
            np.broadcast_to(S_flat, (B, P, N_FEATURES * M)),
            obs.G,
            np.broadcast_to(obs.I[:, None, :], (B, P, obs.I.shape[-1])),
        ], axis=-1)

    def encode_phases(self, obs: EncodedObservation, x: Optional[np.ndarray] = None):
        M, P = self._check(obs)
        _, _, enc_rows, _ = self._rows(M)
        x = self.ise_inputs(obs) if x is None else x
        enc = self.encoder(Tensor(x), rows=enc_rows)
        dv = self.cfg.d_vae
        return enc[..., :dv], enc[..., dv:]

    def ise_forward(self, obs: EncodedObservation, rng=None, eps: Optional[np.ndarray] = None):
        M, P = self._check(obs)
        _, _, _, dec_cols = self._rows(M)
        mu, logvar = self.encode_phases(obs)
        if eps is None:
            if rng is None:
                raise ModelError("ise_forward needs an rng or explicit eps")
            eps = rng.standard_normal(mu.shape)
        z = mu + T.exp(logvar * 0.5) * eps
        preds = self.decoder(z, cols=dec_cols)
        return mu, logvar, z, preds

    def heads_forward(self, h_sp: Tensor, h_int: Tensor, U: np.ndarray,
                      phase_mask: np.ndarray, movement_count: Optional[int] = None):
        if not np.asarray(phase_mask).any(axis=-1).all():
            raise ModelError("every phase is masked")
        B, P = phase_mask.shape
        M = U.shape[-1]
        m_rows = None if M == self.cfg.M_max else np.arange(M)
        h = T.concat([h_sp, h_int], axis=-1)
        logits = self.f_pi(h).reshape(B, P)
        policy = T.masked_softmax(logits, phase_mask)
        log_policy = T.masked_log_softmax(logits, phase_mask)
        h_a = self.mlp_a(Tensor(U), rows=m_rows).reshape(B, 1, self.cfg.d)
        A = self.act_att(h, h_a, np.ones((B, 1)))
        h2 = T.concat([h, A], axis=-1)
        value = (self.f_v(h2).reshape(B, P) * phase_mask).sum(axis=-1)
        return logits, policy, log_policy, value

    def forward(self, obs: EncodedObservation, gru_hidden, rng=None,
                eps: Optional[np.ndarray] = None) -> ForwardOut:
        h_sp, h_new = self.gfe_forward(obs, gru_hidden)
        mu, logvar, z, preds = self.ise_forward(obs, rng=rng, eps=eps)
        pm = obs.phase_mask
        h_int = mu * pm[..., None]
        logits, policy, log_policy, value = self.heads_forward(h_sp, h_int, obs.U, pm)
        return ForwardOut(h_sp, h_new, mu, logvar, z, preds, h_int, logits, policy,
                          log_policy, value)

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.cfg.d))

    # -- acting -----------------------------------------------------------
    def act(self, obs: EncodedObservation, gru_hidden, rng: np.random.Generator,
            mode: str = "sample"):
        """Run the network without gradients and pick one phase per batch row."""
        if mode not in ("sample", "greedy"):
            raise ModelError(f"unknown mode {mode!r}")
        with no_grad():
            out = self.forward(obs, gru_hidden, rng=rng)
        policy = out.policy.data
        actions = select_actions(policy, rng, mode)
        steps = []
        for b, a in enumerate(actions):
            steps.append(AgentStep(
                h_sp=out.h_sp.data[b], h_int=out.h_int.data[b], mu=out.mu.data[b],
                logvar=out.logvar.data[b], next_state_preds=out.preds.data[b],
                policy=policy[b], value=float(out.value.data[b]),
                gru_hidden=out.gru_hidden.data[b], action=int(a),
                log_prob=float(out.log_policy.data[b, a]),
            ))
        return steps

    # -- persistence ------------------------------------------------------
    def manifest(self) -> dict:
        return {"model": asdict(self.cfg)}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict(), self.manifest())

    @classmethod
    def load(cls, path) -> "UnicornNet":
        tensors, manifest = load_checkpoint(path)
        if "model" not in manifest:
            raise ModelError(f"{path}: manifest lacks model hyperparameters")
        net = cls(ModelConfig(**manifest["model"]))
        net.load_state_dict(tensors)
        return net

    def require_compatible(self, M_max: int, P_max: int, catalog_size: int) -> None:
        cfg = self.cfg
        if (cfg.M_max, cfg.P_max, cfg.catalog_size) != (M_max, P_max, catalog_size):
            raise ModelError(
                f"checkpoint caps (M_max={cfg.M_max}, P_max={cfg.P_max}, "
                f"catalog_size={cfg.catalog_size}) do not match scenarios "
                f"(M_max={M_max}, P_max={P_max}, catalog_size={catalog_size})"
            )


def select_actions(policy: np.ndarray, rng: np.random.Generator, mode: str) -> np.ndarray:
    if mode == "greedy":
        return np.argmax(policy, axis=-1)  # first maximum on ties
    u = rng.random(policy.shape[0])
    cdf = np.cumsum(policy, axis=-1)
    cdf[:, -1] = np.inf
    acts = (u[:, None] >= cdf).sum(axis=-1)
    # never land on a zero-probability (padded) phase through rounding
    for b, a in enumerate(acts):
        if policy[b, a] <= 0:
            acts[b] = int(np.flatnonzero(policy[b] > 0)[-1])
    return acts


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over the last axis."""
    return (T.exp(logvar) + mu * mu - 1.0 - logvar).sum(axis=-1) * 0.5


def elbo_loss(pred, target, mu, logvar, mask=None) -> Tensor:
    """Reconstruction MSE plus KL to the standard normal prior.

    Works on a single vector or a batch (leading axis); batches are averaged.
    ``mask`` restricts the MSE to real (unpadded) entries.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    logvar = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ModelError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if mu.shape != logvar.shape:
        raise ModelError("mu and logvar shapes differ")
    if mask is None:
        mask = np.ones(target.shape)
    diff = pred - target
    mse = (T.square(diff) * mask).sum(axis=-1) * (1.0 / np.maximum(mask.sum(axis=-1), 1.0))
    loss = mse + kl_standard_normal(mu, logvar)
    return loss.mean() if loss.ndim else loss
