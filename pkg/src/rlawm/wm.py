"""Latent-action world model.

A condition transformer compresses (current tokens, embedded action chunk)
into K condition tokens, computed once per prediction. A flow transformer
over 2K tokens (condition + noisy latent) predicts the velocity that
transports Gaussian noise to the latent action; a left-endpoint Euler solver
integrates it. Decoding the sampled latent with the current tokens yields the
future tokens. A direct-regression head sharing the condition network serves
as the deterministic baseline.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    ModeUnavailableError,
    NonFiniteLossError,
    ShapeMismatchError,
    UnknownEmbodimentError,
)
from .nets import TransformerStack, seeded_init_, time_embedding
from .rla import RLAModel, ResidualLatent
from .seeding import derive_seed, torch_gen
from .tokens import StateTokens


@dataclass
class ActionChunk:
    actions: np.ndarray  # (H_max, A) float32; rows >= valid_len are zero
    valid_len: int
    embodiment_id: str = "pusher-v1"

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float32)
        h_max = self.actions.shape[0]
        if not 1 <= self.valid_len <= h_max:
            raise ValueError(f"valid_len {self.valid_len} outside [1, {h_max}]")
        # Canonicalize padding so equal chunks embed identically.
        self.actions = self.actions.copy()
        self.actions[self.valid_len:] = 0.0

    @property
    def horizon_max(self) -> int:
        return self.actions.shape[0]


class WMModel(nn.Module):
    def __init__(self, token_len: int, token_channels: int, latent_tokens: int = 8,
                 latent_dim: int = 16, width: int = 128, heads: int = 4,
                 cond_layers: int = 3, flow_layers: int = 3, horizon_max: int = 8,
                 action_dims: dict = None, n_action_tokens: int = 1,
                 with_regression_head: bool = False, seed: int = 0):
        super().__init__()
        self.token_len = token_len
        self.token_channels = token_channels
        self.latent_tokens = latent_tokens
        self.latent_dim = latent_dim
        self.width = width
        self.horizon_max = horizon_max
        self.n_action_tokens = n_action_tokens
        self.action_dims = dict(action_dims or {"pusher-v1": 2})

        self.action_embed = nn.ModuleDict({
            name: nn.Sequential(
                nn.Linear(horizon_max * a_dim, width),
                nn.GELU(),
                nn.Linear(width, n_action_tokens * width),
            )
            for name, a_dim in self.action_dims.items()
        })
        self.state_in = nn.Linear(token_channels, width)
        self.state_pos = nn.Parameter(torch.zeros(token_len, width))
        self.cond_queries = nn.Parameter(torch.zeros(latent_tokens, width))
        self.cond_net = TransformerStack(cond_layers, width, heads)

        self.flow_latent_in = nn.Linear(latent_dim, width)
        self.flow_latent_pos = nn.Parameter(torch.zeros(latent_tokens, width))
        self.flow_net = TransformerStack(flow_layers, width, heads)
        self.flow_out = nn.Linear(width, latent_dim)

        self.regression_head = (
            nn.Linear(latent_tokens * width, token_len * token_channels)
            if with_regression_head else None
        )

        # Instrumentation: number of condition-network evaluations.
        self.condition_calls = 0

        seeded_init_(self, derive_seed(seed, "wm"))

    def arch_config(self) -> dict:
        any_embed = next(iter(self.action_embed.values()))
        return {
            "kind": "wm",
            "token_len": self.token_len,
            "token_channels": self.token_channels,
            "latent_tokens": self.latent_tokens,
            "latent_dim": self.latent_dim,
            "width": self.width,
            "heads": self.cond_net.blocks[0].attn.num_heads,
            "cond_layers": len(self.cond_net.blocks),
            "flow_layers": len(self.flow_net.blocks),
            "horizon_max": self.horizon_max,
            "action_dims": dict(self.action_dims),
            "n_action_tokens": self.n_action_tokens,
            "with_regression_head": self.regression_head is not None,
        }

    @classmethod
    def from_arch(cls, cfg: dict) -> "WMModel":
        cfg = dict(cfg)
        cfg.pop("kind", None)
        return cls(**cfg)

    def _embed_actions_batch(self, actions: torch.Tensor, embodiment_id: str) -> torch.Tensor:
        """(B, H_max, A) -> (B, n_action_tokens, width)."""
        if embodiment_id not in self.action_embed:
            raise UnknownEmbodimentError(embodiment_id)
        b = actions.shape[0]
        out = self.action_embed[embodiment_id](actions.reshape(b, -1))
        return out.reshape(b, self.n_action_tokens, self.width)

    def condition_batch(self, state: torch.Tensor, actions: torch.Tensor,
                        embodiment_id: str) -> torch.Tensor:
        """((B, L, C), (B, H_max, A)) -> (B, K, width)."""
        if state.shape[1:] != (self.token_len, self.token_channels):
            raise ShapeMismatchError(
                f"state tokens {tuple(state.shape[1:])} do not match model "
                f"({self.token_len}, {self.token_channels})"
            )
        self.condition_calls += 1
        b = state.shape[0]
        toks = self.state_in(state) + self.state_pos
        act = self._embed_actions_batch(actions, embodiment_id)
        q = self.cond_queries.expand(b, -1, -1)
        out = self.cond_net(torch.cat([toks, act, q], dim=1))
        return out[:, -self.latent_tokens:]

    def flow_velocity(self, cond: torch.Tensor, z_tau: torch.Tensor,
                      tau: torch.Tensor) -> torch.Tensor:
        """((B, K, W), (B, K, D), (B,)) -> (B, K, D) predicted velocity.

        The flow transformer sees exactly 2K tokens: the fixed condition tokens
        and the noisy latent tokens (with the time embedding added).
        """
        zt = self.flow_latent_in(z_tau) + self.flow_latent_pos
        zt = zt + time_embedding(tau, self.width)[:, None, :]
        x = torch.cat([cond, zt], dim=1)
        assert x.shape[1] == 2 * self.latent_tokens
        out = self.flow_net(x)
        return self.flow_out(out[:, self.latent_tokens:])

    def regression_batch(self, cond: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        if self.regression_head is None:
            raise ModeUnavailableError("model built without a regression head")
        b = cond.shape[0]
        delta = self.regression_head(cond.reshape(b, -1))
        return state + delta.reshape(b, self.token_len, self.token_channels)


def _chunk_tensor(a: ActionChunk, model: WMModel) -> torch.Tensor:
    if a.horizon_max != model.horizon_max:
        raise ShapeMismatchError(
            f"chunk horizon {a.horizon_max} does not match model {model.horizon_max}"
        )
    return torch.from_numpy(a.actions)


def embed_actions(a: ActionChunk, model: WMModel) -> torch.Tensor:
    """Deterministic embedding of the padded chunk -> (n_action_tokens, width)."""
    with torch.inference_mode():
        return model._embed_actions_batch(
            _chunk_tensor(a, model)[None], a.embodiment_id
        )[0].clone()


def condition(s_t: StateTokens, a: ActionChunk, model: WMModel) -> torch.Tensor:
    """(state, action chunk) -> K condition tokens; pure function of inputs."""
    with torch.inference_mode():
        return model.condition_batch(
            s_t.tokens[None], _chunk_tensor(a, model)[None], a.embodiment_id
        )[0].clone()


def velocity_target(z, eps, tau):
    """Linear interpolation path: z_tau = tau*z + (1-tau)*eps, v* = z - eps."""
    zv = z.values if isinstance(z, ResidualLatent) else torch.as_tensor(z)
    ev = torch.as_tensor(eps, dtype=zv.dtype)
    if zv.shape != ev.shape:
        raise ShapeMismatchError(f"latent {tuple(zv.shape)} vs noise {tuple(ev.shape)}")
    z_tau = tau * zv + (1.0 - tau) * ev
    return z_tau, zv - ev


def flow_matching_loss(model: WMModel, rla_model: RLAModel, s_t: torch.Tensor,
                       s_th: torch.Tensor, actions: torch.Tensor, embodiment_id: str,
                       seed: int) -> torch.Tensor:
    """Velocity-regression MSE; the only training signal for the flow path."""
    with torch.no_grad():
        z = rla_model.encode_batch(s_th - s_t)
    g = torch_gen(seed)
    eps = torch.randn(z.shape, generator=g, dtype=z.dtype)
    tau = torch.rand(z.shape[0], generator=g, dtype=z.dtype)
    z_tau = tau[:, None, None] * z + (1.0 - tau[:, None, None]) * eps
    v_star = z - eps
    cond = model.condition_batch(s_t, actions, embodiment_id)
    v_hat = model.flow_velocity(cond, z_tau, tau)
    return ((v_hat - v_star) ** 2).mean()


def train_flow_step(batch, model: WMModel, rla_model: RLAModel,
                    opt: torch.optim.Optimizer, seed: int = 0) -> float:
    """One flow-matching update. The latent autoencoder stays frozen."""
    s_t, s_th, actions, embodiment_id = batch
    loss = flow_matching_loss(model, rla_model, s_t, s_th, actions, embodiment_id, seed)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"flow loss is {float(loss)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss)


def regression_loss(model: WMModel, s_t: torch.Tensor, s_th: torch.Tensor,
                    actions: torch.Tensor, embodiment_id: str) -> torch.Tensor:
    cond = model.condition_batch(s_t, actions, embodiment_id)
    pred = model.regression_batch(cond, s_t)
    return ((pred - s_th) ** 2).mean()


def train_regression_step(batch, model: WMModel, opt: torch.optim.Optimizer) -> float:
    """One MSE update of the direct-regression baseline."""
    s_t, s_th, actions, embodiment_id = batch
    loss = regression_loss(model, s_t, s_th, actions, embodiment_id)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"regression loss is {float(loss)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss)


def sample_rla(s_t: StateTokens, a: ActionChunk, model: WMModel, steps: int = 30,
               seed: int = 0) -> ResidualLatent:
    """Integrate the learned velocity field from noise to a latent action.

    Left-endpoint Euler with step 1/steps; the condition tokens are computed
    once and reused across all integration steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    with torch.inference_mode():
        cond = model.condition_batch(
            s_t.tokens[None], _chunk_tensor(a, model)[None], a.embodiment_id
        )
        z = torch.randn((1, model.latent_tokens, model.latent_dim),
                        generator=torch_gen(seed))
        dt = 1.0 / steps
        for k in range(steps):
            tau = torch.full((1,), k * dt, dtype=z.dtype)
            z = z + dt * model.flow_velocity(cond, z, tau)
    return ResidualLatent(values=z[0].clone(), normalized=False)


def predict_next(s_t: StateTokens, a: ActionChunk, model: WMModel,
                 rla_model: RLAModel, mode: str = "flow", steps: int = 30,
                 seed: int = 0) -> StateTokens:
    """One chunk-level prediction: stochastic flow sampling or the
    deterministic regression baseline."""
    if mode == "flow":
        from .rla import decode
        z = sample_rla(s_t, a, model, steps=steps, seed=seed)
        return decode(z, s_t, rla_model)
    if mode == "regression":
        with torch.inference_mode():
            cond = model.condition_batch(
                s_t.tokens[None], _chunk_tensor(a, model)[None], a.embodiment_id
            )
            out = model.regression_batch(cond, s_t.tokens[None])[0]
        return StateTokens(tokens=out.clone(), patch_size=s_t.patch_size,
                           image_hw=s_t.image_hw, backbone_id=s_t.backbone_id)
    raise ValueError(f"unknown mode {mode!r}")


def rollout(s_0: StateTokens, chunks, model: WMModel, rla_model: RLAModel,
            mode: str = "flow", steps: int = 30, seed: int = 0) -> list:
    """Autoregressive unroll; returns every intermediate prediction."""
    if not chunks:
        raise ValueError("rollout needs at least one action chunk")
    preds = []
    state = s_0
    for k, chunk in enumerate(chunks):
        try:
            state = predict_next(state, chunk, model, rla_model, mode=mode,
                                 steps=steps, seed=derive_seed(seed, "rollout", k))
        except Exception as e:
            raise type(e)(f"rollout step {k}: {e}") from e
        preds.append(state)
    return preds


def train_wm(batch_source, model: WMModel, rla_model, steps: int, lr: float = 3e-4,
             mode: str = "flow", seed: int = 0, log_every: int = 0) -> list:
    """Drive flow or regression training over a seeded batch source."""
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        batch = batch_source(step)
        if mode == "flow":
            losses.append(train_flow_step(batch, model, rla_model, opt,
                                          seed=derive_seed(seed, "flow-noise", step)))
        else:
            losses.append(train_regression_step(batch, model, opt))
        if log_every and (step + 1) % log_every == 0:
            print(f"wm[{mode}] step {step + 1}/{steps} loss {losses[-1]:.5f}")
    return losses
