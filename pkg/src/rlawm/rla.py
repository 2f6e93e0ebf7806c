"""Residual latent action autoencoder.

Encodes the token residual between two frames into a compact latent (K query
vectors of dimension D) and decodes (latent, current tokens) back to the
future tokens in one feedforward pass. Also hosts the latent normalization
statistics and the noise-interpolation probe.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import (
    InsufficientDataError,
    NonFiniteLossError,
    NormalizedLatentError,
    ShapeMismatchError,
    StatsMissingError,
)
from .nets import TransformerStack, seeded_init_
from .seeding import derive_seed, torch_gen
from .tokens import StateTokens


@dataclass
class ResidualLatent:
    values: torch.Tensor  # (K, D)
    normalized: bool = False

    @property
    def size(self) -> int:
        return self.values.numel()


class RLAModel(nn.Module):
    """Transformer autoencoder over token residuals.

    Encoder: residual tokens + K learnable queries through self-attention,
    query outputs projected (one shared linear map) to dimension D.
    Decoder: latent tokens + current-state tokens through self-attention,
    state-position outputs read out as a delta on the current tokens.
    """

    def __init__(self, token_len: int, token_channels: int, latent_tokens: int = 8,
                 latent_dim: int = 16, layers: int = 4, heads: int = 4, width: int = 128,
                 seed: int = 0, check_compact: bool = True):
        super().__init__()
        if check_compact and latent_tokens * latent_dim * 4 >= token_len * token_channels:
            raise ValueError(
                f"latent size {latent_tokens * latent_dim} must stay below "
                f"(L*C)/4 = {token_len * token_channels / 4}"
            )
        self.token_len = token_len
        self.token_channels = token_channels
        self.latent_tokens = latent_tokens
        self.latent_dim = latent_dim
        self.width = width

        self.enc_in = nn.Linear(token_channels, width)
        self.enc_pos = nn.Parameter(torch.zeros(token_len, width))
        self.queries = nn.Parameter(torch.zeros(latent_tokens, width))
        self.encoder = TransformerStack(layers, width, heads)
        self.latent_proj = nn.Linear(width, latent_dim)

        self.dec_latent_in = nn.Linear(latent_dim, width)
        self.dec_latent_pos = nn.Parameter(torch.zeros(latent_tokens, width))
        self.dec_state_in = nn.Linear(token_channels, width)
        self.dec_pos = nn.Parameter(torch.zeros(token_len, width))
        self.decoder = TransformerStack(layers, width, heads)
        self.dec_out = nn.Linear(width, token_channels)

        self.register_buffer("stats_mu", torch.zeros(latent_tokens, latent_dim))
        self.register_buffer("stats_sigma", torch.ones(latent_tokens, latent_dim))
        self.register_buffer("stats_ready", torch.tensor(False))

        seeded_init_(self, derive_seed(seed, "rla"))

    def arch_config(self) -> dict:
        return {
            "kind": "rla",
            "token_len": self.token_len,
            "token_channels": self.token_channels,
            "latent_tokens": self.latent_tokens,
            "latent_dim": self.latent_dim,
            "layers": len(self.encoder.blocks),
            "heads": self.encoder.blocks[0].attn.num_heads,
            "width": self.width,
        }

    @classmethod
    def from_arch(cls, cfg: dict) -> "RLAModel":
        return cls(
            token_len=cfg["token_len"], token_channels=cfg["token_channels"],
            latent_tokens=cfg["latent_tokens"], latent_dim=cfg["latent_dim"],
            layers=cfg["layers"], heads=cfg["heads"], width=cfg["width"],
        )

    # Batched tensor paths used by training loops.
    def encode_batch(self, residual: torch.Tensor) -> torch.Tensor:
        """(B, L, C) residual -> (B, K, D). The encoder sees only the residual."""
        b = residual.shape[0]
        toks = self.enc_in(residual) + self.enc_pos
        q = self.queries.expand(b, -1, -1)
        out = self.encoder(torch.cat([toks, q], dim=1))
        return self.latent_proj(out[:, self.token_len:])

    def decode_batch(self, z: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        """((B, K, D), (B, L, C)) -> (B, L, C), single feedforward pass."""
        zt = self.dec_latent_in(z) + self.dec_latent_pos
        st = self.dec_state_in(state) + self.dec_pos
        out = self.decoder(torch.cat([zt, st], dim=1))
        return state + self.dec_out(out[:, self.latent_tokens:])


def _check_pair(s_t: StateTokens, s_th: StateTokens) -> None:
    if s_t.tokens.shape != s_th.tokens.shape:
        raise ShapeMismatchError(
            f"token shapes differ: {tuple(s_t.tokens.shape)} vs {tuple(s_th.tokens.shape)}"
        )
    if s_t.backbone_id != s_th.backbone_id:
        raise ShapeMismatchError(
            f"backbone mismatch: {s_t.backbone_id} vs {s_th.backbone_id}"
        )


def encode(s_t: StateTokens, s_th: StateTokens, model: RLAModel) -> ResidualLatent:
    _check_pair(s_t, s_th)
    with torch.inference_mode():
        z = model.encode_batch((s_th.tokens - s_t.tokens)[None])[0]
    return ResidualLatent(values=z.clone(), normalized=False)


def decode(z: ResidualLatent, s_t: StateTokens, model: RLAModel) -> StateTokens:
    if z.normalized:
        raise NormalizedLatentError("denormalize the latent before decoding")
    if tuple(z.values.shape) != (model.latent_tokens, model.latent_dim):
        raise ShapeMismatchError(
            f"latent shape {tuple(z.values.shape)} does not match model "
            f"({model.latent_tokens}, {model.latent_dim})"
        )
    with torch.inference_mode():
        out = model.decode_batch(z.values[None], s_t.tokens[None])[0]
    return StateTokens(tokens=out.clone(), patch_size=s_t.patch_size,
                       image_hw=s_t.image_hw, backbone_id=s_t.backbone_id)


def reconstruction_loss(model: RLAModel, s_t: torch.Tensor, s_th: torch.Tensor) -> torch.Tensor:
    """L1 + MSE, each with weight 1.0, on the decoded future tokens."""
    z = model.encode_batch(s_th - s_t)
    pred = model.decode_batch(z, s_t)
    err = pred - s_th
    return err.abs().mean() + (err ** 2).mean()


def train_step(batch, model: RLAModel, opt: torch.optim.Optimizer) -> float:
    """One optimizer update on a batch of (s_t, s_th) token tensors.

    Returns the loss evaluated before the update. A non-finite loss raises and
    leaves the parameters untouched.
    """
    s_t, s_th = batch
    if s_t.shape[0] == 0:
        raise InsufficientDataError("empty batch")
    loss = reconstruction_loss(model, s_t, s_th)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"reconstruction loss is {float(loss)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss)


def estimate_stats(pairs, model: RLAModel) -> tuple:
    """Per-coordinate mean and population std of encoded latents over `pairs`.

    `pairs` is (s_t, s_th) stacked tensors of shape (N, L, C). Sigma is floored
    at 1e-6 and both are stored on the model for the interpolation probe.
    """
    s_t, s_th = pairs
    if s_t.shape[0] < 2:
        raise InsufficientDataError("need at least 2 pairs to estimate stats")
    with torch.inference_mode():
        zs = []
        for i in range(0, s_t.shape[0], 64):
            zs.append(model.encode_batch(s_th[i:i + 64] - s_t[i:i + 64]))
        z = torch.cat(zs)
    mu = z.mean(dim=0)
    sigma = z.std(dim=0, unbiased=False).clamp_min(1e-6)
    model.stats_mu.copy_(mu)
    model.stats_sigma.copy_(sigma)
    model.stats_ready.fill_(True)
    return mu.clone(), sigma.clone()


def interpolate_probe(s_t: StateTokens, s_th: StateTokens, alpha: float,
                      noise_seed: int, model: RLAModel) -> StateTokens:
    """Decode the denormalized blend alpha*normalized_latent + (1-alpha)*noise."""
    if not bool(model.stats_ready):
        raise StatsMissingError("estimate_stats must run before interpolate_probe")
    z = encode(s_t, s_th, model).values
    zbar = (z - model.stats_mu) / model.stats_sigma
    eps = torch.randn(z.shape, generator=torch_gen(noise_seed))
    blend = alpha * zbar + (1.0 - alpha) * eps
    z_mix = ResidualLatent(values=blend * model.stats_sigma + model.stats_mu, normalized=False)
    return decode(z_mix, s_t, model)


def weights_hash(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in registration order."""
    import hashlib

    h = hashlib.sha256()
    for _, p in module.state_dict().items():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_rla(pair_batches, model: RLAModel, steps: int, lr: float = 3e-4,
              log_every: int = 0) -> list:
    """Drive `train_step` over a seeded batch source.

    `pair_batches` is a callable(step) -> (s_t, s_th) tensors. Returns the loss
    curve. Uses decoupled weight decay (AdamW).
    """
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        losses.append(train_step(pair_batches(step), model, opt))
        if log_every and (step + 1) % log_every == 0:
            print(f"rla step {step + 1}/{steps} loss {losses[-1]:.5f}")
    return losses
