"""Minimalist world-action-model policy.

A small convolutional backbone and a proprioception token are fused by
self-attention into one shared feature, read out by two linear heads: an
action-chunk head and a latent-action head. Batches mix action-labeled and
actionless samples; actionless samples substitute a learnable default token
for proprioception and contribute only to the latent head's loss. Evaluation
uses the action head alone.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .envdata import PusherEnv, EnvConfig
from .errors import EmptyDatasetError, NonFiniteLossError, ShapeMismatchError
from .nets import TransformerStack, seeded_init_
from .rla import RLAModel
from .seeding import derive_seed, np_rng
from .tokens import ImageObs


@dataclass
class TrainingSample:
    image: np.ndarray            # (H, W, 3) float32 in [0, 1]
    proprio: np.ndarray          # (Dp,) float32, or None for actionless video
    action_target: np.ndarray    # (n_pred, A) float32, or None
    rla_target: np.ndarray       # (|z|,) float32, always present

    def __post_init__(self):
        if (self.action_target is None) != (self.proprio is None):
            raise ValueError("action_target and proprio must be present together")


class PolicyModel(nn.Module):
    def __init__(self, image_hw=(64, 64), width: int = 128, conv_channels=(32, 64, 96, 128),
                 fusion_layers: int = 2, heads: int = 4, proprio_dim: int = 2,
                 action_dim: int = 2, n_pred: int = 8, n_exec: int = 6,
                 rla_dim: int = 128, seed: int = 0):
        super().__init__()
        self.image_hw = tuple(image_hw)
        self.width = width
        self.proprio_dim = proprio_dim
        self.action_dim = action_dim
        self.n_pred = n_pred
        self.n_exec = n_exec
        self.rla_dim = rla_dim
        self.conv_channels = tuple(conv_channels)

        layers = []
        prev = 3
        for ch in conv_channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.GELU()]
            prev = ch
        self.visual_encoder = nn.Sequential(*layers)
        grid = image_hw[0] // (2 ** len(conv_channels))
        self.n_visual_tokens = grid * grid
        self.to_tokens = nn.Conv2d(prev, width, 1)
        self.visual_pos = nn.Parameter(torch.zeros(self.n_visual_tokens, width))

        self.proprio_embed = nn.Linear(proprio_dim, width, bias=False)
        self.default_proprio_token = nn.Parameter(torch.zeros(width))

        self.fusion = TransformerStack(fusion_layers, width, heads)
        self.action_head = nn.Linear(width, n_pred * action_dim)
        self.rla_head = nn.Linear(width, rla_dim)

        seeded_init_(self, derive_seed(seed, "policy"))

    def arch_config(self) -> dict:
        return {
            "kind": "policy",
            "image_hw": list(self.image_hw),
            "width": self.width,
            "conv_channels": list(self.conv_channels),
            "fusion_layers": len(self.fusion.blocks),
            "heads": self.fusion.blocks[0].attn.num_heads,
            "proprio_dim": self.proprio_dim,
            "action_dim": self.action_dim,
            "n_pred": self.n_pred,
            "n_exec": self.n_exec,
            "rla_dim": self.rla_dim,
        }

    @classmethod
    def from_arch(cls, cfg: dict) -> "PolicyModel":
        cfg = dict(cfg)
        cfg.pop("kind", None)
        cfg["image_hw"] = tuple(cfg["image_hw"])
        cfg["conv_channels"] = tuple(cfg["conv_channels"])
        return cls(**cfg)

    def features(self, images: torch.Tensor, proprio: torch.Tensor,
                 has_proprio: torch.Tensor) -> torch.Tensor:
        """((B,H,W,3), (B,Dp), (B,) bool) -> pooled feature (B, width).

        Rows with has_proprio False use the learnable default token.
        """
        if images.shape[1:3] != self.image_hw:
            raise ShapeMismatchError(
                f"policy expects {self.image_hw} images, got {tuple(images.shape[1:3])}"
            )
        b = images.shape[0]
        x = self.visual_encoder(images.permute(0, 3, 1, 2))
        toks = self.to_tokens(x).flatten(2).transpose(1, 2) + self.visual_pos
        ptok = self.proprio_embed(proprio)
        mask = has_proprio.to(ptok.dtype)[:, None]
        ptok = mask * ptok + (1.0 - mask) * self.default_proprio_token
        fused = self.fusion(torch.cat([toks, ptok[:, None, :]], dim=1))
        return fused.mean(dim=1)

    def forward(self, images: torch.Tensor, proprio: torch.Tensor,
                has_proprio: torch.Tensor):
        feat = self.features(images, proprio, has_proprio)
        chunk = self.action_head(feat).reshape(-1, self.n_pred, self.action_dim)
        return chunk, self.rla_head(feat), feat


def policy_forward(image: ImageObs, proprio, model: PolicyModel):
    """Single-observation forward; proprio may be None (absent)."""
    img = torch.from_numpy(np.asarray(image.pixels, dtype=np.float32))[None]
    if proprio is None:
        p = torch.zeros(1, model.proprio_dim)
        has = torch.zeros(1, dtype=torch.bool)
    else:
        p = torch.from_numpy(np.asarray(proprio, dtype=np.float32))[None]
        has = torch.ones(1, dtype=torch.bool)
    with torch.inference_mode():
        chunk, rla_pred, _ = model(img, p, has)
    return chunk[0].numpy().copy(), rla_pred[0].numpy().copy()


def act(image: ImageObs, proprio, model: PolicyModel, n_exec: int = None) -> np.ndarray:
    """Executable slice of the predicted chunk: the first n_exec rows."""
    n_exec = model.n_exec if n_exec is None else n_exec
    chunk, _ = policy_forward(image, proprio, model)
    return chunk[:n_exec]


def compose_batch(labeled_pool, actionless_pool, batch_size: int, seed: int):
    """ceil(B/2) labeled + floor(B/2) actionless samples in seeded shuffled
    order. Falls back to a single pool (with a warning flag) when the other is
    empty."""
    if not labeled_pool and not actionless_pool:
        raise EmptyDatasetError("both sample pools are empty")
    rng = np_rng(derive_seed(seed, "compose"))
    warned = False
    n_lab = (batch_size + 1) // 2
    n_non = batch_size // 2
    if not actionless_pool:
        n_lab, n_non, warned = batch_size, 0, True
    elif not labeled_pool:
        n_lab, n_non, warned = 0, batch_size, True
    picks = [labeled_pool[int(i)] for i in rng.integers(len(labeled_pool), size=n_lab)] if n_lab else []
    picks += [actionless_pool[int(i)] for i in rng.integers(len(actionless_pool), size=n_non)] if n_non else []
    order = rng.permutation(len(picks))
    return [picks[int(i)] for i in order], warned


def collate(batch) -> dict:
    images = torch.from_numpy(np.stack([s.image for s in batch]))
    b = len(batch)
    first = batch[0]
    dp = len(first.proprio) if first.proprio is not None else None
    if dp is None:
        for s in batch:
            if s.proprio is not None:
                dp = len(s.proprio)
                break
    dp = dp or 2
    proprio = torch.zeros(b, dp)
    has = torch.zeros(b, dtype=torch.bool)
    n_pred, a_dim = None, None
    for s in batch:
        if s.action_target is not None:
            n_pred, a_dim = s.action_target.shape
            break
    actions = torch.zeros(b, n_pred or 1, a_dim or 1)
    act_mask = torch.zeros(b)
    rla = torch.from_numpy(np.stack([s.rla_target for s in batch]))
    for i, s in enumerate(batch):
        if s.proprio is not None:
            proprio[i] = torch.from_numpy(s.proprio)
            has[i] = True
        if s.action_target is not None:
            actions[i] = torch.from_numpy(s.action_target)
            act_mask[i] = 1.0
    return {"images": images, "proprio": proprio, "has_proprio": has,
            "actions": actions, "action_mask": act_mask, "rla_targets": rla}


def wam_losses(model: PolicyModel, c: dict):
    """(masked action MSE, latent-head MSE) as tensors."""
    chunk, rla_pred, _ = model(c["images"], c["proprio"], c["has_proprio"])
    mask = c["action_mask"]
    n_labeled = mask.sum()
    if float(n_labeled) > 0:
        per = ((chunk - c["actions"]) ** 2).mean(dim=(1, 2))
        action_loss = (per * mask).sum() / n_labeled
    else:
        action_loss = chunk.sum() * 0.0
    rla_loss = ((rla_pred - c["rla_targets"]) ** 2).mean()
    return action_loss, rla_loss


def train_wam_step(batch, model: PolicyModel, frozen_rla, opt: torch.optim.Optimizer,
                   w_rla: float = 1.0):
    """One update on a mixed batch; returns (action_loss, rla_loss) floats.

    `frozen_rla` is accepted for interface parity with the data pipeline (all
    `rla_target`s were produced by it); it is never touched here, which keeps
    the frozen contract trivially intact.
    """
    c = batch if isinstance(batch, dict) else collate(batch)
    action_loss, rla_loss = wam_losses(model, c)
    total = action_loss + w_rla * rla_loss
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"wam loss is {float(total)}")
    opt.zero_grad()
    total.backward()
    opt.step()
    return float(action_loss), float(rla_loss)


# -- data pipeline -------------------------------------------------------------

def build_policy_pools(store, backbone, frozen_rla: RLAModel, labeled_fraction: float,
                       n_pred: int, horizon_max: int, seed: int, stride: int = 2,
                       preprocess_frames=None):
    """Slice a store into labeled/actionless sample pools with latent targets.

    Episodes are assigned whole to the labeled or actionless pool (a seeded
    choice of `labeled_fraction` of them keep their actions/proprioception).
    Latent targets come from the frozen autoencoder over (t, t+h) pairs with
    h drawn uniformly from [1, horizon_max]. `preprocess_frames` optionally
    maps an episode's (T,H,W,3) float frames to the policy's observation
    domain.
    """
    eps = list(store.episodes())
    if not eps:
        raise EmptyDatasetError("empty store")
    rng = np_rng(derive_seed(seed, "pool-split"))
    n_labeled = max(1, int(round(labeled_fraction * len(eps))))
    labeled_ids = set(rng.permutation(len(eps))[:n_labeled].tolist())

    labeled, actionless = [], []
    for ei, ep in enumerate(eps):
        frames = ep.frames.astype(np.float32) / 255.0
        if preprocess_frames is not None:
            frames = preprocess_frames(frames)
        tokens = backbone.encode_batch(frames)
        t_max = ep.length - 1 - n_pred
        if t_max < 1:
            continue
        ts = list(range(0, t_max + 1, stride))
        hs = [int(np_rng(derive_seed(seed, "h", ei, t)).integers(
            1, min(horizon_max, ep.length - 1 - t) + 1)) for t in ts]
        with torch.inference_mode():
            res = torch.stack([tokens[t + h] - tokens[t] for t, h in zip(ts, hs)])
            z = frozen_rla.encode_batch(res).reshape(len(ts), -1).numpy().astype(np.float32)
        for j, t in enumerate(ts):
            if ei in labeled_ids:
                labeled.append(TrainingSample(
                    image=frames[t], proprio=ep.proprio[t].copy(),
                    action_target=ep.actions[t:t + n_pred].copy(), rla_target=z[j]))
            else:
                actionless.append(TrainingSample(
                    image=frames[t], proprio=None, action_target=None, rla_target=z[j]))
    return labeled, actionless


def train_policy(labeled_pool, actionless_pool, model: PolicyModel, frozen_rla,
                 steps: int, batch_size: int = 32, lr: float = 3e-4,
                 weight_decay: float = 1e-4, w_rla: float = 1.0, seed: int = 0,
                 n_checkpoints: int = 8, log_every: int = 0):
    """Iteration-matched training driver; returns (checkpoints, loss curves).

    Checkpoints are deep state_dict copies taken at evenly spaced steps.
    """
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    every = max(1, steps // max(n_checkpoints, 1))
    checkpoints, act_curve, rla_curve = [], [], []
    for step in range(steps):
        batch, _ = compose_batch(labeled_pool, actionless_pool, batch_size,
                                 derive_seed(seed, "batch", step))
        a_l, r_l = train_wam_step(batch, model, frozen_rla, opt, w_rla=w_rla)
        sched.step()
        act_curve.append(a_l)
        rla_curve.append(r_l)
        if (step + 1) % every == 0 or step + 1 == steps:
            if not checkpoints or checkpoints[-1][0] != step + 1:
                checkpoints.append((step + 1, {k: v.detach().clone()
                                               for k, v in model.state_dict().items()}))
        if log_every and (step + 1) % log_every == 0:
            print(f"policy step {step + 1}/{steps} action {a_l:.5f} rla {r_l:.5f}")
    return checkpoints, {"action_loss": act_curve, "rla_loss": rla_curve}


def evaluate_policy(model: PolicyModel, seeds, task: str = "push",
                    max_steps: int = 60, use_proprio: bool = True,
                    preprocess=None, env_cfg: EnvConfig = EnvConfig()) -> dict:
    """Success-rate protocol: fixed seed range, per-episode step cap,
    re-planning every n_exec steps. Deterministic given (policy, seeds)."""
    env = PusherEnv(env_cfg)
    per_episode = []
    for seed in seeds:
        state = env.reset(seed, task)
        steps = 0
        success = env.success(state)
        while steps < max_steps and not success:
            frame = env.render(state)
            if preprocess is not None:
                frame = preprocess(frame)
            obs = ImageObs(pixels=frame, time_index=steps)
            proprio = state.agent.astype(np.float32) if use_proprio else None
            chunk = act(obs, proprio, model)
            for a in chunk:
                state = env.step(state, a)
                steps += 1
                if env.success(state):
                    success = True
                    break
                if steps >= max_steps:
                    break
        per_episode.append({"seed": int(seed), "success": bool(success),
                            "steps": int(steps)})
    rate = float(np.mean([e["success"] for e in per_episode])) if per_episode else 0.0
    return {"task": task, "seeds": [int(s) for s in seeds],
            "success_rate": rate, "per_episode": per_episode}
