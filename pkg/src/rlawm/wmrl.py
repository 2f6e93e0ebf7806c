"""Reinforcement learning entirely inside the learned world model.

A frozen behavior-cloned policy gets low-rank adapters plus a bounded
residual Gaussian head and a value head. Rollouts never touch the simulator:
each virtual environment tracks a reference demonstration, the world model
advances the state chunk-by-chunk, the renderer provides the next image
observation, and the reward is the negative token L1 distance to the
time-aligned (or terminal) reference frame. Chunk-level PPO optimizes only
the adapters and the new heads.
"""

import copy
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .envdata import Episode, EpisodeStore
from .errors import EmptyStoreError, NonFiniteLossError, ShapeMismatchError
from .metrics import feature_l1
from .seeding import derive_seed, np_rng, torch_gen
from .tokens import ImageObs, StateTokens, encode_image, render_tokens
from .wam import PolicyModel
from .wm import ActionChunk, WMModel, predict_next


# -- LoRA ----------------------------------------------------------------------

class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, seed: int):
        super().__init__()
        self.base = base
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        self.scaling = alpha / rank
        g = torch_gen(seed)
        with torch.no_grad():
            self.down.weight.normal_(0.0, 1.0 / math.sqrt(base.in_features), generator=g)
            self.up.weight.zero_()

    def forward(self, x):
        return self.base(x) + self.scaling * self.up(self.down(x))


class LoRAConv2d(nn.Module):
    def __init__(self, base: nn.Conv2d, rank: int, alpha: float, seed: int):
        super().__init__()
        self.base = base
        self.down = nn.Conv2d(base.in_channels, rank, base.kernel_size,
                              stride=base.stride, padding=base.padding, bias=False)
        self.up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        self.scaling = alpha / rank
        g = torch_gen(seed)
        fan_in = base.in_channels * base.kernel_size[0] * base.kernel_size[1]
        with torch.no_grad():
            self.down.weight.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
            self.up.weight.zero_()

    def forward(self, x):
        return self.base(x) + self.scaling * self.up(self.down(x))


def inject_lora(module: nn.Module, rank: int = 8, alpha: float = 8.0, seed: int = 0) -> int:
    """Wrap every plain Linear/Conv2d in low-rank adapters (zero at init).

    Attention out-projections are skipped: MultiheadAttention reads their
    weights directly in its fused forward, so wrapping them would break it.
    Returns the number of wrapped layers.
    """
    targets = []
    attn_children = set()
    for name, m in module.named_modules():
        if isinstance(m, nn.MultiheadAttention):
            for _, sub in m.named_modules():
                attn_children.add(id(sub))
    for name, m in module.named_modules():
        if isinstance(m, (LoRALinear, LoRAConv2d)):
            continue
        if isinstance(m, (nn.Linear, nn.Conv2d)) and id(m) not in attn_children:
            targets.append((name, m))
    for i, (name, m) in enumerate(targets):
        parent = module
        parts = name.split(".")
        for p in parts[:-1]:
            parent = getattr(parent, p)
        wrap = LoRALinear if isinstance(m, nn.Linear) else LoRAConv2d
        setattr(parent, parts[-1], wrap(m, rank, alpha, derive_seed(seed, "lora", name)))
    return len(targets)


def _mlp(dims, seed: int) -> nn.Sequential:
    from .nets import seeded_init_
    layers = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.GELU())
    net = nn.Sequential(*layers)
    seeded_init_(net, seed)
    return net


class AdaptedPolicy(nn.Module):
    """Frozen base policy + LoRA adapters + residual Gaussian chunk head +
    value head. At initialization the action mean equals the base policy's
    output exactly (zero-initialized adapters and residual output layer)."""

    def __init__(self, base: PolicyModel, lora_rank: int = 8, lora_alpha: float = 8.0,
                 bound: float = 0.1, seed: int = 0):
        super().__init__()
        self.base = copy.deepcopy(base)
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_layers = inject_lora(self.base, lora_rank, lora_alpha,
                                       derive_seed(seed, "adapters"))
        self.bound = bound
        self.chunk_dim = base.n_exec * base.action_dim
        width = base.width
        self.residual_head = _mlp([width, 512, 256, 2 * self.chunk_dim],
                                  derive_seed(seed, "residual-head"))
        with torch.no_grad():
            self.residual_head[-1].weight.zero_()
            self.residual_head[-1].bias.zero_()
        self.value_head = _mlp([width, 128, 1], derive_seed(seed, "value-head"))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def dist_params(self, images: torch.Tensor):
        """(B,H,W,3) -> (mean, std, value); observations carry no
        proprioception inside the world model, so the default token is used."""
        b = images.shape[0]
        proprio = torch.zeros(b, self.base.proprio_dim)
        has = torch.zeros(b, dtype=torch.bool)
        feat = self.base.features(images, proprio, has)
        base_chunk = self.base.action_head(feat).reshape(
            b, self.base.n_pred, self.base.action_dim)[:, :self.base.n_exec]
        out = self.residual_head(feat)
        delta_raw, std_raw = out[:, :self.chunk_dim], out[:, self.chunk_dim:]
        delta = self.bound * torch.tanh(delta_raw)
        sp = nn.functional.softplus(std_raw)
        std = self.bound * sp / (1.0 + sp)
        mean = base_chunk.reshape(b, -1) + delta
        value = self.value_head(feat).squeeze(-1)
        return mean, std, value


def gaussian_log_prob(mean: torch.Tensor, std: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log-density summed over the flattened chunk."""
    var = std ** 2
    return (-0.5 * ((x - mean) ** 2) / var - torch.log(std)
            - 0.5 * math.log(2 * math.pi)).sum(dim=-1)


def gaussian_entropy(std: torch.Tensor) -> torch.Tensor:
    return (0.5 + 0.5 * math.log(2 * math.pi) + torch.log(std)).sum(dim=-1)


# -- rewards and the in-model environment --------------------------------------

def var_reward(s_hat, ref, scale: float = 5.0) -> float:
    """Negative mean absolute token difference, scaled."""
    return -scale * feature_l1(s_hat, ref)


def neural_preprocess(img: ImageObs, backbone, renderer) -> ImageObs:
    """encode -> render round trip; closes the gap between raw frames and the
    renderer-decoded observations seen inside the world model."""
    return render_tokens(encode_image(img, backbone), renderer)


def preprocess_frames(frames: np.ndarray, backbone, renderer) -> np.ndarray:
    """(T,H,W,3) float32 batch variant of neural_preprocess."""
    from .tokens import render_batch
    tokens = backbone.encode_batch(frames)
    return render_batch(tokens, renderer)


@dataclass
class WMTransition:
    s_t: StateTokens
    action_chunk: np.ndarray  # flattened executed chunk
    s_next: StateTokens
    reward: float
    value: float
    log_prob: float
    done: bool


@dataclass
class VAREnvState:
    reference_episode: Episode
    ref_tokens: torch.Tensor        # (T, L, C) tokens of the reference video
    frame_cursor: int
    current_tokens: StateTokens
    current_obs: np.ndarray         # rendered observation for the next policy query
    env_index: int
    seed: int
    reset_count: int = 0
    transitions: int = 0
    episode_return: float = 0.0


@dataclass
class WMRLContext:
    wm: WMModel
    rla: object
    backbone: object
    renderer: object
    reward_mode: str = "aligned"    # "aligned" | "terminal"
    reward_scale: float = 5.0
    ode_steps: int = 10
    max_transitions: int = 4
    _ref_cache: dict = field(default_factory=dict)

    def reference_tokens(self, ep: Episode) -> torch.Tensor:
        key = id(ep)
        if key not in self._ref_cache:
            self._ref_cache[key] = self.backbone.encode_batch(
                ep.frames.astype(np.float32) / 255.0)
        return self._ref_cache[key]


def reset_env(state: VAREnvState, demos: EpisodeStore, ctx: WMRLContext) -> VAREnvState:
    """Reset onto a seeded reference episode; half the time from frame 0,
    otherwise from a uniform intermediate frame. All randomness derives from
    (state.seed, state.reset_count)."""
    if len(demos) == 0:
        raise EmptyStoreError("no reference demonstrations")
    rng = np_rng(derive_seed(state.seed, "reset", state.reset_count))
    ep = demos.episode(int(rng.integers(len(demos))))
    t_len = ep.length
    start_at_zero = rng.uniform() < 0.5
    cursor = 0 if (start_at_zero or t_len < 3) else int(rng.integers(1, t_len - 1))
    frame = ImageObs(pixels=ep.frames[cursor].astype(np.float32) / 255.0)
    obs = neural_preprocess(frame, ctx.backbone, ctx.renderer)
    tokens = encode_image(obs, ctx.backbone)
    return VAREnvState(
        reference_episode=ep,
        ref_tokens=ctx.reference_tokens(ep),
        frame_cursor=cursor,
        current_tokens=tokens,
        current_obs=obs.pixels,
        env_index=state.env_index,
        seed=state.seed,
        reset_count=state.reset_count + 1,
        transitions=0,
        episode_return=0.0,
    )


def env_step(state: VAREnvState, chunk: ActionChunk, ctx: WMRLContext,
             value: float = 0.0, log_prob: float = 0.0):
    """Advance the world model by one action chunk; returns (state', transition).

    The cursor advances by the chunk's valid length (clamped to the reference
    end) and the reward compares the predicted tokens against the
    time-aligned reference frame, or the terminal frame in terminal mode.
    """
    s_next = predict_next(
        state.current_tokens, chunk, ctx.wm, ctx.rla, mode="flow",
        steps=ctx.ode_steps,
        seed=derive_seed(state.seed, "wm-step", state.reset_count, state.transitions),
    )
    t_len = state.reference_episode.length
    cursor = min(state.frame_cursor + chunk.valid_len, t_len - 1)
    ref_idx = t_len - 1 if ctx.reward_mode == "terminal" else cursor
    reward = var_reward(s_next.tokens, state.ref_tokens[ref_idx], ctx.reward_scale)
    done = cursor >= t_len - 1 or state.transitions + 1 >= ctx.max_transitions

    from .tokens import render_batch
    obs = render_batch(s_next.tokens[None], ctx.renderer)[0]

    transition = WMTransition(
        s_t=state.current_tokens,
        action_chunk=np.asarray(chunk.actions[:chunk.valid_len], dtype=np.float32).reshape(-1),
        s_next=s_next,
        reward=float(reward),
        value=float(value),
        log_prob=float(log_prob),
        done=bool(done),
    )
    new_state = VAREnvState(
        reference_episode=state.reference_episode,
        ref_tokens=state.ref_tokens,
        frame_cursor=cursor,
        current_tokens=s_next,
        current_obs=obs,
        env_index=state.env_index,
        seed=state.seed,
        reset_count=state.reset_count,
        transitions=state.transitions + 1,
        episode_return=state.episode_return + float(reward),
    )
    return new_state, transition


# -- advantage estimation and PPO ----------------------------------------------

def gae(transitions, gamma: float, lam: float, bootstrap_value: float = 0.0):
    """Generalized advantage estimation over an ordered transition list.

    delta_k = r_k + gamma*V_{k+1}*(1-done_k) - V_k
    A_k     = delta_k + gamma*lam*(1-done_k)*A_{k+1}
    """
    if not transitions:
        raise ValueError("gae needs at least one transition")
    n = len(transitions)
    adv = np.zeros(n, dtype=np.float64)
    running = 0.0
    next_value = float(bootstrap_value)
    for k in reversed(range(n)):
        tr = transitions[k]
        not_done = 0.0 if tr.done else 1.0
        delta = tr.reward + gamma * next_value * not_done - tr.value
        running = delta + gamma * lam * not_done * running
        adv[k] = running
        next_value = tr.value
    returns = adv + np.array([tr.value for tr in transitions], dtype=np.float64)
    return adv, returns


def clipped_objective(ratio: float, advantage: float, clip: float) -> float:
    """Per-sample clipped surrogate term (un-normalized path)."""
    return min(ratio * advantage,
               float(np.clip(ratio, 1.0 - clip, 1.0 + clip)) * advantage)


@dataclass
class RolloutBuffer:
    transitions: list
    obs: np.ndarray          # (N, H, W, 3)
    actions: np.ndarray      # (N, chunk_dim)
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list


def ppo_update(buffer: RolloutBuffer, policy: AdaptedPolicy, opt: torch.optim.Optimizer,
               cfg: dict) -> dict:
    """One clipped-surrogate update over the whole buffer.

    Advantages are normalized per batch; the loss is exactly surrogate +
    value + entropy terms (no behavior-cloning auxiliary), and only adapter,
    residual-head, and value-head parameters carry gradients.
    """
    clip = float(cfg.get("clip", 0.2))
    ent_coef = float(cfg.get("ent_coef", 1e-3))
    vf_coef = float(cfg.get("vf_coef", 0.5))

    obs = torch.from_numpy(buffer.obs)
    actions = torch.from_numpy(buffer.actions)
    old_log_prob = torch.tensor([tr.log_prob for tr in buffer.transitions])
    old_values = torch.tensor([tr.value for tr in buffer.transitions])
    adv = torch.from_numpy(buffer.advantages).float()
    adv = (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)
    rets = torch.from_numpy(buffer.returns).float()

    mean, std, value = policy.dist_params(obs)
    log_prob = gaussian_log_prob(mean, std, actions)
    ratio = torch.exp(log_prob - old_log_prob)
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)
    policy_loss = -surr.mean()

    v_clip = old_values + torch.clamp(value - old_values, -clip, clip)
    value_loss = 0.5 * torch.max((value - rets) ** 2, (v_clip - rets) ** 2).mean()

    entropy = gaussian_entropy(std).mean()
    loss = policy_loss + vf_coef * value_loss - ent_coef * entropy
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"ppo loss is {float(loss)}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return {"policy_loss": float(policy_loss), "value_loss": float(value_loss),
            "entropy": float(entropy), "loss": float(loss)}


# -- the training loop -----------------------------------------------------------

@dataclass
class WMRLCheckpoint:
    update: int
    mean_episode_reward: float
    mean_transition_reward: float
    policy_state: dict


def _policy_query(policy: AdaptedPolicy, obs: np.ndarray, seed: int):
    with torch.inference_mode():
        mean, std, value = policy.dist_params(torch.from_numpy(obs[None]))
    noise = torch.randn(mean.shape[1], generator=torch_gen(seed))
    action = (mean[0] + std[0] * noise)
    log_prob = gaussian_log_prob(mean[0][None], std[0][None], action[None])[0]
    return (action.numpy().astype(np.float32), float(log_prob), float(value[0]))


def _collect(envs, policy, demos, ctx, steps_per_env, completed_returns):
    """Sequential, worker-invariant rollout collection across env slots."""
    all_tr, all_obs, all_act, all_adv, all_ret = [], [], [], [], []
    h_max = ctx.wm.horizon_max
    n_exec = policy.base.n_exec
    a_dim = policy.base.action_dim
    for i, env in enumerate(envs):
        seg, seg_obs = [], []
        for _ in range(steps_per_env):
            obs = env.current_obs
            act_seed = derive_seed(env.seed, "act", env.reset_count, env.transitions)
            flat, log_prob, value = _policy_query(policy, obs, act_seed)
            padded = np.zeros((h_max, a_dim), dtype=np.float32)
            padded[:n_exec] = np.clip(flat.reshape(n_exec, a_dim), -1.0, 1.0)
            chunk = ActionChunk(actions=padded, valid_len=n_exec)
            # store the unclipped sample for the surrogate ratio
            env, tr = env_step(env, chunk, ctx, value=value, log_prob=log_prob)
            tr.action_chunk = flat
            seg.append(tr)
            seg_obs.append(obs)
            if tr.done:
                completed_returns.append(env.episode_return)
                env = reset_env(env, demos, ctx)
        envs[i] = env
        if seg[-1].done:
            bootstrap = 0.0
        else:
            with torch.inference_mode():
                _, _, v = policy.dist_params(torch.from_numpy(env.current_obs[None]))
            bootstrap = float(v[0])
        adv, ret = gae(seg, ctx_gamma(ctx), ctx_lam(ctx), bootstrap)
        all_tr += seg
        all_obs += seg_obs
        all_act += [tr.action_chunk for tr in seg]
        all_adv.append(adv)
        all_ret.append(ret)
    return envs, RolloutBuffer(
        transitions=all_tr,
        obs=np.stack(all_obs),
        actions=np.stack(all_act),
        advantages=np.concatenate(all_adv),
        returns=np.concatenate(all_ret),
        episode_returns=list(completed_returns),
    )


def ctx_gamma(ctx):
    return getattr(ctx, "gamma", 0.9)


def ctx_lam(ctx):
    return getattr(ctx, "lam", 0.95)


def run_wmrl(demos: EpisodeStore, bc_policy: PolicyModel, wm: WMModel, rla_model,
             backbone, renderer, cfg: dict, seed: int, telemetry_sink=None):
    """PPO inside the world model; returns (checkpoints, telemetry records).

    Environment seeds are mapped from the env index, so results are invariant
    to how env slots are partitioned across workers. The first checkpoint is
    taken before any update (the policy is then exactly the BC policy) and a
    final measurement round follows the last update.
    """
    n_envs = int(cfg.get("n_envs", 8))
    steps_per_env = int(cfg.get("steps_per_env", 4))
    n_updates = int(cfg.get("updates", 40))
    ppo_epochs = int(cfg.get("ppo_epochs", 8))
    ckpt_every = int(cfg.get("checkpoint_every", 10))
    lr = float(cfg.get("lr", 3e-4))

    ctx = WMRLContext(
        wm=wm, rla=rla_model, backbone=backbone, renderer=renderer,
        reward_mode=str(cfg.get("reward_mode", "aligned")),
        reward_scale=float(cfg.get("reward_scale", 5.0)),
        ode_steps=int(cfg.get("ode_steps", 10)),
        max_transitions=int(cfg.get("max_transitions", 4)),
    )
    ctx.gamma = float(cfg.get("gamma", 0.9))
    ctx.lam = float(cfg.get("lam", 0.95))

    policy = AdaptedPolicy(
        bc_policy, lora_rank=int(cfg.get("lora_rank", 8)),
        lora_alpha=float(cfg.get("lora_alpha", 8.0)),
        bound=float(cfg.get("action_bound", 0.1)),
        seed=derive_seed(seed, "adapted-policy"),
    )
    opt = torch.optim.AdamW(policy.trainable_parameters(), lr=lr)

    envs = []
    for i in range(n_envs):
        blank = VAREnvState(reference_episode=None, ref_tokens=None, frame_cursor=0,
                            current_tokens=None, current_obs=None, env_index=i,
                            seed=derive_seed(seed, "env", i))
        envs.append(reset_env(blank, demos, ctx))

    import time
    t0 = time.time()
    telemetry, checkpoints = [], []
    completed = deque(maxlen=max(32, 4 * n_envs))

    def snapshot(update, buffer):
        ep_rewards = buffer.episode_returns or [float(np.mean([t.reward for t in buffer.transitions])) * ctx.max_transitions]
        return WMRLCheckpoint(
            update=update,
            mean_episode_reward=float(np.mean(ep_rewards)),
            mean_transition_reward=float(np.mean([t.reward for t in buffer.transitions])),
            policy_state={k: v.detach().clone() for k, v in policy.state_dict().items()},
        )

    for update in range(n_updates + 1):
        completed.clear()
        envs, buffer = _collect(envs, policy, demos, ctx, steps_per_env, completed)
        record = {
            "update": update,
            "mean_reward": float(np.mean([t.reward for t in buffer.transitions])),
            "mean_episode_reward": float(np.mean(buffer.episode_returns)) if buffer.episode_returns else None,
            "losses": None,
            "wall_clock": time.time() - t0,
        }
        # Each checkpoint's reward was measured with exactly the stored policy.
        if update == 0 or update == n_updates or (ckpt_every and update % ckpt_every == 0):
            checkpoints.append(snapshot(update, buffer))
        if update == n_updates:
            telemetry.append(record)
            if telemetry_sink:
                telemetry_sink(record)
            break
        losses = None
        for _ in range(ppo_epochs):
            try:
                losses = ppo_update(buffer, policy, opt, cfg)
            except NonFiniteLossError:
                record["skipped"] = True
                break
        record["losses"] = losses
        telemetry.append(record)
        if telemetry_sink:
            telemetry_sink(record)
    return checkpoints, telemetry
