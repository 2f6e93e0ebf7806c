"""Deterministic 2D pusher environment, scripted experts, episode store, and
the pair/horizon samplers feeding every training loop.

The arena is the unit square rendered to 64x64 with soft-edged shapes (all
rasterization is pure numpy, bit-reproducible). A red agent disc pushes a blue
object (square or tee). A "nudge zone" rectangle makes dynamics multimodal:
the first agent-object contact inside the zone kicks the object left or right
according to a per-episode seeded coin. This is the controlled source of
bimodality used by the prediction-quality comparisons.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyStoreError, StoreFormatError
from .seeding import derive_seed, np_rng

EMBODIMENT = "pusher-v1"
ACTION_DIM = 2
PROPRIO_DIM = 2


@dataclass(frozen=True)
class EnvConfig:
    image_hw: tuple = (64, 64)
    v_max: float = 0.06
    agent_radius: float = 0.07
    obj_half: float = 0.07
    wall: float = 0.03
    nudge_zone: tuple = (0.30, 0.70, 0.50, 0.74)  # x0, x1, y0, y1
    nudge_dx: float = 0.16
    nudge_dy: float = 0.02
    goal_tol: float = 0.08
    edge_softness: float = 1.0 / 64.0


@dataclass
class EnvState:
    agent: np.ndarray  # (2,) float64
    obj: np.ndarray
    goal: np.ndarray
    obj_kind: str = "square"
    show_goal: bool = True
    nudge_coin: int = 1
    nudge_used: bool = False
    t: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.agent.copy(), self.obj.copy(), self.goal.copy(),
                        self.obj_kind, self.show_goal, self.nudge_coin,
                        self.nudge_used, self.t)


class PusherEnv:
    # Instrumentation: total physics steps across all instances. The in-model
    # RL loop must never increment this.
    step_calls = 0

    def __init__(self, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg
        h, w = cfg.image_hw
        xs = (np.arange(w, dtype=np.float64) + 0.5) / w
        ys = 1.0 - (np.arange(h, dtype=np.float64) + 0.5) / h  # y grows upward
        self._gx, self._gy = np.meshgrid(xs, ys)

    # -- resets -------------------------------------------------------------
    def reset(self, seed: int, task: str = "push") -> EnvState:
        rng = np_rng(derive_seed(seed, "env-reset", task))
        cfg = self.cfg
        obj = rng.uniform(0.28, 0.72, size=2)
        # Goal at a moderate distance so scripted pushes fit in one episode.
        goal = obj
        while np.linalg.norm(goal - obj) < 0.20:
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.22, 0.42)
            goal = np.clip(obj + dist * np.array([np.cos(ang), np.sin(ang)]), 0.18, 0.82)
        agent = rng.uniform(cfg.wall + cfg.agent_radius, 1 - cfg.wall - cfg.agent_radius, size=2)
        while np.linalg.norm(agent - obj) < cfg.agent_radius + cfg.obj_half + 0.05:
            agent = rng.uniform(cfg.wall + cfg.agent_radius, 1 - cfg.wall - cfg.agent_radius, size=2)
        coin = 1 if rng.uniform() < 0.5 else -1
        kind = "square" if task != "play" or rng.uniform() < 0.5 else "tee"
        return EnvState(agent=agent, obj=obj, goal=goal, obj_kind=kind,
                        show_goal=(task == "push"), nudge_coin=coin)

    def reset_bimodal(self, seed: int, force_coin: int = 0) -> EnvState:
        """Canonical bimodal layout: fixed object over the nudge zone, agent
        below with a small seeded lateral jitter. force_coin in {-1, +1}
        overrides the seeded coin (oracle use only)."""
        rng = np_rng(derive_seed(seed, "env-reset-bimodal"))
        jitter = rng.uniform(-0.03, 0.03)
        coin = 1 if rng.uniform() < 0.5 else -1
        if force_coin:
            coin = int(force_coin)
        return EnvState(
            agent=np.array([0.5 + jitter, 0.22]),
            obj=np.array([0.5, 0.60]),
            goal=np.array([0.5, 0.85]),
            show_goal=False,
            nudge_coin=coin,
        )

    # -- dynamics -----------------------------------------------------------
    def step(self, state: EnvState, action: np.ndarray) -> EnvState:
        PusherEnv.step_calls += 1
        cfg = self.cfg
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        s = state.copy()
        lo_a = cfg.wall + cfg.agent_radius
        s.agent = np.clip(s.agent + a * cfg.v_max, lo_a, 1.0 - lo_a)

        # circle-vs-box overlap pushes the object away from the agent
        half = cfg.obj_half
        closest = np.clip(s.agent, s.obj - half, s.obj + half)
        delta = s.agent - closest
        dist = float(np.linalg.norm(delta))
        contact = dist < cfg.agent_radius
        if contact:
            if dist > 1e-9:
                push_dir = -delta / dist
            else:
                n = float(np.linalg.norm(a))
                push_dir = a / n if n > 1e-9 else np.array([0.0, 1.0])
            s.obj = s.obj + push_dir * (cfg.agent_radius - dist)

        if contact and not s.nudge_used and self._in_zone(s.obj):
            s.obj = s.obj + np.array([s.nudge_coin * cfg.nudge_dx, cfg.nudge_dy])
            s.nudge_used = True

        lo_o = cfg.wall + half
        s.obj = np.clip(s.obj, lo_o, 1.0 - lo_o)
        s.t = state.t + 1
        return s

    def _in_zone(self, p: np.ndarray) -> bool:
        x0, x1, y0, y1 = self.cfg.nudge_zone
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1

    def object_moved(self, before: EnvState, after: EnvState) -> bool:
        return float(np.linalg.norm(after.obj - before.obj)) > 1e-6

    # -- rendering ----------------------------------------------------------
    def _soft_disc(self, c, r):
        d = np.hypot(self._gx - c[0], self._gy - c[1])
        return np.clip((r - d) / self.cfg.edge_softness + 0.5, 0.0, 1.0)

    def _soft_box(self, c, hx, hy):
        d = np.maximum(np.abs(self._gx - c[0]) - hx, np.abs(self._gy - c[1]) - hy)
        return np.clip(-d / self.cfg.edge_softness + 0.5, 0.0, 1.0)

    def _soft_ring(self, c, r, halfwidth):
        d = np.abs(np.hypot(self._gx - c[0], self._gy - c[1]) - r)
        return np.clip((halfwidth - d) / self.cfg.edge_softness + 0.5, 0.0, 1.0)

    def render(self, state: EnvState) -> np.ndarray:
        """(H, W, 3) float32 in [0, 1]; deterministic rasterization."""
        cfg = self.cfg
        h, w = cfg.image_hw
        img = np.full((h, w, 3), 0.12, dtype=np.float64)

        frame = self._soft_box((0.5, 0.5), 0.5, 0.5) - self._soft_box(
            (0.5, 0.5), 0.5 - cfg.wall, 0.5 - cfg.wall)
        self._blend(img, np.clip(frame, 0, 1), (0.35, 0.35, 0.38))

        x0, x1, y0, y1 = cfg.nudge_zone
        zone = self._soft_box(((x0 + x1) / 2, (y0 + y1) / 2), (x1 - x0) / 2, (y1 - y0) / 2)
        self._blend(img, zone * 0.6, (0.16, 0.22, 0.18))

        if state.show_goal:
            ring = self._soft_ring(state.goal, 0.05, 0.012)
            self._blend(img, ring, (0.25, 0.85, 0.35))

        if state.obj_kind == "tee":
            bar = self._soft_box(state.obj + np.array([0.0, cfg.obj_half * 0.55]),
                                 cfg.obj_half, cfg.obj_half * 0.45)
            stem = self._soft_box(state.obj - np.array([0.0, cfg.obj_half * 0.35]),
                                  cfg.obj_half * 0.35, cfg.obj_half * 0.65)
            obj_mask = np.maximum(bar, stem)
        else:
            obj_mask = self._soft_box(state.obj, cfg.obj_half, cfg.obj_half)
        self._blend(img, obj_mask, (0.25, 0.45, 0.95))

        self._blend(img, self._soft_disc(state.agent, cfg.agent_radius), (0.95, 0.30, 0.25))
        return img.astype(np.float32)

    @staticmethod
    def _blend(img, alpha, color):
        a = alpha[..., None]
        img *= (1.0 - a)
        img += a * np.asarray(color, dtype=np.float64)

    def success(self, state: EnvState) -> bool:
        return float(np.linalg.norm(state.obj - state.goal)) < self.cfg.goal_tol


def env_step(env: PusherEnv, state: EnvState, action: np.ndarray):
    """One physics step plus the rendered frame of the new state."""
    nxt = env.step(state, action)
    return nxt, env.render(nxt)


# -- scripted experts --------------------------------------------------------

def _unit(v):
    n = float(np.linalg.norm(v))
    return v / n if n > 1e-9 else np.array([0.0, 0.0])


def scripted_expert(env: PusherEnv, state: EnvState, task: str, seed: int = 0) -> np.ndarray:
    """Proportional controller toward the push contact point, then toward the
    goal; play mode walks seeded waypoints."""
    cfg = env.cfg
    if task == "play":
        rng = np_rng(derive_seed(seed, "play-wp", state.t // 8))
        wp = rng.uniform(cfg.wall + 0.1, 1 - cfg.wall - 0.1, size=2)
        return np.clip((wp - state.agent) / cfg.v_max, -1.0, 1.0)

    to_goal = state.goal - state.obj
    d_goal = float(np.linalg.norm(to_goal))
    if d_goal < cfg.goal_tol * 0.6:
        return np.zeros(2)
    dir_g = to_goal / d_goal
    rel = state.agent - state.obj
    d_obj = float(np.linalg.norm(rel))

    # Push phase: agent roughly behind the object relative to the goal.
    if d_obj < cfg.obj_half + cfg.agent_radius + 0.05 and float(np.dot(_unit(-rel), dir_g)) > 0.80:
        return np.clip(dir_g, -1.0, 1.0)

    # Navigate to the staging point behind the object without plowing it.
    lo = cfg.wall + cfg.agent_radius + 0.01
    behind = np.clip(state.obj - dir_g * (cfg.obj_half + cfg.agent_radius + 0.02),
                     lo, 1.0 - lo)
    to_behind = behind - state.agent
    heading = _unit(to_behind)
    closest = np.clip(state.agent, state.obj - cfg.obj_half, state.obj + cfg.obj_half)
    gap_vec = state.agent - closest
    gap = float(np.linalg.norm(gap_vec))
    if gap < cfg.agent_radius + 0.04:
        n = _unit(gap_vec) if gap > 1e-9 else _unit(rel)
        inward = float(np.dot(heading, -n))
        if inward > 0:
            # Slide tangentially around the object instead of pressing into it;
            # orbit toward whichever side shortens the arc to the staging point.
            tang = heading + n * inward
            if float(np.linalg.norm(tang)) < 0.3:
                to_b = behind - state.obj
                side = 1.0 if rel[0] * to_b[1] - rel[1] * to_b[0] >= 0 else -1.0
                tang = side * np.array([-n[1], n[0]])
            heading = _unit(tang)
    speed = min(1.0, float(np.linalg.norm(to_behind)) / cfg.v_max)
    return np.clip(heading * speed, -1.0, 1.0)


def bimodal_script_action(state: EnvState) -> np.ndarray:
    """Approach straight up until the nudge fires, then retreat and park."""
    if not state.nudge_used:
        return np.array([0.0, 0.85])
    if state.agent[1] > 0.30:
        return np.array([0.0, -0.85])
    return np.zeros(2)


# -- episodes and store -------------------------------------------------------

STORE_MAGIC = b"RLAE"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, T, H, W, A, Dp


@dataclass
class Episode:
    frames: np.ndarray          # (T, H, W, 3) uint8
    actions: np.ndarray         # (T-1, A) float32
    proprio: np.ndarray         # (T, Dp) float32
    movement_flags: np.ndarray  # (T-1,) bool
    embodiment_id: str = EMBODIMENT
    success: bool = False
    seed: int = 0
    episode_id: int = 0
    object_track: np.ndarray = None  # (T, 2) float64, for flag recomputation

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def movement_flags_from_track(track: np.ndarray) -> np.ndarray:
    deltas = np.linalg.norm(np.diff(np.asarray(track, dtype=np.float64), axis=0), axis=1)
    return deltas > 1e-6


class EpisodeStore:
    def __init__(self, episodes=None):
        self._episodes = list(episodes or [])

    def add(self, ep: Episode) -> None:
        self._episodes.append(ep)

    def episodes(self):
        return iter(self._episodes)

    def episode(self, i: int) -> Episode:
        return self._episodes[i]

    def __len__(self) -> int:
        return len(self._episodes)


def _episode_bytes(ep: Episode) -> bytes:
    t, h, w, _ = ep.frames.shape
    a = ep.actions.shape[1]
    dp = ep.proprio.shape[1]
    parts = [
        _HEADER.pack(STORE_MAGIC, STORE_VERSION, t, h, w, a, dp),
        np.ascontiguousarray(ep.frames, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(ep.actions, dtype="<f4").tobytes(),
        np.ascontiguousarray(ep.proprio, dtype="<f4").tobytes(),
        np.ascontiguousarray(ep.movement_flags, dtype=np.uint8).tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _episode_from_bytes(raw: bytes) -> Episode:
    if len(raw) < _HEADER.size + 4:
        raise StoreFormatError("episode file truncated")
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise StoreFormatError("episode checksum failure")
    magic, version, t, h, w, a, dp = _HEADER.unpack_from(body)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported version {version}")
    off = _HEADER.size
    n_frames = t * h * w * 3
    n_act = (t - 1) * a * 4
    n_prop = t * dp * 4
    n_flags = t - 1
    if len(body) != off + n_frames + n_act + n_prop + n_flags:
        raise StoreFormatError("episode payload length mismatch")
    frames = np.frombuffer(body, np.uint8, n_frames, off).reshape(t, h, w, 3).copy()
    off += n_frames
    actions = np.frombuffer(body, "<f4", (t - 1) * a, off).reshape(t - 1, a).copy()
    off += n_act
    proprio = np.frombuffer(body, "<f4", t * dp, off).reshape(t, dp).copy()
    off += n_prop
    flags = np.frombuffer(body, np.uint8, n_flags, off).astype(bool)
    return Episode(frames=frames, actions=actions, proprio=proprio, movement_flags=flags)


def write_store(store: EpisodeStore, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "rlae-store", "version": STORE_VERSION, "episodes": [],
                "embodiments": sorted({ep.embodiment_id for ep in store.episodes()})}
    for i, ep in enumerate(store.episodes()):
        fname = f"ep_{i:05d}.bin"
        (root / fname).write_bytes(_episode_bytes(ep))
        manifest["episodes"].append({
            "id": i,
            "file": fname,
            "T": int(ep.length),
            "H": int(ep.frames.shape[1]),
            "W": int(ep.frames.shape[2]),
            "A": int(ep.actions.shape[1]),
            "Dp": int(ep.proprio.shape[1]),
            "embodiment_id": ep.embodiment_id,
            "success": bool(ep.success),
            "seed": int(ep.seed),
            "object_track": None if ep.object_track is None
            else [[float(x), float(y)] for x, y in ep.object_track],
        })
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def read_store(path) -> EpisodeStore:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise StoreFormatError(f"no manifest at {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "rlae-store":
        raise StoreFormatError("not an episode store manifest")
    store = EpisodeStore()
    for entry in manifest["episodes"]:
        ep = _episode_from_bytes((root / entry["file"]).read_bytes())
        ep.embodiment_id = entry["embodiment_id"]
        ep.success = bool(entry["success"])
        ep.seed = int(entry["seed"])
        ep.episode_id = int(entry["id"])
        if entry.get("object_track") is not None:
            ep.object_track = np.asarray(entry["object_track"], dtype=np.float64)
        store.add(ep)
    return store


# -- generators ---------------------------------------------------------------

def _record_episode(env: PusherEnv, state: EnvState, policy, horizon: int,
                    seed: int, episode_id: int, success_fn=None) -> Episode:
    frames = [env.render(state)]
    track = [state.obj.copy()]
    proprio = [state.agent.copy()]
    actions = []
    st = state
    for _ in range(horizon - 1):
        a = np.clip(policy(st), -1.0, 1.0)
        st = env.step(st, a)
        actions.append(a.astype(np.float32))
        frames.append(env.render(st))
        track.append(st.obj.copy())
        proprio.append(st.agent.copy())
    track = np.asarray(track)
    return Episode(
        frames=np.clip(np.asarray(frames) * 255.0, 0, 255).round().astype(np.uint8),
        actions=np.asarray(actions, dtype=np.float32),
        proprio=np.asarray(proprio, dtype=np.float32),
        movement_flags=movement_flags_from_track(track),
        success=bool(success_fn(st)) if success_fn else False,
        seed=seed,
        episode_id=episode_id,
        object_track=track,
    )


def generate_episode(task: str, seed: int, horizon: int = 48,
                     cfg: EnvConfig = EnvConfig(), episode_id: int = 0,
                     force_coin: int = 0) -> Episode:
    env = PusherEnv(cfg)
    if task == "bimodal":
        state = env.reset_bimodal(seed, force_coin=force_coin)
        return _record_episode(env, state, bimodal_script_action, horizon,
                               seed, episode_id)
    state = env.reset(seed, task)
    policy = lambda st: scripted_expert(env, st, task, seed)
    return _record_episode(env, state, policy, horizon, seed, episode_id,
                           success_fn=env.success if task == "push" else None)


def generate_store(task: str, n_episodes: int, seed: int, horizon: int = 48,
                   cfg: EnvConfig = EnvConfig()) -> EpisodeStore:
    store = EpisodeStore()
    for i in range(n_episodes):
        store.add(generate_episode(task, derive_seed(seed, task, i), horizon,
                                   cfg, episode_id=i))
    return store


def bimodal_mode_frames(seed: int, frame_index: int, horizon: int = 16,
                        cfg: EnvConfig = EnvConfig()):
    """Oracle: the two possible outcome frames at `frame_index` for the
    bimodal layout seeded by `seed`, one per coin direction."""
    eps = [generate_episode("bimodal", seed, horizon, cfg, force_coin=c)
           for c in (-1, +1)]
    return eps[0].frames[frame_index], eps[1].frames[frame_index]


# -- pair sampling ------------------------------------------------------------

@dataclass
class PairSample:
    s_t: "StateTokens"
    s_th: "StateTokens"
    h: int
    actions: "ActionChunk"
    episode_id: int
    t: int


class PairSampler:
    """Variable-horizon frame-pair sampler with movement bias.

    Pre-encodes every frame of the store once. With probability
    `movement_bias` the start index is restricted to windows [t, t+h) that
    contain an object-movement step; when no such window exists for the drawn
    horizon it falls back to the unrestricted set and counts the fallback.
    """

    def __init__(self, store: EpisodeStore, backbone, horizon_max: int = 8,
                 movement_bias: float = 0.9, seed: int = 0):
        if len(store) == 0:
            raise EmptyStoreError("pair sampler needs a non-empty store")
        self.store = store
        self.backbone = backbone
        self.horizon_max = horizon_max
        self.movement_bias = movement_bias
        self.seed = seed
        self.fallback_count = 0

        self._tokens = []
        for ep in store.episodes():
            self._tokens.append(backbone.encode_batch(
                ep.frames.astype(np.float32) / 255.0))

        # Candidate (episode, t) tables per horizon, full and movement-only.
        self._all = {}
        self._moving = {}
        for h in range(1, horizon_max + 1):
            full, moving = [], []
            for ei, ep in enumerate(store.episodes()):
                flags = ep.movement_flags.astype(np.int64)
                csum = np.concatenate([[0], np.cumsum(flags)])
                for t in range(0, ep.length - h):
                    full.append((ei, t))
                    if csum[t + h] - csum[t] > 0:
                        moving.append((ei, t))
            self._all[h] = full
            self._moving[h] = moving

    def _tokens_at(self, ei: int, t: int):
        from .tokens import StateTokens
        ep = self.store.episode(ei)
        h, w = ep.frames.shape[1:3]
        return StateTokens(tokens=self._tokens[ei][t],
                           patch_size=self.backbone.spec.patch_size,
                           image_hw=(h, w), backbone_id=self.backbone.backbone_id)

    def sample(self, rng: np.random.Generator) -> PairSample:
        from .wm import ActionChunk
        h = int(rng.integers(1, self.horizon_max + 1))
        use_movement = rng.uniform() < self.movement_bias
        pool = self._moving[h] if use_movement else self._all[h]
        if use_movement and not pool:
            pool = self._all[h]
            self.fallback_count += 1
        ei, t = pool[int(rng.integers(len(pool)))]
        ep = self.store.episode(ei)
        padded = np.zeros((self.horizon_max, ep.actions.shape[1]), dtype=np.float32)
        padded[:h] = ep.actions[t:t + h]
        return PairSample(
            s_t=self._tokens_at(ei, t),
            s_th=self._tokens_at(ei, t + h),
            h=h,
            actions=ActionChunk(actions=padded, valid_len=h,
                                embodiment_id=ep.embodiment_id),
            episode_id=ep.episode_id,
            t=t,
        )

    def sample_batch(self, batch_size: int, step: int):
        """Stacked tensors for training: (s_t, s_th, actions, embodiment)."""
        import torch
        rng = np_rng(derive_seed(self.seed, "pair-batch", step))
        samples = [self.sample(rng) for _ in range(batch_size)]
        s_t = torch.stack([s.s_t.tokens for s in samples])
        s_th = torch.stack([s.s_th.tokens for s in samples])
        actions = torch.from_numpy(np.stack([s.actions.actions for s in samples]))
        return s_t, s_th, actions, samples[0].actions.embodiment_id


def sample_pair(store: EpisodeStore, backbone, horizon_max: int,
                movement_bias: float, seed: int) -> PairSample:
    """One-shot sampling entry point; trainers keep a PairSampler instead."""
    sampler = PairSampler(store, backbone, horizon_max, movement_bias, seed)
    return sampler.sample(np_rng(derive_seed(seed, "pair")))
