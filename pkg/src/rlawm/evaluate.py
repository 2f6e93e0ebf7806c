"""Rollout evaluation protocol: condition on an initial frame, unroll the
world model autoregressively over ground-truth action chunks, and score the
final predicted frame against the true one (token L1, and SSIM through the
renderer)."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .envdata import EpisodeStore
from .metrics import feature_l1, flops_estimate, ssim
from .seeding import derive_seed
from .tokens import StateTokens, render_batch
from .wm import ActionChunk, WMModel, rollout


@dataclass
class EvalReport:
    model_id: str
    protocol: dict
    metrics: dict
    flops: float
    seeds: dict
    mode: str
    skipped_episodes: int = 0

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "protocol": self.protocol,
            "metrics": self.metrics,
            "flops_estimate": self.flops,
            "seeds": self.seeds,
            "mode": self.mode,
            "skipped_episodes": self.skipped_episodes,
        }


def _chunks_from_actions(actions: np.ndarray, rollout_steps: int, chunk_size: int,
                         horizon_max: int, embodiment_id: str):
    chunks = []
    t = 0
    while t < rollout_steps:
        h = min(chunk_size, rollout_steps - t)
        padded = np.zeros((horizon_max, actions.shape[1]), dtype=np.float32)
        padded[:h] = actions[t:t + h]
        chunks.append(ActionChunk(actions=padded, valid_len=h, embodiment_id=embodiment_id))
        t += h
    return chunks


def eval_rollout(wm_model: WMModel, rla_model, store: EpisodeStore, backbone,
                 protocol: dict, seed: int, mode: str = "flow", renderer=None,
                 ode_steps: int = 30, model_id: str = "wm") -> EvalReport:
    """Evaluate final-frame fidelity on every long-enough episode of `store`.

    Reads only each episode's initial frame, its actions, and the final
    comparison frame. Aggregation is ordered by episode id, so reports are
    byte-stable for a given (store, seed).
    """
    rollout_steps = int(protocol["rollout_steps"])
    chunk_size = int(protocol["chunk_size"])
    n_auto = math.ceil(rollout_steps / chunk_size)
    assert n_auto * chunk_size >= rollout_steps

    per_l1, per_ssim = [], []
    skipped = 0
    episodes = sorted(store.episodes(), key=lambda e: e.episode_id)
    for ep in episodes:
        if ep.length < rollout_steps + 1:
            skipped += 1
            continue
        first = ep.frames[0].astype(np.float32) / 255.0
        target_frame = ep.frames[rollout_steps].astype(np.float32) / 255.0
        s_0 = StateTokens(tokens=backbone.encode_batch(first[None])[0],
                          patch_size=backbone.spec.patch_size,
                          image_hw=first.shape[:2], backbone_id=backbone.backbone_id)
        truth = backbone.encode_batch(target_frame[None])[0]
        chunks = _chunks_from_actions(ep.actions, rollout_steps, chunk_size,
                                      wm_model.horizon_max, ep.embodiment_id)
        preds = rollout(s_0, chunks, wm_model, rla_model, mode=mode, steps=ode_steps,
                        seed=derive_seed(seed, "eval-ep", ep.episode_id))
        final = preds[-1]
        per_l1.append({"episode_id": int(ep.episode_id),
                       "value": feature_l1(final.tokens, truth)})
        if renderer is not None:
            pred_img = render_batch(final.tokens[None], renderer)[0]
            per_ssim.append({"episode_id": int(ep.episode_id),
                             "value": ssim(pred_img, target_frame)})

    metrics = {
        "feature_l1": {
            "mean": float(np.mean([e["value"] for e in per_l1])) if per_l1 else None,
            "per_episode": per_l1,
        },
        "ssim": {
            "mean": float(np.mean([e["value"] for e in per_ssim])) if per_ssim else None,
            "per_episode": per_ssim,
        } if renderer is not None else None,
        "lpips": None,  # reserved for deployments with a perceptual backbone
    }
    desc = dict(wm_model.arch_config())
    desc["mode"] = mode
    desc["ode_steps"] = ode_steps
    return EvalReport(
        model_id=model_id,
        protocol={"rollout_steps": rollout_steps, "chunk_size": chunk_size,
                  "n_autoregressive": n_auto},
        metrics=metrics,
        flops=flops_estimate(desc),
        seeds={"base": int(seed)},
        mode=mode,
        skipped_episodes=skipped,
    )
