"""High-level training pipelines shared by the CLI and the acceptance suite."""

import numpy as np
import torch

from . import rla as rla_mod
from . import wm as wm_mod
from .envdata import EMBODIMENT, ACTION_DIM, EpisodeStore, PairSampler
from .seeding import derive_seed
from .tokens import BackboneSpec, build_backbone, train_renderer
from .wam import PolicyModel, build_policy_pools, train_policy


def make_backbone(cfg: dict):
    spec = BackboneSpec(kind="toy-linear", patch_size=cfg["tokens"]["patch_size"],
                        channels=cfg["tokens"]["channels"],
                        seed=cfg["tokens"]["backbone_seed"])
    return build_backbone(spec)


def token_geometry(cfg: dict, image_hw=(64, 64)):
    p = cfg["tokens"]["patch_size"]
    length = (image_hw[0] // p) * (image_hw[1] // p)
    return length, cfg["tokens"]["channels"]


def train_renderer_pipeline(store: EpisodeStore, cfg: dict, seed: int):
    backbone = make_backbone(cfg)
    return train_renderer(store, backbone, cfg["renderer"], seed=derive_seed(seed, "renderer"))


def train_rla_pipeline(store: EpisodeStore, cfg: dict, seed: int, log_every: int = 0):
    """Autoencoder training plus post-hoc latent statistics on training pairs."""
    backbone = make_backbone(cfg)
    c = cfg["rla"]
    length, channels = token_geometry(cfg)
    model = rla_mod.RLAModel(
        token_len=length, token_channels=channels,
        latent_tokens=c["latent_tokens"], latent_dim=c["latent_dim"],
        layers=c["layers"], heads=c["heads"], width=c["width"],
        seed=derive_seed(seed, "rla-init"),
    )
    sampler = PairSampler(store, backbone, horizon_max=c["horizon_max"],
                          movement_bias=c["movement_bias"],
                          seed=derive_seed(seed, "rla-pairs"))
    losses = rla_mod.train_rla(
        lambda step: sampler.sample_batch(c["batch_size"], step)[:2],
        model, steps=c["steps"], lr=c["lr"], log_every=log_every)

    n_stats = c["stats_pairs"]
    stat_batches = [sampler.sample_batch(min(64, n_stats), 10_000_000 + i)[:2]
                    for i in range((n_stats + 63) // 64)]
    s_t = torch.cat([b[0] for b in stat_batches])[:n_stats]
    s_th = torch.cat([b[1] for b in stat_batches])[:n_stats]
    rla_mod.estimate_stats((s_t, s_th), model)
    model.eval()
    return model, losses


def train_wm_pipeline(store: EpisodeStore, rla_model, cfg: dict, seed: int,
                      mode: str = None, log_every: int = 0):
    backbone = make_backbone(cfg)
    c = cfg["wm"]
    mode = mode or c["mode"]
    length, channels = token_geometry(cfg)
    model = wm_mod.WMModel(
        token_len=length, token_channels=channels,
        latent_tokens=rla_model.latent_tokens, latent_dim=rla_model.latent_dim,
        width=c["width"], heads=c["heads"], cond_layers=c["cond_layers"],
        flow_layers=c["flow_layers"], horizon_max=c["horizon_max"],
        action_dims={EMBODIMENT: ACTION_DIM},
        n_action_tokens=c["n_action_tokens"],
        with_regression_head=(mode == "regression"),
        seed=derive_seed(seed, "wm-init", mode),
    )
    sampler = PairSampler(store, backbone, horizon_max=c["horizon_max"],
                          movement_bias=c["movement_bias"],
                          seed=derive_seed(seed, "wm-pairs", mode))
    losses = wm_mod.train_wm(
        lambda step: sampler.sample_batch(c["batch_size"], step),
        model, rla_model, steps=c["steps"], lr=c["lr"], mode=mode,
        seed=derive_seed(seed, "wm-train", mode), log_every=log_every)
    model.eval()
    return model, losses


def make_policy(cfg: dict, rla_model, seed: int) -> PolicyModel:
    c = cfg["wam"]
    return PolicyModel(
        image_hw=(64, 64), width=c["width"], fusion_layers=c["fusion_layers"],
        heads=c["heads"], proprio_dim=2, action_dim=ACTION_DIM,
        n_pred=c["n_pred"], n_exec=c["n_exec"],
        rla_dim=rla_model.latent_tokens * rla_model.latent_dim,
        seed=derive_seed(seed, "policy-init"),
    )


def train_policy_pipeline(store: EpisodeStore, rla_model, cfg: dict, seed: int,
                          labeled_fraction: float = None, rla_weight: float = None,
                          preprocess_frames=None, log_every: int = 0):
    """Train a policy on mixed labeled/actionless pools.

    With rla_weight=0 and the actionless pool dropped this is the plain
    behavior-cloning baseline (iteration-matched: same step count).
    """
    backbone = make_backbone(cfg)
    c = cfg["wam"]
    frac = c["labeled_fraction"] if labeled_fraction is None else labeled_fraction
    w = c["rla_weight"] if rla_weight is None else rla_weight
    labeled, actionless = build_policy_pools(
        store, backbone, rla_model, labeled_fraction=frac, n_pred=c["n_pred"],
        horizon_max=cfg["rla"]["horizon_max"], seed=derive_seed(seed, "pools"),
        stride=c["sample_stride"], preprocess_frames=preprocess_frames)
    if w == 0.0:
        actionless = []  # BC baseline sees only labeled data
    model = make_policy(cfg, rla_model, seed)
    checkpoints, curves = train_policy(
        labeled, actionless, model, rla_model, steps=c["steps"],
        batch_size=c["batch_size"], lr=c["lr"], weight_decay=c["weight_decay"],
        w_rla=w, seed=derive_seed(seed, "policy-train"),
        n_checkpoints=c["n_checkpoints"], log_every=log_every)
    model.eval()
    return model, checkpoints, curves
