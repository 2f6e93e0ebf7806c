"""Evaluation metrics: token-space L1, SSIM, and analytic FLOPs counts."""

import math

import numpy as np
import torch

from .errors import ShapeMismatchError


def _as_array(x) -> np.ndarray:
    if hasattr(x, "tokens"):
        x = x.tokens
    if hasattr(x, "pixels"):
        x = x.pixels
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def feature_l1(a, b) -> float:
    """Mean absolute difference over all entries."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeMismatchError(f"{av.shape} vs {bv.shape}")
    return float(np.mean(np.abs(av.astype(np.float64) - bv.astype(np.float64))))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(x, y, window: int = 7, sigma: float = 1.5,
         c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean local SSIM over gaussian-weighted windows and channels.

    Inputs are images in [0, 1] (dynamic range 1.0), shape (H, W, 3) or (H, W).
    Only fully interior windows contribute.
    """
    xv, yv = _as_array(x).astype(np.float64), _as_array(y).astype(np.float64)
    if xv.shape != yv.shape:
        raise ShapeMismatchError(f"{xv.shape} vs {yv.shape}")
    if xv.ndim == 2:
        xv, yv = xv[..., None], yv[..., None]
    h, w = xv.shape[:2]
    if h < window or w < window:
        raise ShapeMismatchError(f"image {h}x{w} smaller than window {window}")

    kern = _gaussian_kernel(window, sigma).reshape(-1)
    vals = []
    for ch in range(xv.shape[2]):
        wx = np.lib.stride_tricks.sliding_window_view(xv[:, :, ch], (window, window))
        wy = np.lib.stride_tricks.sliding_window_view(yv[:, :, ch], (window, window))
        wx = wx.reshape(*wx.shape[:2], -1)
        wy = wy.reshape(*wy.shape[:2], -1)
        mx = wx @ kern
        my = wy @ kern
        vx = (wx ** 2) @ kern - mx ** 2
        vy = (wy ** 2) @ kern - my ** 2
        cxy = (wx * wy) @ kern - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


# Analytic FLOPs: 2 * multiply-accumulates. Attention counts QKV/output
# projections plus the two token-token matmuls; MLPs use the 4x expansion.

def linear_flops(tokens: int, d_in: int, d_out: int) -> float:
    return 2.0 * tokens * d_in * d_out


def attention_block_flops(tokens: int, width: int) -> float:
    qkv = linear_flops(tokens, width, 3 * width)
    scores = 2.0 * tokens * tokens * width
    mix = 2.0 * tokens * tokens * width
    out = linear_flops(tokens, width, width)
    mlp = linear_flops(tokens, width, 4 * width) + linear_flops(tokens, 4 * width, width)
    return qkv + scores + mix + out + mlp


def stack_flops(layers: int, tokens: int, width: int) -> float:
    return layers * attention_block_flops(tokens, width)


def flops_estimate(desc: dict) -> float:
    """Closed-form FLOPs for a model description.

    Supported kinds:
      {"kind": "linear", "tokens", "d_in", "d_out"}
      {"kind": "stack", "layers", "tokens", "width"}
      {"kind": "wm", ..arch.., "mode": "flow"|"regression", "ode_steps": N}
        -- the dynamics cost: condition network once, plus either N flow
           evaluations (flow) or the linear readout (regression).
    """
    kind = desc.get("kind")
    if kind == "linear":
        return linear_flops(desc["tokens"], desc["d_in"], desc["d_out"])
    if kind == "stack":
        return stack_flops(desc["layers"], desc["tokens"], desc["width"])
    if kind == "wm":
        L = desc["token_len"]
        width = desc["width"]
        K = desc["latent_tokens"]
        D = desc["latent_dim"]
        n_act = desc.get("n_action_tokens", 1)
        h_max = desc["horizon_max"]
        a_dim = max(desc.get("action_dims", {"any": 2}).values())

        act_mlp = linear_flops(1, h_max * a_dim, width) + linear_flops(1, width, n_act * width)
        cond_tokens = L + n_act + K
        cond = (linear_flops(L, desc["token_channels"], width)
                + stack_flops(desc["cond_layers"], cond_tokens, width))
        total = act_mlp + cond

        mode = desc.get("mode", "flow")
        if mode == "flow":
            per_step = (linear_flops(K, D, width)
                        + stack_flops(desc["flow_layers"], 2 * K, width)
                        + linear_flops(K, width, D))
            total += desc.get("ode_steps", 30) * per_step
        elif mode == "regression":
            total += linear_flops(1, K * width, L * desc["token_channels"])
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return total
    raise ValueError(f"unknown description kind {kind!r}")
