"""Patch-token feature space: backbones mapping images to token grids and a
renderer mapping token grids back to images.

The toy-linear backbone is a frozen, seeded linear patch projection with an
additive positional vector. It stands in for a frozen pretrained ViT while
keeping everything deterministic and CPU-cheap. A frozen-pretrained adapter
slot exists for deployments that resolve real encoder weights.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import BackendUnavailableError, EmptyDatasetError, ShapeMismatchError
from .nets import seeded_init_
from .seeding import derive_seed, np_rng, torch_gen


@dataclass(frozen=True)
class ImageObs:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    time_index: int = 0


@dataclass(frozen=True)
class StateTokens:
    tokens: torch.Tensor  # (L, C) float32, finite
    patch_size: int
    image_hw: tuple
    backbone_id: str

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "toy-linear"  # "toy-linear" | "frozen-pretrained"
    patch_size: int = 8
    channels: int = 32
    seed: int = 0
    weights_ref: str = ""

    @property
    def backbone_id(self) -> str:
        if self.kind == "toy-linear":
            return f"toy-linear/p{self.patch_size}/c{self.channels}/s{self.seed}"
        return f"frozen/{self.weights_ref}/p{self.patch_size}/c{self.channels}"


# Deployment hook: weights_ref -> callable(np.ndarray (H,W,3)) -> np.ndarray (L,C).
_FROZEN_REGISTRY: dict = {}


def register_frozen_backbone(weights_ref: str, encode_fn) -> None:
    _FROZEN_REGISTRY[weights_ref] = encode_fn


def _check_divisible(h: int, w: int, p: int) -> None:
    if h % p or w % p:
        raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {p}")


def _patchify(pixels: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, L, P*P*3) with row-major patch order."""
    b, h, w, c = pixels.shape
    gh, gw = h // p, w // p
    x = pixels.reshape(b, gh, p, gw, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (B, gh, gw, p, p, c)
    return x.reshape(b, gh * gw, p * p * c)


class ToyLinearBackbone:
    """Frozen linear map per patch: tokens[p] = W @ flatten(patch_p) + b + pos[p].

    Fully determined by (patch_size, channels, seed); never trains.
    """

    def __init__(self, spec: BackboneSpec):
        assert spec.kind == "toy-linear"
        self.spec = spec
        p, c = spec.patch_size, spec.channels
        rng = np_rng(derive_seed(spec.seed, "toy-backbone"))
        d_in = p * p * 3
        self.weight = torch.from_numpy(
            rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, c)).astype(np.float32)
        )
        self.bias = torch.from_numpy(rng.normal(0.0, 0.05, size=(c,)).astype(np.float32))
        self._pos_cache: dict = {}

    @property
    def backbone_id(self) -> str:
        return self.spec.backbone_id

    def _pos(self, gh: int, gw: int) -> torch.Tensor:
        key = (gh, gw)
        if key not in self._pos_cache:
            rng = np_rng(derive_seed(self.spec.seed, "toy-backbone-pos", gh, gw))
            pos = rng.normal(0.0, 0.05, size=(gh * gw, self.spec.channels))
            self._pos_cache[key] = torch.from_numpy(pos.astype(np.float32))
        return self._pos_cache[key]

    def encode_batch(self, pixels: np.ndarray) -> torch.Tensor:
        """(B, H, W, 3) float in [0,1] -> (B, L, C)."""
        b, h, w, _ = pixels.shape
        p = self.spec.patch_size
        _check_divisible(h, w, p)
        patches = torch.from_numpy(_patchify(np.ascontiguousarray(pixels, dtype=np.float32), p))
        return patches @ self.weight + self.bias + self._pos(h // p, w // p)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.weight.numpy().tobytes())
        h.update(self.bias.numpy().tobytes())
        return h.hexdigest()


class FrozenPretrainedBackbone:
    """Adapter around an externally provided encoder; gradients are detached."""

    def __init__(self, spec: BackboneSpec):
        assert spec.kind == "frozen-pretrained"
        if spec.weights_ref not in _FROZEN_REGISTRY:
            raise BackendUnavailableError(f"no frozen backbone registered for {spec.weights_ref!r}")
        self.spec = spec
        self._fn = _FROZEN_REGISTRY[spec.weights_ref]

    @property
    def backbone_id(self) -> str:
        return self.spec.backbone_id

    def encode_batch(self, pixels: np.ndarray) -> torch.Tensor:
        b, h, w, _ = pixels.shape
        _check_divisible(h, w, self.spec.patch_size)
        out = [torch.as_tensor(np.asarray(self._fn(pixels[i]), dtype=np.float32)) for i in range(b)]
        return torch.stack(out).detach()

    def weights_hash(self) -> str:
        return "frozen:" + self.spec.weights_ref


def build_backbone(spec: BackboneSpec):
    if spec.kind == "toy-linear":
        return ToyLinearBackbone(spec)
    if spec.kind == "frozen-pretrained":
        return FrozenPretrainedBackbone(spec)
    raise ValueError(f"unknown backbone kind {spec.kind!r}")


def encode_image(img: ImageObs, backbone) -> StateTokens:
    """Map one image observation to its L x C patch-token grid."""
    h, w, c = img.pixels.shape
    if c != 3:
        raise ShapeMismatchError(f"expected 3 channels, got {c}")
    tokens = backbone.encode_batch(img.pixels[None])[0]
    return StateTokens(
        tokens=tokens,
        patch_size=backbone.spec.patch_size,
        image_hw=(h, w),
        backbone_id=backbone.backbone_id,
    )


class RendererModel(nn.Module):
    """Decoder-only upsampler: token grid -> RGB image in [0, 1].

    Each block doubles spatial resolution and halves channel width; the block
    count is log2(patch_size) so the output matches the encoded image size.
    A sigmoid squashes the output into [0, 1].
    """

    def __init__(self, patch_size: int, channels: int, backbone_id: str,
                 image_hw=(64, 64), base_channels: int = 64, seed: int = 0):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.backbone_id = backbone_id
        self.image_hw = tuple(image_hw)
        n_up = int(round(math.log2(patch_size)))
        assert 2 ** n_up == patch_size, "patch size must be a power of two"
        assert base_channels % (2 ** n_up) == 0
        self.proj = nn.Conv2d(channels, base_channels, 1)
        blocks = []
        ch = base_channels
        for _ in range(n_up):
            blocks += [nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1), nn.GELU()]
            ch //= 2
        self.up = nn.Sequential(*blocks)
        self.head = nn.Conv2d(ch, 3, 3, padding=1)
        self.base_channels = base_channels
        self.metadata = {"train_loss": None, "val_loss": None, "steps": 0}
        seeded_init_(self, derive_seed(seed, "renderer"))

    def arch_config(self) -> dict:
        return {"kind": "renderer", "patch_size": self.patch_size,
                "channels": self.channels, "backbone_id": self.backbone_id,
                "image_hw": list(self.image_hw), "base_channels": self.base_channels}

    @classmethod
    def from_arch(cls, cfg: dict) -> "RendererModel":
        return cls(patch_size=cfg["patch_size"], channels=cfg["channels"],
                   backbone_id=cfg["backbone_id"], image_hw=tuple(cfg["image_hw"]),
                   base_channels=cfg["base_channels"])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, L, C) -> (B, H, W, 3) in [0, 1]."""
        b, length, c = tokens.shape
        gh = self.image_hw[0] // self.patch_size
        gw = self.image_hw[1] // self.patch_size
        if length != gh * gw or c != self.channels:
            raise ShapeMismatchError(
                f"renderer expects {gh * gw}x{self.channels} tokens, got {length}x{c}"
            )
        x = tokens.reshape(b, gh, gw, c).permute(0, 3, 1, 2)
        x = self.up(self.proj(x))
        x = torch.sigmoid(self.head(x))
        return x.permute(0, 2, 3, 1)


def render_tokens(s: StateTokens, renderer: RendererModel) -> ImageObs:
    if s.backbone_id != renderer.backbone_id or s.patch_size != renderer.patch_size:
        raise ShapeMismatchError(
            f"renderer trained for {renderer.backbone_id}, got tokens from {s.backbone_id}"
        )
    with torch.inference_mode():
        img = renderer(s.tokens[None])[0]
    return ImageObs(pixels=img.numpy().astype(np.float32), time_index=0)


def render_batch(tokens: torch.Tensor, renderer: RendererModel) -> np.ndarray:
    with torch.inference_mode():
        return renderer(tokens).numpy().astype(np.float32)


def train_renderer(dataset, backbone, cfg: dict, seed: int = 0) -> RendererModel:
    """Fit the renderer to invert the backbone by pixel MSE on dataset frames.

    `dataset` is any episode store exposing `episodes()` yielding objects with
    a `frames` array (T, H, W, 3) uint8. Returns the model with final
    train/validation losses recorded in `model.metadata`.
    """
    frames = []
    for ep in dataset.episodes():
        frames.append(ep.frames)
    if not frames:
        raise EmptyDatasetError("renderer training needs at least one episode")
    frames = np.concatenate(frames, axis=0).astype(np.float32) / 255.0
    h, w = frames.shape[1:3]

    model = RendererModel(
        patch_size=backbone.spec.patch_size,
        channels=backbone.spec.channels,
        backbone_id=backbone.backbone_id,
        image_hw=(h, w),
        base_channels=int(cfg.get("base_channels", 64)),
        seed=seed,
    )
    steps = int(cfg.get("steps", 600))
    if steps == 0:
        return model

    rng = np_rng(derive_seed(seed, "renderer-data"))
    order = rng.permutation(len(frames))
    n_val = max(1, int(len(frames) * float(cfg.get("val_fraction", 0.1))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = val_idx

    batch = min(int(cfg.get("batch_size", 16)), len(train_idx))
    opt = torch.optim.AdamW(model.parameters(), lr=float(cfg.get("lr", 1e-3)))
    with torch.no_grad():
        all_tokens = backbone.encode_batch(frames)

    last = None
    for step in range(steps):
        idx = rng.choice(len(train_idx), size=batch, replace=False)
        sel = train_idx[idx]
        pred = model(all_tokens[sel])
        loss = torch.mean((pred - torch.from_numpy(frames[sel])) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last = float(loss)

    with torch.inference_mode():
        val_losses = []
        for i in range(0, len(val_idx), 64):
            sel = val_idx[i:i + 64]
            pred = model(all_tokens[sel])
            val_losses.append(float(torch.mean((pred - torch.from_numpy(frames[sel])) ** 2)))
    model.metadata = {
        "train_loss": last,
        "val_loss": float(np.mean(val_losses)),
        "steps": steps,
    }
    return model
