"""Model checkpoints: a JSON manifest next to a raw little-endian float32
weight blob with a 16-byte header (magic "RLAW", version u32, payload u64)."""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import StoreFormatError

MAGIC = b"RLAW"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")

_DTYPES = {"float32": torch.float32, "int64": torch.int64, "bool": torch.bool,
           "uint8": torch.uint8}


def save_checkpoint(base_path, model: torch.nn.Module, extra: dict = None) -> None:
    """Writes <base>.json and <base>.rlaw. The model must expose arch_config()."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    sd = model.state_dict()
    params = []
    blobs = []
    for name, tensor in sd.items():
        arr = tensor.detach().cpu()
        dtype = str(arr.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            arr = arr.to(torch.float32)
            dtype = "float32"
        params.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.to(torch.float32).numpy().astype("<f4").tobytes())
    payload = b"".join(blobs)
    (base.parent / (base.name + ".rlaw")).write_bytes(
        _HEADER.pack(MAGIC, VERSION, len(payload)) + payload)
    manifest = {"format": "rlaw-checkpoint", "version": VERSION,
                "arch": model.arch_config(), "params": params,
                "extra": extra or {}}
    (base.parent / (base.name + ".json")).write_text(
        json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(base_path):
    """Returns (arch, extra, state_dict)."""
    base = Path(base_path)
    jpath = base.parent / (base.name + ".json")
    bpath = base.parent / (base.name + ".rlaw")
    if not jpath.exists() or not bpath.exists():
        raise FileNotFoundError(f"checkpoint {base} not found")
    manifest = json.loads(jpath.read_text())
    raw = bpath.read_bytes()
    if len(raw) < _HEADER.size:
        raise StoreFormatError("weight blob truncated")
    magic, version, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StoreFormatError(f"bad weight blob magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"unsupported checkpoint version {version}")
    if len(raw) != _HEADER.size + length:
        raise StoreFormatError("weight blob length mismatch")
    state = {}
    off = _HEADER.size
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, "<f4", n, off).reshape(entry["shape"]).copy()
        off += n * 4
        state[entry["name"]] = torch.from_numpy(arr).to(_DTYPES[entry["dtype"]])
    return manifest["arch"], manifest.get("extra", {}), state


def rebuild_model(arch: dict, state: dict):
    """Instantiate a model from its arch record and load the weights."""
    from .rla import RLAModel
    from .tokens import RendererModel
    from .wam import PolicyModel
    from .wm import WMModel

    registry = {"rla": RLAModel, "wm": WMModel, "policy": PolicyModel,
                "renderer": RendererModel}
    kind = arch.get("kind")
    if kind not in registry:
        raise StoreFormatError(f"unknown checkpoint kind {kind!r}")
    model = registry[kind].from_arch(arch)
    model.load_state_dict(state)
    model.eval()
    return model


def load_model(base_path):
    arch, extra, state = load_checkpoint(base_path)
    model = rebuild_model(arch, state)
    return model, extra
