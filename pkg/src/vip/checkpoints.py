"""Published DINOv2 checkpoints: download manifest and name conversion.

Only used behind ``--with-checkpoints``; nothing here runs in the default
test path except the name mapping, which is exercised on synthetic tensors.
"""
from __future__ import annotations

import os
import re
import urllib.request
from pathlib import Path

import numpy as np

from .errors import LoadError
from .model import Model, ModelConfig
from .weights import read_safetensors

_HF = "https://huggingface.co/{repo}/resolve/main/model.safetensors"

_SIZES = {
    "small": dict(depth=12, dim=384, heads=6),
    "base": dict(depth=12, dim=768, heads=12),
    "large": dict(depth=24, dim=1024, heads=16),
    "giant": dict(depth=40, dim=1536, heads=24, mlp_kind="swiglu", mlp_hidden=4096),
}


def _manifest() -> dict[str, dict]:
    out = {}
    for size, arch in _SIZES.items():
        for regs, repo in ((4, f"facebook/dinov2-with-registers-{size}"), (0, f"facebook/dinov2-{size}")):
            name = f"dinov2-{size}" + ("-reg" if regs else "")
            cfg = ModelConfig(patch_size=14, num_registers=regs, layerscale=True, eps=1e-6, pos_grid=(37, 37), **arch)
            out[name] = {"url": _HF.format(repo=repo), "config": cfg}
    return out


MANIFEST = _manifest()

_PREFIXES = ("dinov2.", "dinov2_with_registers.", "model.")

_RENAMES = [
    (r"embeddings\.patch_embeddings\.projection\.(weight|bias)", r"patch_embed.\1"),
    (r"encoder\.layer\.(\d+)\.norm([12])\.(weight|bias)", r"blocks.\1.norm\2.\3"),
    (r"encoder\.layer\.(\d+)\.attention\.attention\.query\.(weight|bias)", r"blocks.\1.attn.q.\2"),
    (r"encoder\.layer\.(\d+)\.attention\.attention\.key\.(weight|bias)", r"blocks.\1.attn.k.\2"),
    (r"encoder\.layer\.(\d+)\.attention\.attention\.value\.(weight|bias)", r"blocks.\1.attn.v.\2"),
    (r"encoder\.layer\.(\d+)\.attention\.output\.dense\.(weight|bias)", r"blocks.\1.attn.proj.\2"),
    (r"encoder\.layer\.(\d+)\.layer_scale([12])\.lambda1", r"blocks.\1.ls\2.gamma"),
    (r"encoder\.layer\.(\d+)\.mlp\.fc([12])\.(weight|bias)", r"blocks.\1.mlp.fc\2.\3"),
    (r"encoder\.layer\.(\d+)\.mlp\.weights_in\.(weight|bias)", r"blocks.\1.mlp.w12.\2"),
    (r"encoder\.layer\.(\d+)\.mlp\.weights_out\.(weight|bias)", r"blocks.\1.mlp.w3.\2"),
    (r"layernorm\.(weight|bias)", r"norm.\1"),
]
_DROPPED = ("embeddings.mask_token",)


def convert_hf_dinov2(tensors: dict[str, np.ndarray], config: ModelConfig) -> Model:
    """Map Hugging Face DINOv2 tensor names onto this package's naming.

    The conv patch embedding ``[d, 3, p, p]`` is flattened to ``[d, 3*p*p]``
    and the leading batch axes on the token embeddings are dropped. No tensor
    is transposed.
    """
    params = {}
    for name, arr in tensors.items():
        for prefix in _PREFIXES:
            if name.startswith(prefix):
                name = name[len(prefix):]
        if name in _DROPPED:
            continue
        if name == "embeddings.cls_token":
            params["cls_token"] = arr.reshape(1, -1)
        elif name == "embeddings.register_tokens":
            params["register_tokens"] = arr.reshape(-1, arr.shape[-1])
        elif name == "embeddings.position_embeddings":
            params["pos_embed"] = arr.reshape(-1, arr.shape[-1])
        else:
            for pattern, repl in _RENAMES:
                new, n = re.subn(f"^{pattern}$", repl, name)
                if n:
                    if new == "patch_embed.weight":
                        arr = arr.reshape(arr.shape[0], -1)
                    params[new] = arr
                    break
            else:
                raise LoadError(f"unrecognized checkpoint tensor {name!r}")
    return Model(config, params)


def fetch(name: str, root=None) -> tuple[Model, ModelConfig]:
    """Download (once) and convert a manifest checkpoint. Needs network access."""
    if name not in MANIFEST:
        raise LoadError(f"unknown checkpoint {name!r}; known: {sorted(MANIFEST)}")
    entry = MANIFEST[name]
    root = Path(root or os.environ.get("VIP_CACHE_DIR") or ".vip-cache") / "checkpoints"
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"{name}.safetensors"
    if not path.exists():
        tmp = path.with_suffix(".part")
        try:
            urllib.request.urlretrieve(entry["url"], tmp)
        except OSError as exc:
            raise LoadError(f"download of {name} failed: {exc}") from None
        os.replace(tmp, path)
    tensors, _ = read_safetensors(path)
    return convert_hf_dinov2(tensors, entry["config"]), entry["config"]
