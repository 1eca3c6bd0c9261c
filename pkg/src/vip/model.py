"""Instrumented ViT with a [CLS] token and optional register tokens.

Token order is ``[CLS, reg_1..reg_R, patch_1..patch_P]`` with patches in
row-major grid order. Blocks are pre-norm::

    x = x + ls1 * attn(norm1(x))
    x = x + ls2 * mlp(norm2(x))

Parameter names (all float32, linear weights stored ``[out, in]``)::

    patch_embed.weight        [dim, 3 * patch_size**2]   (channel, row, col)
    patch_embed.bias          [dim]
    cls_token                 [1, dim]
    register_tokens           [num_registers, dim]        (only if num_registers > 0)
    pos_embed                 [1 + gh * gw, dim]          (CLS row first; registers get none)
    blocks.{i}.norm1.weight / .bias                       [dim]
    blocks.{i}.attn.{q,k,v}.weight [dim, dim]   .bias     [dim]
    blocks.{i}.attn.proj.weight    [dim, dim]   .bias     [dim]
    blocks.{i}.ls1.gamma / ls2.gamma                      [dim]  (only with layerscale)
    blocks.{i}.norm2.weight / .bias                       [dim]
    blocks.{i}.mlp.fc1.weight [hidden, dim], .fc2.weight [dim, hidden]  (gelu-mlp)
    blocks.{i}.mlp.w12.weight [2*hidden, dim], .w3.weight [dim, hidden] (swiglu)
    norm.weight / norm.bias                               [dim]
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import kernels as K
from .errors import InvalidArgumentError, LoadError
from .weights import read_safetensors, write_safetensors

MLP_KINDS = ("gelu-mlp", "swiglu")
GROUPS = ("cls", "registers", "patches")


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    dim: int
    heads: int
    patch_size: int
    num_registers: int = 0
    mlp_kind: str = "gelu-mlp"
    layerscale: bool = False
    eps: float = K.DEFAULT_EPS
    mlp_hidden: int | None = None
    pos_grid: tuple[int, int] = (16, 16)
    in_chans: int = 3

    def __post_init__(self):
        object.__setattr__(self, "pos_grid", tuple(int(g) for g in self.pos_grid))
        if self.depth < 1 or self.patch_size < 1 or self.dim < 1 or self.heads < 1:
            raise InvalidArgumentError("depth, dim, heads and patch_size must be >= 1")
        if self.dim % self.heads:
            raise InvalidArgumentError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.num_registers < 0:
            raise InvalidArgumentError("num_registers must be >= 0")
        if self.mlp_kind not in MLP_KINDS:
            raise InvalidArgumentError(f"mlp_kind must be one of {MLP_KINDS}, got {self.mlp_kind!r}")
        if len(self.pos_grid) != 2 or min(self.pos_grid) < 1:
            raise InvalidArgumentError(f"pos_grid must be two positive extents, got {self.pos_grid}")
        if self.eps < 0:
            raise InvalidArgumentError("eps must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.dim

    @property
    def patch_pixels(self) -> int:
        return self.in_chans * self.patch_size**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_grid"] = list(self.pos_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def layout(self, grid: tuple[int, int] | None = None) -> "TokenLayout":
        p1, p2 = grid or self.pos_grid
        r = self.num_registers
        return TokenLayout(
            cls_index=0,
            register_indices=tuple(range(1, 1 + r)),
            patch_indices=tuple(range(1 + r, 1 + r + p1 * p2)),
            grid=(p1, p2),
        )


@dataclass(frozen=True)
class TokenLayout:
    cls_index: int
    register_indices: tuple[int, ...]
    patch_indices: tuple[int, ...]
    grid: tuple[int, int]

    def __post_init__(self):
        p1, p2 = self.grid
        if len(self.patch_indices) != p1 * p2:
            raise InvalidArgumentError(f"{len(self.patch_indices)} patch indices for a {p1}x{p2} grid")
        allowed = sorted((self.cls_index, *self.register_indices, *self.patch_indices))
        if allowed != list(range(self.num_tokens)):
            raise InvalidArgumentError("token indices must be disjoint and cover 0..num_tokens")

    @property
    def num_tokens(self) -> int:
        return 1 + len(self.register_indices) + len(self.patch_indices)

    def indices(self, group: str) -> tuple[int, ...]:
        if group == "cls":
            return (self.cls_index,)
        if group == "registers":
            return self.register_indices
        if group == "patches":
            return self.patch_indices
        raise InvalidArgumentError(f"unknown token group {group!r}; expected one of {GROUPS}")


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.dim, config.hidden
    gh, gw = config.pos_grid
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, config.patch_pixels),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (1 + gh * gw, d),
        "norm.weight": (d,),
        "norm.bias": (d,),
    }
    if config.num_registers:
        shapes["register_tokens"] = (config.num_registers, d)
    for i in range(config.depth):
        p = f"blocks.{i}."
        for norm in ("norm1", "norm2"):
            shapes[p + norm + ".weight"] = (d,)
            shapes[p + norm + ".bias"] = (d,)
        for proj in ("q", "k", "v", "proj"):
            shapes[f"{p}attn.{proj}.weight"] = (d, d)
            shapes[f"{p}attn.{proj}.bias"] = (d,)
        if config.layerscale:
            shapes[p + "ls1.gamma"] = (d,)
            shapes[p + "ls2.gamma"] = (d,)
        if config.mlp_kind == "gelu-mlp":
            shapes[p + "mlp.fc1.weight"] = (h, d)
            shapes[p + "mlp.fc1.bias"] = (h,)
            shapes[p + "mlp.fc2.weight"] = (d, h)
            shapes[p + "mlp.fc2.bias"] = (d,)
        else:
            shapes[p + "mlp.w12.weight"] = (2 * h, d)
            shapes[p + "mlp.w12.bias"] = (2 * h,)
            shapes[p + "mlp.w3.weight"] = (d, h)
            shapes[p + "mlp.w3.bias"] = (d,)
    return shapes


class Model:
    """Immutable parameter set bound to a config. Safe to share across threads."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        shapes = expected_shapes(config)
        for name, shape in shapes.items():
            if name not in params:
                raise LoadError(f"missing tensor {name!r}")
            found = tuple(np.shape(params[name]))
            if found != shape:
                raise LoadError(f"shape mismatch for {name!r}: expected {list(shape)}, found {list(found)}")
        extra = sorted(set(params) - set(shapes))
        if extra:
            raise LoadError(f"unexpected tensors for this config: {extra[:5]}")
        frozen = {}
        for name in shapes:
            arr = np.array(params[name], dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise LoadError(f"tensor {name!r} has non-finite entries")
            arr.setflags(write=False)
            frozen[name] = arr
        self.config = config
        self.params = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def save(self, path, metadata: dict[str, str] | None = None) -> None:
        meta = {"config": json.dumps(self.config.to_dict(), sort_keys=True)}
        meta.update(metadata or {})
        write_safetensors(path, self.params, meta)


def load_weights(path, config: ModelConfig | None = None) -> Model:
    """Load a container; without ``config`` the one embedded by :meth:`Model.save` is used."""
    try:
        tensors, metadata = read_safetensors(path)
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from None
    if config is None:
        if "config" not in metadata:
            raise LoadError(f"{path} has no embedded config; pass one explicitly")
        config = ModelConfig.from_dict(json.loads(metadata["config"]))
    return Model(config, tensors)


def random_model(config: ModelConfig, seed: int = 0, scale: float = 0.5) -> Model:
    """Random weights for tests and demos; norms and layer scales jittered around 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(("norm1.weight", "norm2.weight", "gamma")) or name == "norm.weight":
            params[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif len(shape) == 2 and name.endswith("weight"):
            params[name] = scale * rng.standard_normal(shape) / math.sqrt(shape[1])
        else:
            params[name] = 0.1 * rng.standard_normal(shape)
    return Model(config, params)


def _cubic_weights(n_in: int, n_out: int) -> np.ndarray:
    # Keys cubic convolution (a = -0.75), half-pixel centers, edge clamped.
    a = -0.75

    def kern(t):
        t = abs(t)
        if t <= 1:
            return (a + 2) * t**3 - (a + 3) * t**2 + 1
        if t < 2:
            return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
        return 0.0

    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        i0 = math.floor(src)
        t = src - i0
        for k in range(-1, 3):
            m[o, min(max(i0 + k, 0), n_in - 1)] += kern(k - t)
    return m


def interpolate_pos_embed(grid_embed: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bicubically resample ``[gh*gw, dim]`` grid embeddings to another grid."""
    if tuple(src) == tuple(dst):
        return grid_embed
    g = grid_embed.astype(np.float64).reshape(src[0], src[1], -1)
    my = _cubic_weights(src[0], dst[0])
    mx = _cubic_weights(src[1], dst[1])
    out = np.einsum("ay,yxd,bx->abd", my, g, mx, optimize=True)
    return out.reshape(dst[0] * dst[1], -1).astype(np.float32)


@dataclass
class LayerTrace:
    attention: np.ndarray  # [heads, T, T] post-softmax (masked if this is the masked layer)
    hidden_raw: np.ndarray  # [T, dim] residual stream entering the block
    hidden_in: np.ndarray  # [T, dim] norm1(hidden_raw)
    attn_values: np.ndarray  # [heads, T, head_dim]
    attn_block_out: np.ndarray  # [T, dim] attention branch incl. projection and layer scale
    skip_in: np.ndarray  # [T, dim]
    post_attn: np.ndarray  # [T, dim] skip_in + attn_block_out
    output: np.ndarray  # [T, dim] block output after the MLP branch


@dataclass
class ForwardTrace:
    model: Model
    layout: TokenLayout
    layers: list[LayerTrace]
    final_output: np.ndarray  # [T, dim] final norm of the last block output
    masked_layer: int | None = None
    keep: tuple[str, ...] | None = None
    renormalized: bool = False

    @property
    def embedding(self) -> np.ndarray:
        return self.final_output[self.layout.cls_index]

    def cls_stream(self) -> list[np.ndarray]:
        """CLS residual-stream vector after every layer."""
        return [lt.output[self.layout.cls_index] for lt in self.layers]


def _normalize_keep(keep) -> tuple[str, ...]:
    if isinstance(keep, str):
        keep = (keep,)
    keep = tuple(keep)
    for g in keep:
        if g not in GROUPS:
            raise InvalidArgumentError(f"unknown token group {g!r}; expected one of {GROUPS}")
    return tuple(g for g in GROUPS if g in keep)


def _resolve_grid(config: ModelConfig, n_patches: int, grid) -> tuple[int, int]:
    if grid is not None:
        grid = (int(grid[0]), int(grid[1]))
        if grid[0] * grid[1] != n_patches:
            raise InvalidArgumentError(f"grid {grid} does not match {n_patches} patches")
        return grid
    if n_patches == config.pos_grid[0] * config.pos_grid[1]:
        return config.pos_grid
    side = math.isqrt(n_patches)
    if side * side == n_patches:
        return (side, side)
    raise InvalidArgumentError(f"cannot infer a patch grid for {n_patches} patches; pass grid")


def _embed(model: Model, patches: np.ndarray, grid) -> tuple[np.ndarray, TokenLayout]:
    cfg = model.config
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 2 or patches.shape[1] != cfg.patch_pixels:
        raise InvalidArgumentError(f"patches must be [n, {cfg.patch_pixels}], got {list(patches.shape)}")
    grid = _resolve_grid(cfg, patches.shape[0], grid)
    pos = model["pos_embed"]
    x = K.linear(patches, model["patch_embed.weight"], model["patch_embed.bias"])
    x = x + interpolate_pos_embed(pos[1:], cfg.pos_grid, grid)
    parts = [model["cls_token"] + pos[:1]]
    if cfg.num_registers:
        parts.append(model["register_tokens"])
    parts.append(x)
    return np.concatenate(parts, axis=0).astype(np.float32), cfg.layout(grid)


def _attention(model: Model, i: int, h: np.ndarray, cls: int, drop: np.ndarray | None, renormalize: bool):
    cfg = model.config
    p = f"blocks.{i}.attn."
    T = h.shape[0]
    split = lambda t: t.reshape(T, cfg.heads, cfg.head_dim).transpose(1, 0, 2)  # noqa: E731
    q = split(K.linear(h, model[p + "q.weight"], model[p + "q.bias"]))
    k = split(K.linear(h, model[p + "k.weight"], model[p + "k.bias"]))
    v = split(K.linear(h, model[p + "v.weight"], model[p + "v.bias"]))
    logits = np.matmul(q.astype(np.float64), k.astype(np.float64).transpose(0, 2, 1)) / math.sqrt(cfg.head_dim)
    attn = K.softmax(logits)
    if drop is not None:
        attn[:, cls, drop] = 0.0
        if renormalize:
            mass = attn[:, cls, :].astype(np.float64).sum(axis=-1, keepdims=True)
            attn[:, cls, :] = np.divide(attn[:, cls, :], mass, out=np.zeros_like(attn[:, cls, :], dtype=np.float64), where=mass > 0)
    ctx = np.matmul(attn.astype(np.float64), v.astype(np.float64)).transpose(1, 0, 2).reshape(T, cfg.dim)
    # Projection bias is weighted by the head-averaged attention mass, which is 1
    # for an unmasked row; this keeps the branch linear in the attention weights.
    mass = attn.astype(np.float64).sum(axis=-1).mean(axis=0)
    out = ctx @ model[p + "proj.weight"].astype(np.float64).T + mass[:, None] * model[p + "proj.bias"].astype(np.float64)
    if cfg.layerscale:
        out = out * model[f"blocks.{i}.ls1.gamma"].astype(np.float64)
    return attn, v, out.astype(np.float32)


def _mlp(model: Model, i: int, h: np.ndarray) -> np.ndarray:
    cfg = model.config
    p = f"blocks.{i}.mlp."
    if cfg.mlp_kind == "gelu-mlp":
        y = K.linear(K.gelu(K.linear(h, model[p + "fc1.weight"], model[p + "fc1.bias"])), model[p + "fc2.weight"], model[p + "fc2.bias"])
    else:
        y = K.linear(K.swiglu(K.linear(h, model[p + "w12.weight"], model[p + "w12.bias"])), model[p + "w3.weight"], model[p + "w3.bias"])
    if cfg.layerscale:
        y = (y.astype(np.float64) * model[f"blocks.{i}.ls2.gamma"]).astype(np.float32)
    return y


def _run(model: Model, patches, grid, masked_layer=None, keep=None, renormalize=False) -> ForwardTrace:
    cfg = model.config
    x, layout = _embed(model, patches, grid)
    drop = None
    if masked_layer is not None:
        dropped = [i for g in GROUPS if g not in keep for i in layout.indices(g)]
        drop = np.array(dropped, dtype=np.intp)
    layers = []
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        h = K.layer_norm(x, model[p + "norm1.weight"], model[p + "norm1.bias"], cfg.eps)
        attn, v, attn_out = _attention(model, i, h, layout.cls_index, drop if i == masked_layer else None, renormalize)
        post = (x.astype(np.float64) + attn_out).astype(np.float32)
        mlp_out = _mlp(model, i, K.layer_norm(post, model[p + "norm2.weight"], model[p + "norm2.bias"], cfg.eps))
        out = (post.astype(np.float64) + mlp_out).astype(np.float32)
        layers.append(LayerTrace(attn, x, h, v, attn_out, x, post, out))
        x = out
    final = K.layer_norm(x, model["norm.weight"], model["norm.bias"], cfg.eps)
    return ForwardTrace(model, layout, layers, final, masked_layer, keep, renormalize)


def forward(model: Model, patches, grid: tuple[int, int] | None = None) -> ForwardTrace:
    """Full instrumented forward pass on one image's patch rows."""
    return _run(model, patches, grid)


def forward_masked(
    model: Model,
    patches,
    layer: int,
    keep: str | Iterable[str],
    renormalize: bool = False,
    grid: tuple[int, int] | None = None,
) -> ForwardTrace:
    """Forward pass where, at ``layer``, the CLS row attends only to ``keep``.

    ``keep`` names one or more of ``"patches"``, ``"registers"``, ``"cls"``;
    an empty tuple leaves only the skip connection. Entries for every other
    token are zeroed after the softmax and, unless ``renormalize``, the row is
    not rescaled.
    """
    if not 0 <= layer < model.config.depth:
        raise InvalidArgumentError(f"layer {layer} out of range for depth {model.config.depth}")
    return _run(model, patches, grid, layer, _normalize_keep(keep), renormalize)


__all__ = [
    "ModelConfig",
    "TokenLayout",
    "Model",
    "LayerTrace",
    "ForwardTrace",
    "expected_shapes",
    "load_weights",
    "random_model",
    "forward",
    "forward_masked",
    "interpolate_pos_embed",
]
