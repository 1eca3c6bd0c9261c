"""Split a layer's [CLS] output into per-token-group contributions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError
from .metrics import cosine
from .model import ForwardTrace, TokenLayout


@dataclass(frozen=True)
class ClsDecomposition:
    patch_contrib: np.ndarray
    register_contrib: np.ndarray
    cls_self_contrib: np.ndarray
    skip_contrib: np.ndarray
    attn_total: np.ndarray  # attention-branch CLS output as recorded in the trace
    full_out: np.ndarray  # post-attention residual stream CLS row

    @property
    def nonpatch_contrib(self) -> np.ndarray:
        return self.register_contrib + self.cls_self_contrib + self.skip_contrib

    def two_way(self) -> tuple[np.ndarray, np.ndarray]:
        """(patch, register) view with the CLS-self term counted as a register."""
        return self.patch_contrib, self.register_contrib + self.cls_self_contrib


@dataclass(frozen=True)
class AttentionPartition:
    patch_share: float
    register_share: float
    cls_self_share: float

    @property
    def register_share_with_cls(self) -> float:
        return self.register_share + self.cls_self_share


class ContributionNorms(NamedTuple):
    patch_norm: float
    nonpatch_norm: float
    skip_norm: float


def _check(trace: ForwardTrace, layout: TokenLayout | None, layer: int):
    layout = layout or trace.layout
    tokens = trace.layers[0].attention.shape[-1]
    if layout.num_tokens != tokens:
        raise InvalidArgumentError(f"layout covers {layout.num_tokens} tokens but the trace has {tokens}")
    depth = len(trace.layers)
    if not -depth <= layer < depth:
        raise InvalidArgumentError(f"layer {layer} out of range for depth {depth}")
    return layout, trace.layers[layer], layer % depth


def _group_output(trace: ForwardTrace, block: int, attn_row: np.ndarray, values: np.ndarray, idx) -> np.ndarray:
    model = trace.model
    p = f"blocks.{block}."
    idx = np.asarray(idx, dtype=np.intp)
    a = attn_row[:, idx].astype(np.float64)
    ctx = np.einsum("ht,htd->hd", a, values[:, idx].astype(np.float64)).reshape(-1)
    out = model[p + "attn.proj.weight"].astype(np.float64) @ ctx
    out = out + a.sum(axis=-1).mean() * model[p + "attn.proj.bias"].astype(np.float64)
    if model.config.layerscale:
        out = out * model[p + "ls1.gamma"].astype(np.float64)
    return out


def decompose_cls(trace: ForwardTrace, layout: TokenLayout | None = None, layer: int = -1) -> ClsDecomposition:
    """Per-group CLS outputs of the attention branch at ``layer``.

    Each group's weighted value sum is formed per head, concatenated and sent
    through the output projection; the projection bias is shared out by each
    group's head-averaged attention mass.
    """
    layout, lt, block = _check(trace, layout, layer)
    cls = layout.cls_index
    row = lt.attention[:, cls, :]
    parts = {g: _group_output(trace, block, row, lt.attn_values, layout.indices(g)) for g in ("patches", "registers", "cls")}
    return ClsDecomposition(
        patch_contrib=parts["patches"],
        register_contrib=parts["registers"],
        cls_self_contrib=parts["cls"],
        skip_contrib=lt.skip_in[cls].astype(np.float64),
        attn_total=lt.attn_block_out[cls].astype(np.float64),
        full_out=lt.post_attn[cls].astype(np.float64),
    )


def attention_partition(trace: ForwardTrace, layout: TokenLayout | None = None, layer: int = -1) -> AttentionPartition:
    layout, lt, _ = _check(trace, layout, layer)
    row = lt.attention[:, layout.cls_index, :].astype(np.float64).mean(axis=0)
    share = lambda g: float(row[list(layout.indices(g))].sum())  # noqa: E731
    return AttentionPartition(share("patches"), share("registers"), share("cls"))


def contribution_norms(d: ClsDecomposition) -> ContributionNorms:
    return ContributionNorms(
        float(np.linalg.norm(d.patch_contrib)),
        float(np.linalg.norm(d.nonpatch_contrib)),
        float(np.linalg.norm(d.skip_contrib)),
    )


def patch_total_cosine(d: ClsDecomposition) -> float:
    """Cosine between the patch contribution and the whole attention output."""
    return cosine(d.patch_contrib, d.attn_total)
