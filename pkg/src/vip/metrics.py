"""Representation similarity, activation statistics and the one-shot probe."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels as K
from .errors import InvalidArgumentError, UndefinedResultError


@dataclass
class FeatureMatrix:
    """n x d matrix of per-image features with a provenance label."""

    data: np.ndarray
    label: str = "full"
    keys: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise InvalidArgumentError(f"feature matrix must be 2-D, got shape {list(self.data.shape)}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError(f"feature matrix {self.label!r} has non-finite entries")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def _features(x) -> FeatureMatrix:
    return x if isinstance(x, FeatureMatrix) else FeatureMatrix(x, label="")


@dataclass(frozen=True)
class CkaReport:
    value: float
    n: int
    labels: tuple[str, str]


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedResultError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def linear_cka(x, y) -> CkaReport:
    """Linear CKA of column-centered features, via the d x d cross-covariance form."""
    x, y = _features(x), _features(y)
    if x.rows != y.rows:
        raise InvalidArgumentError(f"row counts differ: {x.rows} vs {y.rows}")
    if x.rows < 2:
        raise InvalidArgumentError("CKA needs at least two rows")
    xc = x.data.astype(np.float64)
    yc = y.data.astype(np.float64)
    xc = xc - xc.mean(axis=0)
    yc = yc - yc.mean(axis=0)
    cross = np.linalg.norm(xc.T @ yc) ** 2
    denom = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if denom == 0:
        raise UndefinedResultError("CKA undefined for a matrix that is constant after centering")
    return CkaReport(float(cross / denom), x.rows, (x.label, y.label))


def gram_decompose(xp, xr) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(Xp Xp^T, Xr Xr^T, Xp Xr^T, Xr Xp^T)``; they sum to ``X X^T`` for ``X = Xp + Xr``."""
    p = _features(xp).data.astype(np.float64)
    r = _features(xr).data.astype(np.float64)
    if p.shape != r.shape:
        raise InvalidArgumentError(f"shape mismatch: {list(p.shape)} vs {list(r.shape)}")
    return p @ p.T, r @ r.T, p @ r.T, r @ p.T


def layerwise_cls_similarity(cls_vectors: Sequence[np.ndarray]) -> list[float | None]:
    """Cosine of each layer's CLS vector with the last one; ``None`` where undefined."""
    if len(cls_vectors) < 1:
        raise InvalidArgumentError("need at least one layer")
    last = cls_vectors[-1]
    out = []
    for v in cls_vectors:
        if np.array_equal(v, last) and np.any(np.asarray(v) != 0):
            out.append(1.0)
            continue
        try:
            out.append(cosine(v, last))
        except UndefinedResultError:
            out.append(None)
    return out


class CosineStats(NamedTuple):
    mean: float
    min: float
    max: float


def pairwise_cosine_stats(tokens) -> CosineStats:
    x = _features(tokens).data.astype(np.float64)
    if x.shape[0] < 2:
        raise InvalidArgumentError("need at least two rows")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise UndefinedResultError(f"row {int(zero[0])} has zero norm")
    u = x / norms[:, None]
    sims = (u @ u.T)[np.triu_indices(x.shape[0], k=1)]
    return CosineStats(float(sims.mean()), float(sims.min()), float(sims.max()))


@dataclass(frozen=True)
class ActivationProfile:
    dims: np.ndarray  # feature indices, highest pre-norm mean first
    pre_norm: np.ndarray
    post_norm: np.ndarray


def activation_profile(tokens, top_k: int, gain=None, bias=None, eps: float = K.DEFAULT_EPS) -> ActivationProfile:
    """Top-k dimensions by mean activation, with their means before and after layer norm."""
    x = _features(tokens).data
    if not 1 <= top_k <= x.shape[1]:
        raise InvalidArgumentError(f"top_k must be in [1, {x.shape[1]}], got {top_k}")
    pre = x.astype(np.float64).mean(axis=0)
    post = K.layer_norm(x, gain, bias, eps).astype(np.float64).mean(axis=0)
    dims = np.argsort(-pre, kind="stable")[:top_k]
    return ActivationProfile(dims, pre[dims], post[dims])


def one_shot_probe(train, train_labels, test, test_labels, k: int = 1) -> float:
    """Top-k accuracy of a cosine nearest-prototype classifier.

    ``train`` must hold exactly one row per class. Classes are ordered by
    sorted label, and similarity ties go to the lower class index.
    """
    tr = _features(train).data.astype(np.float64)
    te = _features(test).data.astype(np.float64)
    train_labels = list(train_labels)
    test_labels = list(test_labels)
    if len(train_labels) != tr.shape[0] or len(test_labels) != te.shape[0]:
        raise InvalidArgumentError("label count does not match row count")
    if tr.shape[1] != te.shape[1]:
        raise InvalidArgumentError("train and test feature widths differ")
    classes = sorted(set(train_labels))
    if len(classes) != len(train_labels):
        dup = next(c for c in classes if train_labels.count(c) != 1)
        raise InvalidArgumentError(f"class {dup!r} has {train_labels.count(dup)} training rows, expected 1")
    missing = set(test_labels) - set(classes)
    if missing:
        raise InvalidArgumentError(f"test labels without a prototype: {sorted(missing)[:5]}")
    if not 1 <= k <= len(classes):
        raise InvalidArgumentError(f"k must be in [1, {len(classes)}]")
    if te.shape[0] == 0:
        raise InvalidArgumentError("empty test set")
    position = {c: i for i, c in enumerate(classes)}
    order = [train_labels.index(c) for c in classes]
    protos = tr[order]
    for name, m in (("train", protos), ("test", te)):
        bad = np.flatnonzero(np.linalg.norm(m, axis=1) == 0)
        if bad.size:
            raise UndefinedResultError(f"{name} row {int(bad[0])} has zero norm")
    protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    te = te / np.linalg.norm(te, axis=1, keepdims=True)
    sims = te @ protos.T
    ranked = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    target = np.array([position[c] for c in test_labels])
    return float((ranked == target[:, None]).any(axis=1).mean())
