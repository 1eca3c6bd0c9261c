"""Image decoding, preprocessing, dataset iteration and the feature cache."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from io import BytesIO
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .errors import DecodeError, EmptyDatasetError, InvalidDatasetError, PreprocessError
from .model import ModelConfig
from .weights import read_safetensors, write_safetensors

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_RESIZE = 256
DEFAULT_CROP = 224
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
CACHE_ENV = "VIP_CACHE_DIR"


@dataclass
class ImageSpec:
    path: Path | None
    pixels: np.ndarray  # [h, w, 3] float32 in [0, 1]
    label: str | None = None
    content_hash: str = ""

    @classmethod
    def from_array(cls, pixels, label=None) -> "ImageSpec":
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise PreprocessError(f"expected [h, w, 3] pixels, got {list(pixels.shape)}")
        return cls(None, pixels, label, hashlib.sha256(pixels.tobytes()).hexdigest())


def decode_image(path, label: str | None = None) -> ImageSpec:
    path = Path(path)
    data = path.read_bytes()
    try:
        with Image.open(BytesIO(data)) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from None
    return ImageSpec(path, pixels, label, hashlib.sha256(data).hexdigest())


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel centers, no antialiasing, sample positions clamped to the edge.
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = min(max((o + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = math.floor(src)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    ph = _linear_weights(pixels.shape[0], height)
    pw = _linear_weights(pixels.shape[1], width)
    rows = np.tensordot(ph, pixels.astype(np.float64), axes=(1, 0))
    out = np.tensordot(pw, rows, axes=(1, 1)).transpose(1, 0, 2)
    return out.astype(np.float32)


def preprocess(
    image,
    config: ModelConfig,
    resize: int = DEFAULT_RESIZE,
    crop: int = DEFAULT_CROP,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> np.ndarray:
    """Resize the shorter side, center-crop, normalize and unfold into patch rows.

    The longer side becomes ``int(resize * long / short)``; the crop offset is
    ``round((side - crop) / 2)``. Patches are in row-major grid order and each
    row is flattened as (channel, row, col).
    """
    pixels = image.pixels if isinstance(image, ImageSpec) else np.asarray(image, dtype=np.float32)
    p = config.patch_size
    if crop % p:
        raise PreprocessError(f"crop {crop} is not divisible by patch size {p}")
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PreprocessError(f"expected [h, w, 3] pixels, got {list(pixels.shape)}")
    h, w = pixels.shape[:2]
    if min(h, w) != resize:
        if h <= w:
            nh, nw = resize, int(resize * w / h)
        else:
            nh, nw = int(resize * h / w), resize
        pixels = resize_bilinear(pixels, nh, nw)
    h, w = pixels.shape[:2]
    if h < crop or w < crop:
        raise PreprocessError(f"image is {h}x{w} after resizing, smaller than crop {crop}")
    top, left = int(round((h - crop) / 2.0)), int(round((w - crop) / 2.0))
    x = pixels[top : top + crop, left : left + crop].astype(np.float64)
    x = (x - np.asarray(mean)) / np.asarray(std)
    g = crop // p
    x = x.reshape(g, p, g, p, 3).transpose(0, 2, 4, 1, 3).reshape(g * g, 3 * p * p)
    return x.astype(np.float32)


def _read_labels_csv(path: Path) -> dict[str, str]:
    labels = {}
    with open(path, newline="", encoding="utf-8") as f:
        for i, row in enumerate(csv.reader(f)):
            if not row:
                continue
            if len(row) != 2:
                raise InvalidDatasetError(f"{path}:{i + 1}: expected 'path,label'")
            if i == 0 and [c.strip().lower() for c in row] == ["path", "label"]:
                continue
            labels[Path(row[0].strip()).as_posix()] = row[1].strip()
    return labels


def list_images(root, limit: int | None = None, seed: int = 0, shuffle: bool = False) -> list[tuple[Path, str | None]]:
    """Deterministic ``(path, label)`` list: sorted paths, optional seeded shuffle, then limit."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidDatasetError(f"{root} is not a directory")
    paths = sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    if not paths:
        raise EmptyDatasetError(f"no images under {root}")
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(paths))
        paths = [paths[i] for i in order]
    if limit is not None:
        paths = paths[:limit]
    csv_path = root / "labels.csv"
    table = _read_labels_csv(csv_path) if csv_path.exists() else None
    out = []
    for p in paths:
        rel = p.relative_to(root).as_posix()
        if table is not None:
            label = table.get(rel)
        else:
            label = p.parent.name if p.parent != root else None
        out.append((p, label))
    return out


def iterate_dataset(root, limit: int | None = None, seed: int = 0, shuffle: bool = False) -> Iterator[ImageSpec]:
    """Decode images lazily in the order given by :func:`list_images`."""
    entries = list_images(root, limit, seed, shuffle)
    return (decode_image(p, label) for p, label in entries)


class FeatureCache:
    """Content-addressed store of per-image tensors.

    Each entry is ``<root>/<key[:2]>/<key>.safetensors`` plus a JSON sidecar.
    Writes go through a temp file and an atomic rename, so readers never see
    a partial entry.
    """

    def __init__(self, root=None):
        self.root = Path(root or os.environ.get(CACHE_ENV) or ".vip-cache")

    @staticmethod
    def key(content_hash: str, config_hash: str, settings: dict | None = None, version: str = __version__) -> str:
        blob = json.dumps([content_hash, config_hash, settings or {}, version], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.safetensors"

    def get(self, key: str) -> dict[str, np.ndarray] | None:
        path = self._path(key)
        if not path.exists():
            return None
        tensors, _ = read_safetensors(path)
        return tensors

    def put(self, key: str, tensors: dict[str, np.ndarray], info: dict | None = None) -> Path:
        path = self._path(key)
        sidecar = dict(info or {})
        sidecar.setdefault("toolkit_version", __version__)
        write_safetensors(path, tensors, {"key": key})
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(sidecar, f, sort_keys=True, indent=2)
        os.replace(tmp, path.with_suffix(".json"))
        return path

    def info(self, key: str) -> dict | None:
        side = self._path(key).with_suffix(".json")
        return json.loads(side.read_text(encoding="utf-8")) if side.exists() else None
