import numpy as np
from PIL import Image

from vip.model import ModelConfig, random_model


def random_config(rng, **overrides) -> ModelConfig:
    heads = int(rng.choice([1, 2, 4]))
    kw = dict(
        depth=int(rng.integers(2, 5)),
        dim=heads * int(rng.choice([2, 4, 8])),
        heads=heads,
        patch_size=int(rng.integers(1, 3)),
        num_registers=int(rng.integers(0, 5)),
        layerscale=bool(rng.integers(0, 2)),
        mlp_kind=str(rng.choice(["gelu-mlp", "swiglu"])),
        pos_grid=(int(rng.integers(1, 4)), int(rng.integers(1, 4))),
    )
    kw["dim"] = max(kw["dim"], 8)
    if kw["dim"] % heads:
        kw["dim"] = 8 * heads
    kw.update(overrides)
    return ModelConfig(**kw)


def random_instance(seed: int, **overrides):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng, **overrides)
    model = random_model(cfg, seed=seed)
    n = cfg.pos_grid[0] * cfg.pos_grid[1]
    patches = rng.standard_normal((n, cfg.patch_pixels)).astype(np.float32)
    return cfg, model, patches


def write_image(path, pixels_uint8):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels_uint8, dtype=np.uint8)).save(path)
    return path


def make_dataset(root, n_classes=3, per_class=2, size=8, seed=0, duplicate=False):
    """Random RGB PNGs under root/<class>/<i>.png."""
    rng = np.random.default_rng(seed)
    for c in range(n_classes):
        base = rng.integers(0, 256, (size, size, 3))
        for i in range(per_class):
            img = base if duplicate else rng.integers(0, 256, (size, size, 3))
            write_image(root / f"class{c:03d}" / f"{i}.png", img)
    return root
