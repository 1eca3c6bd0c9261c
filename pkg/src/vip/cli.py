"""Batch command line: ``vip <command> --model M --data DIR --out DIR``.

Exit codes: 0 report written, 2 usage error, otherwise the ``exit_code`` of
the :mod:`vip.errors` class that stopped the run (see README).
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .decomposition import attention_partition, contribution_norms, decompose_cls, patch_total_cosine
from .errors import InvalidArgumentError, ReportIOError, InvalidDatasetError, UndefinedResultError, VipError
from .ingestion import DEFAULT_CROP, DEFAULT_RESIZE, IMAGENET_MEAN, IMAGENET_STD, FeatureCache, decode_image, list_images, preprocess
from .metrics import cosine, layerwise_cls_similarity, linear_cka, one_shot_probe
from .model import Model, ModelConfig, forward, forward_masked, load_weights
from .reporting import AnalysisReport, emit_report, render_attention_map, render_curves
from .weights import write_safetensors

COMMANDS = ("partition", "decompose", "cka", "probe", "layers", "norms", "render")

# Feature variants: name -> token groups the CLS row may attend to at the ablated layer.
VARIANTS = {
    "patches": ("patches",),
    "registers": ("registers",),
    "registers_cls": ("registers", "cls"),
    "skip": (),
}


@dataclass
class Item:
    path: Path
    label: str | None
    content_hash: str
    patches: np.ndarray


def _parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--model", required=True, help="weights container, or a manifest name with --with-checkpoints")
    shared.add_argument("--config", help="model config JSON (default: config embedded in the container)")
    shared.add_argument("--data", required=True, help="image directory")
    shared.add_argument("--limit", type=int, default=None)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--shuffle", action="store_true", help="seeded shuffle before --limit")
    shared.add_argument("--out", default="vip-out", help="output directory")
    shared.add_argument("--format", choices=("json", "csv"), default="json")
    shared.add_argument("--layer", type=int, default=-1, help="block index; negative counts from the end")
    shared.add_argument("--mask-renormalize", action="store_true", help="renormalize the CLS row after masking")
    shared.add_argument("--with-checkpoints", action="store_true", help="allow downloading published checkpoints")
    shared.add_argument("--resize", type=int, default=DEFAULT_RESIZE)
    shared.add_argument("--crop", type=int, default=DEFAULT_CROP)
    shared.add_argument("--workers", type=int, default=1)
    shared.add_argument("--no-cache", action="store_true")

    parser = argparse.ArgumentParser(prog="vip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vip {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("partition", parents=[shared], help="CLS attention mass on patches / registers / CLS")
    sub.add_parser("decompose", parents=[shared], help="CLS output split into group contributions")
    p = sub.add_parser("cka", parents=[shared], help="CKA of ablated CLS outputs against the full output")
    p.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=None)
    p = sub.add_parser("probe", parents=[shared], help="one-shot nearest-prototype probe")
    p.add_argument("--variants", nargs="+", choices=sorted(VARIANTS), default=None)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--repetitions", type=int, default=20)
    p.add_argument("--train-on", choices=("full", "same"), default="full", help="prototype features: full output or the tested variant")
    sub.add_parser("layers", parents=[shared], help="layerwise CLS similarity and contribution norms")
    sub.add_parser("norms", parents=[shared], help="L2 norms of patch, non-patch and skip contributions")
    sub.add_parser("render", parents=[shared], help="SVG attention maps of the CLS token")
    return parser


def _load_model(args) -> Model:
    config = ModelConfig.from_json(args.config) if args.config else None
    if not Path(args.model).exists() and args.with_checkpoints:
        from .checkpoints import fetch

        model, _ = fetch(args.model)
        return model
    return load_weights(args.model, config)


def _validate(args, model: Model) -> int:
    if args.limit is not None and args.limit < 1:
        raise InvalidArgumentError("--limit must be >= 1")
    if args.workers < 1:
        raise InvalidArgumentError("--workers must be >= 1")
    depth = model.config.depth
    if not -depth <= args.layer < depth:
        raise InvalidArgumentError(f"--layer {args.layer} out of range for depth {depth}")
    if args.crop % model.config.patch_size:
        raise InvalidArgumentError(f"--crop {args.crop} not divisible by patch size {model.config.patch_size}")
    return args.layer % depth


def _run_config(args, layer: int) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("workers",)}
    cfg["layer"] = layer
    return cfg


def _preprocessing(args) -> dict:
    return {"resize": args.resize, "crop": args.crop, "mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD), "interpolation": "bilinear"}


def _items(args, model: Model) -> list[Item]:
    entries = list_images(args.data, args.limit, args.seed, args.shuffle)

    def load(entry):
        img = decode_image(*entry)
        return Item(img.path, img.label, img.content_hash, preprocess(img, model.config, args.resize, args.crop))

    return _map(args, load, entries)


def _map(args, fn, items):
    if args.workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        return list(pool.map(fn, items))


def _sorted(records: list[dict]) -> list[dict]:
    return sorted(records, key=lambda r: (r["image"], r.get("path", "")))


def _base_record(item: Item) -> dict:
    return {"image": item.content_hash, "path": item.path.as_posix(), "label": item.label}


def _safe_cos(a, b):
    try:
        return cosine(a, b)
    except UndefinedResultError:
        return None


def cmd_partition(args, model: Model, layer: int) -> AnalysisReport:
    def one(item):
        part = attention_partition(forward(model, item.patches), layer=layer)
        return {
            **_base_record(item),
            "patch_share": part.patch_share,
            "register_share": part.register_share,
            "cls_self_share": part.cls_self_share,
            "register_share_with_cls": part.register_share_with_cls,
        }

    records = _map(args, one, _items(args, model))
    return _report(args, model, layer, "partition", _sorted(records), denominator="cls_attention_mass")


def cmd_decompose(args, model: Model, layer: int) -> AnalysisReport:
    def one(item):
        d = decompose_cls(forward(model, item.patches), layer=layer)
        try:
            pt = patch_total_cosine(d)
        except UndefinedResultError:
            pt = None
        return {
            **_base_record(item),
            "patch_norm": float(np.linalg.norm(d.patch_contrib)),
            "register_norm": float(np.linalg.norm(d.register_contrib)),
            "cls_self_norm": float(np.linalg.norm(d.cls_self_contrib)),
            "attn_total_norm": float(np.linalg.norm(d.attn_total)),
            "patch_total_cosine": pt,
            "register_cls_total_cosine": _safe_cos(d.two_way()[1], d.attn_total),
        }

    records = _map(args, one, _items(args, model))
    return _report(args, model, layer, "decompose", _sorted(records), denominator="attn_total")


def cmd_norms(args, model: Model, layer: int) -> AnalysisReport:
    def one(item):
        d = decompose_cls(forward(model, item.patches), layer=layer)
        n = contribution_norms(d)
        return {**_base_record(item), "patch_norm": n.patch_norm, "nonpatch_norm": n.nonpatch_norm, "skip_norm": n.skip_norm}

    records = _map(args, one, _items(args, model))
    return _report(args, model, layer, "norms", _sorted(records), denominator="full_out")


def cmd_layers(args, model: Model, layer: int) -> AnalysisReport:
    def one(item):
        trace = forward(model, item.patches)
        norms = [contribution_norms(decompose_cls(trace, layer=i)) for i in range(model.config.depth)]
        return {
            **_base_record(item),
            "cls_similarity": layerwise_cls_similarity(trace.cls_stream()),
            "patch_norm": [n.patch_norm for n in norms],
            "nonpatch_norm": [n.nonpatch_norm for n in norms],
            "skip_norm": [n.skip_norm for n in norms],
        }

    records = _sorted(_map(args, one, _items(args, model)))
    report = _report(args, model, layer, "layers", records, denominator="full_out")
    report.finalize()
    curve = report.aggregates.get("cls_similarity", {}).get("mean", [])
    report.results["figure"] = render_curves({"mean cls similarity": curve}, Path(args.out) / "layers.svg").name
    return report


def _features(args, model: Model, layer: int, variants: list[str]) -> tuple[list[Item], dict[str, np.ndarray]]:
    """CLS embeddings per variant, rows ordered by content hash."""
    cache = None if args.no_cache else FeatureCache()
    settings = {**_preprocessing(args), "layer": layer, "renormalize": args.mask_renormalize}

    def one(item):
        key = FeatureCache.key(item.content_hash, model.config.config_hash(), {**settings, "variants": variants})
        if cache is not None:
            hit = cache.get(key)
            if hit is not None:
                return hit
        feats = {"full": forward(model, item.patches).embedding}
        for v in variants:
            feats[v] = forward_masked(model, item.patches, layer, VARIANTS[v], args.mask_renormalize).embedding
        if cache is not None:
            cache.put(key, feats, {"config_hash": model.config.config_hash(), "image": item.content_hash})
        return feats

    items = sorted(_items(args, model), key=lambda it: (it.content_hash, it.path.as_posix()))
    rows = _map(args, one, items)
    names = ["full", *variants]
    return items, {n: np.stack([r[n] for r in rows]).astype(np.float32) for n in names}


def _default_variants(model: Model) -> list[str]:
    if model.config.num_registers:
        return ["patches", "registers", "registers_cls", "skip"]
    return ["patches", "skip"]


def cmd_cka(args, model: Model, layer: int) -> AnalysisReport:
    variants = args.variants or _default_variants(model)
    items, feats = _features(args, model, layer, variants)
    if len(items) < 2:
        raise InvalidDatasetError("CKA needs at least two images")
    out = Path(args.out)
    write_safetensors(out / "cka_features.safetensors", feats, {"images": ",".join(it.content_hash for it in items)})
    results = {"cka": {v: linear_cka(feats["full"], feats[v]).value for v in variants}, "n": len(items), "features_file": "cka_features.safetensors"}
    records = [{**_base_record(it), **{f"{v}_cosine": _safe_cos(feats["full"][i], feats[v][i]) for v in variants}} for i, it in enumerate(items)]
    return _report(args, model, layer, "cka", records, results=results, denominator="final_embedding")


def cmd_probe(args, model: Model, layer: int) -> AnalysisReport:
    variants = args.variants or _default_variants(model)
    items, feats = _features(args, model, layer, variants)
    by_class: dict[str, list[int]] = {}
    for i, it in enumerate(items):
        if it.label is None:
            raise InvalidDatasetError(f"{it.path} has no label")
        by_class.setdefault(it.label, []).append(i)
    small = sorted(c for c, idx in by_class.items() if len(idx) < 2)
    if small:
        raise InvalidDatasetError(f"classes with fewer than 2 images: {small[:5]}")
    classes = sorted(by_class)
    if not 1 <= args.top_k <= len(classes):
        raise InvalidArgumentError(f"--top-k must be in [1, {len(classes)}]")
    if args.repetitions < 1:
        raise InvalidArgumentError("--repetitions must be >= 1")
    acc: dict[str, list[float]] = {v: [] for v in ["full", *variants]}
    for rep in range(args.repetitions):
        rng = np.random.default_rng([args.seed, rep])
        picks = [rng.choice(by_class[c], size=2, replace=False) for c in classes]
        tr = [int(p[0]) for p in picks]
        te = [int(p[1]) for p in picks]
        for v in acc:
            train = feats["full" if args.train_on == "full" else v][tr]
            acc[v].append(one_shot_probe(train, classes, feats[v][te], classes, args.top_k))
    table = {v: {"mean": float(np.mean(a)), "std": float(np.std(a)), "per_repetition": a} for v, a in acc.items()}
    results = {"top_k": args.top_k, "classes": len(classes), "repetitions": args.repetitions, "train_on": args.train_on, "accuracy": table}
    records = [{**_base_record(it)} for it in items]
    return _report(args, model, layer, "probe", records, results=results, denominator="final_embedding")


def cmd_render(args, model: Model, layer: int) -> AnalysisReport:
    out = Path(args.out)

    def one(item):
        trace = forward(model, item.patches)
        lay = trace.layout
        row = trace.layers[layer].attention[:, lay.cls_index, :].astype(np.float64).mean(axis=0)
        grid = row[list(lay.patch_indices)].reshape(lay.grid)
        name = f"attn_{item.content_hash[:16]}.svg"
        render_attention_map(grid, out / name)
        return {**_base_record(item), "svg": name, "max_patch_attention": float(grid.max()), "patch_mass": float(grid.sum())}

    records = _map(args, one, _items(args, model))
    return _report(args, model, layer, "render", _sorted(records), denominator="cls_attention_mass")


def _report(args, model, layer, command, records, results=None, denominator=None) -> AnalysisReport:
    return AnalysisReport(
        command=command,
        model_config_hash=model.config.config_hash(),
        preprocessing=_preprocessing(args),
        run_config={**_run_config(args, layer), "model_config": model.config.to_dict()},
        records=records,
        results=results or {},
        denominator=denominator,
    )


HANDLERS = {
    "partition": cmd_partition,
    "decompose": cmd_decompose,
    "cka": cmd_cka,
    "probe": cmd_probe,
    "layers": cmd_layers,
    "norms": cmd_norms,
    "render": cmd_render,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        model = _load_model(args)
        layer = _validate(args, model)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        report = HANDLERS[args.command](args, model, layer)
        path = emit_report(report, args.format, Path(args.out) / f"{args.command}.{args.format}")
    except VipError as exc:
        print(f"vip {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vip {args.command}: {exc}", file=sys.stderr)
        return ReportIOError.exit_code
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
