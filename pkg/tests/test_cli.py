import json

import numpy as np
import pytest

from vip.cli import main
from vip.metrics import linear_cka
from vip.model import Model, ModelConfig, random_model
from vip.reporting import aggregate
from vip.weights import read_safetensors

from .helpers import make_dataset, write_image


def _save(model, tmp_path, name="model.safetensors"):
    path = tmp_path / name
    model.save(path)
    return path


@pytest.fixture
def model_path(tmp_path):
    cfg = ModelConfig(depth=2, dim=8, heads=2, patch_size=2, num_registers=2, pos_grid=(2, 2))
    return _save(random_model(cfg, seed=3), tmp_path)


@pytest.fixture
def data(tmp_path):
    return make_dataset(tmp_path / "data", n_classes=3, per_class=2, size=8, seed=1)


def run(*args, model, data, out, extra=()):
    argv = [args[0], "--model", str(model), "--data", str(data), "--out", str(out), "--resize", "8", "--crop", "4", *args[1:], *extra]
    return main(argv)


def report(out, command):
    return json.loads((out / f"{command}.json").read_text())


def zero_cls_value_model(tmp_path):
    """Depth 1, no registers, CLS carries nothing into the attention output.

    The CLS input is a constant vector, so its normalized value is zero; with
    zero value and projection biases, dropping CLS-self changes nothing.
    """
    cfg = ModelConfig(depth=1, dim=8, heads=2, patch_size=2, num_registers=0, pos_grid=(2, 2))
    params = dict(random_model(cfg, seed=4).params)
    params["cls_token"] = np.full((1, 8), 0.7)
    pos = np.array(params["pos_embed"])
    pos[0] = 0.0
    params["pos_embed"] = pos
    params["blocks.0.norm1.bias"] = np.zeros(8)
    params["blocks.0.attn.v.bias"] = np.zeros(8)
    params["blocks.0.attn.proj.bias"] = np.zeros(8)
    return _save(Model(cfg, params), tmp_path, "zero_cls.safetensors")


class TestPartition:
    def test_five_images_shares_sum_to_one(self, tmp_path, model_path):
        data = make_dataset(tmp_path / "five", n_classes=5, per_class=1, seed=2)
        assert run("partition", model=model_path, data=data, out=tmp_path / "o") == 0
        rep = report(tmp_path / "o", "partition")
        assert len(rep["records"]) == 5
        for r in rep["records"]:
            assert r["patch_share"] + r["register_share"] + r["cls_self_share"] == pytest.approx(1, abs=1e-6)
        assert rep["denominator"] == "cls_attention_mass"
        assert rep["run_config"]["layer"] == 1

    def test_no_registers_gives_zero_register_share(self, tmp_path, data):
        cfg = ModelConfig(depth=2, dim=8, heads=2, patch_size=2, num_registers=0, pos_grid=(2, 2))
        path = _save(random_model(cfg, seed=1), tmp_path)
        assert run("partition", model=path, data=data, out=tmp_path / "o") == 0
        assert all(r["register_share"] == 0 for r in report(tmp_path / "o", "partition")["records"])

    def test_records_sorted_and_aggregates_recomputable(self, tmp_path, model_path, data):
        assert run("partition", model=model_path, data=data, out=tmp_path / "o") == 0
        rep = report(tmp_path / "o", "partition")
        hashes = [r["image"] for r in rep["records"]]
        assert hashes == sorted(hashes)
        assert aggregate(rep["records"]) == rep["aggregates"]

    def test_csv(self, tmp_path, model_path, data):
        assert run("partition", "--format", "csv", model=model_path, data=data, out=tmp_path / "o") == 0
        lines = (tmp_path / "o" / "partition.csv").read_text().splitlines()
        assert lines[0].startswith("image,")
        assert len(lines) == 7


class TestCka:
    def test_recomputable_from_features(self, tmp_path, model_path, data):
        assert run("cka", model=model_path, data=data, out=tmp_path / "o") == 0
        rep = report(tmp_path / "o", "cka")
        feats, meta = read_safetensors(tmp_path / "o" / rep["results"]["features_file"])
        assert meta["images"].split(",") == [r["image"] for r in rep["records"]]
        for v, value in rep["results"]["cka"].items():
            assert linear_cka(feats["full"], feats[v]).value == pytest.approx(value, rel=1e-6)

    def test_identical_ablation_gives_one(self, tmp_path, data):
        path = zero_cls_value_model(tmp_path)
        assert run("cka", "--variants", "patches", model=path, data=data, out=tmp_path / "o") == 0
        assert report(tmp_path / "o", "cka")["results"]["cka"]["patches"] == pytest.approx(1, abs=1e-5)

    def test_cache_hit_matches(self, tmp_path, model_path, data):
        assert run("cka", model=model_path, data=data, out=tmp_path / "a") == 0
        assert run("cka", model=model_path, data=data, out=tmp_path / "b") == 0
        assert run("cka", "--no-cache", model=model_path, data=data, out=tmp_path / "c") == 0
        a, b, c = (report(tmp_path / d, "cka") for d in "abc")
        assert a["results"] == b["results"]
        assert a["results"]["cka"] == pytest.approx(c["results"]["cka"], abs=1e-9)


class TestProbe:
    def test_duplicates_perfect_for_every_variant(self, tmp_path, model_path):
        data = make_dataset(tmp_path / "dup", n_classes=3, per_class=2, seed=5, duplicate=True)
        assert run("probe", "--top-k", "1", "--train-on", "same", model=model_path, data=data, out=tmp_path / "o") == 0
        acc = report(tmp_path / "o", "probe")["results"]["accuracy"]
        assert set(acc) == {"full", "patches", "registers", "registers_cls", "skip"}
        assert all(v["mean"] == 1.0 for v in acc.values())

    def test_duplicates_full_features_perfect(self, tmp_path, model_path):
        data = make_dataset(tmp_path / "dup", n_classes=3, per_class=2, seed=5, duplicate=True)
        assert run("probe", "--top-k", "1", model=model_path, data=data, out=tmp_path / "o") == 0
        assert report(tmp_path / "o", "probe")["results"]["accuracy"]["full"]["mean"] == 1.0

    def test_shuffled_labels_near_chance(self, tmp_path, model_path):
        rng = np.random.default_rng(7)
        root = tmp_path / "shuf"
        n_classes, per_class = 10, 4
        labels = np.repeat(np.arange(n_classes), per_class)
        rng.shuffle(labels)
        rows = ["path,label"]
        for i, lab in enumerate(labels):
            write_image(root / f"{i:03d}.png", rng.integers(0, 256, (8, 8, 3)))
            rows.append(f"{i:03d}.png,c{lab}")
        (root / "labels.csv").write_text("\n".join(rows) + "\n")
        assert run("probe", "--top-k", "1", "--variants", "patches", model=model_path, data=root, out=tmp_path / "o") == 0
        per_rep = report(tmp_path / "o", "probe")["results"]["accuracy"]["full"]["per_repetition"]
        assert len(per_rep) == 20
        chance = 1 / n_classes
        se = np.sqrt(chance * (1 - chance) / (n_classes * len(per_rep)))
        assert abs(np.mean(per_rep) - chance) <= 3 * se

    def test_class_with_one_image(self, tmp_path, model_path):
        data = make_dataset(tmp_path / "d", n_classes=2, per_class=1)
        assert run("probe", model=model_path, data=data, out=tmp_path / "o") == 10


class TestLayers:
    def test_depth_one_single_point(self, tmp_path, data):
        cfg = ModelConfig(depth=1, dim=8, heads=2, patch_size=2, pos_grid=(2, 2))
        path = _save(random_model(cfg, seed=2), tmp_path)
        assert run("layers", model=path, data=data, out=tmp_path / "o") == 0
        for r in report(tmp_path / "o", "layers")["records"]:
            assert r["cls_similarity"] == [1.0]

    def test_last_value_exactly_one(self, tmp_path, model_path, data):
        assert run("layers", model=model_path, data=data, out=tmp_path / "o") == 0
        rep = report(tmp_path / "o", "layers")
        for r in rep["records"]:
            assert len(r["cls_similarity"]) == 2
            assert r["cls_similarity"][-1] == 1.0
        assert (tmp_path / "o" / "layers.svg").exists()


def test_decompose_and_norms(tmp_path, model_path, data):
    assert run("decompose", model=model_path, data=data, out=tmp_path / "o") == 0
    assert run("norms", "--layer", "0", model=model_path, data=data, out=tmp_path / "o") == 0
    dec = report(tmp_path / "o", "decompose")
    assert len(dec["records"]) == 6
    norms = report(tmp_path / "o", "norms")
    assert norms["run_config"]["layer"] == 0
    assert all(r["skip_norm"] >= 0 for r in norms["records"])


def test_render(tmp_path, model_path, data):
    assert run("render", model=model_path, data=data, out=tmp_path / "o") == 0
    rep = report(tmp_path / "o", "render")
    for r in rep["records"]:
        svg = (tmp_path / "o" / r["svg"]).read_text()
        assert svg.count('class="cell"') == 4


@pytest.mark.parametrize("command", ["partition", "cka", "layers", "probe"])
def test_byte_identical_reruns(tmp_path, model_path, data, command):
    outs = []
    for i, workers in enumerate(("1", "1", "3")):
        out = tmp_path / f"o{i}"
        extra = ("--top-k", "1") if command == "probe" else ()
        assert run(command, "--workers", workers, "--no-cache", *extra, model=model_path, data=data, out=out) == 0
        outs.append((out / f"{command}.json").read_text())
    # run_config echoes --out, which differs between runs
    normalized = [json.loads(t) for t in outs]
    for n in normalized:
        n["run_config"].pop("out")
    assert normalized[0] == normalized[1] == normalized[2]
    assert outs[0].replace("/o0", "/o1") == outs[1]


class TestExitCodes:
    def test_missing_model(self, tmp_path, data):
        assert run("partition", model=tmp_path / "nope.safetensors", data=data, out=tmp_path / "o") == 4

    def test_corrupt_model(self, tmp_path, data):
        bad = tmp_path / "bad.safetensors"
        bad.write_bytes(b"\x01\x02")
        assert run("partition", model=bad, data=data, out=tmp_path / "o") == 5

    def test_bad_layer(self, tmp_path, model_path, data):
        assert run("partition", "--layer", "5", model=model_path, data=data, out=tmp_path / "o") == 3

    def test_empty_dataset(self, tmp_path, model_path):
        (tmp_path / "empty").mkdir()
        assert run("partition", model=model_path, data=tmp_path / "empty", out=tmp_path / "o") == 9

    def test_missing_dataset(self, tmp_path, model_path):
        assert run("partition", model=model_path, data=tmp_path / "none", out=tmp_path / "o") == 10

    def test_undecodable_image(self, tmp_path, model_path):
        root = tmp_path / "d"
        root.mkdir()
        (root / "x.png").write_bytes(b"not an image")
        assert run("partition", model=model_path, data=root, out=tmp_path / "o") == 8

    def test_no_report_on_failure(self, tmp_path, model_path):
        (tmp_path / "empty").mkdir()
        run("partition", model=model_path, data=tmp_path / "empty", out=tmp_path / "o")
        assert not (tmp_path / "o" / "partition.json").exists()

    def test_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["partition"])
        assert exc.value.code == 2
