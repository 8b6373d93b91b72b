"""Dataset layer: IDX parsing, generation, persistence, batch assembly."""

import json
import struct

import numpy as np
import pytest

from capnet import data, oracle


def make_idx_images(arrays) -> bytes:
    arr = np.asarray(arrays, dtype=np.uint8)
    n, r, c = arr.shape
    return struct.pack(">IIII", 0x803, n, r, c) + arr.tobytes()


def make_idx_labels(labels) -> bytes:
    arr = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 0x801, len(arr)) + arr.tobytes()


def test_parse_idx_images_scales_and_flattens():
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    out = data.parse_idx(make_idx_images(imgs))
    assert out.shape == (2, 9)
    assert out.dtype == np.float64
    assert out.max() <= 1.0
    assert out[1, 8] == pytest.approx(17 / 255)


def test_parse_idx_labels():
    out = data.parse_idx(make_idx_labels([3, 1, 4, 1, 5]))
    assert out.tolist() == [3, 1, 4, 1, 5]
    assert out.dtype == np.int64


def test_parse_idx_error_reporting():
    with pytest.raises(ValueError, match="magic"):
        data.parse_idx(struct.pack(">I", 0x12345678) + b"\x00" * 8)
    with pytest.raises(ValueError, match="byte"):
        data.parse_idx(b"\x00\x00")
    payload = make_idx_images(np.zeros((2, 3, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="ends at byte"):
        data.parse_idx(payload[:-5])
    with pytest.raises(ValueError, match="ends at byte"):
        data.parse_idx(payload + b"\x00")
    huge = struct.pack(">IIII", 0x803, 2**31, 2**31, 4)
    with pytest.raises(ValueError, match="overflow"):
        data.parse_idx(huge)


def synth_pool(split, count=60, dim=4, seed=0, offset=0):
    """Tiny image pool covering every class."""
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(10)] * (count // 10 + 1))[:count]
    images = rng.uniform(0, 1, size=(count, dim * dim))
    return data.ImagePool(images, labels, split, source=f"synth-{seed}", offset=offset)


def test_image_pool_class_index_and_validation():
    pool = synth_pool("train")
    for c in range(10):
        idxs = pool.indices_for_class(c)
        assert np.all(pool.labels[idxs] == c)
    with pytest.raises(ValueError):
        data.ImagePool(np.zeros((3, 4)), np.zeros(2, dtype=int), "train")
    with pytest.raises(ValueError):
        data.ImagePool(np.full((2, 4), 2.0), np.zeros(2, dtype=int), "train")


def test_dataset_spec_validation():
    with pytest.raises(ValueError, match="task"):
        data.DatasetSpec(task="Nope")
    with pytest.raises(ValueError, match="mode"):
        data.DatasetSpec(task="US", mode="audio")
    with pytest.raises(ValueError, match="counts"):
        data.DatasetSpec(task="US", counts=(10, 0, 10))
    with pytest.raises(ValueError, match="size"):
        data.DatasetSpec(task="US", set_size=0)
    with pytest.raises(ValueError, match="noise"):
        data.DatasetSpec(task="US", mode="image", noise=0.1)


def test_generation_is_deterministic_and_labels_check_out():
    spec = data.DatasetSpec(task="WTri", set_size=4, counts=(300, 50, 50), seed=5)
    a = data.generate_dataset(spec)
    b = data.generate_dataset(spec)
    for split in data.SPLITS:
        assert [x.classes for x in a.splits[split]] == [x.classes for x in b.splits[split]]
        assert [x.label for x in a.splits[split]] == [x.label for x in b.splits[split]]
    data.validate_labels(a)

    c = data.generate_dataset(data.DatasetSpec(task="WTri", set_size=4,
                                               counts=(300, 50, 50), seed=6))
    assert [x.classes for x in a.splits["train"]] != [x.classes for x in c.splits["train"]]


def test_generation_shards_do_not_depend_on_total_count():
    # the first bags are identical regardless of how many follow
    small = data.generate_dataset(data.DatasetSpec(task="US", set_size=3,
                                                   counts=(100, 10, 10), seed=2))
    large = data.generate_dataset(data.DatasetSpec(task="US", set_size=3,
                                                   counts=(1500, 10, 10), seed=2))
    assert [x.classes for x in small.splits["train"]] == \
        [x.classes for x in large.splits["train"][:100]]


def test_product_task_never_samples_class_zero():
    ds = data.generate_dataset(data.DatasetSpec(task="Mult", set_size=3,
                                                counts=(300, 30, 30), seed=1))
    for bags in ds.splits.values():
        for bag in bags:
            assert all(c >= 1 for c in bag.classes)
    data.validate_labels(ds)


def test_pair_task_records_pairs_in_manifest():
    spec = data.DatasetSpec(task="USS", set_size=4, counts=(100, 20, 20), seed=9)
    ds = data.generate_dataset(spec)
    assert len(ds.task.pair_set) == 5
    assert ds.manifest["pair_set"] == [list(p) for p in ds.task.pair_set]
    data.validate_labels(ds)


def test_mixed_set_sizes():
    ds = data.generate_dataset(data.DatasetSpec(task="UC", set_size=(2, 5),
                                                counts=(400, 40, 40), seed=3))
    sizes = {b.size for b in ds.splits["train"]}
    assert sizes == {2, 5}
    data.validate_labels(ds)


def test_save_load_round_trip(tmp_path):
    spec = data.DatasetSpec(task="US", set_size=5, counts=(200, 40, 40), seed=8)
    ds = data.generate_dataset(spec)
    data.save_dataset(ds, tmp_path)
    loaded = data.load_dataset(tmp_path)
    assert loaded.spec == spec
    assert loaded.task == ds.task
    for split in data.SPLITS:
        assert [b.classes for b in loaded.splits[split]] == \
            [b.classes for b in ds.splits[split]]
        assert [b.label for b in loaded.splits[split]] == \
            [b.label for b in ds.splits[split]]


def test_save_is_byte_identical_across_runs(tmp_path):
    spec = data.DatasetSpec(task="TriC", set_size=4, counts=(150, 30, 30), seed=4)
    data.save_dataset(data.generate_dataset(spec), tmp_path / "a")
    data.save_dataset(data.generate_dataset(spec), tmp_path / "b")
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_rejects_tampering_and_version_skew(tmp_path):
    spec = data.DatasetSpec(task="US", set_size=3, counts=(50, 10, 10), seed=0)
    data.save_dataset(data.generate_dataset(spec), tmp_path)

    val = tmp_path / "val.jsonl"
    original = val.read_bytes()
    val.write_bytes(original.replace(b'"label":', b'"label": ', 1))
    with pytest.raises(ValueError, match="checksum"):
        data.load_dataset(tmp_path)
    val.write_bytes(original)

    manifest_path = tmp_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = 99
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="version"):
        data.load_dataset(tmp_path)


def test_load_reports_line_numbers(tmp_path):
    spec = data.DatasetSpec(task="US", set_size=3, counts=(5, 5, 5), seed=0)
    ds = data.generate_dataset(spec)
    data.save_dataset(ds, tmp_path)
    test_file = tmp_path / "test.jsonl"
    lines = test_file.read_text().splitlines()
    lines[2] = '{"classes": [1, 2],'  # truncated JSON
    payload = "\n".join(lines) + "\n"
    test_file.write_text(payload)
    manifest_path = tmp_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    import hashlib
    manifest["checksums"]["test"] = hashlib.sha256(payload.encode()).hexdigest()
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="line 3"):
        data.load_dataset(tmp_path)


def test_featurize_symbolic_and_noise():
    vec = data.featurize(7, "symbolic")
    assert vec.tolist() == [0, 0, 0, 0, 0, 0, 0, 1, 0, 0]
    rng = np.random.default_rng(0)
    noisy = data.featurize(7, "symbolic", noise=0.05, rng=rng)
    assert np.abs(noisy - vec).max() <= 0.05
    assert not np.array_equal(noisy, vec)
    img = np.full(16, 0.5)
    assert np.array_equal(data.featurize(3, "image", image=img), img)
    with pytest.raises(ValueError):
        data.featurize(3, "image")


def test_image_mode_draws_from_matching_class(tmp_path):
    pools = {s: synth_pool(s, seed=i) for i, s in enumerate(data.SPLITS)}
    spec = data.DatasetSpec(task="US", mode="image", set_size=3,
                            counts=(60, 20, 20), seed=5)
    ds = data.generate_dataset(spec, pools=pools)
    for split in data.SPLITS:
        pool = pools[split]
        for bag in ds.splits[split]:
            for c, idx in zip(bag.classes, bag.img_idx):
                assert pool.labels[idx] == c
    data.check_split_purity(ds)

    with pytest.raises(ValueError, match="pool"):
        data.generate_dataset(spec)


def test_split_purity_detects_shared_images():
    pools = {s: synth_pool(s, seed=0) for s in data.SPLITS}  # same source id
    for p in pools.values():
        p.source = "same-file"
    spec = data.DatasetSpec(task="US", mode="image", set_size=3,
                            counts=(30, 10, 10), seed=5)
    ds = data.generate_dataset(spec, pools=pools)
    with pytest.raises(ValueError, match="both"):
        data.check_split_purity(ds)


def test_partition_pool_keeps_global_offsets(tmp_path):
    imgs = np.arange(40, dtype=np.uint8).reshape(40, 1, 1) % 200
    labels = np.concatenate([np.arange(10)] * 4).astype(np.uint8)
    ipath, lpath = tmp_path / "imgs", tmp_path / "labels"
    ipath.write_bytes(make_idx_images(imgs.reshape(40, 1, 1)))
    lpath.write_bytes(make_idx_labels(labels))
    pools = data.partition_pool(ipath, lpath, {"train": 20, "val": 10, "test": 10})
    assert pools["train"].offset == 0
    assert pools["val"].offset == 20
    assert pools["test"].offset == 30
    assert len(pools["val"].images) == 10
    spec = data.DatasetSpec(task="UC", mode="image", set_size=2,
                            counts=(30, 10, 10), seed=1)
    ds = data.generate_dataset(spec, pools=pools)
    data.check_split_purity(ds)


def test_group_by_size_and_position_features():
    bags = [data.Bag([1, 2], 3.0), data.Bag([4], 4.0), data.Bag([2, 2], 4.0)]
    groups = data.group_by_size(bags)
    assert sorted(groups) == [1, 2]
    idx, classes, img_idx, labels = groups[2]
    assert idx.tolist() == [0, 2]
    assert classes.tolist() == [[1, 2], [2, 2]]
    feats = data.position_features(classes, img_idx, "symbolic")
    assert len(feats) == 2
    assert feats[0][0].tolist() == data.featurize(1, "symbolic").tolist()
    assert feats[1][1].tolist() == data.featurize(2, "symbolic").tolist()


def test_split_noise_is_deterministic_and_bounded():
    spec = data.DatasetSpec(task="US", set_size=4, counts=(50, 10, 10),
                            seed=2, noise=0.1)
    ds = data.generate_dataset(spec)
    a = data.split_noise(ds, "train")
    b = data.split_noise(ds, "train")
    assert np.array_equal(a, b)
    assert a.shape == (50, 4, 10)
    assert np.abs(a).max() <= 0.1
    assert data.split_noise(ds, "val") is not None
    quiet = data.generate_dataset(data.DatasetSpec(task="US", set_size=4,
                                                   counts=(50, 10, 10), seed=2))
    assert data.split_noise(quiet, "train") is None


def test_data_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CAPNET_DATA_DIR", str(tmp_path))
    assert data.resolve_path("sub/ds") == str(tmp_path / "sub" / "ds")
    absolute = str(tmp_path / "abs")
    assert data.resolve_path(absolute) == absolute
