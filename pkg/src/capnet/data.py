"""Bag datasets: IDX image ingestion, oracle-labelled generation, persistence.

A dataset is three splits (train/val/test) of `Bag`s plus a manifest that
records everything needed to regenerate or re-validate it: task, pair set,
seed, per-split checksums. Bags are stored as JSON Lines, one per line:

    {"classes": [8, 5, 8], "img_idx": [-1, -1, -1], "label": 13}

Features are not stored; they are derived from the classes (symbolic
one-hots) or fetched from an image pool (image mode) at batch time.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import oracle

FORMAT_VERSION = 1
ORACLE_VERSION = 1
SPLITS = ("train", "val", "test")
_GENERATION_SHARD = 1024

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
_MAX_IDX_ELEMENTS = 1 << 34


# -- IDX files -------------------------------------------------------------

def parse_idx(data: bytes) -> np.ndarray:
    """Parse an IDX byte payload.

    Returns float images scaled to [0, 1] and flattened to N x (rows*cols)
    for the rank-3 image magic, or an int vector for the rank-1 label magic.
    """
    if len(data) < 4:
        raise ValueError(f"IDX header truncated at byte {len(data)}: need 4-byte magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_MAGIC_IMAGES:
        rank = 3
    elif magic == IDX_MAGIC_LABELS:
        rank = 1
    else:
        raise ValueError(f"bad IDX magic 0x{magic:08x} at byte 0")
    header = 4 + 4 * rank
    if len(data) < header:
        raise ValueError(f"IDX header truncated at byte {len(data)}: need {header} bytes")
    dims = struct.unpack(f">{rank}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_IDX_ELEMENTS:
        raise ValueError(f"IDX dimensions {dims} overflow at byte 4")
    if len(data) != header + count:
        raise ValueError(
            f"IDX payload ends at byte {len(data)}, header at byte 4 promises {header + count}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, offset=header)
    if magic == IDX_MAGIC_LABELS:
        return raw.astype(np.int64)
    return (raw.astype(np.float64) / 255.0).reshape(dims[0], dims[1] * dims[2])


def load_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_idx(f.read())


@dataclass
class ImagePool:
    """Images of one split; `offset` keeps indices global when one IDX file
    is partitioned across splits, so leakage checks stay meaningful."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    source: str = ""
    offset: int = 0

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        by_class = {}
        for c in range(oracle.NUM_CLASSES):
            by_class[c] = np.flatnonzero(self.labels == c)
        self._by_class = by_class

    def indices_for_class(self, c: int) -> np.ndarray:
        return self._by_class[int(c)]


def build_pool(images_path, labels_path, split, offset=0, count=None) -> ImagePool:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if count is None:
        count = len(images) - offset
    sel = slice(offset, offset + count)
    return ImagePool(images[sel], labels[sel], split, source=str(images_path), offset=offset)


def partition_pool(images_path, labels_path, counts: dict) -> dict:
    """Carve one IDX pair into disjoint per-split pools, in SPLITS order."""
    pools = {}
    offset = 0
    for split in SPLITS:
        if split not in counts:
            continue
        pools[split] = build_pool(images_path, labels_path, split, offset=offset, count=counts[split])
        offset += counts[split]
    return pools


# -- bags and specs --------------------------------------------------------

@dataclass
class Bag:
    classes: list
    label: float
    img_idx: list = None

    def __post_init__(self):
        if self.img_idx is None:
            self.img_idx = [-1] * len(self.classes)
        if len(self.img_idx) != len(self.classes):
            raise ValueError("img_idx length differs from classes length")

    @property
    def size(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class DatasetSpec:
    task: str
    mode: str = "symbolic"
    set_size: object = 10
    counts: tuple = (100000, 10000, 10000)
    seed: int = 0
    noise: float = 0.0
    pair_count: int = 5

    def __post_init__(self):
        if self.task not in oracle.TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {oracle.TASK_KINDS}")
        if self.mode not in ("symbolic", "image"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.counts) != 3 or any(c <= 0 for c in self.counts):
            raise ValueError(f"counts must be three positive integers, got {self.counts}")
        for n in self.sizes():
            if n < 1:
                raise ValueError(f"set size {n} < 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.mode == "image" and self.noise > 0:
            raise ValueError("feature noise applies to symbolic mode only")

    def sizes(self) -> tuple:
        if isinstance(self.set_size, int):
            return (self.set_size,)
        return tuple(int(n) for n in self.set_size)


@dataclass
class Dataset:
    spec: DatasetSpec
    task: oracle.TaskSpec
    splits: dict
    pools: dict = None
    manifest: dict = None

    def feature_dim(self) -> int:
        if self.spec.mode == "symbolic":
            return oracle.NUM_CLASSES
        return next(iter(self.pools.values())).images.shape[1]


def featurize(class_id: int, mode: str, image=None, noise: float = 0.0, rng=None) -> np.ndarray:
    """Feature vector of one instance: a one-hot (optionally jittered by
    uniform noise in [-noise, +noise]) or the scaled image pixels."""
    if mode == "symbolic":
        vec = np.zeros(oracle.NUM_CLASSES)
        vec[int(class_id)] = 1.0
        if noise > 0.0:
            vec += rng.uniform(-noise, noise, size=vec.shape)
        return vec
    if mode == "image":
        if image is None:
            raise ValueError("image mode needs the pixel row")
        return np.asarray(image, dtype=np.float64)
    raise ValueError(f"unknown mode {mode!r}")


def generate_dataset(spec: DatasetSpec, pools: dict = None) -> Dataset:
    """Generate oracle-labelled bags for all three splits.

    Classes are i.i.d. uniform over the task's class range; in image mode
    each instance's image is drawn uniformly from its class within the
    split's own pool. Deterministic given the spec's seed; generation runs
    in fixed-size shards with independently seeded streams, so shards could
    be produced concurrently without changing the output.
    """
    if spec.mode == "image":
        if pools is None or any(s not in pools for s in SPLITS):
            raise ValueError("image mode requires a pool for every split")
    if spec.task == "USS":
        pair_set = oracle.sample_pair_set(spec.seed, spec.pair_count)
    else:
        pair_set = ()
    task = oracle.TaskSpec(spec.task, pair_set=pair_set)
    low, high = task.class_range
    sizes = spec.sizes()

    splits = {}
    for split_idx, split in enumerate(SPLITS):
        count = spec.counts[split_idx]
        pool = pools[split] if spec.mode == "image" else None
        bags = []
        for shard_start in range(0, count, _GENERATION_SHARD):
            shard_len = min(_GENERATION_SHARD, count - shard_start)
            rng = np.random.default_rng(
                np.random.SeedSequence((spec.seed, split_idx, shard_start // _GENERATION_SHARD))
            )
            for _ in range(shard_len):
                n = sizes[rng.integers(len(sizes))] if len(sizes) > 1 else sizes[0]
                classes = rng.integers(low, high + 1, size=n)
                if pool is not None:
                    img_idx = []
                    for c in classes:
                        candidates = pool.indices_for_class(c)
                        if len(candidates) == 0:
                            raise ValueError(f"class {c} absent from {split} pool")
                        img_idx.append(int(candidates[rng.integers(len(candidates))]))
                else:
                    img_idx = [-1] * n
                label = oracle.eval_task(task, classes)
                bags.append(Bag([int(c) for c in classes], label, img_idx))
        splits[split] = bags

    ds = Dataset(spec, task, splits, pools=pools)
    ds.manifest = _build_manifest(ds)
    return ds


def validate_labels(ds: Dataset):
    """Re-check every stored label against the oracle (exact integers)."""
    for split, bags in ds.splits.items():
        for i, bag in enumerate(bags):
            expected = oracle.eval_task(ds.task, bag.classes)
            if int(bag.label) != expected:
                raise ValueError(f"{split} bag {i}: stored label {bag.label} != oracle {expected}")


def check_split_purity(ds: Dataset):
    """No image (global index within its source file) may appear in two splits."""
    used = {}
    for split, bags in ds.splits.items():
        pool = ds.pools[split] if ds.pools else None
        for bag in bags:
            for idx in bag.img_idx:
                if idx < 0:
                    continue
                key = (pool.source, pool.offset + idx)
                owner = used.setdefault(key, split)
                if owner != split:
                    raise ValueError(f"image {key} used by both {owner} and {split}")


def label_stats(bags) -> dict:
    labels = np.array([bag.label for bag in bags], dtype=np.float64)
    return {
        "count": len(labels),
        "mean": float(labels.mean()),
        "median": float(np.median(labels)),
        "variance": float(labels.var()),
        "stdev": float(labels.std()),
    }


# -- persistence -----------------------------------------------------------

def _build_manifest(ds: Dataset) -> dict:
    spec = ds.spec
    manifest = {
        "format_version": FORMAT_VERSION,
        "oracle_version": ORACLE_VERSION,
        "task": spec.task,
        "pair_set": [list(p) for p in ds.task.pair_set],
        "class_range": list(ds.task.class_range),
        "mode": spec.mode,
        "set_size": spec.set_size if isinstance(spec.set_size, int) else list(spec.sizes()),
        "counts": {s: spec.counts[i] for i, s in enumerate(SPLITS)},
        "seed": spec.seed,
        "noise": spec.noise,
        "pair_count": spec.pair_count,
        "checksums": {},
        "pools": None,
    }
    if ds.pools:
        manifest["pools"] = {
            s: {"source": p.source, "offset": p.offset, "count": len(p.images)}
            for s, p in ds.pools.items()
        }
    return manifest


def _bag_line(bag: Bag) -> str:
    record = {"classes": bag.classes, "img_idx": bag.img_idx, "label": bag.label}
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def save_dataset(ds: Dataset, out_dir) -> dict:
    """Write {train,val,test}.jsonl plus manifest.json; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = dict(ds.manifest or _build_manifest(ds))
    manifest["checksums"] = {}
    for split in SPLITS:
        payload = "".join(_bag_line(bag) + "\n" for bag in ds.splits[split]).encode()
        manifest["checksums"][split] = hashlib.sha256(payload).hexdigest()
        with open(os.path.join(out_dir, f"{split}.jsonl"), "wb") as f:
            f.write(payload)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    ds.manifest = manifest
    return manifest


def load_dataset(path, pools: dict = None) -> Dataset:
    """Load a saved dataset, verifying versions and per-split checksums."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    if manifest.get("oracle_version") != ORACLE_VERSION:
        raise ValueError(f"dataset was labelled by oracle version {manifest.get('oracle_version')}, "
                         f"this build expects {ORACLE_VERSION}")

    spec = DatasetSpec(
        task=manifest["task"],
        mode=manifest["mode"],
        set_size=manifest["set_size"] if isinstance(manifest["set_size"], int)
        else tuple(manifest["set_size"]),
        counts=tuple(manifest["counts"][s] for s in SPLITS),
        seed=manifest["seed"],
        noise=manifest.get("noise", 0.0),
        pair_count=manifest.get("pair_count", 0),
    )
    task = oracle.TaskSpec(manifest["task"], pair_set=tuple(tuple(p) for p in manifest["pair_set"]))

    if spec.mode == "image" and pools is None:
        pools = {}
        for split, info in manifest["pools"].items():
            labels_path = _labels_path_for(info["source"])
            pools[split] = build_pool(info["source"], labels_path, split,
                                      offset=info["offset"], count=info["count"])

    splits = {}
    for split in SPLITS:
        file_path = os.path.join(path, f"{split}.jsonl")
        with open(file_path, "rb") as f:
            payload = f.read()
        digest = hashlib.sha256(payload).hexdigest()
        if digest != manifest["checksums"][split]:
            raise ValueError(f"checksum failure for {split}.jsonl")
        bags = []
        for lineno, line in enumerate(payload.decode().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                bags.append(Bag(record["classes"], record["label"], record["img_idx"]))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{split}.jsonl line {lineno}: {exc}") from exc
        splits[split] = bags

    ds = Dataset(spec, task, splits, pools=pools, manifest=manifest)
    return ds


def _labels_path_for(images_path: str) -> str:
    # MNIST distribution convention: ...-images-idx3-ubyte / ...-labels-idx1-ubyte
    guess = images_path.replace("images-idx3", "labels-idx1").replace("images", "labels")
    if guess == images_path:
        raise ValueError(f"cannot derive labels path from {images_path!r}; pass pools explicitly")
    return guess


def data_root() -> str:
    """Default root for pools and datasets (CAPNET_DATA_DIR, else cwd)."""
    return os.environ.get("CAPNET_DATA_DIR", ".")


def resolve_path(path) -> str:
    path = str(path)
    if os.path.isabs(path) or os.path.exists(path):
        return path
    return os.path.join(data_root(), path)


# -- batch assembly --------------------------------------------------------

def group_by_size(bags) -> dict:
    """Indices of bags grouped by bag size, each with classes/img_idx arrays."""
    groups = {}
    for i, bag in enumerate(bags):
        groups.setdefault(bag.size, []).append(i)
    out = {}
    for n, idxs in sorted(groups.items()):
        idx_arr = np.array(idxs, dtype=np.int64)
        classes = np.array([bags[i].classes for i in idxs], dtype=np.int64)
        img_idx = np.array([bags[i].img_idx for i in idxs], dtype=np.int64)
        labels = np.array([bags[i].label for i in idxs], dtype=np.float64)
        out[n] = (idx_arr, classes, img_idx, labels)
    return out


_EYE = np.eye(oracle.NUM_CLASSES)


def position_features(classes: np.ndarray, img_idx: np.ndarray, mode: str,
                      pool: ImagePool = None, noise: np.ndarray = None) -> list:
    """Per-position feature matrices for a [B, n] block of bags.

    Returns n arrays of shape [B, feature_dim], one per instance position.
    `noise` (symbolic mode only) is a [B, n, 10] additive perturbation.
    """
    b, n = classes.shape
    feats = []
    for pos in range(n):
        if mode == "symbolic":
            x = _EYE[classes[:, pos]].copy()
            if noise is not None:
                x += noise[:, pos, :]
        else:
            x = pool.images[img_idx[:, pos]]
        feats.append(x)
    return feats


def split_noise(ds: Dataset, split: str) -> np.ndarray:
    """Deterministic per-instance feature noise for a whole split (or None)."""
    if ds.spec.noise <= 0.0:
        return None
    bags = ds.splits[split]
    sizes = ds.spec.sizes()
    rng = np.random.default_rng(np.random.SeedSequence((ds.spec.seed, SPLITS.index(split), 991)))
    max_n = max(sizes)
    return rng.uniform(-ds.spec.noise, ds.spec.noise,
                       size=(len(bags), max_n, oracle.NUM_CLASSES))
