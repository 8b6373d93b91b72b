"""Measurement procedures over trained models.

All split-level routines walk the bags batched by size in a fixed order, so
repeated evaluation of the same model on the same split reproduces results
bit for bit. Instance order is the stored order unless a routine explicitly
permutes it (permutation sensitivity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, models, oracle

EVAL_BATCH = 1000


def _split_groups(ds: data.Dataset, split: str):
    bags = ds.splits[split]
    if not bags:
        raise ValueError(f"split {split!r} is empty")
    return bags, data.group_by_size(bags), data.split_noise(ds, split), \
        (ds.pools[split] if ds.pools else None)


def split_mse_and_penalty(params, ds: data.Dataset, split: str,
                          reg_lambda: float = 0.0, reg_threshold: float = 1.0):
    """Mean squared error and mean intermediate penalty over one split."""
    bags, groups, noise, pool = _split_groups(ds, split)
    sq_sum = 0.0
    pen_sum = 0.0
    for n, (idx, classes, img_idx, labels) in groups.items():
        gnoise = noise[idx][:, :n, :] if noise is not None else None
        for s in range(0, len(idx), EVAL_BATCH):
            sl = slice(s, s + EVAL_BATCH)
            feats = data.position_features(classes[sl], img_idx[sl], ds.spec.mode,
                                           pool, gnoise[sl] if gnoise is not None else None)
            out = models.batch_forward(params, feats)
            err = out.prediction.data - labels[sl]
            sq_sum += float(err @ err)
            if reg_lambda > 0 and out.intermediates:
                for v in out.intermediates:
                    over = np.maximum(0.0, v.data - reg_threshold)
                    pen_sum += float(over @ over)
    count = len(bags)
    return sq_sum / count, pen_sum / count


def evaluate_mse(params, ds: data.Dataset, split: str) -> float:
    """MSE over the split using each bag's stored instance order."""
    mse, _ = split_mse_and_penalty(params, ds, split)
    return mse


def split_predictions(params, ds: data.Dataset, split: str) -> np.ndarray:
    """Model predictions aligned with the split's bag order."""
    bags, groups, noise, pool = _split_groups(ds, split)
    preds = np.empty(len(bags))
    for n, (idx, classes, img_idx, _) in groups.items():
        gnoise = noise[idx][:, :n, :] if noise is not None else None
        for s in range(0, len(idx), EVAL_BATCH):
            sl = slice(s, s + EVAL_BATCH)
            feats = data.position_features(classes[sl], img_idx[sl], ds.spec.mode,
                                           pool, gnoise[sl] if gnoise is not None else None)
            out = models.batch_forward(params, feats)
            preds[idx[sl]] = out.prediction.data
    return preds


def predict_mean_baseline(ds: data.Dataset, split: str) -> float:
    """MSE of always predicting the train-split label mean."""
    mean = float(np.mean([b.label for b in ds.splits["train"]]))
    labels = np.array([b.label for b in ds.splits[split]], dtype=np.float64)
    return float(np.mean((mean - labels) ** 2))


# -- intermediate results ---------------------------------------------------

@dataclass
class IntermediateEntry:
    classes: list
    expected: list
    predicted: list

    @property
    def deltas(self) -> list:
        if self.expected is None:
            return []
        return [abs(e - p) for e, p in zip(self.expected, self.predicted)]


@dataclass
class IntermediateReport:
    entries: list = field(default_factory=list)
    mae: float = 0.0
    kind: str = "capacity"


def _report_from(entries: list, kind: str) -> IntermediateReport:
    deltas = [d for e in entries for d in e.deltas]
    mae = float(np.mean(deltas)) if deltas else 0.0
    return IntermediateReport(entries=entries, mae=mae, kind=kind)


def intermediate_mae(params, ds: data.Dataset, split: str) -> IntermediateReport:
    """Compare a capacity model's per-instance outputs against the exact
    sequential decomposition of the label, in stored instance order."""
    if not params.spec.capacity:
        raise ValueError("intermediate_mae needs a capacity model; "
                         "use pseudo_intermediates for baselines")
    bags, groups, noise, pool = _split_groups(ds, split)
    entries = [None] * len(bags)
    for n, (idx, classes, img_idx, _) in groups.items():
        gnoise = noise[idx][:, :n, :] if noise is not None else None
        for s in range(0, len(idx), EVAL_BATCH):
            sl = slice(s, s + EVAL_BATCH)
            feats = data.position_features(classes[sl], img_idx[sl], ds.spec.mode,
                                           pool, gnoise[sl] if gnoise is not None else None)
            out = models.batch_forward(params, feats)
            nu_hat = np.stack([v.data for v in out.intermediates], axis=1)
            for row, bag_i in enumerate(idx[sl]):
                cls = [int(c) for c in classes[sl][row]]
                expected = oracle.decompose(ds.task, cls)
                entries[bag_i] = IntermediateEntry(cls, [float(v) for v in expected],
                                                   [float(v) for v in nu_hat[row]])
    return _report_from(entries, "capacity")


def pseudo_intermediates(params, bag, task: oracle.TaskSpec = None,
                         classes=None) -> IntermediateEntry:
    """Prefix-difference attribution for one bag on a non-capacity model.

    The i-th value is decode(prefix of i instances) minus decode(prefix of
    i-1); differences telescope to the full-bag prediction. Expected values
    (and so deltas) are filled in when the task and classes are given.
    """
    if params.spec.capacity:
        raise ValueError("capacity models expose real intermediates; no pseudo values needed")
    feats = models._single(bag)
    if not feats:
        raise ValueError("pseudo_intermediates rejects empty bags")
    prefix_preds = _prefix_predictions(params, feats)[:, 0]
    nu = [float(prefix_preds[0])]
    for i in range(1, len(feats)):
        nu.append(float(prefix_preds[i] - prefix_preds[i - 1]))
    expected = None
    if task is not None and classes is not None:
        expected = [float(v) for v in oracle.decompose(task, classes)]
    return IntermediateEntry(list(classes) if classes is not None else None, expected, nu)


def _prefix_predictions(params, feats: list) -> np.ndarray:
    """decode(prefix_i) for i = 1..n; returns [n, batch]."""
    spec = params.spec
    if spec.family in models.SEQUENTIAL:
        out = models.batch_forward(params, feats)
        return np.stack([models.decode_state(params, h) for h in out.latents], axis=0)
    return np.stack(
        [models.batch_forward(params, feats[:i + 1]).prediction.data
         for i in range(len(feats))], axis=0)


def pseudo_report(params, ds: data.Dataset, split: str) -> IntermediateReport:
    """Split-level pseudo-intermediate report with MAE against the oracle."""
    if params.spec.capacity:
        raise ValueError("pseudo_report is for non-capacity models")
    bags, groups, noise, pool = _split_groups(ds, split)
    entries = [None] * len(bags)
    for n, (idx, classes, img_idx, _) in groups.items():
        gnoise = noise[idx][:, :n, :] if noise is not None else None
        for s in range(0, len(idx), EVAL_BATCH):
            sl = slice(s, s + EVAL_BATCH)
            feats = data.position_features(classes[sl], img_idx[sl], ds.spec.mode,
                                           pool, gnoise[sl] if gnoise is not None else None)
            prefix = _prefix_predictions(params, feats)
            nu = np.diff(prefix, axis=0, prepend=0.0)
            for row, bag_i in enumerate(idx[sl]):
                cls = [int(c) for c in classes[sl][row]]
                expected = oracle.decompose(ds.task, cls)
                entries[bag_i] = IntermediateEntry(cls, [float(v) for v in expected],
                                                   [float(v) for v in nu[:, row]])
    return _report_from(entries, "pseudo")


def write_intermediate_jsonl(path, report: IntermediateReport):
    import json
    with open(path, "w") as f:
        for e in report.entries:
            f.write(json.dumps({"classes": e.classes, "expected": e.expected,
                                "predicted": e.predicted},
                               sort_keys=True, separators=(",", ":")) + "\n")


# -- order sensitivity and accuracy ----------------------------------------

def permutation_sensitivity(params, ds: data.Dataset, split: str,
                            k: int = 5, seed: int = 0) -> dict:
    """Re-evaluate the split MSE under k fresh instance orderings per bag."""
    if k < 2:
        raise ValueError("permutation sensitivity needs k >= 2 passes")
    bags, groups, noise, pool = _split_groups(ds, split)
    mses = []
    for pass_idx in range(k):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 13, pass_idx)))
        sq_sum = 0.0
        for n, (idx, classes, img_idx, labels) in groups.items():
            gnoise = noise[idx][:, :n, :] if noise is not None else None
            perms = rng.permuted(np.broadcast_to(np.arange(n), classes.shape).copy(), axis=1)
            classes_p = np.take_along_axis(classes, perms, axis=1)
            img_p = np.take_along_axis(img_idx, perms, axis=1)
            noise_p = (np.take_along_axis(gnoise, perms[:, :, None], axis=1)
                       if gnoise is not None else None)
            for s in range(0, len(idx), EVAL_BATCH):
                sl = slice(s, s + EVAL_BATCH)
                feats = data.position_features(classes_p[sl], img_p[sl], ds.spec.mode,
                                               pool, noise_p[sl] if noise_p is not None else None)
                out = models.batch_forward(params, feats)
                err = out.prediction.data - labels[sl]
                sq_sum += float(err @ err)
        mses.append(sq_sum / len(bags))
    arr = np.array(mses)
    spread = float(arr.max() - arr.min())
    return {
        "mse": [float(v) for v in arr],
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "stdev": float(arr.std()),
        "spread": spread,
        "relative_spread": spread / max(1.0, float(arr.mean())),
    }


def rounded_accuracy(params, ds: data.Dataset, split: str) -> float:
    """Fraction of bags whose prediction, rounded half away from zero,
    equals the integer label."""
    preds = split_predictions(params, ds, split)
    rounded = np.sign(preds) * np.floor(np.abs(preds) + 0.5)
    labels = np.array([b.label for b in ds.splits[split]], dtype=np.float64)
    return float(np.mean(rounded == labels))


def size_sweep(config, dataset_spec: data.DatasetSpec, sizes, seeds=(0,)) -> list:
    """Independent generate+train+eval per set size; one result row each."""
    from . import train as train_mod  # deferred: train imports this module
    if not sizes or any(int(n) < 1 for n in sizes):
        raise ValueError("sizes must be a non-empty list of integers >= 1")
    rows = []
    for n in sizes:
        ds = data.generate_dataset(data.DatasetSpec(
            task=dataset_spec.task, mode=dataset_spec.mode, set_size=int(n),
            counts=dataset_spec.counts, seed=dataset_spec.seed,
            noise=dataset_spec.noise, pair_count=dataset_spec.pair_count))
        agg = train_mod.multi_seed(config, list(seeds), dataset=ds)
        rows.append({
            "size": int(n),
            "val_mse": agg["val_mse"],
            "test_mse": agg["test_mse"],
            "label_variance": data.label_stats(ds.splits["test"])["variance"],
        })
    return rows
