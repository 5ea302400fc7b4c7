"""Why-it-worked metrics: domain alignment, gradient alignment, loss predictors.

Gradient alignment r is the ratio of the L1 norm of the average masked input
gradient to the average of the per-sample L1 norms. It is 1 when per-sample
gradients never cancel coordinate-wise (identical or orthogonal-support
gradients alike) and 0 when they cancel completely; the first-order theory
predicts reprogramming strength from the same average gradient through its
dual norm.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import LabeledDataset
from .errors import ConfigurationError
from .models import Network, accuracy, predict_batch
from .reprogram import ClassMap, Mask, Program, _delta_array
from .tensor import Tensor

CSV_HEADER = [
    "source", "target", "model", "trained", "mask_size",
    "DA", "RA", "r0", "rN", "g_l1", "seed", "config_hash",
]


@dataclass
class MetricsRecord:
    """One experiment row; field order matches the fixed CSV header."""

    source: str
    target: str
    model: str
    trained: bool
    mask_size: int
    da: float
    ra: float
    r0: float
    rn: float
    g_l1: float
    seed: int
    config_hash: str

    def __post_init__(self):
        for name in ("da", "ra", "r0", "rn"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name}={value} outside [0, 1]")
        if self.mask_size < 0:
            raise ConfigurationError(f"mask_size={self.mask_size} negative")

    def to_csv_row(self) -> list[str]:
        return [
            self.source, self.target, self.model, str(self.trained).lower(),
            str(self.mask_size), repr(self.da), repr(self.ra), repr(self.r0),
            repr(self.rn), repr(self.g_l1), str(self.seed), self.config_hash,
        ]

    @classmethod
    def from_csv_row(cls, row: list[str]) -> "MetricsRecord":
        return cls(
            source=row[0], target=row[1], model=row[2], trained=row[3] == "true",
            mask_size=int(row[4]), da=float(row[5]), ra=float(row[6]), r0=float(row[7]),
            rn=float(row[8]), g_l1=float(row[9]), seed=int(row[10]), config_hash=row[11],
        )

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def append_metrics(record: MetricsRecord, csv_path, jsonl_path=None) -> None:
    """Append one row to the CSV report (header written once) and JSON lines."""
    csv_path = Path(csv_path)
    new_file = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(CSV_HEADER)
        writer.writerow(record.to_csv_row())
    if jsonl_path is not None:
        with open(jsonl_path, "a") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")


def read_metrics_csv(csv_path) -> list[MetricsRecord]:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ConfigurationError(f"{csv_path}: unexpected header {header}")
        return [MetricsRecord.from_csv_row(row) for row in reader]


# -- accuracy-style metrics -----------------------------------------------------


def domain_alignment(net: Network, target_set: LabeledDataset, class_map: ClassMap) -> float:
    """Mapped accuracy on zero-padded target samples before any perturbation."""
    return accuracy(net, target_set, mapping=class_map.map)


def reprogramming_accuracy(net: Network, target_set: LabeledDataset, prog, mask: Mask,
                           class_map: ClassMap, batch_size: int = 200) -> float:
    """Mapped accuracy on perturbed target samples x + delta o M."""
    delta = _delta_array(prog)
    mapped = class_map.apply(target_set.labels)
    images = target_set.images.array
    hits = 0
    for start in range(0, len(target_set), batch_size):
        stop = min(start + batch_size, len(target_set))
        pred, _ = predict_batch(net, images[start:stop] + delta * mask.array)
        hits += int((pred == mapped[start:stop]).sum())
    return hits / len(target_set)


# -- gradient alignment ------------------------------------------------------------


def _alignment_ratio(sum_grad: np.ndarray, sum_norms: float, count: int) -> float:
    denominator = sum_norms / count
    if denominator == 0.0:
        return 0.0
    return float(np.abs(sum_grad / count).sum() / denominator)


def gradient_alignment(gradients) -> float:
    """r = ||mean g_i||_1 / mean ||g_i||_1 in [0, 1]; 0 when all gradients vanish."""
    if len(gradients) == 0:
        raise ConfigurationError("gradient_alignment needs at least one gradient")
    arrays = [g.array if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
              for g in gradients]
    sum_grad = np.zeros_like(arrays[0])
    sum_norms = 0.0
    for arr in arrays:
        sum_grad += arr
        sum_norms += float(np.abs(arr).sum())
    return _alignment_ratio(sum_grad, sum_norms, len(arrays))


def per_sample_masked_gradients(net, images: np.ndarray, labels: np.ndarray, prog,
                                mask: Mask, class_map: ClassMap, loss_fn=None) -> np.ndarray:
    """Per-sample input gradients at x_i + delta o M, masked; shape (n, *input).

    One batched backward suffices: with the batch loss scaled by n, the input
    gradient at slot i is exactly the gradient of sample i's own loss.
    """
    loss_fn = loss_fn or T.softmax_cross_entropy
    x = Tensor(images, requires_grad=True)
    pert = T.add(x, T.mul(Tensor(_delta_array(prog)), Tensor(mask.array)))
    loss = T.scale(loss_fn(net.forward(pert), class_map.apply(labels)), len(images))
    T.backward(loss)
    grads = x.grad if x.grad is not None else np.zeros_like(images)
    return grads * mask.array


def alignment_stats(net, dataset: LabeledDataset, prog, mask: Mask, class_map: ClassMap,
                    loss_fn=None, batch_size: int = 50) -> tuple[float, float]:
    """(r, ||g||_1) of masked per-sample gradients over a dataset, streamed."""
    images = dataset.images.array
    sum_grad = np.zeros(mask.array.shape)
    sum_norms, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        grads = per_sample_masked_gradients(
            net, images[start:stop], dataset.labels[start:stop], prog, mask, class_map, loss_fn
        )
        sum_grad += grads.sum(axis=0)
        sum_norms += float(np.abs(grads).sum())
        count += stop - start
    r = _alignment_ratio(sum_grad, sum_norms, count)
    g_l1 = float(np.abs(sum_grad / count).sum())
    return r, g_l1


def alignment_before_after(net, eval_set: LabeledDataset, mask: Mask, class_map: ClassMap,
                           prog: Program, loss_fn=None) -> tuple[float, float]:
    """Gradient alignment at the zero program (r0) and at the optimum (rN)."""
    zero = np.zeros(mask.array.shape)
    r0, _ = alignment_stats(net, eval_set, zero, mask, class_map, loss_fn)
    rn, _ = alignment_stats(net, eval_set, prog, mask, class_map, loss_fn)
    return r0, rn


# -- first-order loss predictors ------------------------------------------------------


def predicted_loss_drop(g, p, epsilon: float = 1.0) -> float:
    """First-order optimum of delta^T g over the epsilon ball: -epsilon ||g||_q.

    q is the dual exponent of p (1/p + 1/q = 1), so p=1, 2, inf give
    q=inf, 2, 1.
    """
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}")
    arr = g.array if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if p == 1:
        norm = float(np.abs(arr).max(initial=0.0))
    elif p == 2:
        norm = float(np.sqrt((arr * arr).sum()))
    elif p in (np.inf, float("inf")):
        norm = float(np.abs(arr).sum())
    else:
        raise ConfigurationError(f"unsupported norm p={p!r}; use 1, 2, or inf")
    return -float(epsilon) * norm


def linearized_loss(net, images, labels, mask: Mask, class_map: ClassMap, delta,
                    loss_fn=None) -> float:
    """First-order surrogate: zero-program loss plus delta^T (average gradient at 0)."""
    from .reprogram import average_masked_gradient, reprogramming_loss

    zero = np.zeros(mask.array.shape)
    base = reprogramming_loss(net, images, labels, zero, mask, class_map, loss_fn)
    g = average_masked_gradient(net, images, labels, zero, mask, class_map, loss_fn)
    return base + float(np.vdot(_delta_array(delta), g.array))


# -- confusion matrices ----------------------------------------------------------------


def confusion_matrix(net: Network, target_set: LabeledDataset, prog, mask: Mask,
                     class_map: ClassMap, batch_size: int = 200) -> np.ndarray:
    """Counts of true target class vs predicted class pulled back through the map.

    Shape (num_target, num_target + 1): predictions outside the map's image
    fall into the trailing "other" column. ``prog=None`` evaluates the zero
    program (the domain-alignment condition).
    """
    k = target_set.num_classes
    delta = np.zeros(mask.array.shape) if prog is None else _delta_array(prog)
    inverse = class_map.inverse()
    counts = np.zeros((k, k + 1), dtype=np.int64)
    images = target_set.images.array
    for start in range(0, len(target_set), batch_size):
        stop = min(start + batch_size, len(target_set))
        pred, _ = predict_batch(net, images[start:stop] + delta * mask.array)
        for true_label, source_pred in zip(target_set.labels[start:stop], pred):
            counts[true_label, inverse.get(int(source_pred), k)] += 1
    return counts


def save_confusion_csv(counts: np.ndarray, path) -> None:
    k = counts.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [str(i) for i in range(k)] + ["other"])
        for i in range(k):
            writer.writerow([str(i)] + [str(int(v)) for v in counts[i]])
