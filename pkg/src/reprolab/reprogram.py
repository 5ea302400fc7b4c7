"""Adversarial program optimization: mask, class map, loss, and sign-SGD.

The program is a single perturbation ``delta`` in [-1, 1]^d applied through a
binary frame mask to every target-domain sample. Optimization follows
sign-gradient descent with box projection: per batch, delta moves eta along
the negative sign of the average masked input gradient; after each epoch the
loss on a held-out evaluation set decides whether the current delta becomes
the returned optimum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import LabeledDataset, make_batches
from .errors import ConfigurationError, InjectivityError, NumericError, ShapeError
from .tensor import Tensor, load_tensor, no_grad, save_tensor


@dataclass
class Mask:
    """Binary tensor selecting the perturbable region; size() is its L1 norm."""

    values: Tensor
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = self.values.array
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ConfigurationError("mask entries must be 0 or 1")

    def size(self) -> int:
        return int(self.values.array.sum())

    @property
    def array(self) -> np.ndarray:
        return self.values.array


@dataclass
class ClassMap:
    """Injective map from target-domain labels to source-domain labels."""

    map: np.ndarray

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=np.int64)
        if len(np.unique(self.map)) != len(self.map):
            raise InjectivityError(f"class map {list(self.map)} reuses a source class")

    def __len__(self) -> int:
        return len(self.map)

    def apply(self, labels: np.ndarray) -> np.ndarray:
        return self.map[np.asarray(labels, dtype=np.int64)]

    def inverse(self) -> dict[int, int]:
        return {int(src): tgt for tgt, src in enumerate(self.map)}


@dataclass
class Program:
    """Optimized perturbation with its evaluation-loss trail.

    ``history[0]`` is the evaluation loss of the zero program; one entry per
    epoch follows. ``best_loss`` is the minimum of the recorded history and
    ``delta`` the perturbation achieving it.
    """

    delta: Tensor
    best_loss: float = float("inf")
    history: list[float] = field(default_factory=list)


@dataclass
class ReprogramConfig:
    eta: float = 0.005
    epochs: int = 100
    batch_size: int = 50
    opt_set_size: int = 5000
    eval_set_size: int = 5000
    metrics_set_size: int = 1000
    use_heldout_eval: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")


def build_frame_mask(input_shape: tuple[int, int, int], inner_size: tuple[int, int],
                     outer_size: int | None = None) -> Mask:
    """Mask that is 0 over the centered inner region and 1 on the frame.

    ``outer_size`` restricts the active frame to a centered square annulus of
    that extent (everything outside it is masked off), which is how mask-size
    sweeps shrink the program without moving the embedded image.
    """
    c, h, w = input_shape
    ih, iw = inner_size
    if ih > h or iw > w:
        raise ShapeError(f"inner {inner_size} larger than input {input_shape}")
    arr = np.ones((c, h, w))
    row, col = (h - ih) // 2, (w - iw) // 2
    arr[:, row : row + ih, col : col + iw] = 0.0
    if outer_size is not None:
        if outer_size > min(h, w):
            raise ShapeError(f"outer size {outer_size} larger than input {input_shape}")
        if outer_size < max(ih, iw):
            raise ShapeError(f"outer size {outer_size} smaller than inner image {inner_size}")
        keep = np.zeros((c, h, w))
        orow, ocol = (h - outer_size) // 2, (w - outer_size) // 2
        keep[:, orow : orow + outer_size, ocol : ocol + outer_size] = 1.0
        arr *= keep
    return Mask(
        values=Tensor(arr),
        spec={"input_shape": list(input_shape), "inner_size": list(inner_size),
              "outer_size": outer_size},
    )


def build_class_map(num_target_classes: int, spec="first-ten",
                    num_source_classes: int | None = None) -> ClassMap:
    """'first-ten' maps target class k to source class k; lists are explicit."""
    if isinstance(spec, str):
        if spec != "first-ten":
            raise ConfigurationError(f"unknown class-map spec {spec!r}")
        mapping = np.arange(num_target_classes, dtype=np.int64)
    else:
        mapping = np.asarray(list(spec), dtype=np.int64)
        if len(mapping) != num_target_classes:
            raise ConfigurationError(
                f"class map has {len(mapping)} entries for {num_target_classes} classes"
            )
    if num_source_classes is not None and (mapping >= num_source_classes).any():
        raise ConfigurationError(
            f"class map {list(mapping)} references classes outside [0, {num_source_classes})"
        )
    return ClassMap(map=mapping)


def _delta_array(prog) -> np.ndarray:
    if isinstance(prog, Program):
        return prog.delta.array
    if isinstance(prog, Tensor):
        return prog.array
    return np.asarray(prog, dtype=np.float64)


def box_project(delta):
    """Elementwise clamp to [-1, 1]; preserves the input's type."""
    if isinstance(delta, Tensor):
        return Tensor(np.clip(delta.array, -1.0, 1.0))
    return np.clip(np.asarray(delta, dtype=np.float64), -1.0, 1.0)


def apply_program(x: Tensor, prog, mask: Mask) -> Tensor:
    """x + delta o M for a sample or batch whose masked region is exactly 0."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    marr = mask.array
    if x.shape[-3:] != marr.shape:
        raise ShapeError(f"input shape {x.shape} does not match mask {marr.shape}")
    if np.abs(x.array[..., marr != 0]).max(initial=0.0) != 0.0:
        raise ConfigurationError(
            "input is nonzero under the mask; programs only apply to zero-padded frames"
        )
    if isinstance(prog, (Program, np.ndarray, list)):
        prog = Tensor(_delta_array(prog))
    return T.add(x, T.mul(prog, Tensor(marr)))


def _mean_loss(net, images: np.ndarray, labels: np.ndarray, delta: np.ndarray,
               mask_arr: np.ndarray, mapped: np.ndarray, loss_fn) -> float:
    """Graph-free mean loss of perturbed images in evaluation chunks."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(images), 200):
            stop = min(start + 200, len(images))
            x = Tensor(images[start:stop] + delta * mask_arr)
            value = loss_fn(net.forward(x), mapped[start:stop]).item()
            total += value * (stop - start)
            count += stop - start
    return total / count


def reprogramming_loss(net, images, labels, prog, mask: Mask, class_map: ClassMap,
                       loss_fn=None) -> float:
    """Mean loss of perturbed samples against their mapped source labels."""
    loss_fn = loss_fn or T.softmax_cross_entropy
    images = images.array if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    return _mean_loss(
        net, images, np.asarray(labels), _delta_array(prog), mask.array,
        class_map.apply(labels), loss_fn,
    )


def average_masked_gradient(net, images, labels, prog, mask: Mask, class_map: ClassMap,
                            loss_fn=None) -> Tensor:
    """(1/B) sum of per-sample input gradients at x_i + delta o M, masked.

    Computed as the gradient of the mean batch loss with respect to delta,
    which the chain rule through delta o M masks exactly (zero off-mask).
    """
    if len(np.asarray(labels)) == 0:
        raise ConfigurationError("average_masked_gradient needs a nonempty batch")
    loss_fn = loss_fn or T.softmax_cross_entropy
    delta_t = Tensor(_delta_array(prog), requires_grad=True)
    x = images if isinstance(images, Tensor) else Tensor(images)
    x_pert = T.add(x, T.mul(delta_t, Tensor(mask.array)))
    loss = loss_fn(net.forward(x_pert), class_map.apply(labels))
    if not np.isfinite(loss.item()):
        raise NumericError("non-finite loss while computing the average input gradient")
    T.backward(loss)
    grad = delta_t.grad if delta_t.grad is not None else np.zeros_like(delta_t.array)
    return Tensor(grad)


def optimize_program(net, opt_set: LabeledDataset, eval_set: LabeledDataset, mask: Mask,
                     class_map: ClassMap, cfg: ReprogramConfig, loss_fn=None,
                     step_callback=None, epoch_callback=None) -> Program:
    """Sign-gradient descent on the masked program with box projection.

    Per epoch the optimization set is reshuffled and split into full batches;
    each batch contributes one step delta <- clamp(delta - eta sign(g)). After
    each epoch the loss on the held-out evaluation set (or on the optimization
    set when ``use_heldout_eval`` is off) is recorded, and the delta with the
    minimum recorded loss is returned. sign(0) = 0, so coordinates outside the
    mask never move.

    ``step_callback(epoch, batch, delta)`` and
    ``epoch_callback(epoch, delta, eval_loss)`` observe read-only snapshots.
    """
    loss_fn = loss_fn or T.softmax_cross_entropy
    if hasattr(net, "set_requires_grad"):
        net.set_requires_grad(False)
    eval_ds = eval_set if cfg.use_heldout_eval else opt_set
    mask_arr = mask.array
    opt_images = opt_set.images.array
    mapped_eval = class_map.apply(eval_ds.labels)

    delta = np.zeros(mask_arr.shape)
    initial = _mean_loss(net, eval_ds.images.array, eval_ds.labels, delta, mask_arr,
                         mapped_eval, loss_fn)
    if not np.isfinite(initial):
        raise NumericError("non-finite evaluation loss at the zero program")
    history = [initial]
    best_loss, best_delta = initial, delta.copy()

    for epoch in range(cfg.epochs):
        for batch_index, idx in enumerate(make_batches(opt_set, cfg.batch_size, cfg.seed, epoch)):
            g = average_masked_gradient(
                net, opt_images[idx], opt_set.labels[idx], delta, mask, class_map, loss_fn
            )
            delta = np.clip(delta - cfg.eta * np.sign(g.array), -1.0, 1.0)
            if step_callback is not None:
                step_callback(epoch, batch_index, delta.copy())
        epoch_loss = _mean_loss(net, eval_ds.images.array, eval_ds.labels, delta, mask_arr,
                                mapped_eval, loss_fn)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"non-finite evaluation loss after epoch {epoch}")
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_delta = delta.copy()
        if epoch_callback is not None:
            epoch_callback(epoch, delta.copy(), epoch_loss)

    return Program(delta=Tensor(best_delta), best_loss=best_loss, history=history)


# -- checkpointing -----------------------------------------------------------------


def save_program(prog: Program, directory, mask: Mask | None = None,
                 class_map: ClassMap | None = None, cfg: ReprogramConfig | None = None,
                 extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(prog.delta, directory / "delta.tnsr")
    sidecar = {
        "format": "reprolab-program-v1",
        "best_loss": prog.best_loss,
        "history": prog.history,
        "mask": mask.spec if mask is not None else None,
        "class_map": [int(v) for v in class_map.map] if class_map is not None else None,
        "config": vars(cfg) if cfg is not None else None,
    }
    if extra:
        sidecar.update(extra)
    (directory / "program.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_program(directory) -> tuple[Program, dict]:
    directory = Path(directory)
    sidecar = json.loads((directory / "program.json").read_text())
    prog = Program(
        delta=load_tensor(directory / "delta.tnsr"),
        best_loss=sidecar["best_loss"],
        history=list(sidecar["history"]),
    )
    return prog, sidecar
