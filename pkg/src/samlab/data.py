"""Dataset generation, IDX ingestion, label noise, and pruning masks.

Generators are pure functions of their seed. Serialization uses one JSON
metadata record plus raw little-endian float32 blobs (see save_dataset).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .diffops import value_and_grad
from .models import ModelSpec, mlp_forward, mlp_init, squared_loss_fn
from .params import ParamLayout, ParamVector
from .rng import make_rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs plus regression targets or class labels."""

    inputs: np.ndarray
    targets: np.ndarray
    kind: str = "regression"
    num_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.kind == "classification":
            self.targets = np.asarray(self.targets, dtype=np.int64)
            if self.num_classes is None:
                raise ValueError("classification dataset needs num_classes")
            if self.targets.ndim != 1:
                raise ValueError("classification targets must be 1-D labels")
            if self.targets.size and (
                self.targets.min() < 0 or self.targets.max() >= self.num_classes
            ):
                raise ValueError("labels must lie in [0, num_classes)")
        elif self.kind == "regression":
            self.targets = np.asarray(self.targets, dtype=np.float64)
        else:
            raise ValueError("kind must be 'regression' or 'classification'")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")

    def __len__(self) -> int:
        return len(self.inputs)

    def encoded_targets(self) -> np.ndarray:
        """Regression targets as (n, k); class labels one-hot encoded."""
        if self.kind == "classification":
            onehot = np.zeros((len(self), self.num_classes))
            onehot[np.arange(len(self)), self.targets] = 1.0
            return onehot
        return self.targets[:, None] if self.targets.ndim == 1 else self.targets

    def subset(self, indices) -> "Dataset":
        return Dataset(
            self.inputs[indices],
            self.targets[indices],
            self.kind,
            self.num_classes,
            dict(self.meta),
        )


# -- synthetic generators ------------------------------------------------------


class TeacherStudentData(NamedTuple):
    train: Dataset
    test: Dataset
    teacher_spec: ModelSpec
    teacher_params: ParamVector


def gen_teacher_student(
    width_teacher: int = 200,
    d: int = 100,
    n_train: int = 20400,
    n_test: int = 5100,
    noise_sigma: float = 1.0,
    seed: int = 0,
) -> TeacherStudentData:
    """Standard-normal inputs labeled by a fixed random one-hidden-layer
    ReLU teacher plus Gaussian noise."""
    spec = ModelSpec(layer_widths=(d, width_teacher, 1))
    scheme = [("gauss_custom", 1.0 / np.sqrt(d)), ("gauss_custom", np.sqrt(2.0 / width_teacher))]
    teacher = mlp_init(spec, scheme, seed)
    rng = make_rng(seed, "teacher_student")

    def make(n: int, split: str) -> Dataset:
        X = rng.normal(size=(n, d))
        y = mlp_forward(spec, teacher, X)[:, 0] + noise_sigma * rng.normal(size=n)
        return Dataset(X, y, meta={"generator": "teacher_student", "split": split, "seed": seed})

    return TeacherStudentData(make(n_train, "train"), make(n_test, "test"), spec, teacher)


def sinusoid_product_target(X: np.ndarray) -> np.ndarray:
    """(sin 3x1 + sin 3x2 + sin 3x3 - 2)^2 cos 7x4 for rows of X."""
    s = np.sin(3.0 * X[:, 0]) + np.sin(3.0 * X[:, 1]) + np.sin(3.0 * X[:, 2]) - 2.0
    return s ** 2 * np.cos(7.0 * X[:, 3])


def gen_4d_target(n_train: int = 1000, n_test: int = 5000, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Unit-norm 4-D Gaussian inputs with the sinusoid-product target."""
    rng = make_rng(seed, "4d_target")

    def make(n: int, split: str) -> Dataset:
        X = rng.normal(size=(n, 4))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        return Dataset(
            X, sinusoid_product_target(X), meta={"generator": "4d_target", "split": split, "seed": seed}
        )

    return make(n_train, "train"), make(n_test, "test")


def gen_1d_regression(n: int = 8, seed: int = 0, noise_sigma: float = 0.1) -> Dataset:
    """Small 1-D regression set: spread-out inputs on [-1, 1], sinusoid
    target plus noise. Used for the piecewise-linear complexity runs."""
    rng = make_rng(seed, "1d_regression")
    x = np.sort(rng.uniform(-1.0, 1.0, size=n))
    y = np.sin(np.pi * x) + noise_sigma * rng.normal(size=n)
    return Dataset(x[:, None], y, meta={"generator": "1d_regression", "seed": seed, "n": n})


def gen_blobs_2d(
    n: int = 200,
    seed: int = 0,
    num_classes: int = 2,
    radius: float = 2.0,
    spread: float = 0.6,
) -> Dataset:
    """Gaussian class blobs placed on a circle; 2-D classification."""
    rng = make_rng(seed, "blobs_2d")
    labels = rng.integers(0, num_classes, size=n)
    angles = 2.0 * np.pi * labels / num_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    X = centers + spread * rng.normal(size=(n, 2))
    return Dataset(
        X, labels, kind="classification", num_classes=num_classes,
        meta={"generator": "blobs_2d", "seed": seed},
    )


# -- MNIST IDX format ----------------------------------------------------------


class IdxFormatError(ValueError):
    """Base error for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxFormatError):
    """File is shorter than its header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files disagree on the item count."""


def _read_idx_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise IdxTruncatedError(f"{path}: header truncated")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise IdxTruncatedError(f"{path}: {len(raw)} bytes, header promises {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols)


def _read_idx_labels(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: header truncated")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(raw) < 8 + count:
        raise IdxTruncatedError(f"{path}: {len(raw)} bytes, header promises {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_mnist_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse big-endian IDX image/label files; pixels scaled to [0, 1]."""
    images = _read_idx_images(Path(images_path))
    labels = _read_idx_labels(Path(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(
        X, labels.astype(np.int64), kind="classification", num_classes=10,
        meta={"source": str(images_path), "image_shape": list(images.shape[1:])},
    )


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def gen_mnist_surrogate(
    n: int = 2000,
    seed: int = 0,
    num_classes: int = 10,
    image_size: int = 28,
) -> Dataset:
    """Deterministic MNIST-shaped stand-in: one smooth random template per
    class with per-sample shifts, brightness jitter, and pixel noise."""
    rng = make_rng(seed, "mnist_surrogate")
    coarse = image_size // 4
    templates = []
    for _ in range(num_classes):
        t = rng.uniform(0.0, 1.0, size=(coarse, coarse))
        t = np.kron(t, np.ones((4, 4)))[:image_size, :image_size]
        templates.append(t)
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, image_size, image_size))
    for i, c in enumerate(labels):
        img = templates[c] * rng.uniform(0.75, 1.25)
        img = np.roll(img, shift=(rng.integers(-2, 3), rng.integers(-2, 3)), axis=(0, 1))
        img = img + 0.05 * rng.normal(size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(
        images.reshape(n, -1), labels, kind="classification", num_classes=num_classes,
        meta={"generator": "mnist_surrogate", "seed": seed, "image_size": image_size,
              "surrogate": True},
    )


def write_mnist_surrogate_idx(out_dir: str | Path, n_train: int = 2000, n_test: int = 500,
                              seed: int = 0) -> dict[str, str]:
    """Write the surrogate as standard IDX file pairs; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n, tag in (("train", n_train, 0), ("t10k", n_test, 1)):
        ds = gen_mnist_surrogate(n=n, seed=seed * 2 + tag)
        size = int(np.sqrt(ds.inputs.shape[1]))
        images = np.round(ds.inputs.reshape(n, size, size) * 255.0).astype(np.uint8)
        img_path = out / f"{split}-images-idx3-ubyte"
        lab_path = out / f"{split}-labels-idx1-ubyte"
        write_idx_images(img_path, images)
        write_idx_labels(lab_path, ds.targets)
        paths[f"{split}_images"] = str(img_path)
        paths[f"{split}_labels"] = str(lab_path)
    return paths


# -- label noise ----------------------------------------------------------------


def inject_label_noise(ds: Dataset, rate: float, num_classes: int, seed: int) -> Dataset:
    """Resample floor(rate n) labels uniformly among the other classes."""
    if ds.kind != "classification":
        raise ValueError("label noise applies to classification datasets")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("noise rate must lie in [0, 1]")
    if num_classes < 2:
        raise ValueError("label noise needs at least 2 classes")
    rng = make_rng(seed, "label_noise")
    n = len(ds)
    flip_count = int(np.floor(rate * n))
    flip_idx = rng.choice(n, size=flip_count, replace=False)
    labels = ds.targets.copy()
    offsets = rng.integers(1, num_classes, size=flip_count)
    labels[flip_idx] = (labels[flip_idx] + offsets) % num_classes
    meta = dict(ds.meta)
    meta.update({"label_noise_rate": rate, "label_noise_seed": seed, "flipped": flip_count})
    return Dataset(ds.inputs, labels, kind="classification", num_classes=num_classes, meta=meta)


# -- pruning masks ----------------------------------------------------------------


@dataclass(frozen=True)
class SparsityMask:
    """Binary mask in parameter layout; biases are never masked."""

    bits: ParamVector
    sparsity: float

    def __post_init__(self):
        values = self.bits.data
        if not np.isin(values, (0.0, 1.0)).all():
            raise ValueError("mask bits must be 0 or 1")
        for e in self.bits.layout.entries:
            if not e.name.startswith("w") and not self.bits.view(e.name).all():
                raise ValueError("biases must not be masked")

    def zero_fraction(self) -> float:
        w_idx = _weight_indices(self.bits.layout)
        return float(np.mean(self.bits.data[w_idx] == 0.0))


def _weight_indices(layout: ParamLayout) -> np.ndarray:
    idx = []
    for e in layout.entries:
        if e.name.startswith("w"):
            idx.append(np.arange(e.offset, e.offset + e.size))
    return np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)


def random_mask(layout: ParamLayout, sparsity: float, seed: int) -> SparsityMask:
    """Uniformly random mask zeroing exactly floor(sparsity * #weights)."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    bits = ParamVector(np.ones(layout.size), layout)
    w_idx = _weight_indices(layout)
    zero_count = int(np.floor(sparsity * w_idx.size))
    if zero_count:
        rng = make_rng(seed, "random_mask")
        zeros = rng.choice(w_idx.size, size=zero_count, replace=False)
        bits.data[w_idx[zeros]] = 0.0
    return SparsityMask(bits=bits, sparsity=sparsity)


def snip_mask(
    spec: ModelSpec,
    init_params: ParamVector,
    batch: tuple[np.ndarray, np.ndarray],
    sparsity: float,
    loss: str = "squared",
) -> SparsityMask:
    """Saliency pruning at init: keep the weights with the largest
    |gradient x weight| from one batch; ties keep the lower flat index."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    X, Y = batch
    if len(np.atleast_1d(X)) == 0:
        raise ValueError("SNIP needs a non-empty batch")
    if loss != "squared":
        raise ValueError("SNIP saliency pass supports the squared loss")
    fn = squared_loss_fn(spec, X, Y)
    _, g = value_and_grad(fn, init_params)
    layout = spec.layout()
    w_idx = _weight_indices(layout)
    saliency = np.abs(g.data[w_idx] * init_params.data[w_idx])
    zero_count = int(np.floor(sparsity * w_idx.size))
    keep_count = w_idx.size - zero_count
    order = np.lexsort((np.arange(w_idx.size), -saliency))
    bits = ParamVector(np.ones(layout.size), layout)
    bits.data[w_idx[order[keep_count:]]] = 0.0
    return SparsityMask(bits=bits, sparsity=sparsity)


# -- serialization ----------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write meta.json plus inputs.f32/targets.f32 little-endian blobs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": ds.kind,
        "num_classes": ds.num_classes,
        "n": len(ds),
        "input_shape": list(ds.inputs.shape[1:]),
        "target_shape": list(np.asarray(ds.targets).shape[1:]),
        "dtype": "<f4",
        "meta": ds.meta,
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    ds.inputs.astype("<f4").tofile(out / "inputs.f32")
    np.asarray(ds.targets, dtype=np.float64).astype("<f4").tofile(out / "targets.f32")
    return out


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    n = meta["n"]
    inputs = np.fromfile(src / "inputs.f32", dtype="<f4").reshape([n] + meta["input_shape"])
    targets = np.fromfile(src / "targets.f32", dtype="<f4").reshape([n] + meta["target_shape"])
    if meta["kind"] == "classification":
        targets = targets.astype(np.int64)
    return Dataset(
        inputs.astype(np.float64),
        targets if meta["kind"] == "classification" else targets.astype(np.float64),
        kind=meta["kind"],
        num_classes=meta["num_classes"],
        meta=meta.get("meta", {}),
    )
