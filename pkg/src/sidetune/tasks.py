"""Task-sequence construction: synthetic generators and small binary loaders.

The synthetic families carry the whole acceptance suite with zero
downloads:

  permuted            each task applies a fixed feature permutation to a
                      labeled source dataset (task 1 = identity)
  split_class         disjoint class partition of a labeled source, labels
                      remapped per task
  rotated_regression  a shared teacher y = tanh(Q_j W x) whose output
                      rotation Q_j drifts away from identity, so task
                      relatedness decreases smoothly with j

IDX (MNIST-style) and CIFAR binary loaders cover optional real data; both
formats are parsed bit-exactly and synthetic sequences can be exported
back to IDX.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError
from .rng import Rng


@dataclass
class Dataset:
    """Inputs with aligned targets, plus the normalization stats applied."""

    inputs: np.ndarray
    targets: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ContractError(
                f"dataset has {len(self.inputs)} inputs but {len(self.targets)} targets"
            )
        if len(self.inputs) < 1:
            raise ContractError("dataset must hold at least one example")

    @property
    def n(self) -> int:
        return len(self.inputs)

    def take(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx], self.targets[idx]


def normalize_pair(train: Dataset, val: Dataset) -> None:
    """Standardize inputs in place using train-split statistics only."""
    if train.normalized or val.normalized:
        raise ContractError("normalization must be applied exactly once")
    mean = train.inputs.mean(axis=0)
    std = train.inputs.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    for ds in (train, val):
        ds.inputs = (ds.inputs - mean) / std
        ds.mean = mean
        ds.std = std
        ds.normalized = True


@dataclass
class TaskSpec:
    task_id: int
    kind: str  # classification | regression
    input_shape: tuple[int, ...]
    train: Dataset
    val: Dataset
    num_classes: int | None = None
    out_dim: int | None = None
    seed_note: str = ""

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification":
            if self.num_classes is None:
                raise ContractError("classification task needs num_classes")
            for ds in (self.train, self.val):
                labels = ds.targets
                if labels.min() < 0 or labels.max() >= self.num_classes:
                    raise ContractError(f"task {self.task_id}: labels out of range")
        elif self.out_dim is None:
            raise ContractError("regression task needs out_dim")

    @property
    def target_dim(self) -> int:
        return self.num_classes if self.kind == "classification" else self.out_dim


@dataclass
class SequenceSpec:
    family: str
    tasks: list[TaskSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.tasks:
            raise ContractError("sequence must contain at least one task")
        shapes = {t.input_shape for t in self.tasks}
        if len(shapes) != 1:
            raise ContractError(f"tasks disagree on input shape: {shapes}")

    @property
    def m(self) -> int:
        return len(self.tasks)


def row_hashes(x: np.ndarray) -> set[bytes]:
    flat = x.reshape(len(x), -1)
    return {hashlib.sha256(np.ascontiguousarray(row).tobytes()).digest() for row in flat}


# --- synthetic sources ----------------------------------------------------


def gen_blobs_source(
    num_classes: int,
    dim: int,
    n_per_class: int,
    rng: Rng,
    spread: float = 1.0,
    separation: float = 2.0,
) -> Dataset:
    """Balanced Gaussian class blobs; the workhorse labeled source."""
    means = rng.child("means").normal((num_classes, dim)) * separation
    noise = rng.child("noise").normal((num_classes * n_per_class, dim)) * spread
    inputs = np.repeat(means, n_per_class, axis=0) + noise
    labels = np.repeat(np.arange(num_classes, dtype=np.float64), n_per_class)
    order = rng.child("shuffle").permutation(len(inputs))
    return Dataset(inputs[order], labels[order])


def split_dataset(source: Dataset, val_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Disjoint train/val split by shuffled index."""
    n = source.n
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ConfigError(f"validation fraction {val_fraction} leaves no training data")
    order = rng.permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (
        Dataset(source.inputs[train_idx].copy(), source.targets[train_idx].copy()),
        Dataset(source.inputs[val_idx].copy(), source.targets[val_idx].copy()),
    )


# --- task families ----------------------------------------------------------


def gen_permuted_tasks(
    source: Dataset,
    m: int,
    rng: Rng,
    val_fraction: float = 0.25,
) -> SequenceSpec:
    """m tasks, each a fixed feature permutation of the source; task 1 is identity."""
    if m < 1:
        raise ConfigError(f"permuted family needs m >= 1, got {m}")
    train_src, val_src = split_dataset(source, val_fraction, rng.child("split"))
    feat = int(np.prod(train_src.inputs.shape[1:]))
    tasks = []
    for j in range(1, m + 1):
        if j == 1:
            perm = np.arange(feat)
        else:
            perm = rng.child(f"perm-{j}").permutation(feat)
        shape = train_src.inputs.shape[1:]
        train = Dataset(
            train_src.inputs.reshape(train_src.n, feat)[:, perm].reshape(train_src.inputs.shape).copy(),
            train_src.targets.copy(),
        )
        val = Dataset(
            val_src.inputs.reshape(val_src.n, feat)[:, perm].reshape(val_src.inputs.shape).copy(),
            val_src.targets.copy(),
        )
        normalize_pair(train, val)
        tasks.append(
            TaskSpec(
                task_id=j,
                kind="classification",
                input_shape=tuple(shape),
                train=train,
                val=val,
                num_classes=int(source.targets.max()) + 1,
                seed_note=f"permuted/{j}",
            )
        )
    return SequenceSpec("permuted", tasks)


def permutation_for_task(source_dim: int, j: int, rng: Rng) -> np.ndarray:
    """The permutation task j applies (identity for j = 1)."""
    if j == 1:
        return np.arange(source_dim)
    return rng.child(f"perm-{j}").permutation(source_dim)


def gen_split_class_tasks(
    source: Dataset,
    classes_per_task: int,
    rng: Rng,
    val_fraction: float = 0.25,
) -> SequenceSpec:
    """Partition source classes into disjoint tasks, remapping labels per task."""
    classes = np.unique(source.targets)
    if len(classes) % classes_per_task != 0:
        raise ConfigError(
            f"{len(classes)} classes not divisible by {classes_per_task} per task"
        )
    order = rng.child("class-order").permutation(len(classes))
    shuffled = classes[order]
    tasks = []
    m = len(classes) // classes_per_task
    for j in range(1, m + 1):
        subset = np.sort(shuffled[(j - 1) * classes_per_task : j * classes_per_task])
        mask = np.isin(source.targets, subset)
        inputs = source.inputs[mask]
        remap = {c: i for i, c in enumerate(subset)}
        labels = np.array([remap[c] for c in source.targets[mask]], dtype=np.float64)
        pool = Dataset(inputs.copy(), labels)
        train, val = split_dataset(pool, val_fraction, rng.child(f"split-{j}"))
        normalize_pair(train, val)
        tasks.append(
            TaskSpec(
                task_id=j,
                kind="classification",
                input_shape=tuple(source.inputs.shape[1:]),
                train=train,
                val=val,
                num_classes=classes_per_task,
                seed_note=f"split_class/{j}:{','.join(str(int(c)) for c in subset)}",
            )
        )
    return SequenceSpec("split_class", tasks)


def _plane_rotation(dim: int, plane: tuple[int, int], theta: float) -> np.ndarray:
    q = np.eye(dim)
    i, j = plane
    c, s = np.cos(theta), np.sin(theta)
    q[i, i] = c
    q[j, j] = c
    q[i, j] = -s
    q[j, i] = s
    return q


def rotation_matrix(dim: int, theta: float) -> np.ndarray:
    """Orthogonal matrix from Givens rotations on consecutive axis pairs."""
    q = np.eye(dim)
    for i in range(0, dim - 1, 2):
        q = q @ _plane_rotation(dim, (i, i + 1), theta)
    return q


def gen_rotated_regression(
    m: int,
    in_dim: int,
    out_dim: int,
    rng: Rng,
    n_train: int = 256,
    n_val: int = 128,
    noise: float = 0.0,
    max_angle: float = np.pi / 3,
) -> SequenceSpec:
    """Teacher y = tanh(Q_j W x); Q_1 = identity, later tasks rotate away.

    Inputs are standardized before targets are computed, so the teacher is
    the exact generating model of each normalized dataset.
    """
    if m < 1:
        raise ConfigError(f"rotated_regression needs m >= 1, got {m}")
    teacher = rng.child("teacher").normal((in_dim, out_dim)) / np.sqrt(in_dim)
    tasks = []
    for j in range(1, m + 1):
        theta = 0.0 if m == 1 else max_angle * (j - 1) / (m - 1)
        q = rotation_matrix(out_dim, theta)
        task_rng = rng.child(f"data-{j}")
        train = Dataset(task_rng.child("train").normal((n_train, in_dim)), np.zeros((n_train, 1)))
        val = Dataset(task_rng.child("val").normal((n_val, in_dim)), np.zeros((n_val, 1)))
        normalize_pair(train, val)
        for split, name in ((train, "train-noise"), (val, "val-noise")):
            clean = np.tanh(split.inputs @ teacher @ q.T)
            eps = task_rng.child(name).normal(clean.shape) * noise if noise > 0 else 0.0
            split.targets = clean + eps
        tasks.append(
            TaskSpec(
                task_id=j,
                kind="regression",
                input_shape=(in_dim,),
                train=train,
                val=val,
                out_dim=out_dim,
                seed_note=f"rotated/{j}:theta={theta:.6f}",
            )
        )
    seq = SequenceSpec("rotated_regression", tasks)
    seq.teacher = teacher  # exposed for relatedness oracles
    return seq


def teacher_loss_per_task(seq: SequenceSpec, teacher: np.ndarray) -> list[float]:
    """Validation MSE of the unrotated teacher on each task (relatedness probe)."""
    out = []
    for task in seq.tasks:
        pred = np.tanh(task.val.inputs @ teacher)
        out.append(float(np.mean((pred - task.val.targets) ** 2)))
    return out


# --- IDX format -------------------------------------------------------------
# magic: two zero bytes, a type code byte, a rank byte; then rank u32
# big-endian dims; then the payload, big-endian. Type codes: 0x08 ubyte,
# 0x0C int32, 0x0D float32, 0x0E float64.

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D,
              np.dtype("f8"): 0x0E}


def read_idx(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated IDX header at byte offset {len(blob)}")
    if blob[0] != 0 or blob[1] != 0:
        raise DataFormatError(f"{path}: bad IDX magic {blob[:4].hex()} at byte offset 0")
    code, rank = blob[2], blob[3]
    if code not in _IDX_DTYPES:
        raise DataFormatError(f"{path}: unsupported IDX type code 0x{code:02x} at byte offset 2")
    head = 4 + 4 * rank
    if len(blob) < head:
        raise DataFormatError(f"{path}: truncated IDX dims at byte offset {len(blob)}")
    dims = struct.unpack(f">{rank}I", blob[4:head]) if rank else ()
    dtype = _IDX_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    expected = head + count * dtype.itemsize
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload ends at byte offset {len(blob)}, expected {expected}"
        )
    arr = np.frombuffer(blob, dtype=dtype, offset=head).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))  # native order; values bit-exact


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    base = arr.dtype.newbyteorder("=")
    if base not in _IDX_CODES:
        raise DataFormatError(f"cannot encode dtype {arr.dtype} as IDX")
    code = _IDX_CODES[base]
    big = arr.astype(_IDX_DTYPES[code])
    with open(path, "wb") as f:
        f.write(bytes([0, 0, code, arr.ndim]))
        for d in arr.shape:
            f.write(struct.pack(">I", d))
        f.write(np.ascontiguousarray(big).tobytes())


def _guess_labels_path(images_path: Path) -> Path:
    name = images_path.name
    candidates = [
        name.replace("images", "labels").replace("idx3", "idx1"),
        name.replace("images", "labels"),
        name.replace("idx3", "idx1"),
    ]
    for candidate in candidates:
        if candidate != name and (images_path.with_name(candidate)).exists():
            return images_path.with_name(candidate)
    raise DataFormatError(
        f"{images_path}: cannot find a companion labels file "
        "(expected 'images'->'labels' / 'idx3'->'idx1' naming)"
    )


def load_idx(images_path, labels_path=None) -> Dataset:
    """Load an IDX image/label pair into a Dataset.

    ubyte images are scaled to [0,1] with shape (N, 1, H, W); float64
    arrays pass through untouched. The labels file is found by naming
    convention when not given explicitly.
    """
    images_path = Path(images_path)
    labels_path = Path(labels_path) if labels_path else _guess_labels_path(images_path)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.dtype == np.uint8:
        if images.ndim == 3:
            images = images[:, None, :, :]
        inputs = images.astype(np.float64) / 255.0
    else:
        inputs = images.astype(np.float64)
    if len(labels) != len(inputs):
        raise DataFormatError(
            f"{labels_path}: {len(labels)} labels for {len(inputs)} images"
        )
    return Dataset(inputs, labels.astype(np.float64))


def export_sequence_idx(seq: SequenceSpec, out_dir) -> list[Path]:
    """Write each task's splits as IDX files (float64 inputs, exact)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for task in seq.tasks:
        for split_name, ds in (("train", task.train), ("val", task.val)):
            img = out_dir / f"task{task.task_id}-{split_name}-images.idx"
            lab = out_dir / f"task{task.task_id}-{split_name}-labels.idx"
            write_idx(img, ds.inputs.astype(np.float64))
            if task.kind == "classification" and ds.targets.max() < 256:
                write_idx(lab, ds.targets.astype(np.uint8))
            else:
                write_idx(lab, ds.targets.astype(np.float64))
            written.extend([img, lab])
    return written


# --- CIFAR binary -----------------------------------------------------------

_CIFAR10_RECORD = 1 + 3072
_CIFAR100_RECORD = 2 + 3072


def load_cifar_bin(path, variant: str | None = None) -> Dataset:
    """Load a CIFAR binary batch: N x 3 x 32 x 32 floats in [0,1].

    CIFAR-10 records are 3073 bytes (label + pixels); CIFAR-100 records are
    3074 bytes (coarse + fine labels + pixels) and the fine label is kept.
    """
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    if variant is None:
        if len(blob) % _CIFAR10_RECORD == 0:
            variant = "cifar10"
        elif len(blob) % _CIFAR100_RECORD == 0:
            variant = "cifar100"
        else:
            raise DataFormatError(
                f"{path}: {len(blob)} bytes is not a multiple of 3073 or 3074"
            )
    record = _CIFAR10_RECORD if variant == "cifar10" else _CIFAR100_RECORD
    if len(blob) % record != 0:
        raise DataFormatError(f"{path}: {len(blob)} bytes is not a multiple of {record}")
    n = len(blob) // record
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, record)
    labels = raw[:, 0] if variant == "cifar10" else raw[:, 1]
    pixels = raw[:, record - 3072 :].reshape(n, 3, 32, 32)
    return Dataset(pixels.astype(np.float64) / 255.0, labels.astype(np.float64))
