"""Task families, normalization discipline, and binary formats."""

import numpy as np
import numpy.testing as npt
import pytest

from sidetune.errors import ConfigError, ContractError, DataFormatError
from sidetune.rng import Rng
from sidetune.tasks import (
    Dataset,
    gen_blobs_source,
    gen_permuted_tasks,
    gen_rotated_regression,
    gen_split_class_tasks,
    load_cifar_bin,
    load_idx,
    normalize_pair,
    permutation_for_task,
    read_idx,
    row_hashes,
    teacher_loss_per_task,
    write_idx,
)


def source(seed=0, classes=4, dim=6, per_class=30):
    return gen_blobs_source(classes, dim, per_class, Rng(seed).child("source"))


def test_permuted_identity_first_task():
    rng = Rng(1)
    src = source()
    seq = gen_permuted_tasks(src, m=1, rng=rng.child("seq"))
    assert seq.m == 1
    # task 1 applies the identity permutation: its raw inputs are the split
    # of the source, up to normalization
    perm = permutation_for_task(6, 1, rng.child("seq"))
    npt.assert_array_equal(perm, np.arange(6))


def test_permutation_inverse_recovers_inputs():
    rng = Rng(2).child("seq")
    perm = permutation_for_task(10, 3, rng)
    x = Rng(3).normal((5, 10))
    permuted = x[:, perm]
    inverse = np.argsort(perm)
    npt.assert_array_equal(permuted[:, inverse], x)


def test_permutations_differ_across_seeds():
    differing = 0
    for s in range(10):
        p1 = permutation_for_task(32, 2, Rng(s).child("a"))
        p2 = permutation_for_task(32, 2, Rng(s + 1000).child("a"))
        differing += int(not np.array_equal(p1, p2))
    assert differing == 10


def test_permuted_regeneration_determinism():
    src = source()
    a = gen_permuted_tasks(src, 3, Rng(9).child("seq"))
    b = gen_permuted_tasks(source(), 3, Rng(9).child("seq"))
    for ta, tb in zip(a.tasks, b.tasks):
        npt.assert_array_equal(ta.train.inputs, tb.train.inputs)
        npt.assert_array_equal(ta.val.targets, tb.val.targets)


def test_permuted_m_zero_rejected():
    with pytest.raises(ConfigError):
        gen_permuted_tasks(source(), 0, Rng(0))


def test_train_val_disjoint_by_hash():
    seq = gen_permuted_tasks(source(), 2, Rng(5).child("seq"))
    for task in seq.tasks:
        assert not (row_hashes(task.train.inputs) & row_hashes(task.val.inputs))


def test_normalization_stats_on_train_only():
    seq = gen_permuted_tasks(source(), 2, Rng(6).child("seq"))
    for task in seq.tasks:
        npt.assert_allclose(task.train.inputs.mean(axis=0), 0.0, atol=1e-9)
        npt.assert_allclose(task.train.inputs.std(axis=0), 1.0, atol=1e-9)
        # val uses train statistics, so it is NOT exactly standardized
        assert task.val.normalized
        npt.assert_array_equal(task.val.mean, task.train.mean)


def test_double_normalization_rejected():
    train = Dataset(np.ones((4, 2)), np.zeros(4))
    val = Dataset(np.ones((2, 2)), np.zeros(2))
    normalize_pair(train, val)
    with pytest.raises(ContractError):
        normalize_pair(train, val)


def test_split_class_partition():
    src = source(classes=20, per_class=10)
    seq = gen_split_class_tasks(src, 10, Rng(7).child("seq"))
    assert seq.m == 2
    covered = set()
    for task in seq.tasks:
        classes = {int(c) for c in task.seed_note.split(":")[1].split(",")}
        assert not (covered & classes)
        covered |= classes
        assert task.num_classes == 10
        assert task.train.targets.max() <= 9
    assert covered == set(range(20))


def test_split_class_counting_oracle():
    src = source(classes=4, per_class=25)
    seq = gen_split_class_tasks(src, 2, Rng(8).child("seq"))
    for task in seq.tasks:
        classes = [int(c) for c in task.seed_note.split(":")[1].split(",")]
        expected = sum(int((src.targets == c).sum()) for c in classes)
        assert task.train.n + task.val.n == expected


def test_split_class_divisibility():
    with pytest.raises(ConfigError):
        gen_split_class_tasks(source(classes=4), 3, Rng(0))


def test_rotated_regression_task1_is_teacher():
    seq = gen_rotated_regression(3, in_dim=5, out_dim=4, rng=Rng(10).child("seq"), noise=0.0)
    losses = teacher_loss_per_task(seq, seq.teacher)
    assert losses[0] == 0.0
    # relatedness decreases with j
    assert all(l2 >= l1 for l1, l2 in zip(losses, losses[1:]))
    assert losses[-1] > losses[0]


def test_rotated_regression_noise_scale():
    seq = gen_rotated_regression(1, 5, 4, Rng(11).child("seq"), noise=0.1)
    losses = teacher_loss_per_task(seq, seq.teacher)
    assert 0.005 < losses[0] < 0.02  # ~ noise^2


def test_idx_round_trip_bitwise():
    rng = Rng(12)
    arrays = [
        rng.normal((7, 3)).astype(np.float64),
        (rng.uniform(0, 255, (4, 5, 5))).astype(np.uint8),
        rng.integers(1000, size=(6,)).astype(np.int32),
    ]
    import tempfile, os

    for arr in arrays:
        path = tempfile.mktemp(suffix=".idx")
        write_idx(path, arr)
        back = read_idx(path)
        assert back.dtype.newbyteorder("=") == arr.dtype.newbyteorder("=")
        npt.assert_array_equal(back, arr)
        os.unlink(path)


def test_idx_magic_codes(tmp_path):
    img = tmp_path / "train-images-idx3-ubyte"
    lab = tmp_path / "train-labels-idx1-ubyte"
    images = (Rng(13).uniform(0, 255, (3, 4, 4))).astype(np.uint8)
    labels = np.array([0, 1, 2], dtype=np.uint8)
    write_idx(img, images)
    write_idx(lab, labels)
    assert img.read_bytes()[:4] == bytes.fromhex("00000803")
    assert lab.read_bytes()[:4] == bytes.fromhex("00000801")
    ds = load_idx(img)  # labels discovered by naming convention
    assert ds.inputs.shape == (3, 1, 4, 4)
    assert ds.inputs.max() <= 1.0
    npt.assert_array_equal(ds.targets, [0.0, 1.0, 2.0])


def test_idx_truncation_fails_closed(tmp_path):
    path = tmp_path / "broken.idx"
    write_idx(path, np.zeros((4, 3), dtype=np.float64))
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(DataFormatError, match="byte offset"):
        read_idx(path)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\x01\x00\x08\x01" + b"\x00" * 8)
    with pytest.raises(DataFormatError, match="magic"):
        read_idx(path)


def test_cifar10_records(tmp_path):
    rng = Rng(14)
    n = 2
    records = []
    labels = [7, 3]
    for i in range(n):
        pixels = rng.uniform(0, 255, (3072,)).astype(np.uint8)
        records.append(bytes([labels[i]]) + pixels.tobytes())
    path = tmp_path / "batch.bin"
    path.write_bytes(b"".join(records))
    ds = load_cifar_bin(path)
    assert ds.inputs.shape == (2, 3, 32, 32)
    npt.assert_array_equal(ds.targets, [7.0, 3.0])


def test_cifar_pixel_scaling(tmp_path):
    record = bytes([1]) + bytes([255] * 3072)
    path = tmp_path / "one.bin"
    path.write_bytes(record)
    ds = load_cifar_bin(path)
    assert ds.inputs.max() == 1.0
    assert ds.inputs.min() == 1.0


def test_cifar100_fine_labels(tmp_path):
    record = bytes([5, 42]) + bytes([0] * 3072)
    path = tmp_path / "c100.bin"
    path.write_bytes(record)
    ds = load_cifar_bin(path, variant="cifar100")
    npt.assert_array_equal(ds.targets, [42.0])


def test_cifar_bad_size(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 3000)
    with pytest.raises(DataFormatError):
        load_cifar_bin(path)
