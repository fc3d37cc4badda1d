"""Network building, init schemes, parameter accounting, checkpoints."""

import numpy as np
import numpy.testing as npt
import pytest

from sidetune import nets
from sidetune.autodiff import Tape, const
from sidetune.errors import DataFormatError, InitSchemeError, NetworkSpecError
from sidetune.nets import (
    InitScheme,
    NetworkSpec,
    build_network,
    conv,
    count_params,
    distill,
    flatten,
    init_side,
    linear,
    load_network,
    load_params,
    relu,
    save_network,
    save_params,
    tanh,
)
from sidetune.rng import Rng


def mlp_spec(din=3, hidden=4, dout=2, role="base"):
    return NetworkSpec(
        layers=(linear(din, hidden), tanh(), linear(hidden, dout)),
        input_shape=(din,),
        role=role,
    )


def test_linear_param_count():
    net = build_network(
        NetworkSpec(layers=(linear(3, 2),), input_shape=(3,)), Rng(0)
    )
    assert count_params(net) == 8  # 3*2 + 2


def test_conv_param_count():
    net = build_network(
        NetworkSpec(layers=(conv(1, 4, 3),), input_shape=(1, 8, 8)), Rng(0)
    )
    assert count_params(net) == 40  # 1*4*9 + 4


def test_empty_spec_rejected():
    with pytest.raises(NetworkSpecError):
        NetworkSpec(layers=(), input_shape=(3,))


def test_shape_composition_error_names_boundary():
    with pytest.raises(NetworkSpecError, match="layer 1"):
        NetworkSpec(layers=(linear(3, 4), linear(5, 2)), input_shape=(3,))


def test_conv_stack_output_shape():
    spec = NetworkSpec(
        layers=(conv(1, 4, 3, stride=1, pad=1), relu(), nets.avgpool(2), flatten()),
        input_shape=(1, 8, 8),
    )
    assert spec.output_shape() == (4 * 4 * 4,)


def test_build_is_deterministic():
    spec = mlp_spec()
    a = build_network(spec, Rng(5))
    b = build_network(spec, Rng(5))
    assert a.checksum() == b.checksum()
    c = build_network(spec, Rng(6))
    assert a.checksum() != c.checksum()


def test_forward_matches_manual_mlp():
    spec = mlp_spec()
    net = build_network(spec, Rng(1))
    x = np.array([[0.5, -1.0, 2.0]])
    w0 = net.store.get("0.linear.weight").data
    b0 = net.store.get("0.linear.bias").data
    w2 = net.store.get("2.linear.weight").data
    b2 = net.store.get("2.linear.bias").data
    expected = np.tanh(x @ w0 + b0) @ w2 + b2
    out = net.forward(const(x), Tape())
    npt.assert_allclose(out.data, expected, rtol=1e-12)


def test_copy_base_is_bitwise():
    spec = mlp_spec()
    base = build_network(spec, Rng(1))
    side = build_network(mlp_spec(role="side"), Rng(2))
    init_side(side, base, InitScheme("copy_base"))
    x = const(Rng(3).normal((4, 3)))
    npt.assert_array_equal(
        side.forward(x, Tape()).data, base.forward(x, Tape()).data
    )


def test_copy_base_mismatch_rejected():
    base = build_network(mlp_spec(hidden=4), Rng(1))
    side = build_network(mlp_spec(hidden=5, role="side"), Rng(2))
    with pytest.raises(InitSchemeError):
        init_side(side, base, InitScheme("copy_base"))


def test_low_energy_outputs_exact_zero():
    side = build_network(mlp_spec(role="side"), Rng(2))
    init_side(side, build_network(mlp_spec(), Rng(1)), InitScheme("low_energy"))
    x = const(Rng(3).normal((6, 3)) * 10.0)
    out = side.forward(x, Tape())
    assert np.all(out.data == 0.0)


def test_distill_requires_sampler():
    base = build_network(mlp_spec(), Rng(1))
    side = build_network(mlp_spec(role="side"), Rng(2))
    with pytest.raises(InitSchemeError):
        init_side(side, base, InitScheme("distill"))


def test_distill_beats_fresh_xavier_by_10x():
    rng = Rng(8)
    base_spec = NetworkSpec(
        layers=(linear(8, 16), tanh(), linear(16, 8)), input_shape=(8,)
    )
    side_spec = NetworkSpec(
        layers=(linear(8, 8), tanh(), linear(8, 8)), input_shape=(8,), role="side"
    )
    base = build_network(base_spec, rng.child("base"))
    side = build_network(side_spec, rng.child("side"))
    sample_rng = rng.child("sample")

    def sampler(n):
        return sample_rng.normal((n, 8))

    distill(side, base, sampler, steps=2000, lr=1e-2, batch_size=64, rng=rng)

    held_out = Rng(9).normal((512, 8))
    x = const(held_out)
    base_out = base.forward(x, Tape()).data

    def held_out_mse(net):
        return float(np.mean((net.forward(x, Tape()).data - base_out) ** 2))

    fresh = build_network(side_spec, rng.child("fresh"))
    assert held_out_mse(side) * 10.0 <= held_out_mse(fresh)


def test_distill_best_so_far_non_increasing():
    rng = Rng(11)
    base = build_network(mlp_spec(8, 12, 6), rng.child("base"))
    side = build_network(mlp_spec(8, 6, 6, role="side"), rng.child("side"))
    sample_rng = rng.child("sample")
    log = distill(
        side, base, lambda n: sample_rng.normal((n, 8)), steps=600, lr=1e-2,
        batch_size=32, rng=rng, log_every=100,
    )
    best = np.minimum.accumulate(log)
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert log[-1] < log[0]


def test_freeze_and_trainable_counts():
    base = build_network(mlp_spec(), Rng(1))
    base.freeze()
    assert count_params(base, trainable_only=True) == 0
    assert count_params(base) == 3 * 4 + 4 + 4 * 2 + 2


def test_checksum_reflects_any_change():
    net = build_network(mlp_spec(), Rng(1))
    before = net.checksum()
    net.store.get("0.linear.weight").data[0, 0] += 1e-12
    assert net.checksum() != before


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = build_network(mlp_spec(), Rng(4))
    path = tmp_path / "net.stnt"
    save_network(net, path)
    clone = build_network(mlp_spec(), Rng(99))
    load_network(clone, path)
    assert clone.checksum() == net.checksum()
    raw = load_params(path)
    for name, t in net.store.named():
        npt.assert_array_equal(raw[name], t.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.stnt"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(DataFormatError, match="magic"):
        load_params(path)


def test_checkpoint_truncation_reports_offset(tmp_path):
    net = build_network(mlp_spec(), Rng(4))
    path = tmp_path / "net.stnt"
    save_network(net, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(DataFormatError, match="byte offset"):
        load_params(path)


def test_checkpoint_scalar_entry(tmp_path):
    path = tmp_path / "scalar.stnt"
    save_params(path, [("alpha.raw", np.asarray(0.25))])
    out = load_params(path)
    assert out["alpha.raw"].shape == ()
    assert out["alpha.raw"] == 0.25
