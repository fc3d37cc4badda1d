"""Declarative network specs, parameter stores, and side-network initialization.

A `NetworkSpec` is an ordered list of `LayerSpec`s plus the per-example
input shape. `build_network` materializes it into a `Network` whose
parameters live in a `ParamStore` under stable identifiers, so freezing,
checksumming, and checkpointing all address parameters by name.

Side networks can be initialized four ways: fresh Xavier draw, bitwise
copy of the base, "low energy" (final layer zeroed so the side
contributes nothing at step 0), or output-matching distillation from the
base over sampled inputs.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, const
from .errors import ContractError, DataFormatError, InitSchemeError, NetworkSpecError
from .optim import init_optimizer, optimizer_step
from .rng import Rng

LAYER_KINDS = ("linear", "conv2d", "relu", "tanh", "avgpool2d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NetworkSpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear" and (self.in_features is None or self.out_features is None):
            raise NetworkSpecError("linear layer needs in_features and out_features")
        if self.kind == "conv2d" and (
            self.in_channels is None or self.out_channels is None or self.kernel is None
        ):
            raise NetworkSpecError("conv2d layer needs in_channels, out_channels, kernel")
        if self.kind == "avgpool2d" and self.kernel is None:
            raise NetworkSpecError("avgpool2d layer needs kernel")


def linear(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("linear", in_features=in_features, out_features=out_features)


def conv(in_channels: int, out_channels: int, kernel: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        stride=stride,
        pad=pad,
    )


def relu() -> LayerSpec:
    return LayerSpec("relu")


def tanh() -> LayerSpec:
    return LayerSpec("tanh")


def avgpool(kernel: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("avgpool2d", kernel=kernel, stride=stride if stride is not None else kernel)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


ROLES = ("base", "side", "readout", "merge_internal")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    role: str = "base"

    def __post_init__(self):
        if self.role not in ROLES:
            raise NetworkSpecError(f"unknown network role {self.role!r}")
        if not self.layers:
            raise NetworkSpecError("network spec has no layers")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.output_shape()  # validate composition eagerly

    def output_shape(self) -> tuple[int, ...]:
        """Compose layer shapes; raises naming the first bad boundary."""
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _apply_shape(layer, shape, i)
        return shape


def _apply_shape(layer: LayerSpec, shape: tuple[int, ...], idx: int) -> tuple[int, ...]:
    where = f"layer {idx} ({layer.kind}) with input shape {shape}"
    if layer.kind == "linear":
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise NetworkSpecError(f"{where}: expected ({layer.in_features},)")
        return (layer.out_features,)
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise NetworkSpecError(f"{where}: expected (C={layer.in_channels}, H, W)")
        c, h, w = shape
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise NetworkSpecError(f"{where}: kernel does not fit")
        return (layer.out_channels, ho, wo)
    if layer.kind == "avgpool2d":
        if len(shape) != 3:
            raise NetworkSpecError(f"{where}: expected (C, H, W)")
        c, h, w = shape
        stride = layer.stride
        ho = (h - layer.kernel) // stride + 1
        wo = (w - layer.kernel) // stride + 1
        if ho < 1 or wo < 1:
            raise NetworkSpecError(f"{where}: window does not fit")
        return (c, ho, wo)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape  # relu / tanh


class ParamStore:
    """Named parameter tensors with per-entry freeze flags."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._entries:
            raise ContractError(f"duplicate parameter id {name!r}")
        tensor.name = name
        self._entries[name] = tensor

    def get(self, name: str) -> Tensor:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def named(self, trainable_only: bool = False) -> list[tuple[str, Tensor]]:
        return [
            (name, t)
            for name, t in self._entries.items()
            if not (trainable_only and name in self._frozen)
        ]

    def freeze_all(self) -> None:
        self._frozen.update(self._entries)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def checksum(self) -> str:
        """SHA-256 over (name, shape, raw little-endian bytes), sorted by name."""
        h = hashlib.sha256()
        for name in sorted(self._entries):
            t = self._entries[name]
            h.update(name.encode("utf-8"))
            h.update(np.asarray(t.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


class Network:
    """A materialized spec: forward pass over tape primitives plus its store."""

    def __init__(self, spec: NetworkSpec, store: ParamStore):
        self.spec = spec
        self.store = store

    def forward(self, x: Tensor, tape: Tape) -> Tensor:
        out, _ = self._run(x, tape)
        return out

    def forward_with_hidden(self, x: Tensor, tape: Tape) -> tuple[Tensor, list[Tensor]]:
        """Forward pass that also returns post-activation hidden tensors."""
        return self._run(x, tape)

    def _run(self, x: Tensor, tape: Tape) -> tuple[Tensor, list[Tensor]]:
        h = x
        hidden: list[Tensor] = []
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == "linear":
                w = self.store.get(f"{i}.linear.weight")
                b = self.store.get(f"{i}.linear.bias")
                h = ad.add(ad.matmul(h, w, tape), b, tape)
            elif layer.kind == "conv2d":
                w = self.store.get(f"{i}.conv2d.weight")
                b = self.store.get(f"{i}.conv2d.bias")
                h = ad.conv2d(h, w, b, tape, stride=layer.stride, pad=layer.pad)
            elif layer.kind == "relu":
                h = ad.relu(h, tape)
                hidden.append(h)
            elif layer.kind == "tanh":
                h = ad.tanh(h, tape)
                hidden.append(h)
            elif layer.kind == "avgpool2d":
                h = ad.avgpool2d(h, tape, kernel=layer.kernel, stride=layer.stride)
            elif layer.kind == "flatten":
                h = ad.flatten(h, tape)
        return h, hidden

    def parameters(self, trainable_only: bool = False) -> list[tuple[str, Tensor]]:
        return self.store.named(trainable_only=trainable_only)

    def param_tensors(self, trainable_only: bool = False) -> list[Tensor]:
        return [t for _, t in self.parameters(trainable_only)]

    def freeze(self) -> None:
        self.store.freeze_all()

    def checksum(self) -> str:
        return self.store.checksum()

    def copy(self) -> "Network":
        """Fresh network with bitwise-equal parameters; freeze flags reset."""
        dup = Network(self.spec, ParamStore())
        for name, t in self.store.named():
            dup.store.add(name, Tensor(t.data.copy(), requires_grad=True))
        return dup

    def output_shape(self) -> tuple[int, ...]:
        return self.spec.output_shape()


def _xavier_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_network(spec: NetworkSpec, rng: Rng) -> Network:
    """Allocate and Xavier-initialize parameters (uniform, fan-in+fan-out)."""
    store = ParamStore()
    for i, layer in enumerate(spec.layers):
        if layer.kind == "linear":
            lim = _xavier_limit(layer.in_features, layer.out_features)
            w = rng.uniform(-lim, lim, (layer.in_features, layer.out_features))
            store.add(f"{i}.linear.weight", Tensor(w, requires_grad=True))
            store.add(
                f"{i}.linear.bias", Tensor(np.zeros(layer.out_features), requires_grad=True)
            )
        elif layer.kind == "conv2d":
            k = layer.kernel
            fan_in = layer.in_channels * k * k
            fan_out = layer.out_channels * k * k
            lim = _xavier_limit(fan_in, fan_out)
            w = rng.uniform(-lim, lim, (layer.out_channels, layer.in_channels, k, k))
            store.add(f"{i}.conv2d.weight", Tensor(w, requires_grad=True))
            store.add(
                f"{i}.conv2d.bias", Tensor(np.zeros(layer.out_channels), requires_grad=True)
            )
    return Network(spec, store)


@dataclass(frozen=True)
class InitScheme:
    """How a side network starts: xavier | copy_base | low_energy | distill."""

    kind: str = "xavier"
    distill_steps: int = 2000
    distill_lr: float = 1e-2
    distill_batch: int = 64

    def __post_init__(self):
        if self.kind not in ("xavier", "copy_base", "low_energy", "distill"):
            raise InitSchemeError(f"unknown init scheme {self.kind!r}")


def _final_param_layer(net: Network) -> int:
    last = -1
    for i, layer in enumerate(net.spec.layers):
        if layer.kind in ("linear", "conv2d"):
            last = i
    if last < 0:
        raise InitSchemeError("network has no parameterized layer to zero")
    return last


def zero_final_layer(net: Network) -> None:
    """Low-energy start: the network's output is exactly zero for any input."""
    i = _final_param_layer(net)
    kind = net.spec.layers[i].kind
    net.store.get(f"{i}.{kind}.weight").data[...] = 0.0
    net.store.get(f"{i}.{kind}.bias").data[...] = 0.0


def distill(
    side: Network,
    base: Network,
    sampler: Callable[[int], np.ndarray],
    steps: int,
    lr: float,
    batch_size: int,
    rng: Rng,
    log_every: int = 100,
) -> list[float]:
    """Train `side` to match `base` outputs (MSE) on sampled inputs.

    Returns the loss at every `log_every` checkpoint (plus the final step).
    """
    params = side.param_tensors()
    opt = init_optimizer("adam", params, lr)
    log: list[float] = []
    for step in range(steps):
        x = const(sampler(batch_size))
        tape = Tape()
        target = const(base.forward(x, tape).data)
        loss = ad.mse_loss(side.forward(x, tape), target, tape)
        for p in params:
            p.zero_grad()
        backward(tape, loss)
        optimizer_step(opt, params)
        if step % log_every == 0 or step == steps - 1:
            log.append(loss.item())
    return log


def init_side(
    side: Network,
    base: Network,
    scheme: InitScheme,
    data_sampler: Callable[[int], np.ndarray] | None = None,
    rng: Rng | None = None,
) -> Network:
    """Apply an initialization scheme to a freshly built side network."""
    if scheme.kind == "xavier":
        return side  # build_network already drew Xavier weights
    if scheme.kind == "copy_base":
        if side.spec.layers != base.spec.layers or side.spec.input_shape != base.spec.input_shape:
            raise InitSchemeError("copy_base requires identical base/side architectures")
        for name, t in base.store.named():
            side.store.get(name).data[...] = t.data
        return side
    if scheme.kind == "low_energy":
        zero_final_layer(side)
        return side
    # distill
    if data_sampler is None:
        raise InitSchemeError("distill init needs an unlabeled input sampler")
    distill(
        side,
        base,
        data_sampler,
        steps=scheme.distill_steps,
        lr=scheme.distill_lr,
        batch_size=scheme.distill_batch,
        rng=rng if rng is not None else Rng(0),
    )
    return side


def count_params(obj, trainable_only: bool = False, include_heads: bool = True) -> int:
    """Exact number of scalars held by a network, merge, or strategy."""
    try:
        pairs = obj.parameters(trainable_only=trainable_only, include_heads=include_heads)
    except TypeError:
        pairs = obj.parameters(trainable_only=trainable_only)
    return int(sum(t.size for _, t in pairs))


# --- checkpoint format ----------------------------------------------------
# header: magic b"STNT", format version u32 LE
# record: u32 id length, id bytes (utf-8), u32 rank, u32 dims..., f8 LE data

CHECKPOINT_MAGIC = b"STNT"
CHECKPOINT_VERSION = 1


def save_params(path, named: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in named:
            ident = name.encode("utf-8")
            a = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d rank
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError(
            f"checkpoint truncated reading {what} at byte offset {f.tell() - len(data)}"
        )
    return data


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"bad checkpoint magic {magic!r} at byte offset 0")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                return out
            if len(head) != 4:
                raise DataFormatError(f"checkpoint truncated at byte offset {f.tell() - len(head)}")
            (id_len,) = struct.unpack("<I", head)
            name = _read_exact(f, id_len, "identifier").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims")) if rank else ()
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(f, 8 * count, f"data for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()


def save_network(net: Network, path) -> None:
    save_params(path, [(name, t.data) for name, t in net.store.named()])


def load_network(net: Network, path) -> Network:
    """Fill `net`'s parameters from a checkpoint; ids and shapes must match."""
    loaded = load_params(path)
    names = set(net.store.names())
    if names != set(loaded):
        raise DataFormatError(
            f"checkpoint entries {sorted(set(loaded))} do not match network {sorted(names)}"
        )
    for name, arr in loaded.items():
        t = net.store.get(name)
        if t.data.shape != arr.shape:
            raise DataFormatError(f"shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
        t.data[...] = arr
    return net
