"""Builders shared across test modules: tiny tasks, bases, strategies."""

import numpy as np

from sidetune.nets import NetworkSpec, build_network, linear, tanh
from sidetune.rng import Rng
from sidetune.strategies import TrainerConfig, build_strategy
from sidetune.tasks import gen_blobs_source, gen_permuted_tasks, gen_rotated_regression


def mlp(din, hidden, dout, role="base"):
    return NetworkSpec(
        layers=(linear(din, hidden), tanh(), linear(hidden, dout)),
        input_shape=(din,),
        role=role,
    )


DIM = 12
FEAT = 16
CLASSES = 5

BASE_SPEC = mlp(DIM, FEAT, FEAT)
SIDE_SPEC = mlp(DIM, 8, FEAT, role="side")

CFG = TrainerConfig(optimizer="adam", lr=1e-2, batch_size=16)


def class_sequence(seed=0, m=3, classes=CLASSES, per_class=40):
    rng = Rng(seed)
    source = gen_blobs_source(classes, DIM, per_class, rng.child("source"))
    return gen_permuted_tasks(source, m, rng.child("seq"))


def regression_sequence(seed=0, m=3, out_dim=FEAT):
    return gen_rotated_regression(m, DIM, out_dim, Rng(seed).child("seq"), n_train=128, n_val=64)


def fresh_base(seed=0, pretrain_task=None, pretrain_steps=150):
    """Base network, optionally pretrained on a task (head discarded)."""
    rng = Rng(seed).child("base-pretrain")
    net = build_network(BASE_SPEC, rng.child("init"))
    if pretrain_task is not None:
        proto = build_strategy("finetune", base=net, cfg=CFG)
        proto.train_task(pretrain_task, pretrain_steps, rng.child("train"))
    return net


def strategy(kind, base=None, seed=0, **kwargs):
    kwargs.setdefault("cfg", CFG)
    if kind in ("sidetune", "pnn_lite"):
        kwargs.setdefault("side_spec", SIDE_SPEC)
    if base is None and kind not in ("scratch", "independent"):
        base = fresh_base(seed)
    if kind in ("scratch", "independent"):
        kwargs.setdefault("net_spec", BASE_SPEC)
    return build_strategy(kind, base=base, **kwargs)
