"""Finite-difference suites run by ``bivrec gradcheck``."""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .config import RunConfig
from .gradcheck import GradCheckReport, grad_check
from .model import BivRecModel
from .rng import Rng
from .tensorcore import Tensor
from .trainer import Batch, model_losses


def toy_config(**changes) -> RunConfig:
    base = dict(max_len=8, scales=(1, 4), dim=6, k_list=(2,), f_top=1, batch=2, neg_samples=3,
                gauss_layers=1, beta_init=0.5)
    base.update(changes)
    return RunConfig(**base).validate()


def toy_batch(seed: int, num_items: int = 6, max_len: int = 8, users: int = 2) -> Batch:
    """``users`` sequences of distinct lengths over ``num_items`` items, one target each."""
    rng = Rng(seed).child("toy_batch")
    prefix = np.zeros((users, max_len), dtype=np.int64)
    for u in range(users):
        n = max_len - 2 * u if max_len - 2 * u > 0 else 1
        prefix[u, max_len - n:] = rng.integers(1, num_items + 1, n)
    targets = rng.integers(1, num_items + 1, users)
    return Batch(prefix, prefix != 0, np.asarray(targets, dtype=np.int64))


def toy_features(seed: int, num_items: int = 6, dim: int = 4) -> np.ndarray:
    feats = Rng(seed).child("toy_features").normal((num_items + 1, dim))
    feats[0] = 0.0
    return feats


def check_full_model(seed: int = 0, tol: float = 1e-4, eps: float = 1e-5,
                     cfg: RunConfig | None = None) -> GradCheckReport:
    """Every parameter of both towers and the cross head through the total loss."""
    cfg = cfg or toy_config(seed=seed)
    num_items = 6
    feats = toy_features(seed, num_items)
    model = BivRecModel(cfg, num_items, feats.shape[1], Rng(seed))
    batch = toy_batch(seed, num_items, cfg.max_len, cfg.batch)

    def loss():
        return model_losses(model, batch, feats, Rng(seed).child("forward"))["total"]

    return grad_check(loss, model.params, eps=eps, tol=tol)


def _primitive_cases(rng: Rng):
    def r(*shape, positive=False):
        x = rng.child("x", len(shape), *shape).normal(shape)
        return np.abs(x) + 0.5 if positive else x

    mask = np.array([[True, True, False, True]] * 3)
    idx = np.array([0, 2, 2, 1])
    yield "add", [r(3, 4), r(4)], lambda a, b: tc.sum_(tc.mul(tc.add(a, b), tc.add(a, b)))
    yield "mul", [r(3, 4), r(3, 4)], lambda a, b: tc.sum_(tc.mul(a, b))
    yield "div", [r(3, 4), r(3, 4, positive=True)], lambda a, b: tc.sum_(tc.div(a, b))
    yield "exp", [r(3, 4)], lambda a: tc.sum_(tc.exp(a))
    yield "log", [r(3, 4, positive=True)], lambda a: tc.sum_(tc.log(a))
    yield "neg", [r(3, 4)], lambda a: tc.sum_(tc.mul(tc.neg(a), a))
    yield "matmul", [r(3, 4), r(4, 2)], lambda a, b: tc.sum_(tc.square(tc.matmul(a, b)))
    yield "concatenate", [r(3, 4), r(2, 4)], lambda a, b: tc.sum_(tc.square(tc.concatenate([a, b], 0)))
    yield "slice", [r(3, 4)], lambda a: tc.sum_(tc.square(a[1:, ::2]))
    yield "sum", [r(3, 4)], lambda a: tc.sum_(tc.square(tc.sum_(a, axis=1)))
    yield "mean", [r(3, 4)], lambda a: tc.sum_(tc.square(tc.mean(a, axis=0)))
    yield "broadcast", [r(1, 4)], lambda a: tc.sum_(tc.square(tc.broadcast_to(a, (3, 4))) * np.arange(12.0).reshape(3, 4))
    yield "transpose", [r(3, 4)], lambda a: tc.sum_(tc.matmul(tc.transpose(a), a))
    yield "embedding", [r(3, 4)], lambda t: tc.sum_(tc.square(tc.embedding(t, idx)))
    yield "cosine", [r(3, 4), r(3, 4)], lambda a, b: tc.sum_(tc.cosine_similarity(a, b, axis=-1))
    yield "masked_fill", [r(3, 4)], lambda a: tc.sum_(tc.square(tc.masked_fill(a, mask, 0.0)))
    yield "softmax", [r(3, 4)], lambda a: tc.sum_(tc.square(tc.softmax(a, axis=1)))
    yield "gelu", [r(3, 4)], lambda a: tc.sum_(tc.gelu(a))


def check_primitives(seeds=range(20), tol: float = 1e-6) -> dict[str, GradCheckReport]:
    """Worst report per primitive over ``seeds``."""
    worst: dict[str, GradCheckReport] = {}
    for seed in seeds:
        for name, arrays, fn in _primitive_cases(Rng(seed).child("primitives")):
            params = {f"x{i}": Tensor(a, requires_grad=True) for i, a in enumerate(arrays)}
            ordered = list(params.values())
            rep = grad_check(lambda: fn(*ordered), params, tol=tol)
            prev = worst.get(name)
            if prev is None or (rep.failures and not prev.failures) or rep.max_rel_error > prev.max_rel_error:
                worst[name] = rep
    return worst
