"""Multi-scale interest embedding for the ID and multimodal views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .dataio import PAD
from .rng import Rng
from .tensorcore import Tensor


@dataclass
class MultiScaleEmbedding:
    tokens: Tensor  # (B, N', D)
    positions: np.ndarray  # (N',) or (B, N') fractional base positions
    mask: np.ndarray  # (B, N') True for real tokens
    scale_of_token: np.ndarray  # (N',)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.random((fan_in, fan_out)) * 2.0 - 1.0) * bound


def init_embedding_params(view: str, max_len: int, scales, dim: int, rng: Rng,
                          num_items: int = 0, feature_dim: int = 0) -> dict[str, Tensor]:
    params = {}
    if view == "id":
        table = rng.child("item_table").normal((num_items + 1, dim), std=0.02)
        table[PAD] = 0.0
        params["id.item_table"] = Tensor(table, requires_grad=True)
    elif view == "mm":
        params["mm.projection.w"] = Tensor(xavier_uniform(rng.child("projection"), feature_dim, dim),
                                           requires_grad=True)
        params["mm.projection.b"] = Tensor(np.zeros(dim), requires_grad=True)
    else:
        raise ValueError(f"unknown view {view!r}")
    params[f"{view}.seq_pos"] = Tensor(rng.child("seq_pos").normal((max_len, dim), std=0.02),
                                       requires_grad=True)
    for s in scales:
        params[f"{view}.scale_pos.{s}"] = Tensor(
            rng.child("scale_pos", s).normal((max_len // s, dim), std=0.02), requires_grad=True)
    return params


def item_representations(view: str, params, features: np.ndarray | None = None) -> Tensor:
    """Per-item vectors of a view, row 0 being padding: the ID table or projected features."""
    if view == "id":
        return params["id.item_table"]
    return project_features(features, params)


def project_features(features, params) -> Tensor:
    w = params["mm.projection.w"]
    if features.shape[-1] != w.shape[0]:
        raise ValueError(f"feature dim {features.shape[-1]} != projection input dim {w.shape[0]}")
    return tc.matmul(tc.as_tensor(features), w) + params["mm.projection.b"]


def embed_base_id(prefix: np.ndarray, params) -> Tensor:
    """``E1 = F + E_pos`` for a (B, N) batch of item indices."""
    prefix = np.atleast_2d(prefix)
    pos = params["id.seq_pos"]
    if prefix.shape[-1] != pos.shape[0]:
        raise ValueError(f"prefix length {prefix.shape[-1]} != max_len {pos.shape[0]}")
    return tc.embedding(params["id.item_table"], prefix, padding_idx=PAD) + pos


def embed_base_mm(prefix: np.ndarray, features: np.ndarray, params) -> Tensor:
    """Projected frozen features plus sequence positions; features get no gradient."""
    prefix = np.atleast_2d(prefix)
    pos = params["mm.seq_pos"]
    if prefix.shape[-1] != pos.shape[0]:
        raise ValueError(f"prefix length {prefix.shape[-1]} != max_len {pos.shape[0]}")
    return project_features(features[prefix], params) + pos


def multi_scale_expand(e1: Tensor, mask: np.ndarray, scales, params, view: str) -> MultiScaleEmbedding:
    """Sum non-overlapping windows of each scale, add that scale's positions, concatenate."""
    b, n, d = e1.shape
    mask = np.broadcast_to(np.atleast_2d(mask), (b, n))
    if scales[0] != 1:
        raise ValueError("the first scale must be 1")
    tokens, positions, masks, scale_ids = [], [], [], []
    base = np.arange(n, dtype=np.float64)
    for s in scales:
        if n % s:
            raise ValueError(f"max_len {n} is not divisible by scale {s}")
        windows = n // s
        if s == 1:
            merged = e1
        else:
            merged = tc.sum_(tc.reshape(e1, (b, windows, s, d)), axis=2)
        tokens.append(merged + params[f"{view}.scale_pos.{s}"])
        positions.append(base.reshape(windows, s).mean(axis=1))
        masks.append(mask.reshape(b, windows, s).any(axis=2))
        scale_ids.append(np.full(windows, s))
    return MultiScaleEmbedding(
        tokens=tc.concatenate(tokens, axis=1),
        positions=np.concatenate(positions),
        mask=np.concatenate(masks, axis=1),
        scale_of_token=np.concatenate(scale_ids),
    )


def embed_view(view: str, prefix: np.ndarray, mask: np.ndarray, params, scales,
               features: np.ndarray | None = None) -> MultiScaleEmbedding:
    if view == "id":
        e1 = embed_base_id(prefix, params)
    else:
        e1 = embed_base_mm(prefix, features, params)
    return multi_scale_expand(e1, mask, scales, params, view)
