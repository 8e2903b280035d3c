"""Cross-view interest learning: pooled contrastive alignment and allocation alignment."""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .embedding import xavier_uniform
from .rng import Rng
from .tensorcore import Tensor


def init_cross_params(dim: int, common_dim: int, k_final: int, beta_init: float,
                      rng: Rng) -> dict[str, Tensor]:
    params = {}
    for view in ("id", "mm"):
        params[f"cross.pool.{view}"] = Tensor(np.zeros(k_final), requires_grad=True)
        p = f"cross.mlp.{view}"
        params[f"{p}.w0"] = Tensor(xavier_uniform(rng.child(p, "w0"), dim, dim), requires_grad=True)
        params[f"{p}.b0"] = Tensor(np.zeros(dim), requires_grad=True)
        params[f"{p}.w1"] = Tensor(xavier_uniform(rng.child(p, "w1"), dim, common_dim), requires_grad=True)
        params[f"{p}.b1"] = Tensor(np.zeros(common_dim), requires_grad=True)
    # stored as log(beta) so the temperature stays positive
    params["cross.beta"] = Tensor(np.log(beta_init), requires_grad=True)
    return params


def pool_interests(interests: Tensor, pool_weights: Tensor) -> Tensor:
    """Softmax-weighted average of the K interests: (B, K, D) -> (B, D)."""
    w = tc.softmax(pool_weights, axis=-1)
    k = interests.shape[-2]
    mixed = tc.matmul(tc.reshape(w, (1, k)), interests)  # (B, 1, D)
    return tc.reshape(mixed, interests.shape[:-2] + interests.shape[-1:])


def project_common(h: Tensor, params, view: str, normalize: bool = True) -> Tensor:
    """``W1 GELU(W0 h + b0) + b1``, optionally L2-normalized."""
    p = f"cross.mlp.{view}"
    hidden = tc.gelu(tc.add(tc.matmul(h, params[f"{p}.w0"]), params[f"{p}.b0"]))
    out = tc.add(tc.matmul(hidden, params[f"{p}.w1"]), params[f"{p}.b1"])
    return tc.l2_normalize(out, axis=-1) if normalize else out


def contrastive_loss(h_id: Tensor, h_mm: Tensor, log_beta) -> Tensor:
    """Symmetric in-batch InfoNCE; same-user rows are the positives.

    Each direction is averaged over the batch and the two directions summed.
    """
    b = h_id.shape[0]
    if b == 0:
        raise ValueError("contrastive loss needs a non-empty batch")
    if h_mm.shape != h_id.shape:
        raise ValueError(f"shape mismatch {h_id.shape} vs {h_mm.shape}")
    inv_beta = tc.exp(tc.neg(tc.as_tensor(log_beta)))
    logits = tc.mul(tc.matmul(h_mm, tc.transpose(h_id)), inv_beta)  # rows: MM anchors
    diag = (np.arange(b), np.arange(b))
    mm_to_id = tc.neg(tc.mean(tc.take(tc.log_softmax(logits, axis=1), diag)))
    id_to_mm = tc.neg(tc.mean(tc.take(tc.log_softmax(logits, axis=0), diag)))
    return tc.add(mm_to_id, id_to_mm)


def assign_loss(a_id: Tensor, a_mm: Tensor) -> Tensor:
    """``-sum_k cos(A_mm[k, :], A_id[k, :])``, averaged over the batch.

    Masked columns are zero in both matrices and so drop out; a zero row
    contributes 0.
    """
    if a_id.shape[-2] != a_mm.shape[-2]:
        raise ValueError(f"interest count mismatch: {a_id.shape[-2]} vs {a_mm.shape[-2]}")
    if a_id.shape != a_mm.shape:
        raise ValueError(f"allocation shapes differ: {a_id.shape} vs {a_mm.shape}")
    cos = tc.cosine_similarity(a_mm, a_id, axis=-1)  # (..., K)
    per_user = tc.neg(tc.sum_(cos, axis=-1))
    return tc.mean(per_user) if per_user.ndim else per_user
