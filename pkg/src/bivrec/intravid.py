"""Intra-view interest decomposition: Gaussian attention, then interest clustering.

Clustering assigns every token to its top-F interest tokens through a
Gumbel-softmax over interests with a straight-through hard filter, and
builds each interest as its token plus the projected sum of its members.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .embedding import MultiScaleEmbedding, xavier_uniform
from .rng import Rng
from .tensorcore import Tensor


@dataclass
class AssignmentMatrix:
    logits: Tensor  # (B, K, N'), masked columns zero
    soft: Tensor  # column-stochastic over unmasked columns
    hard: Tensor  # forward value: top-F filter of soft; backward: soft's gradient
    mask: np.ndarray  # (B, N')


@dataclass
class IntraVidOutput:
    interests: Tensor  # (B, K_final, D)
    assignment: AssignmentMatrix  # first clustering stage, used by the assign loss
    stages: list[AssignmentMatrix] = field(default_factory=list)
    tokens: MultiScaleEmbedding | None = None  # after the Gaussian layers


def init_intravid_params(view: str, dim: int, gauss_layers: int, k_list, max_len: int,
                         rng: Rng, use_ffn: bool = True) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def weight(name, fan_in, fan_out):
        params[name] = Tensor(xavier_uniform(rng.child(name), fan_in, fan_out), requires_grad=True)

    for layer in range(gauss_layers):
        p = f"{view}.gauss.{layer}"
        for w in ("wq", "wk", "wv", "wo"):
            weight(f"{p}.{w}", dim, dim)
        # sigma is stored as log(sigma) so it stays positive
        params[f"{p}.sigma"] = Tensor(np.log(max_len / 4.0), requires_grad=True)
        if use_ffn:
            weight(f"{p}.ffn.w1", dim, 4 * dim)
            params[f"{p}.ffn.b1"] = Tensor(np.zeros(4 * dim), requires_grad=True)
            weight(f"{p}.ffn.w2", 4 * dim, dim)
            params[f"{p}.ffn.b2"] = Tensor(np.zeros(dim), requires_grad=True)
    for stage, k in enumerate(k_list):
        p = f"{view}.cluster.{stage}"
        params[f"{p}.tokens"] = Tensor(rng.child(p, "tokens").truncated_normal((k, dim), std=0.02),
                                       requires_grad=True)
        for w in ("wq", "wk", "wv", "wa"):
            weight(f"{p}.{w}", dim, dim)
    return params


# ---------------------------------------------------------------------------
# Gaussian attention
# ---------------------------------------------------------------------------


def _distance_sq(positions: np.ndarray) -> np.ndarray:
    p = np.asarray(positions, dtype=np.float64)
    d = p[..., :, None] - p[..., None, :]
    return d * d


def _key_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every token of a sequence is masked")
    return mask[..., None, :]


def gaussian_log_weights(positions, mask, log_sigma: Tensor) -> Tensor:
    """Log of the row-normalized Gaussian weights, masked key columns excluded."""
    scaled = tc.mul(tc.as_tensor(-_distance_sq(positions)), tc.exp(tc.mul(log_sigma, -2.0)))
    keys = _key_mask(mask)
    shape = np.broadcast_shapes(scaled.shape, keys.shape)
    # masked keys sit far below every real logit and are dropped by the attention mask
    filled = tc.masked_fill(tc.broadcast_to(scaled, shape), ~np.broadcast_to(keys, shape), -1e30)
    return tc.log_softmax(filled, axis=-1)


def gaussian_matrix(positions, mask, log_sigma) -> Tensor:
    """``G_ij = exp(-D_ij^2 / s^2) / sum_j exp(-D_ij^2 / s^2)`` over unmasked keys ``j``.

    ``log_sigma`` is ``log s``; masked key columns are exactly zero.
    """
    log_sigma = tc.as_tensor(log_sigma)
    scaled = tc.mul(tc.as_tensor(-_distance_sq(positions)), tc.exp(tc.mul(log_sigma, -2.0)))
    keys = _key_mask(mask)
    shape = np.broadcast_shapes(scaled.shape, keys.shape)
    return tc.softmax(tc.broadcast_to(scaled, shape), axis=-1, mask=np.broadcast_to(keys, shape))


def attention_scores(x: Tensor, params, prefix: str, g: Tensor | None, mode: str,
                     sqrt_scaling: bool, positions=None, mask=None) -> Tensor:
    q = tc.matmul(x, params[f"{prefix}.wq"])
    k = tc.matmul(x, params[f"{prefix}.wk"])
    raw = tc.matmul(q, tc.swapaxes(k))
    if sqrt_scaling:
        raw = tc.mul(raw, 1.0 / np.sqrt(x.shape[-1]))
    if g is None:
        return raw
    if mode == "mul":
        return tc.mul(g, raw)
    return tc.add(raw, gaussian_log_weights(positions, mask, params[f"{prefix}.sigma"]))


def gaussian_attention(emb: MultiScaleEmbedding, params, prefix: str, mode: str = "mul",
                       sqrt_scaling: bool = True, use_ffn: bool = True,
                       gaussian: Tensor | None = None, use_gaussian: bool = True) -> MultiScaleEmbedding:
    """One feature-interaction layer; masked token rows pass through unchanged.

    ``gaussian`` overrides the computed weight matrix (used to check the
    reduction to plain attention); ``use_gaussian=False`` drops it entirely.
    """
    x, mask = emb.tokens, emb.mask
    keys = _key_mask(mask)
    g = None
    if use_gaussian:
        g = gaussian if gaussian is not None else gaussian_matrix(emb.positions, mask, params[f"{prefix}.sigma"])
    scores = attention_scores(x, params, prefix, g, mode, sqrt_scaling, emb.positions, mask)
    attn = tc.softmax(scores, axis=-1, mask=np.broadcast_to(keys, scores.shape))
    v = tc.matmul(x, params[f"{prefix}.wv"])
    out = tc.matmul(tc.matmul(attn, v), params[f"{prefix}.wo"])
    rows = mask[..., None].astype(np.float64)
    x = tc.add(x, tc.mul(out, rows))
    if use_ffn:
        h = tc.gelu(tc.add(tc.matmul(x, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
        ff = tc.add(tc.matmul(h, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
        x = tc.add(x, tc.mul(ff, rows))
    return MultiScaleEmbedding(x, emb.positions, mask, emb.scale_of_token)


# ---------------------------------------------------------------------------
# interest clustering
# ---------------------------------------------------------------------------


def cluster_scores(tokens: Tensor, x: Tensor, mask: np.ndarray, wq: Tensor, wk: Tensor,
                   sqrt_scaling: bool = True) -> Tensor:
    """``(W_q c_i) . (W_k x_j)`` for every interest token ``i`` and item token ``j``.

    Masked columns are zeroed; downstream ops take the mask explicitly.
    """
    q = tc.matmul(tokens, wq)  # (K, D)
    k = tc.matmul(x, wk)  # (B, N', D)
    logits = tc.matmul(q, tc.swapaxes(k))  # (B, K, N')
    if sqrt_scaling:
        logits = tc.mul(logits, 1.0 / np.sqrt(x.shape[-1]))
    cols = np.asarray(mask, dtype=bool)[..., None, :]
    return tc.masked_fill(logits, np.broadcast_to(~cols, logits.shape), 0.0)


def gumbel_soft_assign(logits: Tensor, mask: np.ndarray, tau: float, rng: Rng | None) -> Tensor:
    """Per column ``j``: softmax over interests of ``(logits_ij + g_ij) / tau``.

    ``rng=None`` omits the noise (evaluation).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = logits
    if rng is not None:
        z = tc.add(z, tc.gumbel_noise(logits.shape, rng))
    z = tc.mul(z, 1.0 / tau)
    cols = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None, :], logits.shape)
    return tc.softmax(z, axis=-2, mask=cols)


def filter_topF(matrix: np.ndarray, f: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Binary matrix with ones at each column's F largest entries (ties to the lower row)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    k = matrix.shape[-2]
    if not 1 <= f <= k:
        raise ValueError(f"F={f} outside [1, {k}]")
    order = np.argsort(-matrix, axis=-2, kind="stable")
    out = np.zeros_like(matrix)
    np.put_along_axis(out, order[..., :f, :], 1.0, axis=-2)
    if mask is not None:
        out = out * np.asarray(mask, dtype=bool)[..., None, :]
    return out


def straight_through(soft: Tensor, f: int, mask: np.ndarray, logits: Tensor | None = None) -> AssignmentMatrix:
    """``hard + (soft - sg(soft))``: forward is the filter, backward is soft's."""
    hard_value = tc.freeze_value(filter_topF(soft.data, f, mask))
    hard = tc.add(tc.as_tensor(hard_value), tc.sub(soft, tc.stop_gradient(soft)))
    return AssignmentMatrix(logits=logits if logits is not None else soft, soft=soft, hard=hard, mask=mask)


def build_interests(tokens: Tensor, a_hat: Tensor, x: Tensor, wv: Tensor, wa: Tensor) -> Tensor:
    """``v_k = c_k + W_a sum_j A_kj W_v x_j``."""
    members = tc.matmul(a_hat, tc.matmul(x, wv))  # (B, K, D)
    return tc.add(tokens, tc.matmul(members, wa))


def cluster_layer(emb: MultiScaleEmbedding, params, prefix: str, f: int, tau: float,
                  rng: Rng | None, sqrt_scaling: bool = True):
    c = params[f"{prefix}.tokens"]
    logits = cluster_scores(c, emb.tokens, emb.mask, params[f"{prefix}.wq"], params[f"{prefix}.wk"],
                            sqrt_scaling)
    soft = gumbel_soft_assign(logits, emb.mask, tau, rng)
    assign = straight_through(soft, f, emb.mask, logits)
    interests = build_interests(c, assign.hard, emb.tokens, params[f"{prefix}.wv"], params[f"{prefix}.wa"])
    return interests, assign


def _member_positions(hard: np.ndarray, positions: np.ndarray) -> np.ndarray:
    weights = hard.sum(axis=-1)
    pos = np.broadcast_to(positions, hard.shape[:-2] + (hard.shape[-1],))
    total = (hard * pos[..., None, :]).sum(axis=-1)
    fallback = pos.mean(axis=-1, keepdims=True)
    return np.where(weights > 0, total / np.where(weights > 0, weights, 1.0), fallback)


def intravid_forward(emb: MultiScaleEmbedding, params, view: str, cfg, rng: Rng | None,
                     use_gaussian: bool = True) -> IntraVidOutput:
    """Gaussian layers, then one clustering stage per entry of ``cfg.k_list``.

    Each stage's interests are the next stage's tokens, positioned at the
    mean position of their members.
    """
    k_list = tuple(cfg.k_list)
    if any(b >= a for a, b in zip(k_list, k_list[1:])):
        raise ValueError(f"k_list must decrease, got {k_list}")
    for layer in range(cfg.gauss_layers):
        emb = gaussian_attention(emb, params, f"{view}.gauss.{layer}", cfg.gauss_mode,
                                 cfg.use_sqrt_scaling, cfg.use_ffn, use_gaussian=use_gaussian)
    after_gauss = emb
    stages = []
    current = emb
    interests = None
    for stage in range(len(k_list)):
        stage_rng = rng.child(view, "gumbel", stage) if rng is not None else None
        interests, assign = cluster_layer(current, params, f"{view}.cluster.{stage}", cfg.f_top,
                                          cfg.tau, stage_rng, cfg.use_sqrt_scaling)
        stages.append(assign)
        b, k = interests.shape[0], interests.shape[1]
        current = MultiScaleEmbedding(
            tokens=interests,
            positions=_member_positions(assign.hard.data, current.positions),
            mask=np.ones((b, k), dtype=bool),
            scale_of_token=np.zeros(k, dtype=np.int64),
        )
    return IntraVidOutput(interests=interests, assignment=stages[0], stages=stages, tokens=after_gauss)
