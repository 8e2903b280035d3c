"""Recommendation losses, the balanced multi-task objective, Adam, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .crossvil import assign_loss, contrastive_loss
from .dataio import InteractionDataset, sample_train_instance
from .model import BivRecModel
from .rng import Rng
from .tensorcore import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("l_id", "l_mm", "l_con", "l_assign", "total")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def select_interest(interests: Tensor, target_emb: Tensor) -> tuple[Tensor, np.ndarray]:
    """Pick, per row, the interest with the largest inner product with the target."""
    scores = np.einsum("bkd,bd->bk", interests.data, target_emb.data)
    idx = tc.freeze_value(np.argmax(scores, axis=1))
    rows = np.arange(interests.shape[0])
    return tc.take(interests, (rows, idx)), idx


def sample_negatives(targets: np.ndarray, num_items: int, num_neg: int, rng: Rng) -> np.ndarray:
    """``num_neg`` distinct items per row, uniform over ``[1, num_items]`` minus the target."""
    targets = np.asarray(targets, dtype=np.int64)
    if num_items - 1 < num_neg:
        raise ValueError(f"vocabulary of {num_items} items cannot supply {num_neg} negatives plus a target")
    keys = rng.random((targets.size, num_items - 1))
    picks = np.argsort(keys, axis=1, kind="stable")[:, :num_neg] + 1
    return np.where(picks >= targets[:, None], picks + 1, picks)


def rec_loss(v_hat: Tensor, targets: np.ndarray, items: Tensor, num_neg: int | None = None,
             rng: Rng | None = None, negatives: np.ndarray | None = None) -> Tensor:
    """Sampled-softmax negative log-likelihood of each target, averaged over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    if negatives is None:
        negatives = sample_negatives(targets, items.shape[0] - 1, num_neg, rng)
    b, d = v_hat.shape
    x_pos = tc.take(items, targets)
    x_neg = tc.take(items, negatives)  # (B, n, D)
    pos = tc.reshape(tc.sum_(tc.mul(v_hat, x_pos), axis=-1), (b, 1))
    neg = tc.reshape(tc.matmul(x_neg, tc.reshape(v_hat, (b, d, 1))), (b, negatives.shape[1]))
    logp = tc.log_softmax(tc.concatenate([pos, neg], axis=1), axis=1)
    return tc.neg(tc.mean(logp[:, 0]))


def total_loss(l_id, l_mm, l_con, l_a, lambda1: float = 0.0, lambda2: float = 0.0,
               eps: float = 1e-8) -> Tensor:
    """``L_id + sg(L_id / L_mm) L_mm + lambda1 L_con + lambda2 L_A``; the ratio is a constant."""
    l_id, l_mm, l_con, l_a = (tc.as_tensor(x) for x in (l_id, l_mm, l_con, l_a))
    ratio = tc.freeze_value(np.asarray(l_id.data / max(float(l_mm.data), eps)))
    out = tc.add(l_id, tc.mul(l_mm, float(ratio)))
    out = tc.add(out, tc.mul(l_con, float(lambda1)))
    return tc.add(out, tc.mul(l_a, float(lambda2)))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    prefix: np.ndarray  # (B, max_len)
    mask: np.ndarray
    targets: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.targets.size


def make_batch(sequences, max_len: int, rng: Rng) -> Batch:
    if not sequences:
        raise ValueError("empty batch")
    # one uniform per row picks its target position t in [2, len]
    u = rng.child("targets").random(len(sequences))
    inst = [sample_train_instance(seq, max_len, rng, t=2 + min(int(x * (len(seq) - 1)), len(seq) - 2))
            for x, seq in zip(u, sequences)]
    return Batch(np.stack([x.prefix for x in inst]), np.stack([x.mask for x in inst]),
                 np.array([x.target for x in inst], dtype=np.int64))


def batch_for_step(ds: InteractionDataset, step: int, batch_size: int, max_len: int, rng: Rng) -> Batch:
    """The batch of a global step: epoch-wise shuffled users, a fresh target per user."""
    seqs = [u.items for u in ds.users if len(u.items) >= 2]
    if not seqs:
        raise TrainingError("no training user has at least 2 interactions")
    per_epoch = math.ceil(len(seqs) / batch_size)
    epoch, within = divmod(step, per_epoch)
    order = rng.child("epoch", epoch).permutation(len(seqs))
    chosen = order[within * batch_size:(within + 1) * batch_size]
    return make_batch([seqs[i] for i in chosen], max_len, rng.child("step", step))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def model_losses(model: BivRecModel, batch: Batch, features: np.ndarray | None, rng: Rng | None) -> dict:
    """All loss components of one forward pass; ``rng`` drives Gumbel noise and negatives."""
    cfg = model.config
    neg_rng = (rng or Rng(0)).child("negatives")
    negatives = sample_negatives(batch.targets, model.num_items, cfg.neg_samples, neg_rng)
    towers, parts = {}, {}
    for view in model.views:
        tower = model.tower(view, batch.prefix, batch.mask, features, rng)
        target_emb = tc.take(tower.items, batch.targets)
        v_hat, _ = select_interest(tower.interests, target_emb)
        parts[f"l_{view}"] = rec_loss(v_hat, batch.targets, tower.items, negatives=negatives)
        towers[view] = tower
    if len(towers) == 2:
        h_id = model.common("id", towers["id"].interests)
        h_mm = model.common("mm", towers["mm"].interests)
        parts["l_con"] = contrastive_loss(h_id, h_mm, model.params["cross.beta"])
        parts["l_assign"] = assign_loss(towers["id"].intravid.assignment.hard,
                                        towers["mm"].intravid.assignment.hard)
        parts["total"] = total_loss(parts["l_id"], parts["l_mm"], parts["l_con"], parts["l_assign"],
                                    cfg.lambda1, cfg.lambda2)
    else:
        parts["total"] = parts[f"l_{model.views[0]}"]
    parts["towers"] = towers
    return parts


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg) -> "Adam":
        return cls(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    def update(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(model: BivRecModel, batch: Batch, opt: Adam, rng: Rng,
               features: np.ndarray | None = None) -> dict[str, float]:
    """Forward both towers, backward the total loss, apply one Adam update."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    try:
        with Tape() as tape:
            parts = model_losses(model, batch, features, rng)
    except NonFiniteError as err:
        raise TrainingError(f"non-finite forward value: {err}") from err
    tape.backward(parts["total"])
    for name, p in model.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient for parameter {name}")
    opt.update(model.params)
    return {k: float(parts[k].data) if k in parts else 0.0 for k in LOSS_COLUMNS}


def train_loop(model: BivRecModel, train: InteractionDataset, features: np.ndarray | None,
               out_dir: str | Path, rng: Rng | None = None, opt: Adam | None = None,
               start_step: int = 0, valid: InteractionDataset | None = None,
               max_iters: int | None = None) -> Path:
    """Run training steps ``start_step .. max_iters - 1``; returns the final checkpoint.

    Per-step randomness derives from ``(seed, step)``, so resuming from a
    checkpoint continues the exact same trajectory.
    """
    from .checkpoint import save_checkpoint
    from .evaluator import evaluate

    cfg = model.config
    rng = rng or Rng(cfg.seed)
    max_iters = cfg.max_iters if max_iters is None else max_iters
    opt = opt or Adam.from_config(model.params, cfg)
    out = Path(out_dir)
    ckpt_dir, log_dir = out / "ckpt", out / "logs"
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create run directory {out}: {err}") from err
    log_path = log_dir / "train.csv"
    fresh = start_step == 0 or not log_path.exists()
    with open(log_path, "w" if fresh else "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(("step",) + LOSS_COLUMNS)
        for step in range(start_step, max_iters):
            batch = batch_for_step(train, step, cfg.batch, cfg.max_len, rng)
            metrics = train_step(model, batch, opt, rng.child("forward", step), features)
            done = step + 1
            if done % cfg.log_every == 0 or done == max_iters:
                writer.writerow([done] + [repr(metrics[k]) for k in LOSS_COLUMNS])
                fh.flush()
                log.info("step %d total %.5f", done, metrics["total"])
            if done % cfg.ckpt_every == 0 and done != max_iters:
                save_checkpoint(model, ckpt_dir / f"step_{done:08d}.bivr", opt)
                if valid is not None and valid.users:
                    report = evaluate(model, valid, features, model.views[0], cfg.k_eval)
                    log.info("step %d valid recall@%d %.4f", done, cfg.k_eval, report.recall)
    final = ckpt_dir / "final.bivr"
    save_checkpoint(model, final, opt)
    return final
