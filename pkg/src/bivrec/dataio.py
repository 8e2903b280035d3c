"""Interaction and feature loading, k-core filtering, splits, sampling, perturbation."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .rng import Rng

log = logging.getLogger(__name__)

PAD = 0


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class UserSequence:
    user: str
    items: tuple[int, ...]


@dataclass
class InteractionDataset:
    users: list[UserSequence]
    vocab: dict[str, int]
    num_items: int
    # cold-start evaluation keeps only this many trailing history items
    history_limit: int | None = None

    @property
    def item_ids(self) -> list[str]:
        ids = [""] * (self.num_items + 1)
        for raw, idx in self.vocab.items():
            ids[idx] = raw
        return ids

    def num_events(self) -> int:
        return sum(len(u.items) for u in self.users)

    def subset(self, users: list[UserSequence]) -> "InteractionDataset":
        return replace(self, users=list(users))


@dataclass
class FeatureTable:
    rows: np.ndarray  # (num_items + 1, dim); row 0 is the padding row

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class TrainInstance:
    prefix: np.ndarray
    target: int
    mask: np.ndarray


@dataclass
class EvalInstance:
    history: np.ndarray
    mask: np.ndarray
    truth: frozenset[int] = field(default_factory=frozenset)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()


def _read_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if row and any(cell.strip() for cell in row):
                yield lineno, [cell.strip() for cell in row]


def read_interaction_rows(path: str | Path) -> list[tuple[str, str, float]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    out = []
    for lineno, row in _read_rows(path):
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected user_id,item_id,timestamp, got {len(row)} fields")
        try:
            ts = _parse_time(row[2])
        except ValueError:
            if lineno == 1 and not out:
                continue  # header
            raise DataError(f"{path}:{lineno}: unparseable timestamp {row[2]!r}") from None
        out.append((row[0], row[1], ts))
    return out


def kcore_filter(sequences: dict[str, list[str]], min_interactions: int) -> dict[str, list[str]]:
    """Drop users and items with ``<= min_interactions`` events until nothing changes."""
    seqs = {u: list(items) for u, items in sequences.items()}
    while True:
        item_counts = Counter(i for items in seqs.values() for i in items)
        bad_items = {i for i, c in item_counts.items() if c <= min_interactions}
        changed = False
        if bad_items:
            seqs = {u: [i for i in items if i not in bad_items] for u, items in seqs.items()}
            changed = True
        short = [u for u, items in seqs.items() if len(items) <= min_interactions]
        for u in short:
            del seqs[u]
            changed = True
        if not changed:
            return seqs


def build_dataset(sequences: dict[str, list[str]]) -> InteractionDataset:
    vocab: dict[str, int] = {}
    users = []
    for user, items in sequences.items():
        for raw in items:
            if raw not in vocab:
                vocab[raw] = len(vocab) + 1
        users.append(UserSequence(user, tuple(vocab[raw] for raw in items)))
    return InteractionDataset(users=users, vocab=vocab, num_items=len(vocab))


def load_interactions(path: str | Path, min_interactions: int = 5) -> InteractionDataset:
    """Load ``user_id,item_id,timestamp`` rows into time-ordered, k-core filtered sequences.

    Timestamp ties keep file order. Items are re-indexed densely from 1 in
    order of first appearance.
    """
    rows = read_interaction_rows(path)
    per_user: dict[str, list[tuple[float, int, str]]] = {}
    for order, (user, item, ts) in enumerate(rows):
        per_user.setdefault(user, []).append((ts, order, item))
    sequences = {u: [item for _, _, item in sorted(events)] for u, events in per_user.items()}
    sequences = kcore_filter(sequences, min_interactions)
    if not sequences:
        raise DataError(f"{path}: no users left after filtering (> {min_interactions} interactions)")
    return build_dataset(sequences)


def _read_feature_file(path: Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    dim = None
    for lineno, row in _read_rows(path):
        try:
            vec = np.array([float(v) for v in row[1:]])
        except ValueError:
            if lineno == 1 and not out:
                continue  # header
            raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise DataError(f"{path}:{lineno}: feature dimension {vec.size} != {dim}")
        if not np.isfinite(vec).all():
            raise DataError(f"{path}:{lineno}: non-finite feature value")
        out[row[0]] = vec
    if dim is None or dim == 0:
        raise DataError(f"{path}: no feature rows")
    return out


def load_features(paths, vocab: dict[str, int], num_items: int | None = None) -> FeatureTable:
    """Build the frozen feature table; several files are concatenated per item.

    Items absent from a file get a zero block for that file. Ids not in the
    vocabulary are skipped with a warning.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    num_items = len(vocab) if num_items is None else num_items
    blocks = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise DataError(f"{path}: no such file")
        table = _read_feature_file(path)
        dim = len(next(iter(table.values())))
        block = np.zeros((num_items + 1, dim))
        unknown = 0
        for raw, vec in table.items():
            idx = vocab.get(raw)
            if idx is None:
                unknown += 1
                continue
            block[idx] = vec
        if unknown:
            log.warning("%s: skipped %d unknown item ids", path, unknown)
        blocks.append(block)
    return FeatureTable(rows=np.concatenate(blocks, axis=1))


# ---------------------------------------------------------------------------
# splitting and instances
# ---------------------------------------------------------------------------


def split_users(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), rng: Rng | None = None):
    """Partition users into disjoint parts sized by largest remainder."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    n = len(ds.users)
    if n < len(ratios):
        raise DataError(f"cannot split {n} users into {len(ratios)} parts")
    exact = [r * n for r in ratios]
    sizes = [math.floor(x) for x in exact]
    by_remainder = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    order = (rng or Rng(0)).permutation(n)
    parts, start = [], 0
    for size in sizes:
        parts.append(ds.subset([ds.users[j] for j in order[start:start + size]]))
        start += size
    return tuple(parts)


def _window(items, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    items = list(items)[-max_len:] if max_len else []
    prefix = np.zeros(max_len, dtype=np.int64)
    if items:
        prefix[max_len - len(items):] = items
    return prefix, prefix != PAD


def sample_train_instance(seq, max_len: int, rng: Rng, t: int | None = None) -> TrainInstance:
    """Pick a target at 1-based position ``t`` in ``[2, len(seq)]``; the prefix is what precedes it."""
    seq = list(seq)
    if len(seq) < 2:
        raise DataError("training sequences need at least 2 items")
    if t is None:
        t = int(rng.integers(2, len(seq) + 1))
    elif not 2 <= t <= len(seq):
        raise ValueError(f"target position {t} outside [2, {len(seq)}]")
    prefix, mask = _window(seq[: t - 1], max_len)
    return TrainInstance(prefix=prefix, target=seq[t - 1], mask=mask)


def eval_split_point(n: int) -> int:
    return n - math.ceil(0.2 * n)


def make_eval_instance(seq, max_len: int, history_limit: int | None = None) -> EvalInstance:
    """History is the first 80% (windowed to ``max_len``), truth the last ``ceil(20%)``."""
    seq = list(seq)
    if len(seq) < 5:
        raise DataError("evaluation sequences need at least 5 items")
    cut = eval_split_point(len(seq))
    history = seq[:cut]
    if history_limit is not None:
        history = history[-history_limit:]
    prefix, mask = _window(history, max_len)
    return EvalInstance(history=prefix, mask=mask, truth=frozenset(seq[cut:]))


def eval_instances(ds: InteractionDataset, max_len: int) -> list[EvalInstance]:
    return [make_eval_instance(u.items, max_len, ds.history_limit) for u in ds.users]


# ---------------------------------------------------------------------------
# perturbation
# ---------------------------------------------------------------------------


def perturb(ds: InteractionDataset, noise: float | None = None, cold: int | None = None,
            rng: Rng | None = None) -> InteractionDataset:
    """Robustness perturbations.

    ``noise=p`` replaces each interaction independently with probability ``p``
    by a uniformly drawn different item; apply it to the training partition.
    ``cold=n`` keeps only the last ``n`` history items when evaluating.
    """
    if (noise is None) == (cold is None):
        raise ValueError("give exactly one of noise or cold")
    if cold is not None:
        if cold not in (1, 2):
            raise ValueError(f"cold must be 1 or 2, got {cold}")
        return replace(ds, history_limit=cold)
    if not 0.0 <= noise <= 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1], got {noise}")
    if noise == 0.0:
        return ds
    if ds.num_items < 2:
        raise DataError("noise injection needs at least 2 items")
    rng = rng or Rng(0)
    users = []
    for u in ds.users:
        items = np.array(u.items, dtype=np.int64)
        hit = rng.random(items.size) < noise
        # uniform over the other num_items - 1 items
        draw = rng.integers(1, ds.num_items, items.size)
        draw = np.where(draw >= items, draw + 1, draw)
        items = np.where(hit, draw, items)
        users.append(UserSequence(u.user, tuple(int(i) for i in items)))
    return ds.subset(users)


def count_replacements(before: InteractionDataset, after: InteractionDataset) -> int:
    return sum(int(np.sum(np.array(a.items) != np.array(b.items)))
               for a, b in zip(before.users, after.users))


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthCorpus:
    dataset: InteractionDataset
    features: FeatureTable
    groups: np.ndarray  # group of each item index; groups[0] = -1
    user_groups: list[tuple[int, ...]]


def synth_generate(num_users: int, num_items: int, num_latent_interests: int, seq_len: int,
                   feature_dim: int, rng: Rng, purity: float = 0.9,
                   feature_noise: float = 0.2, max_groups_per_user: int = 3,
                   taste_size: int = 5) -> SynthCorpus:
    """Corpus with planted interest groups.

    Items are split into contiguous groups. A user picks 1-3 groups and, in
    each, a personal taste set of ``taste_size`` items; every interaction
    draws from the taste set of the currently active group, which switches
    with probability 0.3. With probability ``1 - purity`` an interaction is
    a uniformly random item instead. Features are the group centroid plus
    isotropic noise.
    """
    if not 1 <= num_latent_interests <= num_items:
        raise DataError("need 1 <= num_latent_interests <= num_items")
    if num_users < 1 or seq_len < 2 or feature_dim < 1:
        raise DataError("num_users >= 1, seq_len >= 2 and feature_dim >= 1 are required")
    if not 0.0 <= purity <= 1.0:
        raise DataError("purity must lie in [0, 1]")
    if taste_size < 1:
        raise DataError("taste_size must be positive")

    bounds = np.linspace(0, num_items, num_latent_interests + 1).round().astype(int)
    members = [np.arange(bounds[g], bounds[g + 1]) + 1 for g in range(num_latent_interests)]
    groups = np.full(num_items + 1, -1, dtype=np.int64)
    for g, m in enumerate(members):
        groups[m] = g

    centroids = rng.child("centroids").normal((num_latent_interests, feature_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    rows = np.zeros((num_items + 1, feature_dim))
    noise = rng.child("feature_noise").normal((num_items, feature_dim), std=feature_noise / math.sqrt(feature_dim))
    rows[1:] = centroids[groups[1:]] + noise

    users, user_groups = [], []
    for u in range(num_users):
        urng = rng.child("user", u)
        n_groups = int(urng.integers(1, min(max_groups_per_user, num_latent_interests) + 1))
        chosen = tuple(int(g) for g in urng.choice(num_latent_interests, n_groups, replace=False))
        taste = {g: urng.choice(members[g], min(taste_size, len(members[g])), replace=False)
                 for g in chosen}
        active = chosen[0]
        items = []
        for _ in range(seq_len):
            if urng.random() < 1.0 - purity:
                items.append(int(urng.integers(1, num_items + 1)))
                continue
            if len(chosen) > 1 and urng.random() < 0.3:
                active = chosen[int(urng.integers(0, len(chosen)))]
            items.append(int(taste[active][int(urng.integers(0, len(taste[active])))]))
        users.append(UserSequence(f"u{u}", tuple(items)))
        user_groups.append(chosen)

    vocab = {f"i{i}": i for i in range(1, num_items + 1)}
    ds = InteractionDataset(users=users, vocab=vocab, num_items=num_items)
    return SynthCorpus(ds, FeatureTable(rows), groups, user_groups)


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> None:
    """Write interactions.csv, features.csv and groups.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = corpus.dataset.item_ids
    write_interactions(corpus.dataset, out / "interactions.csv")
    write_features(corpus.features, ids, out / "features.csv")
    with open(out / "groups.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "group"])
        for idx in range(1, corpus.dataset.num_items + 1):
            w.writerow([ids[idx], int(corpus.groups[idx])])


def write_features(table: FeatureTable, item_ids: list[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id"] + [f"f{j + 1}" for j in range(table.dim)])
        for idx in range(1, table.rows.shape[0]):
            w.writerow([item_ids[idx]] + [repr(float(v)) for v in table.rows[idx]])


def write_interactions(ds: InteractionDataset, path: str | Path) -> None:
    ids = ds.item_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp"])
        for u in ds.users:
            for t, item in enumerate(u.items):
                w.writerow([u.user, ids[item], t])
