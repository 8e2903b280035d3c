"""End-to-end helpers shared by the command line, sweeps and robustness runs."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import LoadReport, load_checkpoint
from .config import RunConfig
from .dataio import DataError, FeatureTable, InteractionDataset, load_features, load_interactions, split_users
from .evaluator import MetricsReport, evaluate
from .model import BivRecModel
from .rng import Rng
from .trainer import Adam, train_loop

log = logging.getLogger(__name__)

MODALITY_FILES = {"image": ("image.csv",), "text": ("text.csv",), "both": ("image.csv", "text.csv")}


@dataclass
class Corpus:
    dataset: InteractionDataset
    features: FeatureTable | None
    train: InteractionDataset
    valid: InteractionDataset
    test: InteractionDataset

    @property
    def feature_rows(self) -> np.ndarray | None:
        return None if self.features is None else self.features.rows

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.dim


def feature_paths(data_dir: Path, modality: str) -> list[Path] | None:
    """Per-modality files when all exist, else a combined ``features.csv``."""
    paths = [data_dir / name for name in MODALITY_FILES[modality]]
    if all(p.exists() for p in paths):
        return paths
    combined = data_dir / "features.csv"
    if combined.exists():
        return [combined]
    return None


def load_corpus(cfg: RunConfig, data_dir: str | Path, seed: int | None = None) -> Corpus:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"{data_dir}: data directory not found")
    ds = load_interactions(data_dir / "interactions.csv", cfg.min_interactions)
    paths = feature_paths(data_dir, cfg.modality)
    if paths is None and "mm" in cfg.views:
        raise DataError(f"{data_dir}: no feature file for modality {cfg.modality!r}")
    features = load_features(paths, ds.vocab, ds.num_items) if paths else None
    seed = cfg.seed if seed is None else seed
    train, valid, test = split_users(ds, cfg.split, Rng(seed).child("split"))
    return Corpus(ds, features, train, valid, test)


def worker_cap(requested: int) -> int:
    env = os.environ.get("BIVREC_THREADS")
    if env:
        try:
            return max(1, min(requested, int(env)))
        except ValueError:
            log.warning("ignoring non-integer BIVREC_THREADS=%r", env)
    return requested


def build_model(cfg: RunConfig, corpus: Corpus, init_from: str | Path | None = None,
                ) -> tuple[BivRecModel, Adam | None, LoadReport | None]:
    if init_from is None:
        return BivRecModel(cfg, corpus.dataset.num_items, corpus.feature_dim, Rng(cfg.seed)), None, None
    model, opt, report = load_checkpoint(init_from, config=cfg, num_items=corpus.dataset.num_items,
                                         feature_dim=corpus.feature_dim, rng=Rng(cfg.seed))
    if report.reinitialized:
        log.info("re-initialized for the new catalog: %s", ", ".join(report.reinitialized))
    return model, opt, report


def train(cfg: RunConfig, corpus: Corpus, out_dir: str | Path, init_from: str | Path | None = None,
          train_set: InteractionDataset | None = None) -> tuple[BivRecModel, Path]:
    """Train on ``train_set`` (default: the corpus train split); the run dir gets config.echo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.echo")
    model, opt, _ = build_model(cfg, corpus, init_from)
    start = opt.step_count if opt is not None else 0
    ckpt = train_loop(model, train_set or corpus.train, corpus.feature_rows, out, Rng(cfg.seed),
                      opt=opt, start_step=start, valid=corpus.valid)
    return model, ckpt


def eval_views(model: BivRecModel, view: str) -> tuple[str, ...]:
    return model.views if view == "both" else (view,)


def evaluate_model(model: BivRecModel, ds: InteractionDataset, features: np.ndarray | None, view: str,
                   k: int | None = None) -> dict[str, MetricsReport]:
    cfg = model.config
    return {v: evaluate(model, ds, features, v, k or cfg.k_eval, workers=worker_cap(cfg.eval_workers))
            for v in eval_views(model, view)}
