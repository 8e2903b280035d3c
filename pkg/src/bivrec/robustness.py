"""Noise-injection and cold-start robustness runs with degradation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import RunConfig
from .dataio import perturb
from .model import BivRecModel
from .pipeline import Corpus, evaluate_model, train
from .rng import Rng


@dataclass
class RobustnessRow:
    mode: str  # "noise" or "cold"
    level: str  # "p=0.1", "n=1", "full"
    view: str
    recall: float
    ndcg: float
    hr: float
    degradation_pct: float  # recall drop relative to the clean row, in percent


@dataclass
class RobustnessReport:
    rows: list[RobustnessRow] = field(default_factory=list)

    def series(self, mode: str, view: str) -> list[RobustnessRow]:
        return [r for r in self.rows if r.mode == mode and r.view == view]

    def monotone(self, mode: str, view: str, tol: float = 0.0) -> bool:
        """Recall never rises as the perturbation gets harsher (rows are in severity order)."""
        rec = [r.recall for r in self.series(mode, view)]
        return all(b <= a + tol for a, b in zip(rec, rec[1:]))

    def summary(self) -> dict:
        modes = sorted({r.mode for r in self.rows})
        views = sorted({r.view for r in self.rows})
        return {
            "rows": [asdict(r) for r in self.rows],
            "monotone": {f"{m}/{v}": self.monotone(m, v) for m in modes for v in views
                         if self.series(m, v)},
        }

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "robustness.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "level", "view", "recall", "ndcg", "hr", "degradation_pct"])
            for r in self.rows:
                w.writerow([r.mode, r.level, r.view, repr(r.recall), repr(r.ndcg), repr(r.hr),
                            repr(r.degradation_pct)])
        path = out / "robustness.json"
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _degradation(base: float, value: float) -> float:
    return 0.0 if base <= 0 else 100.0 * (base - value) / base


def _rows(mode: str, level: str, reports: dict, baseline: dict | None) -> list[RobustnessRow]:
    rows = []
    for view, rep in reports.items():
        base = baseline[view].recall if baseline else rep.recall
        rows.append(RobustnessRow(mode, level, view, rep.recall, rep.ndcg, rep.hr,
                                  _degradation(base, rep.recall)))
    return rows


def noise_study(cfg: RunConfig, corpus: Corpus, out_dir: str | Path, levels=(0.0, 0.1, 0.2),
                view: str = "both") -> list[RobustnessRow]:
    """Retrain from scratch on noise-injected training sequences; evaluate on clean test users."""
    rows, baseline = [], None
    for p in sorted(levels):
        noisy = perturb(corpus.train, noise=p, rng=Rng(cfg.seed).child("noise", repr(p)))
        model, _ = train(cfg, corpus, Path(out_dir) / f"noise_{p:g}", train_set=noisy)
        reports = evaluate_model(model, corpus.test, corpus.feature_rows, view)
        baseline = baseline or reports
        rows.extend(_rows("noise", f"p={p:g}", reports, baseline))
    return rows


def cold_study(model: BivRecModel, corpus: Corpus, levels=(2, 1), view: str = "both") -> list[RobustnessRow]:
    """Evaluate one trained model on full histories, then on histories cut to their last n items."""
    baseline = evaluate_model(model, corpus.test, corpus.feature_rows, view)
    rows = _rows("cold", "full", baseline, None)
    for n in sorted(levels, reverse=True):
        cold = perturb(corpus.test, cold=n)
        rows.extend(_rows("cold", f"n={n}", evaluate_model(model, cold, corpus.feature_rows, view), baseline))
    return rows


def run_robustness(cfg: RunConfig, corpus: Corpus, out_dir: str | Path, noise_levels=(0.0, 0.1, 0.2),
                   cold_levels=(2, 1), view: str = "both") -> RobustnessReport:
    out = Path(out_dir)
    report = RobustnessReport()
    report.rows.extend(noise_study(cfg, corpus, out, noise_levels, view))
    # the clean (p=0) run doubles as the cold-start model
    clean = min(noise_levels)
    model, _, _ = load_checkpoint(out / f"noise_{clean:g}" / "ckpt" / "final.bivr", config=cfg,
                                  num_items=corpus.dataset.num_items, feature_dim=corpus.feature_dim)
    report.rows.extend(cold_study(model, corpus, cold_levels, view))
    report.write(out)
    return report
