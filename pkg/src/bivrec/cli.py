"""``bivrec`` command line: synth, train, eval, perturb, export, gradcheck, sweep."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, config_path, load_checkpoint
from .config import ConfigError, RunConfig
from .dataio import DataError, perturb, synth_generate, write_corpus
from .diagnostics import check_full_model, check_primitives
from .evaluator import user_interests
from .pipeline import evaluate_model, load_corpus, train
from .rng import Rng
from .robustness import run_robustness

log = logging.getLogger("bivrec")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 1, 2, 3
VIEW_TO_MODE = {"id": "pure_id", "mm": "pure_mm", "both": "both"}


def load_config(args, **overrides) -> RunConfig:
    cfg = _read_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg.validate()


def _read_config(path) -> RunConfig:
    try:
        return RunConfig.load(path)
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror or err}") from None


def _require(path, what: str) -> Path:
    if path is None:
        raise DataError(f"{what} is required")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: {what} not found")
    return path


def _print_reports(reports) -> None:
    for view, rep in reports.items():
        print(f"{view}: recall@{rep.k}={rep.recall:.4f} ndcg@{rep.k}={rep.ndcg:.4f} hr@{rep.k}={rep.hr:.4f}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    corpus = synth_generate(args.users, args.items, args.groups, args.seq_len, args.feature_dim,
                            Rng(seed).child("synth"), purity=args.purity, taste_size=args.taste)
    write_corpus(corpus, args.out)
    print(f"wrote {args.users} users x {args.seq_len} events over {args.items} items to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.view:
        overrides["view_mode"] = VIEW_TO_MODE[args.view]
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    cfg = load_config(args, **overrides)
    corpus = load_corpus(cfg, _require(args.data, "data directory"))
    train_set = corpus.train
    if args.noise is not None:
        train_set = perturb(corpus.train, noise=args.noise, rng=Rng(cfg.seed).child("noise", repr(args.noise)))
    init = _require(args.init_from, "checkpoint") if args.init_from else None
    model, ckpt = train(cfg, corpus, args.out, init_from=init, train_set=train_set)
    reports = evaluate_model(model, corpus.test, corpus.feature_rows, "both", args.k)
    _write_reports(reports, Path(args.out) / "eval")
    print(f"checkpoint: {ckpt}")
    _print_reports(reports)
    return 0


def _write_reports(reports, out: Path) -> None:
    """``<out>/report.json`` with every view, plus ``<out>/<view>/`` per-user files."""
    for view, rep in reports.items():
        rep.write(out / view, per_user=True)
    body = {view: rep.summary() for view, rep in reports.items()}
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_trained(args, cfg: RunConfig | None = None):
    ckpt = _require(args.init_from, "checkpoint (--init-from)")
    if cfg is None:
        cfg = _read_config(args.config or config_path(ckpt))
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    corpus = load_corpus(cfg, _require(args.data, "data directory"))
    model, _, report = load_checkpoint(ckpt, config=cfg, num_items=corpus.dataset.num_items,
                                       feature_dim=corpus.feature_dim, rng=Rng(cfg.seed))
    for name in report.reinitialized:
        print(f"transfer: {name} re-initialized for a catalog of {corpus.dataset.num_items} items")
    return cfg, corpus, model


def cmd_eval(args) -> int:
    cfg, corpus, model = _load_trained(args)
    test = corpus.test
    if args.cold is not None:
        test = perturb(test, cold=args.cold)
    view = args.view or "both"
    reports = evaluate_model(model, test, corpus.feature_rows, view, args.k)
    _write_reports(reports, Path(args.out))
    _print_reports(reports)
    return 0


def cmd_perturb(args) -> int:
    cfg = load_config(args, **({"max_iters": args.max_iters} if args.max_iters is not None else {}))
    corpus = load_corpus(cfg, _require(args.data, "data directory"))
    noise = tuple(args.noise) if args.noise else (0.0, 0.1, 0.2)
    cold = tuple(args.cold) if args.cold else (2, 1)
    report = run_robustness(cfg, corpus, args.out, noise, cold, args.view or "both")
    for r in report.rows:
        print(f"{r.mode:5s} {r.level:7s} {r.view:3s} recall={r.recall:.4f} degradation={r.degradation_pct:+.1f}%")
    for key, flag in report.summary()["monotone"].items():
        print(f"monotone {key}: {flag}")
    return 0


def cmd_export(args) -> int:
    cfg, corpus, model = _load_trained(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = corpus.dataset
    views = model.views if (args.view or "both") == "both" else (args.view,)
    for view in views:
        interests, _, inst = user_interests(model, ds, corpus.feature_rows, view)
        with open(out / f"interests_{view}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "interest"] + [f"v{j + 1}" for j in range(interests.shape[-1])])
            for u, mat in zip(ds.users, interests):
                for k, row in enumerate(mat):
                    w.writerow([u.user, k] + [repr(float(x)) for x in row])
        prefix = np.stack([x.history for x in inst])
        mask = np.stack([x.mask for x in inst])
        hard = model.tower(view, prefix, mask, corpus.feature_rows, None).intravid.assignment.hard.data
        with open(out / f"assignments_{view}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "interest"] + [f"t{j}" for j in range(hard.shape[-1])])
            for u, mat in zip(ds.users, hard):
                for k, row in enumerate(mat):
                    w.writerow([u.user, k] + [f"{x:g}" for x in row])
    print(f"exported {len(ds.users)} users for views {', '.join(views)} to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ok = True
    for name, rep in check_primitives(range(seed, seed + args.seeds)).items():
        print(f"primitive {name:12s} {rep.summary()}")
        ok &= rep.passed
    rep = check_full_model(seed, tol=args.tol)
    print(f"full model   {rep.summary()}")
    for fail in rep.failures[:10]:
        print(f"  {fail.name}{list(fail.index)}: analytic {fail.analytic:.6e} numeric {fail.numeric:.6e}")
    ok &= rep.passed
    return 0 if ok else EXIT_RUNTIME


def _parse_grid(specs) -> dict[str, list[str]]:
    grid = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ConfigError(spec, "grid entries look like key=v1,v2")
        key, values = spec.split("=", 1)
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    if not grid:
        raise ConfigError("grid", "at least one --grid key=v1,v2 is required")
    return grid


def cmd_sweep(args) -> int:
    base = load_config(args, **({"max_iters": args.max_iters} if args.max_iters is not None else {}))
    grid = _parse_grid(args.grid)
    corpus = load_corpus(base, _require(args.data, "data directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    rows, header = [], None
    for cell, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        text = "\n".join(f"{k} = {v}" for k, v in zip(keys, values))
        cfg = RunConfig.loads(text, base=base)
        model, _ = train(cfg, corpus, out / f"cell_{cell:03d}")
        reports = evaluate_model(model, corpus.test, corpus.feature_rows, "both", args.k)
        metrics = {f"{m}_{view}": getattr(rep, m) for view, rep in reports.items()
                   for m in ("recall", "ndcg", "hr")}
        header = header or keys + list(metrics)
        rows.append(list(values) + [repr(metrics.get(h, float("nan"))) for h in header[len(keys):]])
        print(f"cell {cell}: " + ", ".join(f"{k}={v}" for k, v in zip(keys, values)))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bivrec", description="Two-view multi-interest sequential recommender.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="directory with interactions.csv and feature files")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic corpus"), data=False)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=20)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--purity", type=float, default=0.9)
    p.add_argument("--taste", type=int, default=5, help="items per user and group")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train a model and evaluate it on the test split"))
    p.add_argument("--view", choices=("id", "mm", "both"), help="id/mm train a single tower")
    p.add_argument("--init-from", help="checkpoint to resume or transfer from")
    p.add_argument("--noise", type=float, help="replace this fraction of training events")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--init-from", required=True, help="checkpoint to evaluate")
    p.add_argument("--view", choices=("id", "mm", "both"))
    p.add_argument("--cold", type=int, choices=(1, 2), help="keep only the last N history items")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("perturb", help="noise and cold-start robustness runs"))
    p.add_argument("--noise", type=float, nargs="+", help="noise ratios (default 0 0.1 0.2)")
    p.add_argument("--cold", type=int, nargs="+", choices=(1, 2), help="history lengths (default 2 1)")
    p.add_argument("--view", choices=("id", "mm", "both"))
    p.add_argument("--max-iters", type=int)
    p.set_defaults(func=cmd_perturb)

    p = common(sub.add_parser("export", help="write per-user interests and assignment matrices"))
    p.add_argument("--init-from", required=True)
    p.add_argument("--view", choices=("id", "mm", "both"))
    p.set_defaults(func=cmd_export)

    p = common(sub.add_parser("gradcheck", help="finite-difference suite"), data=False, out=False)
    p.add_argument("--tol", type=float, default=1e-4, help="full-model tolerance")
    p.add_argument("--seeds", type=int, default=20, help="seeds per primitive")
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("sweep", help="train and evaluate every cell of a grid"))
    p.add_argument("--grid", action="append", help="key=v1,v2 (repeatable)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
