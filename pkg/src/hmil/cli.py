"""Command-line entry point: ``hmil generate | train | evaluate | coverage``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 training aborted on a non-finite loss/gradient, 5 run directory already
exists, 6 checkpoint does not match the model configuration.

Human-readable messages go to stderr; stdout carries ``key=value`` lines and
the paths of emitted files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointFormatError, load_checkpoint
from .config import Config, ConfigError, load_config
from .synthwsi import EmptySlideError, GenerationConfig, SlideFormatError, generate_dataset, load_manifest

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NAN, EXIT_COLLISION, EXIT_MISMATCH = 0, 2, 3, 4, 5, 6


class RunCollision(RuntimeError):
    pass


class CheckpointMismatch(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HMIL_THREADS", "1")))
    except ValueError:
        raise ConfigError("HMIL_THREADS must be an integer", "HMIL_THREADS") from None


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def run_id(cfg: Config, seed) -> str:
    """Content address of a run: hash of the normalised config text plus the seed(s)."""
    return hashlib.sha256(f"{cfg.dumps()}seed={seed}\n".encode()).hexdigest()[:16]


def write_run_manifest(run_dir: Path, info: dict) -> Path:
    """Record hashes of every file under ``run_dir``; the manifest itself is excluded."""
    path = run_dir / "run_manifest.json"
    artifacts = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p != path:
            artifacts[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    info = dict(info, artifacts=artifacts)
    path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return path


def verify_run_manifest(run_dir) -> list:
    """Names of artifacts whose hash no longer matches (missing files included)."""
    run_dir = Path(run_dir)
    info = json.loads((run_dir / "run_manifest.json").read_text())
    bad = []
    for rel, digest in info["artifacts"].items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def _out(line: str) -> None:
    print(line, flush=True)


def _err(line: str) -> None:
    print(line, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gen = GenerationConfig.from_config(cfg)
    seed = args.seed if args.seed is not None else cfg.int("seed", 0)
    out = Path(args.out)
    manifest = generate_dataset(gen, seed, out, workers=_threads())
    _out(f"slides={len(manifest.entries)}")
    _out(f"manifest={out / 'manifest.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_params_checked(path, model_cfg):
    from .model import StructureError, check_params, params_from_arrays

    arrays = load_checkpoint(path)
    try:
        check_params(model_cfg, arrays)
    except StructureError as exc:
        raise CheckpointMismatch(str(exc)) from None
    return params_from_arrays(arrays)


def _train_one(cfg_text: str, data: str, run_dir: str, seed: int, quiet: bool) -> dict:
    from .config import parse_config
    from .inference import build_report
    from .model import params_from_arrays
    from .plotting import plot_probabilities, plot_training_curves
    from .train import RunConfig, SlideStore, infer_entries, train

    cfg = parse_config(cfg_text)
    run = RunConfig.from_config(cfg)
    manifest = load_manifest(data)
    store = SlideStore(manifest)
    run_dir = Path(run_dir)
    started = _now()
    log = None if quiet else _err
    best, hist = train(manifest, run, seed, store, out_dir=run_dir, log=log)
    rows = infer_entries(params_from_arrays(best), run, store, manifest.split("test"), top=True)
    rep = build_report(rows, top=True, seed=seed, config_hash=cfg.digest())
    rep.write_csv(run_dir / "report.csv")
    plot_training_curves([hist], run_dir / "training_curves.png")
    plot_probabilities(rows, run_dir / "probabilities.png")
    write_run_manifest(
        run_dir,
        {
            "run_id": run_dir.name,
            "started": started,
            "finished": _now(),
            "seed": seed,
            "config_hash": cfg.digest(),
            "dataset_manifest_hash": sha256_file(Path(data) / "manifest.csv"),
            "checkpoint_hash": sha256_file(hist.checkpoint),
            "version": __version__,
        },
    )
    return {
        "seed": seed,
        "run_dir": str(run_dir),
        "best_epoch": hist.best_epoch,
        "val_auc": hist.best_val_auc,
        "auc_all": rep.auc_all,
        "auc_top": rep.auc_top,
    }


def _parse_seeds(args, cfg: Config) -> list:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}", "seeds") from None
    if args.seed is not None:
        return [args.seed]
    return [cfg.int("seed", 0)]


def write_summary(path, results: list) -> Path:
    """Per-seed rows followed by ``mean`` and ``sd`` rows (sample sd; 0 for one seed)."""
    cols = ["val_auc", "auc_all", "auc_top"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "best_epoch"] + cols)
        for r in results:
            w.writerow([r["seed"], r["best_epoch"]] + [f"{r[c]:.17g}" for c in cols])
        vals = np.array([[r[c] for c in cols] for r in results], dtype=np.float64)
        sd = vals.std(axis=0, ddof=1) if len(results) > 1 else np.zeros(len(cols))
        w.writerow(["mean", ""] + [f"{v:.17g}" for v in vals.mean(axis=0)])
        w.writerow(["sd", ""] + [f"{v:.17g}" for v in sd])
    return Path(path)


def cmd_train(args) -> int:
    from .train import RunConfig

    cfg = load_config(args.config)
    RunConfig.from_config(cfg)  # fail fast on config errors
    seeds = _parse_seeds(args, cfg)
    if not (Path(args.data) / "manifest.csv").is_file():
        raise FileNotFoundError(f"no manifest.csv in {args.data}")
    out = Path(args.out)
    if len(seeds) == 1:
        root = out / f"run-{run_id(cfg, seeds[0])}"
        run_dirs = [root]
    else:
        root = out / f"sweep-{run_id(cfg, ','.join(map(str, seeds)))}"
        run_dirs = [root / f"seed-{s}" for s in seeds]
    if root.exists():
        raise RunCollision(f"run directory {root} already exists")
    root.mkdir(parents=True)
    text = cfg.dumps()
    (root / "run.cfg").write_text(text)
    jobs = [(text, str(args.data), str(d), s, args.quiet) for d, s in zip(run_dirs, seeds)]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(*j) for j in jobs]
    for r in results:
        _out(f"run_dir={r['run_dir']}")
        _out(f"seed={r['seed']} val_auc={r['val_auc']:.6f} AUC_all={r['auc_all']:.6f} AUC_top={r['auc_top']:.6f}")
    if len(seeds) > 1:
        _out(f"summary={write_summary(root / 'summary.csv', results)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _find_run_config(args) -> Config:
    if args.config:
        return load_config(args.config)
    ckpt = Path(args.checkpoint)
    for d in (ckpt.parent, ckpt.parent.parent):
        if (d / "run.cfg").is_file():
            return load_config(d / "run.cfg")
    raise ConfigError("no --config given and no run.cfg next to the checkpoint", "config")


def cmd_evaluate(args) -> int:
    from .inference import build_report, export_heatmap, infer_full, infer_top
    from .plotting import plot_heatmap, plot_probabilities
    from .train import RunConfig, SlideStore

    cfg = _find_run_config(args)
    run = RunConfig.from_config(cfg)
    params = _load_params_checked(args.checkpoint, run.model)
    manifest = load_manifest(args.data)
    entries = manifest.split(args.split)
    if not entries:
        raise ConfigError(f"split {args.split!r} is empty", "split")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    store = SlideStore(manifest)
    spec = None if run.model.aggregator == "baseline" else run.sampler.spec
    rows = []
    for e in entries:
        slide = store.get(e)
        plan = None if spec is None else store.plan(e, spec)
        r = infer_full(slide, params, run.model, spec, plan)
        if args.top:
            infer_top(slide, params, run.model, r, spec, plan)
        if args.heatmaps:
            hdir = out / "heatmaps"
            hdir.mkdir(exist_ok=True)
            export_heatmap(r.attention_map, hdir / e.slide_id)
            plot_heatmap(r.attention_map, hdir / f"{e.slide_id}.png", f"{e.slide_id} label {e.label} p={r.probability:.3f}")
        r.embeddings = None
        r.result = None
        rows.append(r)
    rep = build_report(rows, top=args.top, config_hash=cfg.digest())
    _out(f"report={rep.write_csv(out / 'report.csv')}")
    if args.top:
        _out(f"figure={plot_probabilities(rows, out / 'probabilities.png')}")
    for line in rep.summary_lines():
        _out(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# coverage


def parse_strategy(token: str):
    """``global``, ``regional:S=3`` or ``hierarchical:S=3:L=3`` to a :class:`SamplerConfig`."""
    from .sampling import SamplerConfig

    name, *opts = token.strip().split(":")
    kw = {}
    for o in opts:
        k, _, v = o.partition("=")
        if k not in ("S", "L", "patches_per_leaf", "children_per_level") or not v.isdigit():
            raise ConfigError(f"bad strategy option {o!r} in {token!r}", "strategies")
        kw[k] = int(v)
    if name == "regional":
        kw.setdefault("L", 1)
    try:
        return SamplerConfig(strategy=name, **kw)
    except ValueError as exc:
        raise ConfigError(f"strategy {token!r}: {exc}", "strategies") from None


def coverage_rows(cfg: Config, trials: int, seed: int) -> list:
    from .rng import seeded_rng
    from .sampling import estimate_roi_coverage

    gh, gw = cfg.int("grid_h", 64), cfg.int("grid_w", 64)
    budget = cfg.int("budget", 256)
    placement = cfg.str("placement", "random")
    tokens = [t for t in cfg.str("strategies", "global,hierarchical:S=3:L=3").split(",") if t.strip()]
    try:
        sizes = [int(s) for s in cfg.str("roi_sizes", "1").split(",") if s.strip()]
    except ValueError:
        raise ConfigError("roi_sizes must be a comma-separated list of integers", "roi_sizes") from None
    mask = np.ones((gh, gw), dtype=bool)
    rows = []
    for tok in tokens:
        sampler = parse_strategy(tok)
        sampler.budget = budget
        sampler.__post_init__()
        for side in sizes:
            if not 1 <= side <= min(gh, gw):
                raise ConfigError(f"ROI side {side} does not fit the {gh}x{gw} grid", "roi_sizes")
            roi = np.zeros_like(mask)
            r0, c0 = (gh - side) // 2, (gw - side) // 2
            roi[r0 : r0 + side, c0 : c0 + side] = True
            rng = seeded_rng(seed, f"coverage:{tok.strip()}:{side}")
            p, se = estimate_roi_coverage(sampler, mask, roi, trials, rng, placement)
            rows.append((tok.strip(), side * side, p, se))
    return rows


def cmd_coverage(args) -> int:
    from .plotting import plot_coverage

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.int("seed", 0)
    if args.trials < 2:
        raise ConfigError("--trials must be >= 2", "trials")
    rows = coverage_rows(cfg, args.trials, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "coverage.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "roi_size", "probability", "stderr"])
        for s, k, p, se in rows:
            w.writerow([s, k, f"{p:.17g}", f"{se:.17g}"])
    _out(f"coverage={path}")
    _out(f"figure={plot_coverage(rows, out / 'coverage.png')}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hmil", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic slide dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model per seed")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory (with manifest.csv)")
    t.add_argument("--out", required=True)
    grp = t.add_mutually_exclusive_group()
    grp.add_argument("--seed", type=int)
    grp.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3")
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="full-slide inference and metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="run config (default: run.cfg beside the checkpoint)")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--top", action="store_true", help="also run the high-attention pass")
    e.add_argument("--heatmaps", action="store_true", help="write per-slide attention maps")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("coverage", help="ROI hit probability per sampling strategy")
    c.add_argument("--config", required=True)
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_coverage)
    return ap


def main(argv=None) -> int:
    from .train import TrainingAborted

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except TrainingAborted as exc:
        _err(f"training aborted: {exc}")
        return EXIT_NAN
    except RunCollision as exc:
        _err(f"{exc}; remove it or change the config/seed")
        return EXIT_COLLISION
    except CheckpointMismatch as exc:
        _err(f"checkpoint mismatch: {exc}")
        return EXIT_MISMATCH
    except (OSError, SlideFormatError, CheckpointFormatError, EmptySlideError) as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
