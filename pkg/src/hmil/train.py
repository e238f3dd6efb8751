"""Training loop: fresh bags every epoch, AdamW, best-validation checkpointing."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import save_checkpoint
from .config import Config, ConfigError
from .inference import auc, infer_full
from .optim import AdamW, PoisonedGradientError
from .rng import seeded_rng
from .sampling import SamplerConfig, plan_inference_tiling
from .synthwsi import DEFAULT_THRESHOLD, DatasetManifest, SlideGrid, augment_batch, read_slide


class TrainingAborted(FloatingPointError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 2
    weight_decay: float = 0.01
    augment: bool = True
    seeds: tuple = (0, 1, 2, 3, 4)

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainConfig":
        seeds = cfg.get("seeds")
        out = cls(
            epochs=cfg.int("epochs", 50),
            lr=cfg.float("lr", 1e-4),
            batch_size=cfg.int("batch_size", 2),
            weight_decay=cfg.float("weight_decay", 0.01),
            augment=cfg.bool("augment", True),
            seeds=tuple(int(s) for s in seeds.split(",")) if seeds else (0, 1, 2, 3, 4),
        )
        if out.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if out.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if out.lr <= 0:
            raise ConfigError("lr must be positive", "lr")
        return out


@dataclass
class RunConfig:
    """Everything a training run needs besides the dataset and the seed."""

    sampler: SamplerConfig
    model: M.ModelConfig
    train: TrainConfig

    @classmethod
    def from_config(cls, cfg: Config) -> "RunConfig":
        try:
            sampler = SamplerConfig(
                strategy=cfg.str("strategy", "regional"),
                S=cfg.int("S", 3),
                L=cfg.int("L", 1),
                patches_per_leaf=cfg.int("patches_per_leaf", 4),
                children_per_level=cfg.int("children_per_level", 4),
                budget=cfg.int("budget", 256),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), "strategy") from None
        model_cfg = M.ModelConfig.from_config(cfg)
        if (sampler.strategy == "global") != (model_cfg.aggregator == "baseline"):
            raise ConfigError("global sampling pairs with the baseline aggregator and regional/hierarchical with the transformer", "aggregator")
        if model_cfg.aggregator == "transformer" and model_cfg.levels != sampler.L:
            raise ConfigError("model levels must equal sampler L", "L")
        return cls(sampler, model_cfg, TrainConfig.from_config(cfg))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_auc: float
    wall_time: float
    val_loss: float = float("nan")


@dataclass
class RunHistory:
    seed: int
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("-inf")
    best_val_loss: float = float("inf")
    checkpoint: Optional[Path] = None

    def write_metrics(self, path) -> Path:
        """``epoch,loss,val_auc`` rows; wall time is left out so reruns compare byte-equal."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "val_auc"])
            for r in self.epochs:
                w.writerow([r.epoch, f"{r.loss:.17g}", f"{r.val_auc:.17g}"])
        return path


class SlideStore:
    """Loads slides lazily and keeps them (and their tiling plans) in memory."""

    def __init__(self, manifest: DatasetManifest, threshold: float = DEFAULT_THRESHOLD):
        self.manifest = manifest
        self.threshold = threshold
        self._slides: dict = {}
        self._plans: dict = {}

    def get(self, entry) -> SlideGrid:
        s = self._slides.get(entry.slide_id)
        if s is None:
            s = read_slide(self.manifest.slide_path(entry), entry.slide_id, self.threshold)
            s.label = entry.label
            self._slides[entry.slide_id] = s
        return s

    def plan(self, entry, spec):
        key = (entry.slide_id, spec)
        p = self._plans.get(key)
        if p is None:
            p = self._plans[key] = plan_inference_tiling(self.get(entry).nonempty_mask, spec)
        return p


def infer_entries(params, run: RunConfig, store: SlideStore, entries, top: bool = False) -> list:
    """Full-slide inference (optionally followed by the high-attention pass) over manifest entries."""
    from .inference import infer_top

    spec = None if run.model.aggregator == "baseline" else run.sampler.spec
    rows = []
    for e in entries:
        slide = store.get(e)
        plan = None if spec is None else store.plan(e, spec)
        r = infer_full(slide, params, run.model, spec, plan)
        if top:
            infer_top(slide, params, run.model, r, spec, plan)
        r.embeddings = None
        r.result = None
        rows.append(r)
    return rows


def validate(params, run: RunConfig, store: SlideStore, entries, with_loss: bool = False):
    """AUC of full-slide probabilities over ``entries`` (and their mean BCE with ``with_loss``)."""
    rows = infer_entries(params, run, store, entries)
    value = auc([r.probability for r in rows], [r.label for r in rows])
    if not with_loss:
        return value
    p = np.clip([r.probability for r in rows], 1e-12, 1 - 1e-12)
    y = np.array([r.label for r in rows])
    return value, float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def _bag_logit(params, run: RunConfig, slide: SlideGrid, bag, aug_rng) -> T.Tensor:
    patches = slide.patches(bag.flat_coords)
    if aug_rng is not None:
        patches = augment_batch(patches, aug_rng)
    res = M.forward(params, patches, bag.layout, run.model)
    return T.reshape(res.logit, ())


def train(
    manifest: DatasetManifest,
    run: RunConfig,
    seed: int,
    store: Optional[SlideStore] = None,
    out_dir=None,
    log: Optional[Callable[[str], None]] = None,
):
    """Train one model; returns ``(best parameter arrays, RunHistory)``.

    Every epoch each training slide gets a fresh bag drawn from the
    ``sampling`` stream and, if enabled, fresh augmentation draws from the
    ``augmentation`` stream; initial weights come from the ``init`` stream.
    With ``out_dir`` the best checkpoint and ``metrics.csv`` are written there.
    """
    store = store or SlideStore(manifest)
    train_entries = manifest.split("train")
    val_entries = manifest.split("val")
    if not train_entries or not val_entries:
        raise ValueError("manifest needs non-empty train and val splits")
    tc = run.train
    params = M.init_params(run.model, seeded_rng(seed, "init"))
    opt = AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    order_rng = seeded_rng(seed, "order")
    sample_rng = seeded_rng(seed, "sampling")
    aug_rng = seeded_rng(seed, "augmentation") if tc.augment else None
    history = RunHistory(seed)
    best = {k: p.data.copy() for k, p in params.items()}
    step = 0
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(train_entries))
        losses = []
        for b in range(0, len(order), tc.batch_size):
            batch = [train_entries[i] for i in order[b : b + tc.batch_size]]
            step += 1
            opt.zero_grad()
            with T.Tape() as tape:
                terms = []
                for e in batch:
                    slide = store.get(e)
                    bag = run.sampler.sample(slide.nonempty_mask, sample_rng)
                    terms.append(T.bce_with_logits(_bag_logit(params, run, slide, bag, aug_rng), e.label))
                loss = terms[0]
                for t in terms[1:]:
                    loss = T.add(loss, t)
                loss = T.scale(loss, 1.0 / len(terms))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingAborted("loss is not finite", epoch, step)
            tape.backward(loss)
            try:
                opt.step()
            except PoisonedGradientError as exc:
                raise TrainingAborted(f"non-finite gradient in {exc.name}", epoch, step) from exc
            losses.append(value)
        val_auc, val_loss = validate(params, run, store, val_entries, with_loss=True)
        history.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_auc, time.perf_counter() - t0, val_loss))
        # equal validation AUC (common once it saturates) falls back to validation loss
        if val_auc > history.best_val_auc or (val_auc == history.best_val_auc and val_loss < history.best_val_loss):
            history.best_val_auc = val_auc
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = {k: p.data.copy() for k, p in params.items()}
        if log:
            log(f"seed {seed} epoch {epoch}/{tc.epochs} loss {history.epochs[-1].loss:.4f} val_auc {val_auc:.4f}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        history.checkpoint = save_checkpoint(out / "checkpoint.hmil", best)
        history.write_metrics(out / "metrics.csv")
    return best, history
