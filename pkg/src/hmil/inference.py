"""Full-slide inference, high-attention re-inference and evaluation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as M
from .sampling import RegionSpec, SamplerConfig, plan_inference_tiling
from .synthwsi import EmptySlideError, SlideGrid
from .tensor import Tensor


class UndefinedAUCError(ValueError):
    pass


@dataclass
class SlideInference:
    slide_id: str
    label: int
    probability: float
    attention_map: np.ndarray  # float [grid_h, grid_w], NaN off the non-empty cells
    coords: np.ndarray  # [N, 2] non-empty cells, embedding row order
    n_embedded: int
    probability_top: Optional[float] = None
    high_mask: Optional[np.ndarray] = None  # bool [N]
    centroids: Optional[tuple] = None
    embeddings: Optional[np.ndarray] = field(default=None, repr=False)
    result: Optional[M.ForwardResult] = field(default=None, repr=False)

    @property
    def n_high(self) -> int:
        return int(self.high_mask.sum()) if self.high_mask is not None else len(self.coords)

    @property
    def n_low(self) -> int:
        return len(self.coords) - self.n_high


# ---------------------------------------------------------------------------
# two-stage forward


def _stage2(params, emb: np.ndarray, coords: np.ndarray, grid_shape, mask, model_cfg: M.ModelConfig, spec: Optional[RegionSpec], plan=None):
    """Aggregate cached embeddings over the slide; returns ``(ForwardResult, cell coords in layout order)``."""
    if model_cfg.aggregator == "baseline":
        res = M.forward_embeddings(params, Tensor(emb), (len(emb),), None, model_cfg, coords=coords)
        return res
    if plan is None:
        plan = plan_inference_tiling(mask, spec)
    lookup = np.full(grid_shape, -1, dtype=np.int64)
    lookup[coords[:, 0], coords[:, 1]] = np.arange(len(coords))
    cc = plan.coords.reshape(-1, 2)
    v = plan.valid.reshape(-1)
    rows = np.where(v, lookup[np.minimum(cc[:, 0], grid_shape[0] - 1), np.minimum(cc[:, 1], grid_shape[1] - 1)], -1)
    tok = np.zeros((len(rows), emb.shape[1]))
    tok[v] = emb[rows[v]]
    layout = plan.valid.shape
    return M.forward_embeddings(params, Tensor(tok), layout, plan.valid, model_cfg, coords=plan.coords)


def composite_patch_attention(res: M.ForwardResult, grid_shape) -> np.ndarray:
    """Per-patch attention map: product of class-token weights along each patch's pooling path.

    For a transformer model the path runs leaf -> ... -> top region -> the
    top-level global module. Baseline maps use the pooling weights directly.
    The map is renormalised to sum to one; cells that are not patches are NaN.
    """
    out = np.full(grid_shape, np.nan)
    if res.baseline is not None:
        score = res.baseline.copy()
        valid = res.valid.reshape(-1)
        cc = res.coords.reshape(-1, 2)
    else:
        layout = res.layout
        score = np.ones(layout)
        for lvl, w in enumerate(res.regional, 1):
            lead = layout[: len(layout) - lvl + 1]
            score = score * w.reshape(lead + (1,) * (lvl - 1))
        top = res.global_[-1]
        score = score * top.reshape((layout[0],) + (1,) * (len(layout) - 1))
        score = score.reshape(-1)
        valid = res.valid.reshape(-1)
        cc = res.coords.reshape(-1, 2)
    s = score[valid]
    total = s.sum()
    if total > 0:
        s = s / total
    out[cc[valid, 0], cc[valid, 1]] = s
    return out


def infer_full(slide: SlideGrid, params: dict, model_cfg: M.ModelConfig, spec: Optional[RegionSpec] = None, plan=None) -> SlideInference:
    """All non-empty patches: embed each once, then aggregate over the tiling plan."""
    mask = slide.nonempty_mask
    if mask is None or not mask.any():
        raise EmptySlideError(f"slide {slide.slide_id!r} has no non-empty patches")
    coords = np.argwhere(mask)
    emb = M.embed_patches(params, slide.patches(coords)).data
    res = _stage2(params, emb, coords, mask.shape, mask, model_cfg, spec, plan)
    amap = composite_patch_attention(res, mask.shape)
    return SlideInference(slide.slide_id, slide.label, res.probability, amap, coords, len(coords), embeddings=emb, result=res)


def kmeans2_split(values: Sequence[float]):
    """Exact two-cluster k-means on a line.

    Returns ``(high, centroids)`` where ``high`` is a boolean mask over the
    input and ``centroids = (low_centroid, high_centroid)``. Among equal-cost
    splits the one with the larger high cluster wins; a single distinct value
    puts everything in the high cluster (low centroid is NaN).
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    n = len(x)
    if n == 0:
        raise ValueError("kmeans2_split needs at least one value")
    if n == 1 or np.all(x == x[0]):
        return np.ones(n, bool), (float("nan"), float(x.mean()))
    order = np.argsort(x, kind="stable")
    xs = x[order] - x.mean()
    cs = np.cumsum(xs)
    cs2 = np.cumsum(xs * xs)
    i = np.arange(1, n)  # low cluster = xs[:i]
    sl, sl2 = cs[:-1], cs2[:-1]
    sh, sh2 = cs[-1] - sl, cs2[-1] - sl2
    sse = (sl2 - sl * sl / i) + (sh2 - sh * sh / (n - i))
    # ties (up to rounding): smallest low cluster, i.e. the largest high cluster
    tol = 1e-12 * cs2[-1]
    best = int(np.flatnonzero(sse <= sse.min() + tol)[0]) + 1
    high = np.zeros(n, bool)
    high[order[best:]] = True
    return high, (float(x[~high].mean()), float(x[high].mean()))


def infer_top(slide: SlideGrid, params: dict, model_cfg: M.ModelConfig, prior: SlideInference, spec: Optional[RegionSpec] = None, plan=None) -> SlideInference:
    """Second pass with the embeddings of the low-attention cluster set to zero."""
    scores = prior.attention_map[prior.coords[:, 0], prior.coords[:, 1]]
    high, cent = kmeans2_split(scores)
    prior.high_mask = high
    prior.centroids = cent
    if high.all():
        prior.probability_top = prior.probability
        return prior
    emb = prior.embeddings.copy()
    emb[~high] = 0.0
    res = _stage2(params, emb, prior.coords, slide.nonempty_mask.shape, slide.nonempty_mask, model_cfg, spec, plan)
    prior.probability_top = res.probability
    return prior


# ---------------------------------------------------------------------------
# metrics


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both classes")
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    # average 1-based rank of each tie group, kept as doubled integers to stay exact
    ends = np.cumsum(counts)
    twice_rank = ends + (ends - counts + 1)
    u2 = twice_rank[inv][y == 1].sum() - n_pos * (n_pos + 1)
    return float(u2) / (2.0 * n_pos * n_neg)


def extremity_stat(probabilities: Sequence[float]) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise ValueError("extremity_stat needs at least one probability")
    return float(np.mean(np.abs(p - 0.5)))


def auc_null_se(labels: Sequence[int], scores_per_seed: Sequence[Sequence[float]], n_perm: int = 2000, seed: int = 0) -> float:
    """Standard deviation of the (seed-averaged) AUC under random label permutation."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    vals = np.empty(n_perm)
    for i in range(n_perm):
        yp = rng.permutation(y)
        vals[i] = np.mean([auc(s, yp) for s in scores_per_seed])
    return float(vals.std(ddof=1))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list
    auc_all: float
    auc_top: Optional[float] = None
    extremity_all: float = 0.0
    extremity_top: Optional[float] = None
    seed: Optional[int] = None
    config_hash: str = ""

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slide_id", "label", "prob_all", "prob_top", "n_high", "n_low"])
            for r in self.rows:
                top = "" if r.probability_top is None else f"{r.probability_top:.17g}"
                w.writerow([r.slide_id, r.label, f"{r.probability:.17g}", top, r.n_high, r.n_low])
        return path

    def summary_lines(self) -> list:
        lines = [f"AUC_all={self.auc_all:.6f}", f"extremity_all={self.extremity_all:.6f}"]
        if self.auc_top is not None:
            lines += [f"AUC_top={self.auc_top:.6f}", f"extremity_top={self.extremity_top:.6f}"]
        return lines


def build_report(rows: list, top: bool, seed=None, config_hash: str = "") -> EvalReport:
    labels = [r.label for r in rows]
    p_all = [r.probability for r in rows]
    rep = EvalReport(rows, auc(p_all, labels), extremity_all=extremity_stat(p_all), seed=seed, config_hash=config_hash)
    if top:
        p_top = [r.probability_top for r in rows]
        rep.auc_top = auc(p_top, labels)
        rep.extremity_top = extremity_stat(p_top)
    return rep


def export_heatmap(score_map: np.ndarray, path) -> tuple:
    """Write ``<path>.pgm`` (binary P5, one pixel per patch) and ``<path>.csv`` (row, col, score)."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".pgm", ".csv") else path
    pgm, csv_path = base.with_suffix(".pgm"), base.with_suffix(".csv")
    m = np.asarray(score_map, dtype=np.float64)
    h, w = m.shape
    defined = ~np.isnan(m)
    img = np.zeros((h, w), dtype=np.uint8)
    if defined.any():
        lo, hi = m[defined].min(), m[defined].max()
        if hi > lo:
            img[defined] = np.round((m[defined] - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            img[defined] = 255
    try:
        with open(pgm, "wb") as fh:
            fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
            fh.write(img.tobytes())
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "col", "score"])
            for r, c in np.argwhere(defined):
                wr.writerow([int(r), int(c), repr(float(m[r, c]))])
    except OSError as exc:
        raise OSError(f"cannot write heatmap {base}: {exc}") from exc
    return pgm, csv_path


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    header, _, rest = buf.partition(b"\n")
    magic, w, h, maxval = header.split()
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 image")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w))
