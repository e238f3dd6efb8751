"""Patch sampling strategies and inference tiling.

Bags are stored in a dense *layout*: an array of patch coordinates shaped
``(n_top, k_L, ..., k_2, k_1, 2)`` where ``k_1`` is the number of patches per
leaf region and ``k_l`` the number of children kept at level ``l``. Global
bags use the flat layout ``(n, 2)``. Inference tiles use the same layout
with ``k_l = S*S`` and a validity mask for empty or out-of-bounds cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

STRATEGIES = ("global", "regional", "hierarchical")


class SamplingError(ValueError):
    pass


def total_side_length(S: int, L: int) -> int:
    """Side, in patches, of one top-level region: ``S ** L``."""
    if S < 2 or L < 1:
        raise ValueError(f"need S >= 2 and L >= 1, got S={S}, L={L}")
    return S**L


@dataclass(frozen=True)
class RegionSpec:
    S: int
    L: int = 1
    patches_per_leaf: int = 4
    children_per_level: int = 4

    def __post_init__(self):
        if self.S < 2 or self.L < 1:
            raise ValueError(f"need S >= 2 and L >= 1, got S={self.S}, L={self.L}")
        if not 1 <= self.patches_per_leaf <= self.S**2:
            raise ValueError(f"patches_per_leaf must lie in [1, {self.S ** 2}]")
        if not 1 <= self.children_per_level <= self.S**2:
            raise ValueError(f"children_per_level must lie in [1, {self.S ** 2}]")

    @property
    def total_side_length(self) -> int:
        return total_side_length(self.S, self.L)

    @property
    def patches_per_top(self) -> int:
        return self.patches_per_leaf * self.children_per_level ** (self.L - 1)

    def train_layout(self, n_top: int) -> tuple:
        return (n_top,) + (self.children_per_level,) * (self.L - 1) + (self.patches_per_leaf,)

    def tile_layout(self) -> tuple:
        return (self.S**2,) * self.L


@dataclass
class SampledBag:
    coords: np.ndarray  # int [*layout, 2]
    slide_id: str = ""
    seed: Optional[int] = None
    with_replacement: bool = False

    @property
    def layout(self) -> tuple:
        return self.coords.shape[:-1]

    @property
    def flat_coords(self) -> np.ndarray:
        return self.coords.reshape(-1, 2)

    def __len__(self) -> int:
        return int(np.prod(self.layout))

    @property
    def group_paths(self) -> np.ndarray:
        """``[n, L]`` group ids per patch: leaf id, level-2 id, ..., top id."""
        return group_paths(self.layout)


def group_paths(layout: tuple) -> np.ndarray:
    n = int(np.prod(layout))
    idx = np.arange(n)
    if len(layout) == 1:
        return idx[:, None]
    out = []
    span = 1
    for k in layout[:0:-1]:  # k_1, k_2, ..., k_L
        span *= k
        out.append(idx // span)
    return np.stack(out, axis=1)


@dataclass
class SamplerConfig:
    strategy: str = "regional"
    S: int = 3
    L: int = 1
    patches_per_leaf: int = 4
    children_per_level: int = 4
    budget: int = 256

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "regional" and self.L != 1:
            raise ValueError("regional sampling is single-level (L=1)")
        if self.strategy == "hierarchical" and self.L < 2:
            raise ValueError("hierarchical sampling needs L >= 2")
        if self.strategy != "global" and self.budget % self.spec.patches_per_top:
            raise ValueError(f"budget {self.budget} is not a multiple of {self.spec.patches_per_top} patches per region")

    @property
    def spec(self) -> RegionSpec:
        return RegionSpec(self.S, self.L, self.patches_per_leaf, self.children_per_level)

    @property
    def n_regions(self) -> int:
        return self.budget if self.strategy == "global" else self.budget // self.spec.patches_per_top

    def sample(self, mask: np.ndarray, rng: np.random.Generator) -> SampledBag:
        if self.strategy == "global":
            return sample_global(mask, self.budget, rng)
        if self.strategy == "regional":
            return sample_regional(mask, self.spec, self.n_regions, rng)
        return sample_hierarchical(mask, self.spec, self.n_regions, rng)


def _choose(rng, n_avail: int, k: int):
    """Indices of ``k`` draws from ``range(n_avail)``; with replacement only if unavoidable."""
    if n_avail >= k:
        return rng.choice(n_avail, size=k, replace=False), False
    return rng.choice(n_avail, size=k, replace=True), True


def sample_global(mask: np.ndarray, n: int, rng: np.random.Generator) -> SampledBag:
    """Uniform draw of ``n`` non-empty patches across the whole slide."""
    cells = np.argwhere(mask)
    if len(cells) == 0:
        raise SamplingError("no non-empty patches to sample")
    idx, repl = _choose(rng, len(cells), n)
    return SampledBag(cells[idx], with_replacement=repl)


def _window_counts(mask: np.ndarray, side: int) -> np.ndarray:
    """Non-empty count for every ``side x side`` window anchored at (r, c); windows may overhang."""
    h, w = mask.shape
    pad = np.zeros((h + side, w + side), dtype=np.int64)
    pad[:h, :w] = mask
    cs = np.zeros((h + side + 1, w + side + 1), dtype=np.int64)
    cs[1:, 1:] = pad.cumsum(0).cumsum(1)
    return cs[side : side + h, side : side + w] - cs[:h, side : side + w] - cs[side : side + h, :w] + cs[:h, :w]


def _validity_maps(mask: np.ndarray, spec: RegionSpec) -> list:
    """``valid[l][r, c]``: a level-(l+1) window anchored at (r, c) admits sampling without replacement."""
    S = spec.S
    h, w = mask.shape
    valid = [_window_counts(mask, S) >= spec.patches_per_leaf]
    for lvl in range(2, spec.L + 1):
        child = valid[-1]
        step = S ** (lvl - 1)
        cnt = np.zeros((h, w), dtype=np.int64)
        big = np.zeros((h + S * step, w + S * step), dtype=np.int64)
        big[:h, :w] = child
        for i in range(S):
            for j in range(S):
                cnt += big[i * step : i * step + h, j * step : j * step + w]
        valid.append(cnt >= spec.children_per_level)
    return valid


def _anchors_in_bounds(mask: np.ndarray, side: int) -> np.ndarray:
    h, w = mask.shape
    ok = np.zeros_like(mask, dtype=bool)
    ok[: max(h - side + 1, 0), : max(w - side + 1, 0)] = True
    if not ok.any():  # slide smaller than one window: allow the origin only
        ok[0, 0] = True
    return ok


def _sample_tree(mask, spec: RegionSpec, n_top: int, rng) -> SampledBag:
    h, w = mask.shape
    S = spec.S
    valid = _validity_maps(mask, spec)
    counts_any = _window_counts(mask, spec.total_side_length) > 0
    inb = _anchors_in_bounds(mask, spec.total_side_length)
    top = np.argwhere(valid[-1] & inb)
    if len(top) == 0:
        top = np.argwhere(counts_any & inb)
    if len(top) == 0:
        top = np.argwhere(counts_any)
    if len(top) == 0:
        raise SamplingError("no non-empty patches to sample")
    idx, repl = _choose(rng, len(top), n_top)
    flagged = [repl]

    def descend(r0, c0, lvl):
        if lvl == 1:
            cells = [(r0 + i, c0 + j) for i in range(S) for j in range(S) if r0 + i < h and c0 + j < w and mask[r0 + i, c0 + j]]
            k, rep = _choose(rng, len(cells), spec.patches_per_leaf)
            flagged.append(rep)
            return [cells[i] for i in k]
        step = S ** (lvl - 1)
        subs = [(r0 + i * step, c0 + j * step) for i in range(S) for j in range(S)]
        subs = [(r, c) for r, c in subs if r < h and c < w]
        good = [(r, c) for r, c in subs if valid[lvl - 2][r, c]]
        if not good:
            good = [(r, c) for r, c in subs if _window_counts_cached(r, c, step)]
        k, rep = _choose(rng, len(good), spec.children_per_level)
        flagged.append(rep)
        return [descend(*good[i], lvl - 1) for i in k]

    any_maps = {}

    def _window_counts_cached(r, c, side):
        if side not in any_maps:
            any_maps[side] = _window_counts(mask, side) > 0
        return any_maps[side][r, c]

    coords = np.array([descend(int(r), int(c), spec.L) for r, c in top[idx]], dtype=np.int64)
    return SampledBag(coords.reshape(spec.train_layout(n_top) + (2,)), with_replacement=any(flagged))


def sample_regional(mask: np.ndarray, spec: RegionSpec, n_regions: int, rng: np.random.Generator) -> SampledBag:
    """``n_regions`` free-floating S x S windows, ``patches_per_leaf`` patches from each."""
    if spec.L != 1:
        raise ValueError("sample_regional expects a single-level RegionSpec")
    return _sample_tree(mask, spec, n_regions, rng)


def sample_hierarchical(mask: np.ndarray, spec: RegionSpec, n_top: int, rng: np.random.Generator) -> SampledBag:
    """Recursive descent from ``n_top`` windows of side ``S**L`` down to leaf patches."""
    if spec.L < 2:
        raise ValueError("sample_hierarchical expects L >= 2")
    return _sample_tree(mask, spec, n_top, rng)


# ---------------------------------------------------------------------------
# inference tiling


@dataclass
class TilingPlan:
    anchors: np.ndarray  # int [T, 2]
    coords: np.ndarray  # int [T, S^2, ..., S^2, 2]
    valid: np.ndarray  # bool [T, S^2, ..., S^2]

    def __len__(self) -> int:
        return len(self.anchors)

    def members(self, t: int) -> np.ndarray:
        return self.coords[t][self.valid[t]]

    def reorder(self, order) -> "TilingPlan":
        order = np.asarray(order)
        return TilingPlan(self.anchors[order], self.coords[order], self.valid[order])


def _tile_offsets(spec: RegionSpec) -> np.ndarray:
    """Offsets ``[S^2]*L + [2]`` of each cell inside a tile, in hierarchical order."""
    S, L = spec.S, spec.L
    digits = np.array([(a, b) for a in range(S) for b in range(S)])  # position within an S x S window
    off = np.zeros((S * S,) * L + (2,), dtype=np.int64)
    for axis in range(L):
        level = L - axis  # first layout axis is the top level
        shape = [1] * L + [2]
        shape[axis] = S * S
        off = off + digits.reshape(shape) * S ** (level - 1)
    return off


def plan_inference_tiling(mask: np.ndarray, spec: RegionSpec) -> TilingPlan:
    """Grid-aligned ``TSL x TSL`` tiles from the origin; tiles without non-empty cells are dropped."""
    tsl = spec.total_side_length
    h, w = mask.shape
    off = _tile_offsets(spec)
    anchors, coords, valid = [], [], []
    for r0 in range(0, h, tsl):
        for c0 in range(0, w, tsl):
            cc = off + np.array([r0, c0])
            inside = (cc[..., 0] < h) & (cc[..., 1] < w)
            v = np.zeros(inside.shape, dtype=bool)
            v[inside] = mask[cc[..., 0][inside], cc[..., 1][inside]]
            if v.any():
                anchors.append((r0, c0))
                coords.append(cc)
                valid.append(v)
    if not anchors:
        tail = (spec.S**2,) * spec.L
        return TilingPlan(np.zeros((0, 2), np.int64), np.zeros((0,) + tail + (2,), np.int64), np.zeros((0,) + tail, bool))
    return TilingPlan(np.array(anchors, dtype=np.int64), np.stack(coords), np.stack(valid))


# ---------------------------------------------------------------------------
# coverage diagnostics


def global_coverage_closed_form(n_nonempty: int, roi_size: int, n: int) -> float:
    """``1 - C(N-k, n) / C(N, n)`` evaluated exactly."""
    from fractions import Fraction

    if roi_size == 0:
        return 0.0
    if n >= n_nonempty:
        return 1.0
    return float(1 - Fraction(math.comb(n_nonempty - roi_size, n), math.comb(n_nonempty, n)))


def estimate_roi_coverage(
    sampler: SamplerConfig,
    mask: np.ndarray,
    roi_mask: np.ndarray,
    trials: int,
    rng: np.random.Generator,
    placement: str = "fixed",
) -> tuple[float, float]:
    """Monte Carlo estimate of ``P(bag hits the ROI)`` and its standard error.

    With ``placement="fixed"`` each trial draws a bag and records whether it
    contains an ROI patch. With ``placement="random"`` the ROI shape is
    translated uniformly over all positions where it lies fully on non-empty
    patches, and each trial records the exact fraction of those positions its
    bag hits, which averages the location out per bag.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if placement not in ("fixed", "random"):
        raise ValueError(f"placement must be fixed or random, got {placement!r}")
    if not roi_mask.any():
        return 0.0, 0.0
    values = np.empty(trials)
    if placement == "fixed":
        roi = roi_mask & mask
        for t in range(trials):
            c = sampler.sample(mask, rng).flat_coords
            values[t] = roi[c[:, 0], c[:, 1]].any()
    else:
        cells = np.argwhere(roi_mask)
        cells = cells - cells.min(axis=0)
        rh, rw = cells.max(axis=0) + 1
        h, w = mask.shape
        shape = np.zeros((rh, rw), dtype=bool)
        shape[cells[:, 0], cells[:, 1]] = True
        fits = np.zeros((h - rh + 1, w - rw + 1), dtype=bool)
        fits[:] = True
        for dr, dc in cells:
            fits &= mask[dr : dr + h - rh + 1, dc : dc + w - rw + 1]
        n_pos = int(fits.sum())
        if n_pos == 0:
            raise SamplingError("ROI shape fits nowhere on the non-empty area")
        for t in range(trials):
            c = sampler.sample(mask, rng).flat_coords
            hit = np.zeros((h, w), dtype=bool)
            hit[c[:, 0], c[:, 1]] = True
            # anchor (r, c) is hit iff some ROI cell lands on a sampled patch
            anchor_hit = np.zeros_like(fits)
            for dr, dc in cells:
                anchor_hit |= hit[dr : dr + h - rh + 1, dc : dc + w - rw + 1]
            values[t] = (anchor_hit & fits).sum() / n_pos
    p = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return p, se
