"""Synthetic whole-slide-like images with planted regions of interest.

Two profiles are generated:

``micro``
    Positive slides carry 1-3 tiny (1x1 or 2x2 patch) regions of dense dark
    dots; negatives carry none. The label is the presence of such a region.
``macro``
    Every slide carries one large dotted region with identical local texture.
    Positives draw it as a ring, negatives as a filled disk of the same area,
    so the label is only readable from how patches are arranged.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import Config, ConfigError
from .rng import seeded_rng

SLIDE_MAGIC = b"HWSI"
SLIDE_VERSION = 1
GENERATOR_VERSION = "1"
_HEADER = struct.Struct("<4sHIIHBB")

DEFAULT_THRESHOLD = 220.0

BACKGROUND_MEAN = 235.0
BACKGROUND_SD = 8.0
TISSUE_RGB = np.array([158.0, 142.0, 162.0])
TISSUE_SD = 9.0
ROI_RGB = np.array([70.0, 40.0, 105.0])


class SlideFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class EmptySlideError(ValueError):
    pass


@dataclass
class SlideGrid:
    grid_w: int
    grid_h: int
    patch_px: int
    pixels: np.ndarray  # uint8 [grid_h, grid_w, patch_px, patch_px, channels]
    label: int
    slide_id: str = ""
    nonempty_mask: Optional[np.ndarray] = None  # bool [grid_h, grid_w]
    channels: int = 3

    def patch(self, row: int, col: int) -> np.ndarray:
        return self.pixels[row, col]

    def patches(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.intp).reshape(-1, 2)
        return self.pixels[coords[:, 0], coords[:, 1]]

    def to_image(self) -> np.ndarray:
        g = self.pixels.transpose(0, 2, 1, 3, 4)
        return g.reshape(self.grid_h * self.patch_px, self.grid_w * self.patch_px, self.channels)

    @classmethod
    def from_image(cls, image: np.ndarray, patch_px: int, label: int, slide_id: str = "") -> "SlideGrid":
        h, w, c = image.shape
        gh, gw = h // patch_px, w // patch_px
        px = image[: gh * patch_px, : gw * patch_px].reshape(gh, patch_px, gw, patch_px, c).transpose(0, 2, 1, 3, 4)
        return cls(gw, gh, patch_px, np.ascontiguousarray(px, dtype=np.uint8), int(label), slide_id, channels=c)


@dataclass
class ROISpec:
    profile: str
    center: tuple  # (row, col) in patch units, continuous
    extent: float  # side of the bounding square, in patches
    dot_density: float
    dot_intensity: float
    ring_inner: float = 0.0
    ring_outer: float = 0.0


@dataclass
class GenerationConfig:
    profile: str
    n_slides: int
    grid_w: int
    grid_h: int
    patch_px: int
    positive_fraction: float
    train_fraction: float = 0.65
    val_fraction: float = 0.15
    test_fraction: float = 0.20
    name: str = "synth"
    threshold: float = DEFAULT_THRESHOLD
    roi_dot_area: float = 14.0  # tissue pixels per ROI dot
    roi_contrast: float = 1.0  # 0 = tissue colour, 1 = full ROI colour

    @classmethod
    def from_config(cls, cfg: Config) -> "GenerationConfig":
        out = cls(
            profile=cfg.str("profile"),
            n_slides=cfg.int("n_slides"),
            grid_w=cfg.int("grid_w"),
            grid_h=cfg.int("grid_h"),
            patch_px=cfg.int("patch_px"),
            positive_fraction=cfg.float("positive_fraction"),
            train_fraction=cfg.float("train_fraction", 0.65),
            val_fraction=cfg.float("val_fraction", 0.15),
            test_fraction=cfg.float("test_fraction", 0.20),
            name=cfg.str("name", "synth"),
            threshold=cfg.float("threshold", DEFAULT_THRESHOLD),
            roi_dot_area=cfg.float("roi_dot_area", 14.0),
            roi_contrast=cfg.float("roi_contrast", 1.0),
        )
        if out.profile not in ("micro", "macro"):
            raise ConfigError(f"profile must be micro or macro, got {out.profile!r}", "profile")
        if not 0.0 <= out.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]", "positive_fraction")
        if abs(out.train_fraction + out.val_fraction + out.test_fraction - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1", "train_fraction")
        if out.roi_dot_area <= 0:
            raise ConfigError("roi_dot_area must be positive", "roi_dot_area")
        if not 0.0 < out.roi_contrast <= 1.0:
            raise ConfigError("roi_contrast must lie in (0, 1]", "roi_contrast")
        if out.n_slides < 1 or out.grid_w < 1 or out.grid_h < 1 or out.patch_px < 1:
            raise ConfigError("slide count and sizes must be positive", "n_slides")
        return out

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ManifestEntry:
    slide_id: str
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    name: str
    profile: str
    seed: int
    entries: list = field(default_factory=list)
    generator_version: str = GENERATOR_VERSION
    root: Optional[Path] = None

    def split(self, which: str) -> list:
        return [e for e in self.entries if e.split == which]

    def slide_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p


# ---------------------------------------------------------------------------
# slide files


def write_slide(path, slide: SlideGrid) -> None:
    header = _HEADER.pack(SLIDE_MAGIC, SLIDE_VERSION, slide.grid_w, slide.grid_h, slide.patch_px, slide.channels, slide.label)
    Path(path).write_bytes(header + np.ascontiguousarray(slide.pixels, dtype=np.uint8).tobytes())


def read_slide(path, slide_id: str = "", threshold: Optional[float] = DEFAULT_THRESHOLD) -> SlideGrid:
    """Load a slide file; recomputes the non-empty mask unless ``threshold`` is None."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != SLIDE_MAGIC:
        raise SlideFormatError(f"{path}: bad magic at byte 0, expected {SLIDE_MAGIC.decode()!r}")
    if len(buf) < _HEADER.size:
        raise SlideFormatError(f"{path}: truncated header at byte {len(buf)} (need {_HEADER.size})")
    _, version, gw, gh, ppx, ch, label = _HEADER.unpack_from(buf, 0)
    if version != SLIDE_VERSION:
        raise SlideFormatError(f"{path}: unsupported version {version} at byte 4")
    if label not in (0, 1):
        raise SlideFormatError(f"{path}: label {label} at byte 17 is not 0/1")
    n = gw * gh * ppx * ppx * ch
    if len(buf) != _HEADER.size + n:
        raise SlideFormatError(
            f"{path}: payload size mismatch at byte {min(len(buf), _HEADER.size + n)} "
            f"(expected {_HEADER.size + n} bytes total, got {len(buf)})"
        )
    px = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(gh, gw, ppx, ppx, ch).copy()
    slide = SlideGrid(gw, gh, ppx, px, label, slide_id or Path(path).stem, channels=ch)
    if threshold is not None:
        filter_empty_patches(slide, threshold)
    return slide


load_slide = read_slide


def filter_empty_patches(slide: SlideGrid, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Mark patches whose mean intensity exceeds ``threshold`` as empty background."""
    if not 0.0 < threshold <= 255.0:
        raise ValueError(f"threshold must lie in (0, 255], got {threshold}")
    means = slide.pixels.reshape(slide.grid_h, slide.grid_w, -1).mean(axis=-1, dtype=np.float64)
    mask = means <= threshold
    if not mask.any():
        raise EmptySlideError(f"slide {slide.slide_id!r}: every patch is above threshold {threshold}")
    slide.nonempty_mask = mask
    return mask


# ---------------------------------------------------------------------------
# rendering


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = yy**2 + xx**2 <= radius**2
    return np.stack([yy[keep], xx[keep]], axis=1)


def _stamp(canvas_mask: np.ndarray, centers: np.ndarray, radius: float) -> None:
    h, w = canvas_mask.shape
    cy = np.round(centers[:, 0]).astype(int)
    cx = np.round(centers[:, 1]).astype(int)
    for dy, dx in _disk_offsets(radius):
        y, x = cy + dy, cx + dx
        ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
        canvas_mask[y[ok], x[ok]] = True


def _blob_mask(h: int, w: int, blobs: list) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for cy, cx, ry, rx, theta, amp, freq, phase in blobs:
        dy, dx = yy - cy, xx - cx
        c, s = np.cos(theta), np.sin(theta)
        u = (c * dx + s * dy) / rx
        v = (-s * dx + c * dy) / ry
        ang = np.arctan2(v, u)
        mask |= np.hypot(u, v) <= 1.0 + amp * np.sin(freq * ang + phase)
    return mask


def _scatter_dots(rng, inside, bbox, density, px_area) -> np.ndarray:
    """Uniform dot centres (pixel coords) inside a region given by ``inside(y, x)``."""
    y0, x0, y1, x1 = bbox
    n = rng.poisson(density * (y1 - y0) * (x1 - x0) / px_area)
    pts = np.column_stack([rng.uniform(y0, y1, n), rng.uniform(x0, x1, n)])
    return pts[inside(pts[:, 0], pts[:, 1])]


def _render(rng, cfg: GenerationConfig, tissue: np.ndarray, roi_inside=None, roi_bbox=None):
    h, w = tissue.shape
    img = rng.normal(BACKGROUND_MEAN, BACKGROUND_SD, size=(h, w, 3))
    # low-frequency shading across the tissue
    shade = rng.normal(0.0, 1.0, size=(h // 64 + 2, w // 64 + 2))
    shade = np.kron(shade, np.ones((64, 64)))[:h, :w] * 6.0
    tex = TISSUE_RGB + rng.normal(0.0, TISSUE_SD, size=(h, w, 3)) + shade[..., None]
    img = np.where(tissue[..., None], tex, img)
    # mild nuclei-like texture
    nuclei = np.zeros((h, w), dtype=bool)
    pts = _scatter_dots(rng, lambda y, x: tissue[y.astype(int), x.astype(int)], (0, 0, h, w), 1.0, 90.0)
    _stamp(nuclei, pts, 1.0)
    img[nuclei] -= 28.0
    roi = None
    if roi_inside is not None:
        roi = np.zeros((h, w), dtype=bool)
        pts = _scatter_dots(rng, roi_inside, roi_bbox, 1.0, cfg.roi_dot_area)
        _stamp(roi, pts, 1.2)
        colour = TISSUE_RGB + cfg.roi_contrast * (ROI_RGB - TISSUE_RGB)
        img[roi] = colour + rng.normal(0.0, 8.0, size=(int(roi.sum()), 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _full_tissue_patches(tissue: np.ndarray, p: int) -> np.ndarray:
    gh, gw = tissue.shape[0] // p, tissue.shape[1] // p
    return tissue.reshape(gh, p, gw, p).all(axis=(1, 3))


def _tissue_blobs(rng, cfg: GenerationConfig, anchor=None, anchor_radius=0.0) -> list:
    p = cfg.patch_px
    gh, gw = cfg.grid_h, cfg.grid_w
    blobs = []
    n = int(rng.integers(2, 4))
    for i in range(n):
        if i == 0 and anchor is not None:
            cy, cx = anchor
            r = anchor_radius + rng.uniform(3.0, 6.0)
            ry, rx = r * rng.uniform(1.0, 1.25), r * rng.uniform(1.0, 1.25)
            amp = 0.04
        else:
            cy, cx = rng.uniform(0.25, 0.75) * gh, rng.uniform(0.25, 0.75) * gw
            ry, rx = rng.uniform(0.18, 0.3) * gh, rng.uniform(0.18, 0.3) * gw
            amp = rng.uniform(0.03, 0.1)
        blobs.append((cy * p, cx * p, ry * p, rx * p, rng.uniform(0, np.pi), amp, int(rng.integers(2, 6)), rng.uniform(0, 2 * np.pi)))
    return blobs


def _micro_rois(rng, full: np.ndarray, n_rois: int) -> list:
    rois, taken = [], np.zeros_like(full)
    gh, gw = full.shape
    for _ in range(n_rois):
        ext = int(rng.integers(1, 3))
        ok = np.zeros_like(full)
        for r in range(gh - ext + 1):
            for c in range(gw - ext + 1):
                ok[r, c] = full[r : r + ext, c : c + ext].all() and not taken[max(r - 1, 0) : r + ext + 1, max(c - 1, 0) : c + ext + 1].any()
        cand = np.argwhere(ok)
        if len(cand) == 0:
            raise GenerationError("no room for a micro ROI inside tissue")
        r, c = cand[rng.integers(len(cand))]
        taken[r : r + ext, c : c + ext] = True
        rois.append((int(r), int(c), ext))
    return rois


def generate_slide(cfg: GenerationConfig, seed: int, slide_id: str, label: int):
    """Render one slide. Returns ``(SlideGrid, roi_patch_coords, [ROISpec])``."""
    rng = seeded_rng(seed, f"slide:{slide_id}")
    p = cfg.patch_px
    roi_level = float((TISSUE_RGB + cfg.roi_contrast * (ROI_RGB - TISSUE_RGB)).mean())
    if cfg.profile == "micro":
        for _attempt in range(20):
            blobs = _tissue_blobs(rng, cfg)
            # tissue geometry first so ROI placement can respect it
            tissue = _blob_mask(cfg.grid_h * p, cfg.grid_w * p, blobs)
            full = _full_tissue_patches(tissue, p)
            if full.sum() >= 16:
                break
        else:
            raise GenerationError(f"{slide_id}: tissue too small for ROI placement")
        specs, roi_cells = [], []
        if label == 1:
            rois = _micro_rois(rng, full, int(rng.integers(1, 4)))
            boxes = []
            for r, c, ext in rois:
                boxes.append((r * p, c * p, (r + ext) * p, (c + ext) * p))
                roi_cells += [(r + i, c + j) for i in range(ext) for j in range(ext)]
                specs.append(ROISpec("micro", (r + ext / 2, c + ext / 2), ext, 1 / cfg.roi_dot_area, roi_level))
            boxes_a = np.array(boxes, dtype=float)

            def inside(y, x):
                return ((y[:, None] >= boxes_a[:, 0]) & (y[:, None] < boxes_a[:, 2]) & (x[:, None] >= boxes_a[:, 1]) & (x[:, None] < boxes_a[:, 3])).any(axis=1)

            bbox = (boxes_a[:, 0].min(), boxes_a[:, 1].min(), boxes_a[:, 2].max(), boxes_a[:, 3].max())
            img = _render(rng, cfg, tissue, inside, bbox)
        else:
            img = _render(rng, cfg, tissue)
    elif cfg.profile == "macro":
        r_disk = rng.uniform(6.0, 7.5)
        r_out = rng.uniform(1.25 * r_disk, 10.0)
        r_in = np.sqrt(r_out**2 - r_disk**2)
        outer = r_out if label == 1 else r_disk
        # placement and tissue size depend on r_out for both labels so neither leaks the class
        margin = r_out + 4.0
        if 2 * margin > min(cfg.grid_h, cfg.grid_w):
            raise GenerationError(f"{slide_id}: ROI of radius {r_out:.1f} does not fit a {cfg.grid_h}x{cfg.grid_w} grid")
        cy = rng.uniform(margin, cfg.grid_h - margin)
        cx = rng.uniform(margin, cfg.grid_w - margin)
        blobs = _tissue_blobs(rng, cfg, anchor=(cy, cx), anchor_radius=r_out)
        tissue = _blob_mask(cfg.grid_h * p, cfg.grid_w * p, blobs)
        lo = r_in if label == 1 else 0.0
        pcy, pcx = cy * p, cx * p

        def inside(y, x):
            d = np.hypot(y - pcy, x - pcx) / p
            return (d >= lo) & (d <= outer)

        bbox = (pcy - outer * p, pcx - outer * p, pcy + outer * p, pcx + outer * p)
        img = _render(rng, cfg, tissue, inside, bbox)
        gy, gx = np.mgrid[0 : cfg.grid_h, 0 : cfg.grid_w] + 0.5
        d = np.hypot(gy - cy, gx - cx)
        roi_cells = [tuple(map(int, rc)) for rc in np.argwhere((d >= lo) & (d <= outer))]
        specs = [ROISpec("macro", (cy, cx), 2 * outer, 1 / cfg.roi_dot_area, roi_level, lo, outer)]
    else:
        raise GenerationError(f"unknown profile {cfg.profile!r}")
    slide = SlideGrid.from_image(img, p, label, slide_id)
    filter_empty_patches(slide, cfg.threshold)
    return slide, roi_cells, specs


def _split_counts(n: int, cfg: GenerationConfig) -> list:
    n_val = int(round(n * cfg.val_fraction))
    n_test = int(round(n * cfg.test_fraction))
    return ["val"] * n_val + ["test"] * n_test + ["train"] * (n - n_val - n_test)


def plan_dataset(cfg: GenerationConfig, seed: int) -> list:
    """Deterministic ``(slide_id, label, split)`` assignment, stratified by label."""
    n_pos = int(round(cfg.n_slides * cfg.positive_fraction))
    ids = [f"{cfg.name}_{i:04d}" for i in range(cfg.n_slides)]
    order = seeded_rng(seed, "labels").permutation(cfg.n_slides)
    labels = np.zeros(cfg.n_slides, dtype=int)
    labels[order[:n_pos]] = 1
    splits = [""] * cfg.n_slides
    srng = seeded_rng(seed, "splits")
    for lab in (1, 0):
        idx = np.flatnonzero(labels == lab)
        idx = idx[srng.permutation(len(idx))]
        for i, s in zip(idx, _split_counts(len(idx), cfg)):
            splits[i] = s
    return [(ids[i], int(labels[i]), splits[i]) for i in range(cfg.n_slides)]


def _generate_one(args):
    cfg, seed, out_dir, sid, label = args
    slide, roi_cells, _ = generate_slide(cfg, seed, sid, label)
    write_slide(Path(out_dir) / "slides" / f"{sid}.hwsi", slide)
    return sid, roi_cells


def generate_dataset(cfg: GenerationConfig, seed: int, out_dir, workers: int = 1) -> DatasetManifest:
    """Write slides, ``manifest.csv``, ``rois.csv`` and ``dataset.cfg`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    plan = plan_dataset(cfg, seed)
    jobs = [(cfg, seed, str(out_dir), sid, lab) for sid, lab, _ in plan]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_generate_one, jobs))
    else:
        results = [_generate_one(j) for j in jobs]
    manifest = DatasetManifest(cfg.name, cfg.profile, seed, root=out_dir)
    for sid, lab, split in plan:
        manifest.entries.append(ManifestEntry(sid, f"slides/{sid}.hwsi", lab, split))
    write_manifest(out_dir / "manifest.csv", manifest)
    with open(out_dir / "rois.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "row", "col"])
        for sid, cells in results:
            for r, c in cells:
                w.writerow([sid, r, c])
    meta = {"name": cfg.name, "profile": cfg.profile, "seed": seed, "generator_version": GENERATOR_VERSION}
    meta.update({k: v for k, v in cfg.to_dict().items() if k not in meta})
    (out_dir / "dataset.cfg").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return manifest


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "path", "label", "split"])
        for e in manifest.entries:
            w.writerow([e.slide_id, e.path, e.label, e.split])


def load_manifest(dataset_dir) -> DatasetManifest:
    from .config import load_config

    root = Path(dataset_dir)
    meta = load_config(root / "dataset.cfg") if (root / "dataset.cfg").exists() else Config()
    manifest = DatasetManifest(
        meta.get("name", root.name),
        meta.get("profile", "unknown"),
        int(meta.get("seed", 0)),
        generator_version=meta.get("generator_version", GENERATOR_VERSION),
        root=root,
    )
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            manifest.entries.append(ManifestEntry(row["slide_id"], row["path"], int(row["label"]), row["split"]))
    return manifest


def load_rois(dataset_dir) -> dict:
    out: dict = {}
    path = Path(dataset_dir) / "rois.csv"
    if not path.exists():
        return out
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["slide_id"], []).append((int(row["row"]), int(row["col"])))
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    hflip: np.ndarray
    vflip: np.ndarray
    contrast: np.ndarray
    blur: np.ndarray
    sharpen: np.ndarray

    @classmethod
    def identity(cls, n: int = 1) -> "AugmentParams":
        return cls(np.zeros(n, bool), np.zeros(n, bool), np.ones(n), np.zeros(n, bool), np.zeros(n))

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int) -> "AugmentParams":
        return cls(
            hflip=rng.random(n) < 0.5,
            vflip=rng.random(n) < 0.5,
            contrast=rng.uniform(0.9, 1.1, n),
            blur=rng.random(n) < 0.2,
            sharpen=rng.uniform(0.0, 0.3, n),
        )


def _box_blur(x: np.ndarray) -> np.ndarray:
    # x [n, p, p, c], edge-replicated 3x3 mean
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    p = x.shape[1]
    acc = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            acc += pad[:, i : i + p, j : j + p]
    return acc / 9.0


def apply_augmentation(patches: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply flips, contrast, light blur and unsharp-mask sharpening to ``[n, p, p, c]`` patches."""
    x = np.asarray(patches, dtype=np.float64).copy()
    if x.shape[1] != x.shape[2]:
        raise ValueError(f"patches must be square, got {x.shape[1:3]}")
    x[params.hflip] = x[params.hflip][:, :, ::-1]
    x[params.vflip] = x[params.vflip][:, ::-1]
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    x = mu + params.contrast[:, None, None, None] * (x - mu)
    if params.blur.any():
        x[params.blur] = _box_blur(x[params.blur])
    amt = params.sharpen[:, None, None, None]
    if np.any(amt):
        x = x + amt * (x - _box_blur(x))
    return np.clip(x, 0.0, 255.0)


def augment_batch(patches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_augmentation(patches, AugmentParams.draw(rng, len(patches)))


def augment_patch(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return augment_batch(np.asarray(patch)[None], rng)[0]
