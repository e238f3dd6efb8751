import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmil.config import ConfigError, parse_config
from hmil.synthwsi import (
    AugmentParams,
    EmptySlideError,
    GenerationConfig,
    GenerationError,
    SlideFormatError,
    SlideGrid,
    apply_augmentation,
    augment_patch,
    filter_empty_patches,
    generate_dataset,
    generate_slide,
    load_manifest,
    load_rois,
    load_slide,
    plan_dataset,
    write_slide,
)

MICRO = GenerationConfig("micro", 50, 64, 64, 16, 1.0)
MACRO = GenerationConfig("macro", 100, 64, 64, 16, 0.5)


@pytest.fixture(scope="module")
def micro_positives():
    return [generate_slide(MICRO, 11, f"p{i}", 1) for i in range(50)]


@pytest.fixture(scope="module")
def macro_slides():
    plan = plan_dataset(MACRO, 5)
    return [(lab, generate_slide(MACRO, 5, sid, lab)) for sid, lab, _ in plan]


def test_plan_bookkeeping_and_stratified_splits():
    cfg = GenerationConfig("micro", 200, 64, 64, 16, 0.5)
    plan = plan_dataset(cfg, 3)
    assert sum(lab for _, lab, _ in plan) == 100
    counts = {s: sum(1 for _, _, sp in plan if sp == s) for s in ("train", "val", "test")}
    assert counts == {"train": 130, "val": 30, "test": 40}
    for s in counts:
        assert sum(lab for _, lab, sp in plan if sp == s) == counts[s] // 2
    assert len({sid for sid, _, _ in plan}) == 200
    assert plan == plan_dataset(cfg, 3)
    assert plan != plan_dataset(cfg, 4)


def test_generation_config_requires_keys():
    with pytest.raises(ConfigError) as info:
        GenerationConfig.from_config(parse_config("profile = micro\nn_slides = 4\ngrid_w = 32\ngrid_h = 32\npatch_px = 16"))
    assert info.value.key == "positive_fraction"
    with pytest.raises(ConfigError, match="profile"):
        GenerationConfig.from_config(parse_config("profile = huge\nn_slides=4\ngrid_w=8\ngrid_h=8\npatch_px=16\npositive_fraction=0.5"))


def test_same_seed_gives_byte_identical_files(tmp_path):
    cfg = GenerationConfig("micro", 4, 24, 24, 16, 0.5, name="tiny")
    a = generate_dataset(cfg, 9, tmp_path / "a")
    generate_dataset(cfg, 9, tmp_path / "b")
    for e in a.entries:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()
    for name in ("manifest.csv", "rois.csv", "dataset.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    m = load_manifest(tmp_path / "a")
    assert [(e.slide_id, e.label, e.split) for e in m.entries] == [(e.slide_id, e.label, e.split) for e in a.entries]
    slide = load_slide(m.slide_path(m.entries[0]))
    assert slide.label == m.entries[0].label


def test_micro_roi_fraction_below_one_percent(micro_positives):
    fractions = [len(cells) / slide.nonempty_mask.sum() for slide, cells, _ in micro_positives]
    assert np.mean(fractions) < 0.01


def test_micro_roi_patches_are_nonempty_and_small(micro_positives):
    for slide, cells, specs in micro_positives:
        assert 1 <= len(specs) <= 3
        assert all(1 <= s.extent <= 2 for s in specs)
        rc = np.array(cells)
        assert slide.nonempty_mask[rc[:, 0], rc[:, 1]].all()


def test_micro_negative_has_no_roi():
    slide, cells, specs = generate_slide(MICRO, 11, "n0", 0)
    assert cells == [] and specs == []
    assert slide.nonempty_mask.sum() >= 1


def test_macro_ring_and_disk_have_equal_roi_counts(macro_slides):
    pos = [len(c) for lab, (_, c, _) in macro_slides if lab == 1]
    neg = [len(c) for lab, (_, c, _) in macro_slides if lab == 0]
    assert abs(np.mean(pos) - np.mean(neg)) / np.mean(neg) < 0.05
    for lab, (_, _, specs) in macro_slides:
        assert 12 <= specs[0].extent <= 20
        assert (specs[0].ring_inner > 0) == (lab == 1)


def _logistic_auc(X, y, rng):
    """Fit a logistic model on one half, return AUC on the other half."""
    from hmil.inference import auc

    X = (X - X.mean(0)) / (X.std(0) + 1e-12)
    X = np.column_stack([X, np.ones(len(X))])
    idx = rng.permutation(len(y))
    tr, te = idx[: len(y) // 2], idx[len(y) // 2 :]
    w = np.zeros(X.shape[1])
    for _ in range(2000):
        p = 1 / (1 + np.exp(-X[tr] @ w))
        w -= 0.1 * X[tr].T @ (p - y[tr]) / len(tr)
    return auc(X[te] @ w, y[te])


def test_macro_patch_counts_do_not_separate_labels(macro_slides):
    feats, labels = [], []
    for lab, (slide, cells, _) in macro_slides:
        means = slide.pixels.reshape(slide.grid_h, slide.grid_w, -1).mean(-1)
        dark = int(((means < 120) & slide.nonempty_mask).sum())
        feats.append([len(cells), int(slide.nonempty_mask.sum()), dark])
        labels.append(lab)
    assert _logistic_auc(np.array(feats, float), np.array(labels), np.random.default_rng(0)) < 0.6


def test_macro_geometry_error_when_grid_too_small():
    with pytest.raises(GenerationError):
        generate_slide(GenerationConfig("macro", 1, 20, 20, 16, 1.0), 0, "x", 1)


# --- slide files -------------------------------------------------------------


def _white_slide(gh=3, gw=4, p=8):
    px = np.full((gh, gw, p, p, 3), 250, dtype=np.uint8)
    return SlideGrid(gw, gh, p, px, 1, "w")


def test_slide_round_trip(tmp_path, micro_positives):
    slide = micro_positives[0][0]
    write_slide(tmp_path / "s.hwsi", slide)
    back = load_slide(tmp_path / "s.hwsi")
    assert np.array_equal(back.pixels, slide.pixels)
    assert (back.grid_w, back.grid_h, back.patch_px, back.label) == (slide.grid_w, slide.grid_h, slide.patch_px, slide.label)
    assert np.array_equal(back.nonempty_mask, slide.nonempty_mask)


def test_slide_format_errors(tmp_path):
    s = _white_slide()
    s.pixels[0, 0] = 100
    write_slide(tmp_path / "s.hwsi", s)
    buf = (tmp_path / "s.hwsi").read_bytes()
    (tmp_path / "t.hwsi").write_bytes(buf[:-5])
    with pytest.raises(SlideFormatError, match="byte"):
        load_slide(tmp_path / "t.hwsi")
    (tmp_path / "m.hwsi").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(SlideFormatError, match="HWSI"):
        load_slide(tmp_path / "m.hwsi")
    (tmp_path / "h.hwsi").write_bytes(buf[:10])
    with pytest.raises(SlideFormatError, match="byte"):
        load_slide(tmp_path / "h.hwsi")


def test_filter_empty_examples():
    s = _white_slide()
    s.pixels[1, 2] = 150
    mask = filter_empty_patches(s, 220)
    assert mask.sum() == 1 and mask[1, 2]
    assert filter_empty_patches(s, 255).all()
    with pytest.raises(EmptySlideError):
        filter_empty_patches(_white_slide(), 220)
    with pytest.raises(ValueError):
        filter_empty_patches(s, 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 254.0), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_filter_empty_is_monotone_in_threshold(t, dt, seed):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(4, 4, 8, 8, 3), dtype=np.uint8)
    px[0, 0] = 0
    s = SlideGrid(4, 4, 8, px, 0)
    lo = filter_empty_patches(s, t).copy()
    hi = filter_empty_patches(s, min(t + dt * (255 - t), 255.0))
    assert np.all(hi[lo])


# --- augmentation ------------------------------------------------------------


def test_identity_augmentation_is_exact(rng):
    p = rng.integers(0, 256, size=(3, 16, 16, 3)).astype(np.uint8)
    np.testing.assert_array_equal(apply_augmentation(p, AugmentParams.identity(3)), p.astype(float))


def test_double_flip_is_identity(rng):
    p = rng.integers(0, 256, size=(1, 8, 8, 3)).astype(float)
    flip = AugmentParams(np.array([True]), np.array([False]), np.ones(1), np.array([False]), np.zeros(1))
    once = apply_augmentation(p, flip)
    assert not np.array_equal(once, p)
    np.testing.assert_array_equal(apply_augmentation(once, flip), p)
    np.testing.assert_array_equal(once[0], p[0][:, ::-1])


def test_contrast_preserves_constant_patch():
    p = np.full((1, 8, 8, 3), 123.0)
    c = AugmentParams(np.zeros(1, bool), np.zeros(1, bool), np.array([1.1]), np.zeros(1, bool), np.zeros(1))
    np.testing.assert_allclose(apply_augmentation(p, c), p, atol=1e-12)


def test_random_augmentation_stays_in_range(rng):
    p = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    out = augment_patch(p, rng)
    assert out.shape == p.shape and out.min() >= 0 and out.max() <= 255
    with pytest.raises(ValueError):
        apply_augmentation(np.zeros((1, 8, 6, 3)), AugmentParams.identity(1))


def test_rois_csv_lists_planted_cells(tmp_path):
    cfg = GenerationConfig("micro", 4, 32, 32, 16, 1.0, name="r")
    m = generate_dataset(cfg, 2, tmp_path)
    rois = load_rois(tmp_path)
    for e in m.entries:
        _, cells, _ = generate_slide(cfg, 2, e.slide_id, 1)
        assert sorted(rois[e.slide_id]) == sorted(cells)


def test_roi_texture_knobs():
    base = "profile = micro\nn_slides = 4\ngrid_w = 24\ngrid_h = 24\npatch_px = 16\npositive_fraction = 0.5\n"
    for bad in ("roi_contrast = 0", "roi_contrast = 1.5", "roi_dot_area = 0"):
        with pytest.raises(ConfigError, match=bad.split()[0]):
            GenerationConfig.from_config(parse_config(base + bad))

    def roi_darkness(contrast):
        cfg = GenerationConfig("micro", 4, 24, 24, 16, 1.0, roi_contrast=contrast)
        slide, cells, specs = generate_slide(cfg, 3, "k", 1)
        roi = slide.patches(np.array(cells)).astype(float).mean()
        return roi, specs[0].dot_intensity

    strong, faint = roi_darkness(1.0), roi_darkness(0.4)
    assert strong[0] < faint[0]
    assert strong[1] < faint[1]
