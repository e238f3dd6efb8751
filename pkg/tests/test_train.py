import numpy as np
import pytest

from hmil import model as M
from hmil import tensor as T
from hmil import train as TR
from hmil.config import ConfigError, parse_config
from hmil.inference import UndefinedAUCError
from hmil.synthwsi import DatasetManifest, GenerationConfig, ManifestEntry, SlideGrid, generate_dataset, write_slide

SMALL_MODEL = "embed_dim = 8\nheads = 2\n"


def _run(text):
    return TR.RunConfig.from_config(parse_config(SMALL_MODEL + text))


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(GenerationConfig("micro", 8, 16, 16, 16, 0.5, name="tiny"), 5, root)


def _one_slide_manifest(tmp_path, rng):
    m = DatasetManifest("one", "micro", 0, root=tmp_path)
    for i, label in enumerate([1, 0]):
        px = rng.integers(40, 200, size=(2, 2, 16, 16, 3)).astype(np.uint8)
        write_slide(tmp_path / f"s{i}.hwsi", SlideGrid(2, 2, 16, px, label, f"s{i}"))
    m.entries = [ManifestEntry("s0", "s0.hwsi", 1, "train"), ManifestEntry("s0", "s0.hwsi", 1, "val"), ManifestEntry("s1", "s1.hwsi", 0, "val")]
    return m


def test_run_config_validation():
    run = _run("strategy = hierarchical\nS = 2\nL = 3\n")
    assert run.model.levels == 3 and run.sampler.n_regions == 4
    assert run.train.lr == 1e-4 and run.train.epochs == 50 and run.train.batch_size == 2
    assert _run("strategy = global\n").model.aggregator == "baseline"
    with pytest.raises(ConfigError):
        _run("strategy = global\naggregator = transformer\n")
    with pytest.raises(ConfigError):
        _run("strategy = regional\nbudget = 250\n")
    with pytest.raises(ConfigError):
        _run("epochs = 0\n")
    assert _run("seeds = 1,2,3\n").train.seeds == (1, 2, 3)


def test_smoke_two_epochs(tiny, tmp_path):
    run = _run("strategy = regional\nS = 2\nbudget = 32\nepochs = 2\n")
    params, hist = TR.train(tiny, run, seed=0, out_dir=tmp_path)
    assert [r.epoch for r in hist.epochs] == [1, 2]
    assert all(np.isfinite(r.loss) for r in hist.epochs)
    assert (tmp_path / "checkpoint.hmil").exists()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,val_auc" and len(lines) == 3
    assert hist.best_epoch in (1, 2)
    M.check_params(run.model, params)


def test_training_is_deterministic(tiny, tmp_path):
    run = _run("strategy = hierarchical\nS = 2\nL = 2\nbudget = 32\nepochs = 2\n")
    p1, h1 = TR.train(tiny, run, seed=3, out_dir=tmp_path / "a")
    p2, h2 = TR.train(tiny, run, seed=3, out_dir=tmp_path / "b")
    assert [(r.loss, r.val_auc) for r in h1.epochs] == [(r.loss, r.val_auc) for r in h2.epochs]
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert (tmp_path / "a" / "checkpoint.hmil").read_bytes() == (tmp_path / "b" / "checkpoint.hmil").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    _, h3 = TR.train(tiny, run, seed=4)
    assert [r.loss for r in h3.epochs] != [r.loss for r in h1.epochs]


@pytest.mark.parametrize("text", ["strategy = regional\nS = 2\nbudget = 4\n", "strategy = global\nbudget = 4\n"])
def test_single_slide_overfit(tmp_path, rng, text):
    m = _one_slide_manifest(tmp_path, rng)
    run = _run(text + "epochs = 10\nlr = 1e-3\naugment = false\n")
    _, hist = TR.train(m, run, seed=0)
    losses = [r.loss for r in hist.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_nan_loss_aborts_with_context(tiny, monkeypatch):
    run = _run("strategy = regional\nS = 2\nbudget = 16\nepochs = 1\n")
    monkeypatch.setattr(TR, "_bag_logit", lambda *a: T.Tensor(np.array(np.nan), requires_grad=False))
    with pytest.raises(TR.TrainingAborted) as info:
        TR.train(tiny, run, seed=0)
    assert info.value.epoch == 1 and info.value.step == 1
    assert "epoch 1" in str(info.value)


def test_validation_needs_both_classes(tiny):
    run = _run("strategy = regional\nS = 2\nbudget = 16\n")
    params = M.params_from_arrays({k: v.data for k, v in M.init_params(run.model, np.random.default_rng(0)).items()})
    store = TR.SlideStore(tiny)
    positives = [e for e in tiny.split("train") if e.label == 1]
    with pytest.raises(UndefinedAUCError):
        TR.validate(params, run, store, positives)


def test_validate_perfect_model_and_repeatability(tiny, monkeypatch):
    run = _run("strategy = regional\nS = 2\nbudget = 16\n")
    params = M.init_params(run.model, np.random.default_rng(0))
    store = TR.SlideStore(tiny)
    entries = tiny.split("train")
    first = TR.validate(params, run, store, entries)
    assert TR.validate(params, run, store, entries) == first
    real = TR.infer_full

    def oracle(slide, *a, **k):
        r = real(slide, *a, **k)
        r.probability = 0.9 if slide.label == 1 else 0.1
        return r

    monkeypatch.setattr(TR, "infer_full", oracle)
    assert TR.validate(params, run, store, entries) == 1.0


def test_missing_split_rejected(tiny):
    m = DatasetManifest("x", "micro", 0, entries=tiny.split("train"), root=tiny.root)
    with pytest.raises(ValueError, match="val"):
        TR.train(m, _run("strategy = regional\nS = 2\nbudget = 16\n"), seed=0)
