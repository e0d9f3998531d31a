import json
import math

import numpy as np
import pytest
import torch

from binse import training
from binse.corpus import write_corpus
from binse.dsp import BinauralWaveform, StftConfig
from binse.model import (BCCTN, TINY_CONFIG, Checkpoint, ModelConfig, identity_checkpoint,
                         load_checkpoint)
from binse.spatial import synth_hrir_set
from binse.training import (DatasetManifest, TrainConfig, TrainHistory, build_dataset, enhance,
                            load_scenes, train)

MICRO = ModelConfig(encoder_channels=(2, 4), embed_dim=16, attn_heads=2, attn_hidden=16,
                    post_linear_features=32)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, 12, seed=4)
    return root


@pytest.fixture(scope="module")
def hrirs():
    return synth_hrir_set()


@pytest.fixture(scope="module")
def small(corpus, hrirs):
    """Twelve short scenes, pre-rendered."""
    m = build_dataset(corpus, 12, (8, 2, 2), seed=5, snr_range=(-3, 3), duration=0.5)
    scenes = {s: load_scenes(m.split(s), m, hrirs, training.ssn_spectrum(m)) for s in ("train", "val")}
    return m, scenes


# -- dataset ------------------------------------------------------------------------

def test_split_counts(corpus):
    m = build_dataset(corpus, 10, (8, 1, 1), seed=0)
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [8, 1, 1]


def test_dataset_deterministic(corpus, tmp_path):
    a = build_dataset(corpus, 30, seed=9)
    b = build_dataset(corpus, 30, seed=9)
    a.save(tmp_path / "a.jsonl")
    b.save(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert build_dataset(corpus, 30, seed=10).records != a.records


def test_dataset_ranges_and_disjoint_splits(corpus):
    m = build_dataset(corpus, 60, seed=2)
    assert all(-7 <= r.snr_db <= 16 for r in m.records)
    assert all(-90 <= r.azimuth <= 90 and r.azimuth % 5 == 0 for r in m.records)
    assert {r.noise_type for r in m.records} == {"wgn", "ssn"}
    sources = [{r.clean for r in m.split(s)} for s in ("train", "val", "test")]
    assert not (sources[0] & sources[1]) and not (sources[0] & sources[2]) and not (sources[1] & sources[2])


def test_manifest_round_trip(corpus, tmp_path):
    m = build_dataset(corpus, 8, seed=1)
    m.save(tmp_path / "sub" / "m.jsonl")
    back = DatasetManifest.load(tmp_path / "sub" / "m.jsonl")
    assert [r.id for r in back.records] == [r.id for r in m.records]
    assert all(back.resolve(r.clean).exists() for r in back.records)
    assert not any(json.loads(line)["clean"].startswith("/")
                   for line in (tmp_path / "sub" / "m.jsonl").read_text().splitlines())


def test_dataset_errors(tmp_path, corpus):
    with pytest.raises(FileNotFoundError):
        build_dataset(tmp_path / "nope", 4)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        build_dataset(tmp_path / "empty", 4)
    with pytest.raises(ValueError):
        build_dataset(corpus, 4, snr_range=(3, -3))
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 1}\n')
    with pytest.raises(ValueError):
        DatasetManifest.load(bad)


def test_rendered_scene_hits_target_snr(corpus, hrirs):
    m = build_dataset(corpus, 6, seed=3)
    for r in m.records:
        scene = training.render_scene(r, m, hrirs, training.ssn_spectrum(m))
        assert scene.input_snr == pytest.approx(r.snr_db, abs=0.01)
        assert len(scene.noisy) == 32000


# -- configuration -------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(initial_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")
    cfg = TrainConfig(loss_weights="1,0,0,0")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# -- training loop -------------------------------------------------------------------

def test_training_reduces_validation_loss(small, tmp_path):
    m, scenes = small
    ck, hist = train(m, MICRO, TrainConfig(epochs=3, batch_size=4), scenes=scenes, out_dir=tmp_path)
    totals = hist.val_totals()
    assert len(totals) == 4 and min(totals[1:]) < totals[0]
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
    steps = [json.loads(x) for x in (tmp_path / "steps.jsonl").read_text().splitlines()]
    assert len(steps) == 3 * 2 and {"total", "snr_term", "lr"} <= steps[0].keys()
    saved = TrainHistory.load(tmp_path / "history.json")
    assert saved.val_totals() == totals and saved.stop_reason == hist.stop_reason
    best = [e.best_val for e in hist.epochs[1:]]
    assert all(a >= b for a, b in zip(best, best[1:]))
    lrs = hist.lr_trace()
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_early_stop_on_plateau(small, monkeypatch):
    m, scenes = small
    values = iter([5.0, 4.0, 4.5, 4.5, 4.5, 4.5, 4.5, 4.5])

    def fake_validate(*args, **kwargs):
        v = next(values)
        return {"total": v, "snr_term": v, "stoi_term": 0.0, "ild_term": 0.0, "ipd_term": 0.0}

    monkeypatch.setattr(training, "validate", fake_validate)
    _, hist = train(m, MICRO, TrainConfig(epochs=10, batch_size=8), scenes=scenes)
    assert hist.stop_reason == "early_stop"
    assert [e.epoch for e in hist.epochs] == [0, 1, 2, 3, 4]
    # reduce-on-plateau halves the rate after each non-improving epoch
    assert hist.lr_trace() == [1e-3, 1e-3, 1e-3, 5e-4, 2.5e-4]


def test_early_stop_never_before_patience(small, monkeypatch):
    m, scenes = small
    monkeypatch.setattr(training, "validate", lambda *a, **k: {"total": 1.0, "snr_term": 1.0,
                                                               "stoi_term": 0.0, "ild_term": 0.0,
                                                               "ipd_term": 0.0})
    _, hist = train(m, MICRO, TrainConfig(epochs=10, early_stop_patience=2), scenes=scenes)
    # the first epoch sets the best value; two flat epochs follow
    assert hist.epochs[-1].epoch == 3 and hist.stop_reason == "early_stop"


def test_time_limit(small):
    m, scenes = small
    _, hist = train(m, MICRO, TrainConfig(epochs=5, max_minutes=0.0), scenes=scenes)
    assert hist.stop_reason == "time_limit" and len(hist.epochs) == 2


def test_resume_matches_uninterrupted(small, tmp_path):
    m, scenes = small
    cfg = TrainConfig(epochs=3, batch_size=4, precision="float64")
    _, full = train(m, MICRO, cfg, scenes=scenes, out_dir=tmp_path / "full")
    part_cfg = TrainConfig(epochs=1, batch_size=4, precision="float64")
    train(m, MICRO, part_cfg, scenes=scenes, out_dir=tmp_path / "part")
    _, resumed = train(m, MICRO, cfg, scenes=scenes, out_dir=tmp_path / "part",
                       resume=tmp_path / "part" / "last.pt")
    assert [e.epoch for e in resumed.epochs] == [0, 1, 2, 3]
    for a, b in zip(full.epochs, resumed.epochs):
        for k in a.val:
            assert a.val[k] == pytest.approx(b.val[k], abs=1e-5)


def test_training_is_reproducible(small):
    m, scenes = small
    cfg = TrainConfig(epochs=2, batch_size=4)
    _, a = train(m, MICRO, cfg, scenes=scenes)
    _, b = train(m, MICRO, cfg, scenes=scenes)
    assert a.val_totals() == b.val_totals()


def test_snr_only_weights_still_log_all_terms(small):
    m, scenes = small
    _, hist = train(m, MICRO, TrainConfig(epochs=1, loss_weights="1,0,0,0"), scenes=scenes)
    last = hist.epochs[-1]
    assert last.val["total"] == pytest.approx(last.val["snr_term"], abs=1e-6)
    assert last.val["ild_term"] != 0 and last.val["ipd_term"] != 0


def test_divergence_aborts(small, monkeypatch):
    m, scenes = small
    real = training._loss

    def bad_loss(*args):
        b = real(*args)
        b.total = b.total * float("nan")
        return b

    monkeypatch.setattr(training, "_loss", bad_loss)
    with pytest.raises(training.TrainingDiverged):
        train(m, MICRO, TrainConfig(epochs=1), scenes=scenes)


def test_train_needs_val_split(small):
    m, scenes = small
    only_train = DatasetManifest(m.split("train"), m.root)
    with pytest.raises(ValueError):
        train(only_train, MICRO, TrainConfig(epochs=1), scenes=scenes)


# -- inference ------------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 399, 400, 16000, 32123])
def test_identity_enhance_reproduces_input(n, rng):
    x = BinauralWaveform(rng.standard_normal(n), rng.standard_normal(n))
    y = enhance(x, identity_checkpoint())
    assert len(y) == n and y.sample_rate == x.sample_rate
    if n >= 400:
        assert np.max(np.abs(y.stacked() - x.stacked())) < 1e-6


def test_enhance_rejects_mismatches(rng):
    x = BinauralWaveform(rng.standard_normal(1000), rng.standard_normal(1000), 8000)
    with pytest.raises(ValueError):
        enhance(x, identity_checkpoint())
    y = BinauralWaveform(rng.standard_normal(1000), rng.standard_normal(1000))
    with pytest.raises(ValueError):
        enhance(y, identity_checkpoint(), StftConfig(hop_length=200))


def test_checkpoint_round_trip_forward(tmp_path, rng):
    model = BCCTN(ModelConfig(**TINY_CONFIG, mask_init="random")).eval()
    from binse.model import save_checkpoint

    save_checkpoint(tmp_path / "m.pt", Checkpoint(model.cfg, model.state_dict()))
    loaded = load_checkpoint(tmp_path / "m.pt").build_model()
    x = torch.randn(2, 2, 257, 20, dtype=torch.cfloat)
    with torch.no_grad():
        assert torch.max(torch.abs(model(x) - loaded(x))) < 1e-6


def test_enhance_model_dtype_float64(rng):
    ck = identity_checkpoint()
    model = ck.build_model().double()
    x = BinauralWaveform(rng.standard_normal(4000), rng.standard_normal(4000))
    y = enhance(x, ck, model=model)
    assert np.max(np.abs(y.stacked() - x.stacked())) < 1e-9
