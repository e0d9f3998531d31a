import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from binse import losses, metrics
from binse.corpus import synth_utterance
from binse.dsp import BinauralWaveform, StftConfig, stft
from binse.metrics import (EvalReport, UtteranceResult, better_ear_stoi, cue_errors,
                           delta_fw_segsnr, evaluate_manifest, fw_segsnr)
from binse.model import identity_checkpoint
from binse.stoi import stoi
from binse.training import DatasetManifest, SceneRecord

# frozen-implementation value for seed-0 white noise at 0 dB on synth_utterance(2.0, 3)
WHITE_NOISE_0DB = 8.9459


@pytest.fixture(scope="module")
def speech():
    return synth_utterance(2.0, 3)


@pytest.fixture(scope="module")
def pair(speech):
    right = np.roll(speech, 7) * 0.8
    return BinauralWaveform(speech, right)


def _white_at(clean, snr_db, seed=0):
    n = np.random.default_rng(seed).standard_normal(len(clean))
    n *= np.sqrt(np.sum(clean**2) / np.sum(n**2) / 10 ** (snr_db / 10))
    return n


# -- fwSegSNR ---------------------------------------------------------------------

def test_fw_segsnr_identity_hits_ceiling(speech):
    assert fw_segsnr(speech, speech) == metrics.SEG_CEIL


def test_fw_segsnr_half_scale(speech):
    assert fw_segsnr(speech, 0.5 * speech) == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_fw_segsnr_white_noise_regression(speech):
    v = fw_segsnr(speech, speech + _white_at(speech, 0.0))
    assert -10 <= v <= 10
    assert v == pytest.approx(WHITE_NOISE_0DB, abs=1e-3)


def test_fw_segsnr_rises_with_snr(speech):
    vals = [fw_segsnr(speech, speech + _white_at(speech, s)) for s in (-10, 0, 10, 20)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_fw_segsnr_errors(speech):
    with pytest.raises(ValueError):
        fw_segsnr(speech, speech[:-1])
    with pytest.raises(ValueError):
        fw_segsnr(np.zeros(8000), np.ones(8000))
    with pytest.raises(ValueError):
        fw_segsnr(speech[:100], speech[:100])


def test_mel_filterbank_shape_and_support():
    fb = metrics.mel_filterbank(16, 512, 16000)
    assert fb.shape == (16, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) > 0.5)


# -- delta, better ear --------------------------------------------------------------

def test_delta_zero_when_unprocessed(pair):
    noisy = pair + BinauralWaveform(_white_at(pair.left, 0), _white_at(pair.right, 0, 1))
    assert delta_fw_segsnr(pair, noisy, noisy) == 0.0


def test_delta_clean_output_is_ceiling_minus_noisy(pair):
    noisy = pair + BinauralWaveform(_white_at(pair.left, 0), _white_at(pair.right, 0, 1))
    expect = np.mean([metrics.SEG_CEIL - fw_segsnr(c, n) for c, n in
                      zip(pair.stacked(), noisy.stacked())])
    d = delta_fw_segsnr(pair, noisy, pair)
    assert d > 0 and d == pytest.approx(expect, abs=1e-12)


def test_better_ear_stoi_is_max(pair):
    noisy = pair + BinauralWaveform(_white_at(pair.left, 5), _white_at(pair.right, -5, 1))
    left = stoi(pair.left, noisy.left)
    right = stoi(pair.right, noisy.right)
    assert better_ear_stoi(pair, noisy) == pytest.approx(max(left, right), abs=1e-12)
    assert better_ear_stoi(pair, pair) == pytest.approx(1.0, abs=1e-8)


def test_better_ear_one_ear_destroyed(pair):
    wrecked = BinauralWaveform(pair.left, np.random.default_rng(2).standard_normal(len(pair)))
    assert better_ear_stoi(pair, wrecked) == pytest.approx(stoi(pair.left, pair.left), abs=1e-12)


def test_better_ear_nonincreasing_with_noise(pair):
    scores = []
    for snr in (20, 10, 0, -10):
        noise = BinauralWaveform(_white_at(pair.left, snr, 3), _white_at(pair.right, snr, 4))
        scores.append(better_ear_stoi(pair, pair + noise))
    assert all(a >= b for a, b in zip(scores, scores[1:]))


# -- cue errors ----------------------------------------------------------------------

def test_cue_errors_identity(pair):
    assert cue_errors(pair, pair) == (0.0, 0.0)


def test_cue_errors_right_gain(pair):
    spec = stft(torch.as_tensor(pair.stacked()), StftConfig())
    enh = spec.clone()
    enh[1] = 2 * enh[1]
    ild, ipd = cue_errors(spec, enh)
    assert ild == pytest.approx(20 * math.log10(2), abs=1e-9)
    assert ipd == pytest.approx(0.0, abs=1e-9)


def test_cue_errors_left_rotation(pair):
    spec = stft(torch.as_tensor(pair.stacked()), StftConfig())
    enh = spec.clone()
    enh[0] = enh[0] * complex(math.cos(math.pi / 36), math.sin(math.pi / 36))
    ild, ipd = cue_errors(spec, enh)
    assert ild == pytest.approx(0.0, abs=1e-9)
    assert ipd == pytest.approx(5.0, abs=1e-9)


def test_cue_errors_match_losses(pair, rng):
    noisy = pair + BinauralWaveform(_white_at(pair.left, 0), _white_at(pair.right, 0, 1))
    cs = stft(torch.as_tensor(pair.stacked()), StftConfig())
    es = stft(torch.as_tensor(noisy.stacked()), StftConfig())
    ild, ipd = cue_errors(pair, noisy)
    assert ild == pytest.approx(float(losses.ild_loss(cs, es)), abs=1e-12)
    assert ipd == pytest.approx(float(losses.ipd_loss(cs, es)) * 180 / math.pi, abs=1e-10)


# -- reports -------------------------------------------------------------------------

def _record(i, snr, rng):
    return UtteranceResult(f"u{i}", snr, *rng.uniform(0, 1, 2), *rng.normal(0, 3, 3))


def test_aggregates_are_bucket_means(rng):
    recs = [_record(i, s, rng) for i, s in enumerate([-7, -5.5, -1, 0.5, 2.9, 3.1, 8])]
    rep = EvalReport(recs, (-6, 0, 6))
    rows = rep.aggregates()
    assert [r["bucket"] for r in rows] == ["-6 dB", "0 dB", "6 dB"]
    assert [r["count"] for r in rows] == [2, 3, 2]
    members = {"-6 dB": recs[:2], "0 dB": recs[2:5], "6 dB": recs[5:]}
    for row in rows:
        for k in metrics.METRIC_FIELDS:
            assert row[k] == pytest.approx(np.mean([getattr(r, k) for r in members[row["bucket"]]]))
    assert rep.overall()["count"] == 7


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(9))), st.integers(0, 2**16))
def test_aggregation_permutation_invariant(perm, seed):
    rng = np.random.default_rng(seed)
    recs = [_record(i, float(rng.uniform(-8, 8)), rng) for i in range(9)]
    a = EvalReport(recs, (-6, 0, 6)).aggregates()
    b = EvalReport([recs[i] for i in perm], (-6, 0, 6)).aggregates()
    for ra, rb in zip(a, b):
        assert ra["count"] == rb["count"]
        for k in metrics.METRIC_FIELDS:
            assert ra[k] == pytest.approx(rb[k], rel=1e-12, abs=1e-12) or (math.isnan(ra[k]) and math.isnan(rb[k]))


def test_report_serialisation(tmp_path, rng):
    recs = [_record(i, s, rng) for i, s in enumerate([-6, 0.2, 0.3])]
    rep = EvalReport(recs, (-6, 0, 6))
    d = json.loads(rep.to_json())
    assert d["aggregates"][2]["stoi_noisy"] is None  # empty 6 dB bucket
    assert d["ipd_unit"] == "degrees" and "MBSTOI" in d["stoi_measure"]
    back = EvalReport.from_dict(d)
    assert back.records == recs and back.buckets == (-6, 0, 6)
    table = rep.table().splitlines()
    assert "BE-STOI noisy" in table[0] and "L_IPD deg" in table[0]
    assert len(table) == 2 + 3 + 1
    rows = rep.csv("\t").splitlines()
    assert rows[0].split("\t")[:3] == ["id", "input_snr", "bucket"] and len(rows) == 4
    paths = rep.write(tmp_path)
    assert all(p.exists() for p in paths.values())


def test_table_without_buckets_has_single_row(rng):
    rep = EvalReport([_record(0, 1.0, rng)])
    lines = rep.table().splitlines()
    assert lines[2].split()[0] == "all"


# -- evaluate_manifest ---------------------------------------------------------------

@pytest.fixture(scope="module")
def one_scene_manifest(tmp_path_factory):
    from binse.wavio import write_wav

    root = tmp_path_factory.mktemp("eval")
    write_wav(root / "utt.wav", synth_utterance(2.5, 11), 16000)
    rec = SceneRecord("test_00000", "test", "utt.wav", 800, 30.0, "wgn", 5, 0.0)
    return DatasetManifest([rec], root)


def test_identity_model_gives_zero_delta(one_scene_manifest):
    rep = evaluate_manifest(one_scene_manifest, identity_checkpoint())
    (r,) = rep.records
    assert r.delta_fw_segsnr == pytest.approx(0.0, abs=1e-6)
    assert r.stoi_enhanced == pytest.approx(r.stoi_noisy, abs=1e-6)
    assert r.input_snr == pytest.approx(0.0, abs=0.01)


def test_evaluate_is_deterministic_and_jobs_independent(one_scene_manifest):
    ck = identity_checkpoint()
    m = one_scene_manifest
    twice = DatasetManifest(m.records + [SceneRecord("test_00001", "test", "utt.wav", 0, -45.0,
                                                     "wgn", 9, 4.0)], m.root)
    a = evaluate_manifest(twice, ck, jobs=1).to_json()
    b = evaluate_manifest(twice, ck, jobs=2).to_json()
    assert a == b


def test_empty_selection_warns(one_scene_manifest, caplog):
    rep = evaluate_manifest(one_scene_manifest, identity_checkpoint(), split="val")
    assert rep.records == [] and "no scenes" in caplog.text


def test_missing_audio_raises(one_scene_manifest):
    rec = SceneRecord("x", "test", "absent.wav", 0, 0.0, "wgn", 1, 0.0)
    with pytest.raises(FileNotFoundError):
        evaluate_manifest(DatasetManifest([rec], one_scene_manifest.root), identity_checkpoint())


def test_stft_mismatch_raises(one_scene_manifest):
    with pytest.raises(ValueError):
        evaluate_manifest(one_scene_manifest, identity_checkpoint(), StftConfig(hop_length=200))
