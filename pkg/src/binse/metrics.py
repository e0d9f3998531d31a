"""Evaluation measures and reports.

Better-ear STOI (the larger of the two per-ear STOI scores) stands in for
MBSTOI and is labelled as such in every report.  ILD and IPD errors reuse
the loss code so metric and objective cannot drift apart.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses, spatial
from .dsp import DEFAULT_SAMPLE_RATE, BinauralWaveform, StftConfig, stft
from .model import Checkpoint, load_checkpoint
from .stoi import stoi
from .training import DatasetManifest, enhance, load_scene, ssn_spectrum

log = logging.getLogger(__name__)

SEG_FRAME_SECONDS = 0.025
SEG_BANDS = 16
SEG_FLOOR, SEG_CEIL = -10.0, 35.0
SEG_ACTIVITY_DB = 40.0
STOI_LABEL = "better-ear STOI (MBSTOI substitute)"


def _mel(f):
    return 2595.0 * np.log10(1 + np.asarray(f) / 700.0)


def _mel_inv(m):
    return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1)


def mel_filterbank(n_bands: int, n_fft: int, sr: int) -> np.ndarray:
    """``(n_bands, n_fft // 2 + 1)`` triangular filters equally spaced in mel from 0 to sr/2."""
    edges = _mel_inv(np.linspace(0, _mel(sr / 2), n_bands + 2))
    f = np.fft.rfftfreq(n_fft, 1 / sr)
    fb = np.zeros((n_bands, len(f)))
    for b in range(n_bands):
        lo, mid, hi = edges[b: b + 3]
        rise = (f - lo) / (mid - lo)
        fall = (hi - f) / (hi - mid)
        fb[b] = np.clip(np.minimum(rise, fall), 0, None)
    return fb


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    count = 1 + (len(x) - size) // hop
    idx = np.arange(size)[None, :] + hop * np.arange(count)[:, None]
    return x[idx]


def fw_segsnr(clean, test, sr: int = DEFAULT_SAMPLE_RATE) -> float:
    """Frequency-weighted segmental SNR in dB.

    Hann-windowed 25 ms frames at 50% overlap, 16 mel bands.  Each band SNR
    (clean band energy over error band energy) is clamped to [-10, 35] dB,
    the bands are averaged with the clean band energies as weights, and the
    frame scores are averaged over frames within 40 dB of the loudest clean
    frame.
    """
    clean = np.asarray(clean, dtype=float)
    test = np.asarray(test, dtype=float)
    if clean.shape != test.shape or clean.ndim != 1:
        raise ValueError(f"need equal-length 1-D signals, got {clean.shape} and {test.shape}")
    size = int(round(SEG_FRAME_SECONDS * sr))
    hop = size // 2
    if len(clean) < size:
        raise ValueError(f"signal shorter than one {size}-sample frame")
    if not np.any(clean):
        raise ValueError("silent clean signal")
    n_fft = 1 << (size - 1).bit_length()
    win = np.hanning(size + 1)[:-1]
    cf = _frames(clean, size, hop)
    ef = _frames(test - clean, size, hop)
    fb = mel_filterbank(SEG_BANDS, n_fft, sr)
    cb = (np.abs(np.fft.rfft(cf * win, n_fft)) ** 2) @ fb.T  # (frames, bands)
    eb = (np.abs(np.fft.rfft(ef * win, n_fft)) ** 2) @ fb.T
    with np.errstate(divide="ignore", invalid="ignore"):
        band_snr = 10 * np.log10(cb / eb)
    # 0/0 bands carry no weight; x/0 hits the ceiling, 0/x the floor
    band_snr = np.clip(np.nan_to_num(band_snr, nan=SEG_FLOOR, posinf=SEG_CEIL, neginf=SEG_FLOOR),
                       SEG_FLOOR, SEG_CEIL)
    weight = cb.sum(axis=1)
    energy = np.sum(cf**2, axis=1)
    with np.errstate(divide="ignore"):
        level = 10 * np.log10(energy)
    active = (level > level.max() - SEG_ACTIVITY_DB) & (weight > 0)
    frame_score = (cb[active] * band_snr[active]).sum(axis=1) / weight[active]
    return float(frame_score.mean())


def _pair(x) -> np.ndarray:
    if isinstance(x, BinauralWaveform):
        return x.stacked()
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != 2:
        raise ValueError(f"expected a binaural (2, n) signal, got {x.shape}")
    return x


def delta_fw_segsnr(clean, noisy, enhanced, sr: int = DEFAULT_SAMPLE_RATE) -> float:
    """``fw_segsnr(clean, enhanced) - fw_segsnr(clean, noisy)`` averaged over the ears."""
    c, n, e = _pair(clean), _pair(noisy), _pair(enhanced)
    return float(np.mean([fw_segsnr(c[i], e[i], sr) - fw_segsnr(c[i], n[i], sr) for i in range(2)]))


def better_ear_stoi(clean, test, sr: int = DEFAULT_SAMPLE_RATE) -> float:
    """Larger of the left- and right-ear STOI scores."""
    c, t = _pair(clean), _pair(test)
    return float(max(stoi(c[0], t[0], sr), stoi(c[1], t[1], sr)))


def cue_errors(clean, enhanced, stft_cfg: StftConfig = StftConfig(),
               threshold_db: float = losses.cues.DEFAULT_THRESHOLD_DB) -> tuple[float, float]:
    """``(ILD error in dB, IPD error in degrees)`` over the clean joint IBM.

    Accepts binaural waveforms or complex spectrograms ``(2, K, L)``.
    """
    def spec(x):
        if isinstance(x, BinauralWaveform):
            x = x.stacked()
        x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
        return x if x.is_complex() else stft(x.double(), stft_cfg)

    cs, es = spec(clean), spec(enhanced)
    ild = losses.ild_loss(cs, es, threshold_db=threshold_db)
    ipd = losses.ipd_loss(cs, es, threshold_db=threshold_db)
    return float(ild), float(ipd) * 180.0 / math.pi


# -- reports ------------------------------------------------------------------

@dataclass
class UtteranceResult:
    id: str
    input_snr: float
    stoi_noisy: float
    stoi_enhanced: float
    delta_fw_segsnr: float
    ild_err: float
    ipd_err: float


METRIC_FIELDS = ("stoi_noisy", "stoi_enhanced", "delta_fw_segsnr", "ild_err", "ipd_err")
_HEADERS = {
    "stoi_noisy": "BE-STOI noisy",
    "stoi_enhanced": "BE-STOI enh",
    "delta_fw_segsnr": "dfwSegSNR dB",
    "ild_err": "L_ILD dB",
    "ipd_err": "L_IPD deg",
}


@dataclass
class EvalReport:
    records: list[UtteranceResult] = field(default_factory=list)
    buckets: tuple[float, ...] | None = None

    def bucket_of(self, snr: float) -> float | None:
        if not self.buckets:
            return None
        return min(self.buckets, key=lambda b: (abs(snr - b), b))

    def aggregates(self) -> list[dict]:
        """Mean of every metric per SNR bucket (nearest centre), or one "all" row without buckets."""
        if self.buckets:
            groups = [(f"{b:g} dB", [r for r in self.records if self.bucket_of(r.input_snr) == b])
                      for b in sorted(self.buckets)]
        else:
            groups = [("all", list(self.records))]
        return [_aggregate(name, members) for name, members in groups]

    def overall(self) -> dict:
        return _aggregate("all", list(self.records))

    def to_dict(self) -> dict:
        return {
            "stoi_measure": STOI_LABEL,
            "ipd_unit": "degrees",
            "buckets": list(self.buckets) if self.buckets else None,
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates(),
            "overall": self.overall(),
        }

    def to_json(self) -> str:
        # NaN aggregates of empty buckets become null
        return json.dumps(_nan_to_none(self.to_dict()), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        buckets = tuple(d["buckets"]) if d.get("buckets") else None
        return cls([UtteranceResult(**r) for r in d["records"]], buckets)

    def table(self) -> str:
        """Aligned plain-text table: one row per SNR bucket, one column per metric."""
        cols = ["bucket", "count"] + [_HEADERS[k] for k in METRIC_FIELDS]
        body = []
        for row in self.aggregates():
            cells = [row["bucket"], str(row["count"])]
            cells += ["-" if math.isnan(row[k]) else f"{round(row[k], 3) + 0.0:.3f}" for k in METRIC_FIELDS]
            body.append(cells)
        widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in body]
        lines.append(f"STOI column: {STOI_LABEL}")
        return "\n".join(lines)

    def csv(self, delimiter: str = ",") -> str:
        """Per-utterance records as delimited text."""
        buf = io.StringIO()
        names = ["id", "input_snr", "bucket", *METRIC_FIELDS]
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            b = self.bucket_of(r.input_snr)
            w.writerow([r.id, f"{r.input_snr:.4f}", "" if b is None else f"{b:g}",
                        *(f"{getattr(r, k):.6f}" for k in METRIC_FIELDS)])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{stem}.json", "table": out / f"{stem}.txt", "csv": out / f"{stem}.csv"}
        paths["json"].write_text(self.to_json() + "\n")
        paths["table"].write_text(self.table() + "\n")
        paths["csv"].write_text(self.csv())
        return paths


def _aggregate(name: str, members: list[UtteranceResult]) -> dict:
    row = {"bucket": name, "count": len(members)}
    for k in METRIC_FIELDS:
        row[k] = float(np.mean([getattr(r, k) for r in members])) if members else float("nan")
    return row


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def evaluate_scene(rid: str, clean: BinauralWaveform, noisy: BinauralWaveform,
                   checkpoint: Checkpoint, stft_cfg: StftConfig | None = None,
                   model=None) -> UtteranceResult:
    enhanced = enhance(noisy, checkpoint, stft_cfg, model)
    c, n = clean.stacked(), noisy.stacked()
    snrs = losses.snr(torch.as_tensor(c), torch.as_tensor(n)).numpy()
    ild, ipd = cue_errors(clean, enhanced, stft_cfg or checkpoint.stft_config)
    sr = clean.sample_rate
    return UtteranceResult(
        id=rid,
        input_snr=float(np.mean(snrs)),
        stoi_noisy=better_ear_stoi(clean, noisy, sr),
        stoi_enhanced=better_ear_stoi(clean, enhanced, sr),
        delta_fw_segsnr=delta_fw_segsnr(clean, noisy, enhanced, sr),
        ild_err=ild,
        ipd_err=ipd,
    )


def _evaluate_task(args) -> UtteranceResult:
    record, manifest, hrirs, ssn, checkpoint, stft_cfg = args
    clean, noisy = load_scene(record, manifest, hrirs, ssn)
    return evaluate_scene(record.id, clean, noisy, checkpoint, stft_cfg)


def evaluate_manifest(manifest: DatasetManifest, checkpoint, stft_cfg: StftConfig | None = None,
                      split: str | None = None, buckets=None, hrirs: spatial.HrirSet | None = None,
                      jobs: int = 1) -> EvalReport:
    """Enhance and score every scene (or every scene of ``split``).

    Results depend only on the manifest and checkpoint; ``jobs`` spreads
    scenes over processes without changing them.
    """
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if stft_cfg is not None and stft_cfg != ck.stft_config:
        raise ValueError(f"STFT config {stft_cfg} does not match the checkpoint's {ck.stft_config}")
    buckets = tuple(float(b) for b in buckets) if buckets else None
    records = manifest.records if split is None else manifest.split(split)
    if not records:
        log.warning("no scenes to evaluate; writing an empty report")
        return EvalReport([], buckets)
    missing = [str(manifest.resolve(p)) for r in records
               for p in ([r.clean] + list((r.files or {}).values()))
               if not manifest.resolve(p).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} referenced audio file(s) missing, first: {missing[0]}")
    hrirs = hrirs or spatial.synth_hrir_set()
    ssn = None
    if any(r.noise_type == "ssn" and not r.files for r in records):
        ssn = ssn_spectrum(manifest, hrirs.sample_rate)
    tasks = [(r, manifest, hrirs, ssn, ck, stft_cfg) for r in records]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_task, tasks))
    else:
        model = ck.build_model()
        results = []
        for r in records:
            clean, noisy = load_scene(r, manifest, hrirs, ssn)
            results.append(evaluate_scene(r.id, clean, noisy, ck, stft_cfg, model))
    return EvalReport(results, buckets)
