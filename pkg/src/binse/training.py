"""Dataset assembly, the optimisation loop and inference.

A dataset manifest lists scenes: a clean source file, a crop offset, a
target azimuth, an isotropic noise type with its seed and a target SNR.
Scenes are rendered on demand (or read back from WAVs written by the
``spatialize`` command) so the manifest alone pins the data.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import spatial
from .dsp import DEFAULT_SAMPLE_RATE, BinauralWaveform, StftConfig, istft, stft
from .losses import LossBreakdown, LossWeights, composite_loss
from .model import (BCCTN, TINY_CONFIG, Checkpoint, ModelConfig, load_checkpoint,
                    save_checkpoint)
from .wavio import read_binaural, read_mono

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TRAIN_SNR_RANGE = (-7.0, 16.0)
AZIMUTH_STEP = 5
CROP_SECONDS = 2.0
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class SceneRecord:
    id: str
    split: str
    clean: str
    offset: int
    azimuth: float
    noise_type: str
    noise_seed: int
    snr_db: float
    duration: float = CROP_SECONDS
    files: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["files"] is None:
            del d["files"]
        return d


@dataclass
class DatasetManifest:
    """Scene records; relative paths resolve against ``root``."""

    records: list[SceneRecord]
    root: Path = Path(".")

    def split(self, name: str) -> list[SceneRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def save(self, path) -> None:
        """JSON Lines, one record per scene, paths relative to the file's directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        lines = []
        for r in self.records:
            d = r.to_dict()
            d["clean"] = _relative(self.resolve(r.clean), base)
            if r.files:
                d["files"] = {k: _relative(self.resolve(v), base) for k, v in r.files.items()}
            lines.append(json.dumps(d, sort_keys=True))
        path.write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        for i, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(SceneRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{i}: bad manifest record ({exc})") from None
        return cls(records, path.parent.resolve())


def _relative(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p.resolve(), base)).as_posix()


def _split_counts(total: int, ratios) -> list[int]:
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError(f"split ratios must be three nonnegative numbers, got {list(ratios)}")
    share = ratios / ratios.sum()
    counts = [0, int(round(total * share[1])), int(round(total * share[2]))]
    counts[0] = total - counts[1] - counts[2]
    return counts


def _split_sources(files: list[Path], ratios, rng: np.random.Generator) -> list[list[Path]]:
    """Disjoint source pools per split, each nonzero split getting at least one file."""
    active = [i for i, r in enumerate(ratios) if r > 0]
    if len(files) < len(active):
        raise ValueError(f"corpus has {len(files)} files, need at least one per split ({len(active)})")
    order = [files[i] for i in rng.permutation(len(files))]
    counts = _split_counts(len(files), ratios)
    for i in active:
        if counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] = 1
    pools, start = [], 0
    for c in counts:
        pools.append(order[start:start + c])
        start += c
    return pools


def corpus_files(corpus_dir) -> list[Path]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    files = sorted(p for p in root.rglob("*.wav"))
    if not files:
        raise ValueError(f"no .wav files in {root}")
    return files


def build_dataset(corpus_dir, count: int, ratios=(8, 1, 1), seed: int = 0,
                  snr_range=TRAIN_SNR_RANGE, noise_types=("wgn", "ssn"),
                  duration: float = CROP_SECONDS, sr: int = DEFAULT_SAMPLE_RATE,
                  azimuth_range=(-90, 90)) -> DatasetManifest:
    """Draw ``count`` scenes from a directory of mono utterances.

    Splits never share a source file.  Azimuths are uniform on a 5 degree
    grid, SNRs uniform on ``snr_range`` (rounded to 0.01 dB).
    """
    if count < 1:
        raise ValueError("count must be positive")
    lo, hi = snr_range
    if lo > hi:
        raise ValueError(f"empty SNR range {snr_range}")
    for t in noise_types:
        if t not in ("wgn", "ssn"):
            raise ValueError(f"noise type {t!r} cannot be synthesised from a manifest")
    root = Path(corpus_dir).resolve()
    files = corpus_files(root)
    rng = np.random.default_rng(seed)
    pools = _split_sources(files, ratios, rng)
    n_crop = int(round(duration * sr))
    lengths = {}
    azimuths = np.arange(azimuth_range[0], azimuth_range[1] + 1, AZIMUTH_STEP)
    records = []
    for split, pool, n in zip(SPLITS, pools, _split_counts(count, ratios)):
        if n and not pool:
            raise ValueError(f"no source files left for the {split} split")
        order = [pool[i] for i in rng.permutation(len(pool))] if pool else []
        for i in range(n):
            src = order[i % len(order)]
            if src not in lengths:
                x, rate = read_mono(src)
                if rate != sr:
                    raise ValueError(f"{src}: sample rate {rate}, expected {sr}")
                lengths[src] = len(x)
            slack = lengths[src] - n_crop
            records.append(SceneRecord(
                id=f"{split}_{i:05d}",
                split=split,
                clean=str(src),
                offset=int(rng.integers(0, slack + 1)) if slack > 0 else 0,
                azimuth=float(rng.choice(azimuths)),
                noise_type=str(noise_types[int(rng.integers(len(noise_types)))]),
                noise_seed=int(rng.integers(2**31)),
                snr_db=round(float(rng.uniform(lo, hi)), 2),
                duration=duration,
            ))
    return DatasetManifest(records, root)


@dataclass
class Scene:
    clean: BinauralWaveform
    noise: BinauralWaveform
    noisy: BinauralWaveform
    snr_left: float
    snr_right: float

    @property
    def input_snr(self) -> float:
        return 0.5 * (self.snr_left + self.snr_right)


def ssn_spectrum(manifest: DatasetManifest, sr: int = DEFAULT_SAMPLE_RATE):
    """Long-term speech spectrum of the training sources (all sources if no train split)."""
    recs = manifest.split("train") or manifest.records
    refs = []
    for path in sorted({r.clean for r in recs}):
        x, _ = read_mono(manifest.resolve(path))
        refs.append(x)
    return spatial.speech_spectrum(refs, sr)


def load_clean(record: SceneRecord, manifest: DatasetManifest, sr: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    x, rate = read_mono(manifest.resolve(record.clean))
    if rate != sr:
        raise ValueError(f"{record.clean}: sample rate {rate}, expected {sr}")
    n = int(round(record.duration * sr))
    x = x[record.offset: record.offset + n]
    return np.pad(x, (0, n - len(x)))


def render_scene(record: SceneRecord, manifest: DatasetManifest, hrirs: spatial.HrirSet,
                 ssn=None) -> Scene:
    """Spatialised clean speech plus scaled isotropic noise at the record's SNR."""
    sr = hrirs.sample_rate
    mono = load_clean(record, manifest, sr)
    clean = spatial.spatialize(mono, record.azimuth, hrirs)
    noise = spatial.isotropic_noise(record.duration, record.noise_type, hrirs, record.noise_seed,
                                    ssn_spectrum=ssn)
    noisy, snr_l, snr_r = spatial.mix_at_snr(clean, noise, record.snr_db)
    gain = np.sqrt(np.sum((noisy.left - clean.left) ** 2) / np.sum(noise.left**2))
    return Scene(clean, noise.scaled(gain), noisy, snr_l, snr_r)


def load_scene(record: SceneRecord, manifest: DatasetManifest, hrirs: spatial.HrirSet,
               ssn=None) -> tuple[BinauralWaveform, BinauralWaveform]:
    """``(clean, noisy)`` from the record's WAV files when present, else rendered."""
    if record.files:
        try:
            return (read_binaural(manifest.resolve(record.files["clean"])),
                    read_binaural(manifest.resolve(record.files["noisy"])))
        except KeyError:
            raise ValueError(f"{record.id}: files entry needs 'clean' and 'noisy'") from None
    scene = render_scene(record, manifest, hrirs, ssn)
    return scene.clean, scene.noisy


def _render_pair(args):
    record, manifest, hrirs, ssn = args
    clean, noisy = load_scene(record, manifest, hrirs, ssn)
    return clean.stacked(), noisy.stacked()


def load_scenes(records, manifest: DatasetManifest, hrirs: spatial.HrirSet, ssn=None,
                jobs: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(clean, noisy)`` arrays ``(2, n)`` for each record, in order; ``jobs`` only changes speed."""
    tasks = [(r, manifest, hrirs, ssn) for r in records]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_render_pair, tasks, chunksize=4))
    return [_render_pair(t) for t in tasks]


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    initial_lr: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 1
    early_stop_patience: int = 3
    batch_size: int = 8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    precision: str = "float32"
    grad_clip: float = 5.0
    max_minutes: float | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, str):
            self.loss_weights = LossWeights.parse(self.loss_weights)
        elif isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        elif isinstance(self.loss_weights, (list, tuple)):
            self.loss_weights = LossWeights(*self.loss_weights)
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be at least 1")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    val: dict
    train: dict | None = None
    lr: float = 0.0
    best_val: float = math.inf
    seconds: float = 0.0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""

    def val_totals(self) -> list[float]:
        return [e.val["total"] for e in self.epochs]

    def lr_trace(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def to_dict(self) -> dict:
        epochs = []
        for e in self.epochs:
            d = asdict(e)
            # strict JSON has no infinity; epoch 0 has no best yet
            d["best_val"] = d["best_val"] if math.isfinite(d["best_val"]) else None
            epochs.append(d)
        return {"epochs": epochs, "stop_reason": self.stop_reason}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        epochs = []
        for e in d["epochs"]:
            e = dict(e)
            if e.get("best_val") is None:
                e["best_val"] = math.inf
            epochs.append(EpochRecord(**e))
        return cls(epochs, d.get("stop_reason", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TrainHistory":
        return cls.from_dict(json.loads(Path(path).read_text()))


class TrainingDiverged(RuntimeError):
    pass


def _batches(n: int, size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def _stack(pairs, idx, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    clean = torch.as_tensor(np.stack([pairs[i][0] for i in idx]), dtype=dtype)
    noisy = torch.as_tensor(np.stack([pairs[i][1] for i in idx]), dtype=dtype)
    return clean, noisy


def _mean_breakdown(parts: list[tuple[LossBreakdown, int]]) -> dict:
    total = sum(n for _, n in parts)
    keys = parts[0][0].to_dict().keys()
    return {k: sum(b.to_dict()[k] * n for b, n in parts) / total for k in keys}


def _loss(model, clean, noisy, weights, stft_cfg, sr) -> LossBreakdown:
    spec = stft(noisy, stft_cfg)
    enh = spec * model(spec)
    return composite_loss(clean, enh, weights, stft_cfg, sr)


def validate(model: BCCTN, pairs, weights: LossWeights, stft_cfg: StftConfig = StftConfig(),
             batch_size: int = 8, dtype=torch.float32, sr: int = DEFAULT_SAMPLE_RATE) -> dict:
    """Mean loss breakdown over ``pairs`` in eval mode."""
    model.eval()
    parts = []
    with torch.no_grad():
        for idx in _batches(len(pairs), batch_size):
            clean, noisy = _stack(pairs, idx, dtype)
            parts.append((_loss(model, clean, noisy, weights, stft_cfg, sr), len(idx)))
    return _mean_breakdown(parts)


def train(manifest: DatasetManifest, model_cfg: ModelConfig | None = None,
          train_cfg: TrainConfig | None = None, *, stft_cfg: StftConfig = StftConfig(),
          hrirs: spatial.HrirSet | None = None, out_dir=None, resume=None,
          scenes: dict | None = None, jobs: int = 1) -> tuple[Checkpoint, TrainHistory]:
    """Fit a model on the manifest's train split, selecting on validation loss.

    Epoch 0 is the validation loss of the initial weights.  With ``out_dir``
    the best and last checkpoints, ``history.json`` and a per-step
    ``steps.jsonl`` are written there.  ``resume`` is a path to a ``last``
    checkpoint from an earlier run with the same configuration.  ``scenes``
    may supply pre-rendered ``{"train": pairs, "val": pairs}``.
    """
    model_cfg = model_cfg or ModelConfig(**TINY_CONFIG)
    train_cfg = train_cfg or TrainConfig()
    hrirs = hrirs or spatial.synth_hrir_set()
    sr = hrirs.sample_rate
    if model_cfg.n_bins != stft_cfg.n_bins:
        raise ValueError(f"model expects {model_cfg.n_bins} bins, STFT gives {stft_cfg.n_bins}")
    train_recs, val_recs = manifest.split("train"), manifest.split("val")
    if not train_recs or not val_recs:
        raise ValueError("manifest needs nonempty train and val splits")
    if scenes is None:
        ssn = ssn_spectrum(manifest, sr)
        scenes = {"train": load_scenes(train_recs, manifest, hrirs, ssn, jobs),
                  "val": load_scenes(val_recs, manifest, hrirs, ssn, jobs)}
    train_pairs, val_pairs = scenes["train"], scenes["val"]

    dtype = train_cfg.dtype
    weights = train_cfg.loss_weights
    torch.manual_seed(train_cfg.seed)
    model = BCCTN(model_cfg).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.initial_lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=train_cfg.lr_factor, patience=train_cfg.lr_patience - 1,
        threshold=0.0, threshold_mode="abs")
    history = TrainHistory()
    best_state, best_val, bad_epochs, start = None, math.inf, 0, 1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(state, epoch, best, with_opt=False) -> Checkpoint:
        extra = {"train_config": train_cfg.to_dict(), "history": history.to_dict(),
                 "bad_epochs": bad_epochs, "sample_rate": sr}
        return Checkpoint(model_cfg, state, stft_cfg, epoch, best,
                          opt.state_dict() if with_opt else None,
                          sched.state_dict() if with_opt else None, extra)

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model_config != model_cfg:
            raise ValueError("resume checkpoint has a different model configuration")
        if ck.optimizer is None:
            raise ValueError("resume needs a checkpoint with optimizer state (the 'last' one)")
        model.load_state_dict(ck.state_dict)
        opt.load_state_dict(ck.optimizer)
        sched.load_state_dict(ck.scheduler)
        history = TrainHistory.from_dict(ck.extra["history"])
        bad_epochs = ck.extra["bad_epochs"]
        best_val = ck.best_val
        start = ck.epoch + 1
        best_path = Path(resume).with_name("best.pt")
        best_state = (load_checkpoint(best_path).state_dict if best_path.exists()
                      else copy.deepcopy(model.state_dict()))
        if history.stop_reason and history.stop_reason != "completed":
            log.warning("resuming a run that stopped with %r", history.stop_reason)
        history.stop_reason = ""
    else:
        t0 = time.perf_counter()
        val = validate(model, val_pairs, weights, stft_cfg, train_cfg.batch_size, dtype, sr)
        history.epochs.append(EpochRecord(0, val, None, train_cfg.initial_lr, math.inf,
                                          time.perf_counter() - t0))
        log.info("epoch 0 val %.4f", val["total"])

    step_log = open(out_dir / "steps.jsonl", "a") if out_dir is not None else None
    began = time.perf_counter()
    reason = "completed"
    try:
        for epoch in range(start, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_pairs))
            parts = []
            for step, idx in enumerate(_batches(len(train_pairs), train_cfg.batch_size, order)):
                clean, noisy = _stack(train_pairs, idx, dtype)
                b = _loss(model, clean, noisy, weights, stft_cfg, sr)
                if not torch.isfinite(b.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}: {b.to_dict()}")
                opt.zero_grad()
                b.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                parts.append((b, len(idx)))
                if step_log is not None:
                    step_log.write(json.dumps({"epoch": epoch, "step": step,
                                               "lr": opt.param_groups[0]["lr"], **b.to_dict()}) + "\n")
                    step_log.flush()
            train_stats = _mean_breakdown(parts)
            val = validate(model, val_pairs, weights, stft_cfg, train_cfg.batch_size, dtype, sr)
            if not math.isfinite(val["total"]):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}: {val}")
            lr = opt.param_groups[0]["lr"]
            sched.step(val["total"])
            if val["total"] < best_val:
                best_val, bad_epochs = val["total"], 0
                best_state = copy.deepcopy(model.state_dict())
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.pt", checkpoint(best_state, epoch, best_val))
            else:
                bad_epochs += 1
            history.epochs.append(EpochRecord(epoch, val, train_stats, lr, best_val,
                                              time.perf_counter() - t0))
            log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_stats["total"],
                     val["total"], lr)
            if bad_epochs >= train_cfg.early_stop_patience:
                reason = "early_stop"
            elif (train_cfg.max_minutes is not None
                  and time.perf_counter() - began > 60 * train_cfg.max_minutes):
                reason = "time_limit"
            if out_dir is not None:
                if reason != "completed":
                    history.stop_reason = reason
                save_checkpoint(out_dir / "last.pt", checkpoint(model.state_dict(), epoch, best_val, True))
                history.save(out_dir / "history.json")
            if reason != "completed":
                break
    finally:
        if step_log is not None:
            step_log.close()

    history.stop_reason = reason
    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())
    last_epoch = history.epochs[-1].epoch
    best = checkpoint(best_state, last_epoch, best_val)
    if out_dir is not None:
        history.save(out_dir / "history.json")
        if not (out_dir / "best.pt").exists():
            save_checkpoint(out_dir / "best.pt", best)
    return best, history


# -- inference ----------------------------------------------------------------

def _as_checkpoint(checkpoint) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def enhance(noisy: BinauralWaveform, checkpoint, stft_cfg: StftConfig | None = None,
            model: BCCTN | None = None) -> BinauralWaveform:
    """Mask both ears with the checkpoint's model; output length equals input length."""
    ck = _as_checkpoint(checkpoint)
    stft_cfg = stft_cfg or ck.stft_config
    if stft_cfg != ck.stft_config:
        raise ValueError(f"STFT config {stft_cfg} does not match the checkpoint's {ck.stft_config}")
    rate = ck.extra.get("sample_rate", DEFAULT_SAMPLE_RATE)
    if noisy.sample_rate != rate:
        raise ValueError(f"input rate {noisy.sample_rate} Hz, model expects {rate} Hz")
    model = model or ck.build_model()
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(noisy.stacked(), dtype=torch.float64)
    spec = stft(x, stft_cfg)
    with torch.no_grad():
        mask = model(spec.to(dtype.to_complex()).unsqueeze(0))[0].to(torch.complex128)
    out = istft(spec * mask, stft_cfg, len(noisy)).numpy()
    return BinauralWaveform(out[0], out[1], noisy.sample_rate)
