"""Command-line front end.

    binse make-corpus  --out corpus --count 60
    binse spatialize   --corpus corpus --out data --count 200 --seed 7
    binse train        --manifest data/manifest.jsonl --out runs --tiny --epochs 20
    binse enhance      --input noisy.wav --checkpoint runs/<run>/best.pt --output enhanced.wav
    binse evaluate     --manifest data/manifest.jsonl --checkpoint best.pt --out report --buckets -6,0,6

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, spatial
from .config import ConfigError, build_config
from .dsp import resample
from .model import BCCTN, identity_checkpoint, load_checkpoint, save_checkpoint, summary
from .wavio import read_wav, write_binaural, write_wav

log = logging.getLogger("binse")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} not found")
    return p


def _hrirs(args, cfg):
    if getattr(args, "hrir_dir", None):
        return spatial.load_hrir_dir(_existing(args.hrir_dir, "HRIR directory"))
    return spatial.synth_hrir_set(cfg.head)


def _config(args, overrides: dict, tiny: bool = False):
    return build_config(getattr(args, "config", None), overrides, tiny=tiny)


def new_run_dir(root, name: str) -> Path:
    """``root/<YYYYmmdd-HHMMSS>_<name>``, with a numeric suffix rather than reuse."""
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}_{name}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


# -- subcommands --------------------------------------------------------------

def cmd_make_corpus(args) -> int:
    from .corpus import write_corpus

    paths = write_corpus(args.out, args.count, seed=args.seed)
    print(f"wrote {len(paths)} utterances to {args.out}")
    return 0


def cmd_spatialize(args) -> int:
    from .training import build_dataset, ssn_spectrum

    cfg = _config(args, {
        "data.count": args.count, "data.noise": args.noise, "data.ratios": args.ratios,
        "data.snr_min": args.snr_range[0] if args.snr_range else None,
        "data.snr_max": args.snr_range[1] if args.snr_range else None,
        "seed": args.seed, "jobs": args.jobs,
    })
    _existing(args.corpus, "corpus directory")
    hrirs = _hrirs(args, cfg)
    d = cfg.data
    manifest = build_dataset(args.corpus, d["count"], d["ratios"], cfg.seed,
                             (d["snr_min"], d["snr_max"]), tuple(d["noise"]), d["duration"],
                             hrirs.sample_rate)
    out = Path(args.out)
    scene_dir = out / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    ssn = ssn_spectrum(manifest, hrirs.sample_rate) if "ssn" in d["noise"] else None
    tasks = [(r, manifest, hrirs, ssn, scene_dir) for r in manifest.records]
    if cfg.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            files = list(pool.map(_write_scene, tasks, chunksize=4))
    else:
        files = [_write_scene(t) for t in tasks]
    for r, f in zip(manifest.records, files):
        r.files = f
    manifest.save(out / "manifest.jsonl")
    cfg.write(out / "config.json")
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} scenes to {out} {counts}")
    return 0


def _write_scene(task) -> dict:
    from .training import render_scene

    record, manifest, hrirs, ssn, scene_dir = task
    scene = render_scene(record, manifest, hrirs, ssn)
    files = {}
    for kind in ("clean", "noise", "noisy"):
        path = scene_dir / f"{record.id}_{kind}.wav"
        write_binaural(path, getattr(scene, kind))
        files[kind] = str(path.resolve())
    return files


def cmd_train(args) -> int:
    from .plotting import plot_history
    from .training import DatasetManifest, train

    manifest_path = _existing(args.manifest, "manifest")
    if args.resume:
        _existing(args.resume, "resume checkpoint")
    cfg = _config(args, {
        "train.epochs": args.epochs, "train.batch_size": args.batch_size,
        "train.initial_lr": args.lr, "train.seed": args.seed, "train.precision": args.precision,
        "train.max_minutes": args.max_minutes, "seed": args.seed, "jobs": args.jobs,
        **_weight_overrides(args.loss_weights),
    }, tiny=args.tiny)
    if cfg.model.n_bins != cfg.stft.n_bins:
        raise ConfigError(f"model.n_bins {cfg.model.n_bins} != STFT bins {cfg.stft.n_bins}")
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.split("train") or not manifest.split("val"):
        raise UsageError("manifest needs train and val scenes")
    hrirs = _hrirs(args, cfg)
    run = Path(args.resume).parent if args.resume else new_run_dir(args.out, args.name)
    cfg.write(run / "config.json")
    (run / "manifest.txt").write_text(str(manifest_path.resolve()) + "\n")
    print(f"run directory {run}", flush=True)
    print(f"model parameters: {sum(p.numel() for p in BCCTN(cfg.model).parameters()):,}", flush=True)
    _, history = train(manifest, cfg.model, cfg.train, stft_cfg=cfg.stft, hrirs=hrirs,
                       out_dir=run, resume=args.resume, jobs=cfg.jobs)
    plot_history(history, run / "history.png")
    best = min(history.val_totals()[1:] or history.val_totals())
    print(f"stopped: {history.stop_reason}; best validation loss {best:.4f}")
    return 0


def _weight_overrides(text) -> dict:
    if text is None:
        return {}
    from .losses import LossWeights

    try:
        w = LossWeights.parse(text)
    except ValueError as exc:
        raise ConfigError(f"--loss-weights: {exc}") from None
    return {"loss.alpha": w.alpha, "loss.beta": w.beta, "loss.gamma": w.gamma, "loss.kappa": w.kappa}


def cmd_enhance(args) -> int:
    from .dsp import BinauralWaveform
    from .training import enhance

    _existing(args.input, "input file")
    ck = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    x, rate = read_wav(args.input)
    if x.ndim != 2 or x.shape[0] != 2:
        raise UsageError(f"{args.input}: enhancement needs a 2-channel (left, right) stereo file")
    model_rate = ck.extra.get("sample_rate", 16000)
    n = x.shape[1]
    if rate != model_rate:
        log.warning("input is %d Hz; resampling to %d Hz and back", rate, model_rate)
        x = resample(x, rate, model_rate)
    out = enhance(BinauralWaveform(x[0], x[1], model_rate), ck).stacked()
    if rate != model_rate:
        out = resample(out, model_rate, rate)
        out = np.pad(out, ((0, 0), (0, max(0, n - out.shape[1]))))[:, :n]
    write_wav(args.output, out, rate, subtype=args.subtype)
    print(f"wrote {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_manifest
    from .plotting import plot_report
    from .training import DatasetManifest

    manifest = DatasetManifest.load(_existing(args.manifest, "manifest"))
    ck = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    cfg = _config(args, {"jobs": args.jobs})
    split = None if args.split == "all" else args.split
    report = evaluate_manifest(manifest, ck, split=split, buckets=args.buckets,
                               hrirs=_hrirs(args, cfg), jobs=cfg.jobs)
    paths = report.write(args.out)
    if args.tsv:
        (Path(args.out) / "report.tsv").write_text(report.csv("\t"))
    if not args.no_plots:
        plot_report(report, args.out)
    print(report.table())
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_summary(args) -> int:
    cfg = _config(args, {}, tiny=args.tiny)
    print(summary(BCCTN(cfg.model)))
    return 0


def cmd_identity(args) -> int:
    cfg = _config(args, {}, tiny=True)
    save_checkpoint(args.out, identity_checkpoint(cfg.model, cfg.stft))
    print(f"wrote {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binse", description="Binaural speech enhancement toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--config", help="JSON file of dotted-key settings")
        if jobs:
            sp.add_argument("--jobs", type=int, default=None, help="worker processes (results do not depend on it)")

    sp = sub.add_parser("make-corpus", help="write a synthetic pseudo-speech corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("spatialize", help="render binaural scenes and a manifest")
    sp.add_argument("--corpus", required=True, help="directory of mono 16 kHz WAVs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--noise", type=_names, help="comma-separated noise types (wgn, ssn)")
    sp.add_argument("--ratios", type=_floats, help="train,val,test proportions")
    sp.add_argument("--snr-range", type=_floats, help="lo,hi target SNR in dB")
    sp.add_argument("--hrir-dir", help="directory of measured IR pairs")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_spatialize)

    sp = sub.add_parser("train", help="train a model on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", default="runs", help="parent directory for run directories")
    sp.add_argument("--name", default="bcctn")
    sp.add_argument("--tiny", action="store_true", help="start from the small desk-scale model")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--precision", choices=("float32", "float64"))
    sp.add_argument("--max-minutes", type=float)
    sp.add_argument("--loss-weights", help="alpha,beta,gamma,kappa; 1,0,0,0 trains on SNR only")
    sp.add_argument("--resume", help="last.pt of an interrupted run")
    sp.add_argument("--hrir-dir")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("enhance", help="enhance a stereo WAV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--subtype", choices=("float", "pcm16"), default="float")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    sp.add_argument("--buckets", type=_floats, help="input-SNR bucket centres, e.g. -6,0,6")
    sp.add_argument("--tsv", action="store_true", help="also write report.tsv")
    sp.add_argument("--no-plots", action="store_true")
    sp.add_argument("--hrir-dir")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("summary", help="print the model layer table")
    sp.add_argument("--tiny", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_summary)

    sp = sub.add_parser("identity-checkpoint", help="write a debug checkpoint whose masks are all 1")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_identity)
    return p


_NUMERIC_LIST_FLAGS = ("--buckets", "--snr-range")


def _join_numeric_lists(argv: list[str]) -> list[str]:
    # "--buckets -6,0,6" would otherwise read -6,0,6 as an option
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _NUMERIC_LIST_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_numeric_lists(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
