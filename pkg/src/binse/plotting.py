"""Figures for reports and training runs, written straight to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import cues  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_report(report, out_dir, stem: str = "report") -> list[Path]:
    """Bar charts of the bucket aggregates, plus a per-utterance scatter."""
    rows = report.aggregates()
    out = []
    with plt.rc_context(STYLE):
        labels = [r["bucket"] for r in rows]
        x = np.arange(len(rows))
        fig, axes = plt.subplots(1, 4, figsize=(11, 2.8))
        ax = axes[0]
        ax.bar(x - 0.2, [r["stoi_noisy"] for r in rows], 0.4, label="noisy", color="0.7")
        ax.bar(x + 0.2, [r["stoi_enhanced"] for r in rows], 0.4, label="enhanced", color="C0")
        ax.set_title("better-ear STOI")
        ax.legend(frameon=False)
        for ax, key, title in zip(axes[1:], ("delta_fw_segsnr", "ild_err", "ipd_err"),
                                  ("fwSegSNR gain (dB)", "ILD error (dB)", "IPD error (deg)")):
            ax.bar(x, [r[key] for r in rows], 0.6, color="C0")
            ax.set_title(title)
        for ax in axes:
            ax.set_xticks(x, labels, rotation=30)
        fig.tight_layout()
        out.append(_save(fig, Path(out_dir) / f"{stem}_buckets.png"))

        recs = report.records
        fig, ax = plt.subplots(figsize=(4.5, 3))
        if recs:
            snr = [r.input_snr for r in recs]
            ax.scatter(snr, [r.delta_fw_segsnr for r in recs], s=10, color="C0")
        ax.axhline(0, color="0.5", lw=0.8)
        ax.set_xlabel("input SNR (dB)")
        ax.set_ylabel("fwSegSNR gain (dB)")
        out.append(_save(fig, Path(out_dir) / f"{stem}_scatter.png"))
    return out


def plot_history(history, path) -> Path:
    """Validation (and training) loss per epoch and the learning rate trace."""
    epochs = [e.epoch for e in history.epochs]
    with plt.rc_context(STYLE):
        fig, (a1, a2, a3) = plt.subplots(1, 3, figsize=(11, 2.8))
        a1.plot(epochs, [e.val["total"] for e in history.epochs], "o-", label="val")
        tr = [(e.epoch, e.train["total"]) for e in history.epochs if e.train]
        if tr:
            a1.plot(*zip(*tr), "s--", label="train")
        a1.set_xlabel("epoch")
        a1.set_title("composite loss")
        a1.legend(frameon=False)
        for key in ("snr_term", "stoi_term", "ild_term", "ipd_term"):
            a2.plot(epochs, [e.val[key] for e in history.epochs], label=key.replace("_term", ""))
        a2.set_xlabel("epoch")
        a2.set_title("validation terms (unweighted)")
        a2.legend(frameon=False)
        a3.semilogy(epochs, [e.lr for e in history.epochs], "o-")
        a3.set_xlabel("epoch")
        a3.set_title("learning rate")
        fig.suptitle(f"stop reason: {history.stop_reason or 'running'}")
        fig.tight_layout()
        return _save(fig, path)


def plot_cue_maps(clean_spec, enh_spec, path, threshold_db: float = cues.DEFAULT_THRESHOLD_DB,
                  hop_seconds: float = 100 / 16000, sr: int = 16000) -> Path:
    """Joint IBM and clean/enhanced ILD and IPD maps for one binaural spectrogram pair."""
    cs = np.asarray(clean_spec)
    es = np.asarray(enh_spec)
    mask = cues.joint_ibm(cs[0], cs[1], threshold_db)
    maps = [
        ("joint IBM", mask, "gray_r", (0, 1)),
        ("clean ILD (dB)", cues.ild_map(cs[0], cs[1]), "RdBu_r", (-20, 20)),
        ("enhanced ILD (dB)", cues.ild_map(es[0], es[1]), "RdBu_r", (-20, 20)),
        ("clean IPD (rad)", cues.ipd_map(cs[0], cs[1]), "twilight", (-np.pi, np.pi)),
        ("enhanced IPD (rad)", cues.ipd_map(es[0], es[1]), "twilight", (-np.pi, np.pi)),
    ]
    k, n = cs.shape[-2:]
    extent = (0, n * hop_seconds, 0, sr / 2000)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(maps), figsize=(14, 2.6), sharey=True)
        for ax, (title, m, cmap, lim) in zip(axes, maps):
            im = ax.imshow(m, origin="lower", aspect="auto", cmap=cmap, vmin=lim[0], vmax=lim[1],
                           extent=extent, interpolation="nearest")
            ax.set_title(title)
            ax.set_xlabel("time (s)")
            fig.colorbar(im, ax=ax, fraction=0.046)
        axes[0].set_ylabel("frequency (kHz)")
        fig.tight_layout()
        return _save(fig, path)
