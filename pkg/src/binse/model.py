"""Binaural complex convolutional transformer network.

Per-ear complex encoders, a complex attention block shared by both ears,
and per-ear complex transposed-convolution decoders with skip connections.
The network maps the two noisy spectrograms to one complex ratio mask per
ear.  Layer inputs and outputs are torch complex tensors shaped
``(batch, channels, freq, time)``; inside the network the real and
imaginary parts travel stacked along the channel axis, which lets each
complex convolution run as a single real one.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .dsp import StftConfig

CHECKPOINT_VERSION = "binse-ckpt-1"


@dataclass
class ModelConfig:
    encoder_channels: tuple = (16, 32, 64, 128, 256, 256)
    kernel: tuple = (5, 1)
    stride: tuple = (2, 1)
    embed_dim: int = 512
    attn_hidden: int = 128
    attn_heads: int = 32
    post_linear_features: int = 1024
    causal: bool = True
    mask_magnitude_clamp: float | None = None
    n_bins: int = 257
    mask_init: str = "identity"

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        if not self.encoder_channels:
            raise ValueError("need at least one encoder layer")
        if self.embed_dim % self.attn_heads:
            raise ValueError(f"{self.attn_heads} heads do not divide embed_dim {self.embed_dim}")
        if self.mask_init not in ("identity", "random"):
            raise ValueError(f"mask_init must be 'identity' or 'random', got {self.mask_init!r}")
        if self.post_linear_features != 2 * self.embed_dim:
            raise ValueError("post_linear_features must equal 2 * embed_dim (real and imaginary parts)")
        self.freq_plan()

    def freq_plan(self) -> list[int]:
        """Frequency size after each encoder layer, starting with the input size."""
        k, s = self.kernel[0], self.stride[0]
        pad = k // 2
        plan = [self.n_bins]
        for _ in self.encoder_channels:
            f = (plan[-1] + 2 * pad - k) // s + 1
            if f < 1:
                raise ValueError(f"frequency axis exhausted: plan {plan}")
            plan.append(f)
        for f_in, f_out in zip(plan[:0:-1], plan[-2::-1]):
            extra = f_out - ((f_in - 1) * s - 2 * pad + k)
            if not 0 <= extra < s:
                raise ValueError(f"decoder cannot restore {f_out} bins from {f_in}")
        return plan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["kernel"] = list(self.kernel)
        d["stride"] = list(self.stride)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


TINY_CONFIG = dict(encoder_channels=(4, 8, 8), embed_dim=64, attn_heads=4, attn_hidden=64,
                   post_linear_features=128)


def complex_conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   stride=(1, 1), freq_pad: int = 0, causal_pad: int = 0) -> torch.Tensor:
    """Complex convolution from real convolutions of the parts.

    ``weight`` and ``bias`` are complex.  Time is padded on the left only.
    """
    x = F.pad(x, (causal_pad, 0, freq_pad, freq_pad))
    wr, wi = weight.real.contiguous(), weight.imag.contiguous()
    xr, xi = x.real, x.imag
    yr = F.conv2d(xr, wr, stride=stride) - F.conv2d(xi, wi, stride=stride)
    yi = F.conv2d(xi, wr, stride=stride) + F.conv2d(xr, wi, stride=stride)
    if bias is not None:
        yr = yr + bias.real.reshape(1, -1, 1, 1)
        yi = yi + bias.imag.reshape(1, -1, 1, 1)
    return torch.complex(yr, yi)


def to_stacked(x: torch.Tensor) -> torch.Tensor:
    """Complex ``(B, C, ...)`` to real ``(B, 2C, ...)``, real parts first."""
    return torch.cat([x.real, x.imag], dim=1)


def from_stacked(x: torch.Tensor) -> torch.Tensor:
    c = x.shape[1] // 2
    return torch.complex(x[:, :c], x[:, c:])


class ComplexConv2d(nn.Module):
    """Complex convolution; ``real`` and ``imag`` hold the two weight parts.

    Internally one real convolution on stacked parts with the block weight
    ``[[Wr, -Wi], [Wi, Wr]]``.
    """

    def __init__(self, cin: int, cout: int, kernel=(5, 1), stride=(2, 1), causal: bool = True):
        super().__init__()
        self.kernel, self.stride, self.causal = tuple(kernel), tuple(stride), causal
        self.real = nn.Conv2d(cin, cout, kernel, stride)
        self.imag = nn.Conv2d(cin, cout, kernel, stride)

    def complex_weight(self):
        w = torch.complex(self.real.weight, self.imag.weight)
        b = torch.complex(self.real.bias - self.imag.bias, self.real.bias + self.imag.bias)
        return w, b

    def forward_stacked(self, x: torch.Tensor) -> torch.Tensor:
        wr, wi = self.real.weight, self.imag.weight
        w = torch.cat([torch.cat([wr, -wi], 1), torch.cat([wi, wr], 1)], 0)
        br, bi = self.real.bias, self.imag.bias
        b = torch.cat([br - bi, br + bi])
        kt = self.kernel[1]
        left = kt - 1 if self.causal else (kt - 1) // 2
        x = F.pad(x, (left, kt - 1 - left, self.kernel[0] // 2, self.kernel[0] // 2))
        return F.conv2d(x, w, b, self.stride)

    def forward(self, x):
        return from_stacked(self.forward_stacked(to_stacked(x)))


class ComplexConvTranspose2d(nn.Module):
    def __init__(self, cin: int, cout: int, kernel=(5, 1), stride=(2, 1), output_padding: int = 0,
                 causal: bool = True):
        super().__init__()
        self.kernel, self.stride = tuple(kernel), tuple(stride)
        self.padding = (self.kernel[0] // 2, 0)
        self.output_padding = (output_padding, 0)
        self.real = nn.ConvTranspose2d(cin, cout, kernel, stride, self.padding, self.output_padding)
        self.imag = nn.ConvTranspose2d(cin, cout, kernel, stride, self.padding, self.output_padding)
        self.causal = causal

    def complex_weight(self):
        w = torch.complex(self.real.weight, self.imag.weight)
        b = torch.complex(self.real.bias - self.imag.bias, self.real.bias + self.imag.bias)
        return w, b

    def forward_stacked(self, x: torch.Tensor) -> torch.Tensor:
        wr, wi = self.real.weight, self.imag.weight  # (cin, cout, kf, kt)
        w = torch.cat([torch.cat([wr, wi], 1), torch.cat([-wi, wr], 1)], 0)
        br, bi = self.real.bias, self.imag.bias
        b = torch.cat([br - bi, br + bi])
        y = F.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
        extra = self.kernel[1] - 1
        if extra:
            # causal: drop trailing frames so output t only sees inputs <= t
            lo = 0 if self.causal else extra // 2
            y = y[..., lo: y.shape[-1] - (extra - lo)]
        return y

    def forward(self, x):
        return from_stacked(self.forward_stacked(to_stacked(x)))


class ComplexBatchNorm2d(nn.Module):
    """Independent batch norm on the real and imaginary parts.

    A single ``BatchNorm2d`` over the stacked ``2C`` channels keeps separate
    statistics per part and channel.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(2 * channels)

    def forward_stacked(self, x):
        return self.bn(x)

    def forward(self, x):
        return from_stacked(self.bn(to_stacked(x)))


class ComplexPReLU(nn.Module):
    """PReLU with separate learnable slopes for the real and imaginary parts."""

    def __init__(self, channels: int = 1):
        super().__init__()
        self.act = nn.PReLU(2 * channels)

    def forward_stacked(self, x):
        return self.act(x)

    def forward(self, x):
        return from_stacked(self.act(to_stacked(x)))


class ComplexBlock(nn.Module):
    def __init__(self, conv: nn.Module, channels: int | None):
        super().__init__()
        self.conv = conv
        self.norm = ComplexBatchNorm2d(channels) if channels else None
        self.act = ComplexPReLU(channels) if channels else None

    def forward_stacked(self, x):
        x = self.conv.forward_stacked(x)
        if self.norm is not None:
            x = self.act.forward_stacked(self.norm.forward_stacked(x))
        return x

    def forward(self, x):
        return from_stacked(self.forward_stacked(to_stacked(x)))


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


class ComplexTransformerBlock(nn.Module):
    """Attention over time frames on complex features.

    With ``A (*) B`` = multi-head attention (query A, key and value B)::

        real = Hr (*) Hr - Hi (*) Hi
        imag = Hr (*) Hi + Hi (*) Hr

    followed by a per-part feed-forward layer (residual) and a linear layer
    on the concatenated real and imaginary parts.
    """

    def __init__(self, embed_dim: int, heads: int, hidden: int, causal: bool = True):
        super().__init__()
        self.attn = nn.MultiheadAttention(embed_dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim))
        self.linear = nn.Linear(2 * embed_dim, 2 * embed_dim)
        self.causal = causal

    def mha(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """``a (*) b`` for real sequences ``(batch, time, embed)``."""
        mask = causal_mask(a.shape[1], a.device) if self.causal else None
        out, _ = self.attn(a, b, b, attn_mask=mask, need_weights=False)
        return out

    def attend(self, h: torch.Tensor) -> torch.Tensor:
        hr, hi = h.real, h.imag
        real = self.mha(hr, hr) - self.mha(hi, hi)
        imag = self.mha(hr, hi) + self.mha(hi, hr)
        return torch.complex(real, imag)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = self.attend(h)
        hr = h.real + self.ffn(h.real)
        hi = h.imag + self.ffn(h.imag)
        out = self.linear(torch.cat([hr, hi], dim=-1))
        d = hr.shape[-1]
        return torch.complex(out[..., :d], out[..., d:])


class BCCTN(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        chans = cfg.encoder_channels
        plan = cfg.freq_plan()
        self.freq_plan = plan
        k, s = cfg.kernel, cfg.stride

        def encoder():
            layers = []
            cin = 1
            for c in chans:
                layers.append(ComplexBlock(ComplexConv2d(cin, c, k, s, cfg.causal), c))
                cin = c
            return nn.ModuleList(layers)

        def decoder():
            layers = []
            for i in reversed(range(len(chans))):
                cout = chans[i - 1] if i > 0 else 1
                f_in, f_out = plan[i + 1], plan[i]
                extra = f_out - ((f_in - 1) * s[0] - 2 * (k[0] // 2) + k[0])
                conv = ComplexConvTranspose2d(2 * chans[i], cout, k, s, extra, cfg.causal)
                layers.append(ComplexBlock(conv, cout if i > 0 else None))
            return nn.ModuleList(layers)

        self.encoders = nn.ModuleList([encoder(), encoder()])
        self.decoders = nn.ModuleList([decoder(), decoder()])
        self.bottleneck = chans[-1] * plan[-1]
        self.pre = nn.Linear(2 * self.bottleneck, cfg.embed_dim)
        self.transformer = ComplexTransformerBlock(cfg.embed_dim, cfg.attn_heads, cfg.attn_hidden, cfg.causal)
        self.post = nn.Linear(cfg.embed_dim, 2 * self.bottleneck)
        if cfg.mask_init == "identity":
            set_identity_mask(self)

    def forward(self, noisy: torch.Tensor) -> torch.Tensor:
        """Masks ``(B, 2, K, L)`` for noisy spectrograms ``(B, 2, K, L)`` (left, right)."""
        if noisy.dim() == 3:
            return self.forward(noisy.unsqueeze(0)).squeeze(0)
        if noisy.shape[-3] != 2 or noisy.shape[-2] != self.cfg.n_bins:
            raise ValueError(f"expected (B, 2, {self.cfg.n_bins}, L) input, got {tuple(noisy.shape)}")
        if not noisy.is_complex():
            raise ValueError("input spectrogram must be complex")
        batch, _, _, frames = noisy.shape
        c_last, f_last = self.cfg.encoder_channels[-1], self.freq_plan[-1]
        skips, reals, imags = [], [], []
        for ear in range(2):
            x = to_stacked(noisy[:, ear: ear + 1])
            ear_skips = []
            for layer in self.encoders[ear]:
                x = layer.forward_stacked(x)
                ear_skips.append(x)
            skips.append(ear_skips)
            reals.append(x[:, :c_last])
            imags.append(x[:, c_last:])

        def to_seq(parts):
            # (B, C, F, T) per ear -> (B, T, 2CF)
            return torch.cat(parts, dim=1).permute(0, 3, 1, 2).reshape(batch, frames, -1)

        h = torch.complex(self.pre(to_seq(reals)), self.pre(to_seq(imags)))
        h = self.transformer(h)
        hr, hi = self.post(h.real), self.post(h.imag)

        def from_seq(v):
            return v.reshape(batch, frames, 2, c_last, f_last).permute(0, 2, 3, 4, 1)

        hr, hi = from_seq(hr), from_seq(hi)
        masks = []
        for ear in range(2):
            x = torch.cat([hr[:, ear], hi[:, ear]], dim=1)
            for layer, skip in zip(self.decoders[ear], reversed(skips[ear])):
                c = x.shape[1] // 2
                cs = skip.shape[1] // 2
                # concatenate channels within each part
                x = torch.cat([x[:, :c], skip[:, :cs], x[:, c:], skip[:, cs:]], dim=1)
                x = layer.forward_stacked(x)
            masks.append(torch.complex(x[:, 0], x[:, 1]))
        mask = torch.stack(masks, dim=1)
        limit = self.cfg.mask_magnitude_clamp
        if limit is not None:
            mag = mask.abs().clamp_min(1e-12)
            mask = mask * (limit / mag).clamp(max=1.0)
        return mask

    def enhance_spec(self, noisy: torch.Tensor) -> torch.Tensor:
        return noisy * self(noisy)

    def final_layers(self):
        return [dec[-1].conv for dec in self.decoders]


def bcctn_forward(noisy_left: torch.Tensor, noisy_right: torch.Tensor, model: BCCTN):
    """Per-ear masks for single-utterance spectrograms ``(K, L)``."""
    if noisy_left.shape != noisy_right.shape:
        raise ValueError("left and right spectrograms differ in shape")
    masks = model(torch.stack([noisy_left, noisy_right]).unsqueeze(0))[0]
    return masks[0], masks[1]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def summary(model: nn.Module) -> str:
    """Layer table: module name, parameter shapes, parameter count."""
    rows = []
    for name, mod in model.named_modules():
        params = list(mod.named_parameters(recurse=False))
        if not params:
            continue
        shapes = ", ".join(f"{n}{tuple(p.shape)}" for n, p in params)
        rows.append((name, shapes, sum(p.numel() for _, p in params)))
    width = max(len(r[0]) for r in rows)
    lines = [f"{'layer':<{width}}  {'params':>10}  shapes"]
    lines += [f"{n:<{width}}  {c:>10,}  {s}" for n, s, c in rows]
    lines.append(f"{'total':<{width}}  {count_parameters(model):>10,}")
    return "\n".join(lines)


def set_identity_mask(model: BCCTN) -> BCCTN:
    """Zero the final decoder layers and set their bias so every mask is exactly 1 + 0j."""
    with torch.no_grad():
        for conv in model.final_layers():
            for part in (conv.real, conv.imag):
                part.weight.zero_()
            # real out gets b_r - b_i, imaginary out gets b_r + b_i
            conv.real.bias.fill_(0.5)
            conv.imag.bias.fill_(-0.5)
    return model


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state_dict: dict
    stft_config: StftConfig = StftConfig()
    epoch: int = 0
    best_val: float = math.inf
    optimizer: dict | None = None
    scheduler: dict | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> BCCTN:
        model = BCCTN(self.model_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "stft_config": ckpt.stft_config.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in ckpt.state_dict.items()},
        "epoch": ckpt.epoch,
        "best_val": ckpt.best_val,
        "optimizer": ckpt.optimizer,
        "scheduler": ckpt.scheduler,
        "extra": ckpt.extra,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    return Checkpoint(
        model_config=ModelConfig.from_dict(payload["model_config"]),
        state_dict=payload["state_dict"],
        stft_config=StftConfig(**payload["stft_config"]),
        epoch=payload["epoch"],
        best_val=payload["best_val"],
        optimizer=payload.get("optimizer"),
        scheduler=payload.get("scheduler"),
        extra=payload.get("extra") or {},
    )


def identity_checkpoint(cfg: ModelConfig = ModelConfig(**TINY_CONFIG),
                        stft_cfg: StftConfig = StftConfig()) -> Checkpoint:
    model = set_identity_mask(BCCTN(cfg))
    return Checkpoint(cfg, model.state_dict(), stft_cfg, extra={"kind": "identity"})
