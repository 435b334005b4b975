"""Residual estimation network: encoder/bottleneck/decoder with skips.

The network predicts the degradation residual from (latent, degraded)
channel-concatenated input plus a sinusoidal time embedding. After every
encoder level the features pass through prompt guidance (channel
modulation from the selected weather prompt) and the dynamic expert
mixture; both can be disabled independently, which removes their
parameters entirely and reduces the model to a plain conditional
baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .desm import DynamicExperts
from .embedding import EMBED_DIM, PROMPT_TOKENS, FrozenEncoders, PromptBank
from .wpg import PromptAdapter, SelectedPrompt, ShallowProbe, select_prompt

TIME_FREQ_BASE = 1000.0


def time_embedding(t, total_steps: int, dim: int):
    """Sinusoidal embedding of t/total_steps at geometric frequencies.

    Scalar ``t`` gives a numpy [dim] vector; a torch tensor of steps gives
    a [B, dim] tensor on the same dtype/device family.
    """
    half = dim // 2
    k = np.arange(half) / max(half - 1, 1)
    freqs = TIME_FREQ_BASE**k
    if isinstance(t, torch.Tensor):
        fr = torch.from_numpy(freqs).to(dtype=torch.float64)
        tau = t.to(torch.float64) / total_steps
        ang = tau[:, None] * fr[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    tau = float(t) / total_steps
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class RestorerConfig:
    levels: int = 3
    base_channels: int = 32
    time_embed_dim: int = 128
    n_experts: int = 4
    route_threshold: float = 0.4
    n_tokens: int = PROMPT_TOKENS
    embed_dim: int = EMBED_DIM
    total_steps: int = 100
    use_wpg: bool = True
    use_desm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be positive")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.act(self.conv1(x))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.act(self.conv2(h))
        return h + self.skip(x)


class RestorerModel(nn.Module):
    """U-shaped residual predictor with per-level prompt/expert modulation."""

    def __init__(self, cfg: RestorerConfig, encoders: FrozenEncoders | None = None):
        super().__init__()
        if cfg.use_wpg and encoders is None:
            raise ValueError("prompt guidance needs the frozen encoders for probe init")
        self.cfg = cfg
        ch = cfg.channels
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.stem = nn.Conv2d(6, ch[0], 3, padding=1)
            self.time_mlp = nn.Sequential(nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim), nn.SiLU())
            self.enc_blocks = nn.ModuleList(ResBlock(c, c, cfg.time_embed_dim) for c in ch)
            self.downs = nn.ModuleList(
                nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(cfg.levels - 1)
            )
            self.mid = ResBlock(ch[-1], ch[-1], cfg.time_embed_dim)
            self.fuses = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in ch)
            self.dec_blocks = nn.ModuleList(ResBlock(c, c, cfg.time_embed_dim) for c in ch)
            self.ups = nn.ModuleList(
                nn.Conv2d(ch[i], ch[i - 1], 3, padding=1) for i in range(cfg.levels - 1, 0, -1)
            )
            self.head = nn.Conv2d(ch[0], 3, 3, padding=1)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
            if cfg.use_wpg:
                self.probe = ShallowProbe(encoders, cfg.embed_dim)
                self.adapters = nn.ModuleList(PromptAdapter(c, cfg.embed_dim) for c in ch)
            if cfg.use_desm:
                self.desms = nn.ModuleList(
                    DynamicExperts(c, cfg.n_experts, cfg.route_threshold) for c in ch
                )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _pad(self, x: torch.Tensor):
        stride = 2 ** (self.cfg.levels - 1)
        h, w = x.shape[-2:]
        ph = (stride - h % stride) % stride
        pw = (stride - w % stride) % stride
        if ph or pw:
            x = nn.functional.pad(x, (0, pw, 0, ph), mode="reflect")
        return x, (h, w)

    def forward(self, latent, cond, t, bank: PromptBank | None, enc: FrozenEncoders | None,
                training: bool = False, generator: torch.Generator | None = None):
        """Predict the residual for a [B,3,H,W] latent/condition pair.

        Returns (residual [B,3,H,W], aux) where aux carries the per-level
        routing decisions and the selected prompt index per sample.
        """
        if latent.shape != cond.shape:
            raise ValueError("latent and condition shapes differ")
        if latent.ndim != 4 or latent.shape[1] != 3:
            raise ValueError("expected [B,3,H,W] inputs")
        t = torch.as_tensor(t).reshape(-1).to(latent.device)
        if t.numel() == 1:
            t = t.expand(latent.shape[0])
        if t.numel() != latent.shape[0]:
            raise ValueError("one timestep per sample required")
        if int(t.min()) < 1 or int(t.max()) > self.cfg.total_steps:
            raise ValueError(f"t out of range [1, {self.cfg.total_steps}]")

        latent, size = self._pad(latent)
        cond, _ = self._pad(cond)
        dt = latent.dtype

        temb = self.time_mlp(time_embedding(t, self.cfg.total_steps, self.cfg.time_embed_dim).to(dt))

        selection: SelectedPrompt | None = None
        if self.cfg.use_wpg:
            if bank is None or enc is None:
                raise ValueError("prompt guidance needs bank and encoders at forward time")
            selection = select_prompt(self.probe, enc, bank, latent, cond)

        decisions = []
        x = self.stem(torch.cat([latent, cond], dim=1))
        skips = []
        for level in range(self.cfg.levels):
            f_e = self.enc_blocks[level](x, temb)
            f_pa = self.adapters[level](f_e, selection.embedding.to(dt)) if self.cfg.use_wpg else f_e
            if self.cfg.use_desm:
                mix, decision = self.desms[level](f_e, f_pa, training, generator)
                x = f_pa + mix
                decisions.append(decision)
            else:
                x = f_pa
            skips.append(x)
            if level < self.cfg.levels - 1:
                x = self.downs[level](x)

        x = self.mid(x, temb)
        for i, level in enumerate(range(self.cfg.levels - 1, -1, -1)):
            x = self.fuses[level](torch.cat([x, skips[level]], dim=1))
            x = self.dec_blocks[level](x, temb)
            if level > 0:
                x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
                x = self.ups[i](x)

        res = self.head(x)[..., : size[0], : size[1]]
        aux = {
            "decisions": decisions,
            "prompt_index": None if selection is None else selection.index,
            "prompt_similarities": None if selection is None else selection.similarities,
        }
        return res, aux


def _to_nchw(img):
    """Accept [H,W,3] / [B,H,W,3] numpy or torch, return ([B,3,H,W], restore)."""
    is_np = not isinstance(img, torch.Tensor)
    x = torch.as_tensor(np.ascontiguousarray(img)) if is_np else img
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
        channels_last = True
    else:
        channels_last = False
    x = x.contiguous()

    def restore(y: torch.Tensor):
        if channels_last:
            y = y.permute(0, 2, 3, 1)
        if single:
            y = y[0]
        return y.detach().numpy() if is_np else y

    return x, restore


def predict_residual(model: RestorerModel, latent, cond, t, bank, enc,
                     training: bool = False, rng: torch.Generator | None = None):
    """Layout-flexible entry point around ``RestorerModel.forward``."""
    x, restore = _to_nchw(latent)
    c, _ = _to_nchw(cond)
    dtype = next(model.parameters()).dtype
    res, aux = model(x.to(dtype), c.to(dtype), t, bank, enc, training=training, generator=rng)
    return restore(res), aux
