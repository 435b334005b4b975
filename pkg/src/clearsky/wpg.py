"""Weather-specific prompt guidance: prompt selection and feature injection.

A shallow probe embeds the current restoration state (latent plus the
degraded condition image) into the prompt space; the best-matching learned
prompt is chosen by cosine similarity and injected into encoder features
through the prompt adapter: sigmoid channel weights from the encoded
prompt, applied to normalized features, refined by a gated conv block,
with a residual connection. The block's output projection is zero-init so
the adapter starts as the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .embedding import EMBED_DIM, FrozenEncoders, PromptBank, patch_features, patch_feature_width


class ShallowProbe(nn.Module):
    """Trainable twin of the frozen image encoder, fed (latent, condition).

    Patch featurization is shared with the encoder; the linear maps are
    trainable and start as an exact functional copy of the image encoder
    applied to the condition channels (latent channels weighted zero), so
    prompt selection starts out agreeing with the stage-1 classifier and
    can then adapt during stage-2 training.
    """

    def __init__(self, encoders: FrozenEncoders, dim: int = EMBED_DIM):
        super().__init__()
        self.patch = encoders.patch
        self.dim = dim
        pw = patch_feature_width(self.patch)
        hidden = encoders.hidden
        w = torch.zeros(2 * pw, hidden, dtype=torch.float64)
        w[pw:] = encoders._img_w
        self.weight = nn.Parameter(w.float())
        self.bias = nn.Parameter(encoders._img_b.float().clone())
        self.proj = nn.Parameter(encoders._img_proj.float().clone())

    def forward(self, latent: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """[B,3,H,W] x2 -> [B, dim] unit-normalized probe embeddings."""
        if latent.shape != cond.shape:
            raise ValueError("latent and condition shapes differ")
        if not torch.isfinite(latent).all() or not torch.isfinite(cond).all():
            raise ValueError("probe input contains non-finite values")
        lat = latent.permute(0, 2, 3, 1)
        cnd = cond.permute(0, 2, 3, 1)
        feats = torch.cat([patch_features(lat, self.patch), patch_features(cnd, self.patch)], dim=-1)
        h = torch.tanh(feats @ self.weight.to(feats.dtype) + self.bias.to(feats.dtype))
        z = h.mean(dim=1) @ self.proj.to(feats.dtype)
        return z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)


@dataclass
class SelectedPrompt:
    """Per-sample prompt choice: argmax index, all similarities, embeddings."""

    index: torch.Tensor  # [B] long
    similarities: torch.Tensor  # [B, 3]
    embedding: torch.Tensor  # [B, D] encoded prompt, per sample
    tokens: torch.Tensor  # [B, N, D] selected prompt token matrices


def _stable_argmax(x: torch.Tensor) -> torch.Tensor:
    """Row argmax with ties resolved to the lowest index."""
    is_max = x == x.max(dim=-1, keepdim=True).values
    return is_max.to(torch.uint8).argmax(dim=-1)


def select_prompt(
    probe: ShallowProbe,
    enc: FrozenEncoders,
    bank: PromptBank,
    latent: torch.Tensor,
    cond: torch.Tensor,
) -> SelectedPrompt:
    """Pick the best-matching weather prompt for each sample in the batch."""
    z = probe(latent, cond)
    prompts = bank.prompts.detach().to(z.dtype)
    prompt_emb = enc.encode_prompt(prompts)  # [3, D]
    sims = z @ prompt_emb.T
    idx = _stable_argmax(sims)
    return SelectedPrompt(
        index=idx,
        similarities=sims,
        embedding=prompt_emb[idx],
        tokens=prompts[idx],
    )


class LayerNorm2d(nn.Module):
    """Layer norm over the channel dimension of NCHW feature maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.permute(0, 2, 3, 1)
        y = nn.functional.layer_norm(y, (x.shape[1],), self.weight, self.bias, eps=1e-6)
        return y.permute(0, 3, 1, 2)


class GatedConvBlock(nn.Module):
    """Feature refinement: LN -> 1x1 expand x2 -> depthwise 3x3 -> split-gate -> 1x1.

    The output projection is zero-initialized, so the block maps everything
    to zero until trained.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.expand = nn.Conv2d(channels, 2 * channels, 1)
        self.dwconv = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1, groups=2 * channels)
        self.project = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.dwconv(self.expand(self.norm(x)))
        a, b = h.chunk(2, dim=1)
        return self.project(a * b)


class PromptAdapter(nn.Module):
    """Inject an encoded prompt into a feature map as channel modulation."""

    def __init__(self, channels: int, dim: int = EMBED_DIM):
        super().__init__()
        self.channels = channels
        self.mlp = nn.Sequential(nn.Linear(dim, dim // 2), nn.GELU(), nn.Linear(dim // 2, channels))
        self.norm = LayerNorm2d(channels)
        self.block = GatedConvBlock(channels)

    def channel_weights(self, prompt_emb: torch.Tensor) -> torch.Tensor:
        """Sigmoid channel gate from the prompt embedding alone: [B, C] in (0,1)."""
        return torch.sigmoid(self.mlp(prompt_emb))

    def forward(self, features: torch.Tensor, prompt_emb: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {features.shape[1]}")
        w_c = self.channel_weights(prompt_emb)
        modulated = self.norm(features) * w_c[:, :, None, None]
        return self.block(modulated) + features
