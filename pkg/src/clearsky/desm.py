"""Dynamic expert selection: noisy gating, Top(P) routing, load balancing.

Routing is per sample: gate logits come from globally pooled guidance
features, a tunable Gaussian noise term is added at training time, and the
softmax probabilities are routed through Top(P) - experts are activated in
descending probability order until the cumulative probability reaches the
threshold P. Inactive experts get weight exactly 0 and are never
evaluated; active weights are not renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


def top_p_mask(probs, threshold: float):
    """Boolean active mask for Top(P) routing over the last axis.

    Sorts descending (ties to the lower index), activates the shortest
    prefix whose cumulative probability reaches ``threshold``, and always
    activates at least the top expert. Accepts numpy or torch, [n] or
    [B, n].
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0,1], got {threshold}")
    is_np = not isinstance(probs, torch.Tensor)
    p = torch.as_tensor(np.asarray(probs)) if is_np else probs.detach()
    single = p.ndim == 1
    if single:
        p = p[None]
    order = torch.argsort(-p, dim=-1, stable=True)
    sorted_p = torch.gather(p, -1, order)
    csum = torch.cumsum(sorted_p, dim=-1)
    # first prefix reaching the threshold; the full set if rounding left
    # every cumulative sum short of it
    reached = csum >= threshold - 1e-12
    k = torch.where(reached.any(-1), reached.to(torch.uint8).argmax(-1), p.shape[-1] - 1)
    k = torch.clamp(k, min=0)
    ranks = torch.arange(p.shape[-1], device=p.device).expand_as(p)
    active_sorted = ranks <= k[:, None]
    mask = torch.zeros_like(active_sorted).scatter(-1, order, active_sorted)
    if single:
        mask = mask[0]
    return mask.numpy() if is_np else mask


@dataclass
class RoutingDecision:
    """Routing outcome for a batch: probabilities, active set, mix weights."""

    probs: torch.Tensor  # [B, n], rows sum to 1
    active_mask: torch.Tensor  # [B, n] bool
    weights: torch.Tensor  # [B, n], probs where active else exactly 0

    @property
    def n_experts(self) -> int:
        return self.probs.shape[-1]

    def hard_fractions(self) -> torch.Tensor:
        """f_i: fraction of samples whose argmax expert is i (ties low)."""
        p = self.probs.detach()
        is_max = p == p.max(dim=-1, keepdim=True).values
        hard = is_max.to(torch.uint8).argmax(dim=-1)
        return torch.nn.functional.one_hot(hard, self.n_experts).to(p.dtype).mean(dim=0)

    def soft_fractions(self) -> torch.Tensor:
        """P_i: mean probability mass for expert i; keeps the autograd path."""
        return self.probs.mean(dim=0)

    def activation_frequency(self) -> torch.Tensor:
        return self.active_mask.to(self.probs.dtype).mean(dim=0).detach()


def top_p_route(probs, threshold: float) -> RoutingDecision:
    """Full routing decision for a batch (or single row) of probabilities."""
    is_np = not isinstance(probs, torch.Tensor)
    p = torch.as_tensor(np.asarray(probs, dtype=np.float64)) if is_np else probs
    if p.ndim == 1:
        p = p[None]
    row_sums = p.detach().sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-6):
        raise ValueError("probabilities must sum to 1 per row")
    if (p.detach() < 0).any():
        raise ValueError("probabilities must be nonnegative")
    mask = top_p_mask(p, threshold)
    return RoutingDecision(probs=p, active_mask=mask, weights=p * mask)


def load_balance_loss(decision: RoutingDecision):
    """n * sum_i f_i * P_i with the hard fractions treated as constants."""
    if decision.probs.shape[0] < 1:
        raise ValueError("empty batch")
    f = decision.hard_fractions()
    soft = decision.soft_fractions()
    return decision.n_experts * (f * soft).sum()


def multi_level_balance_loss(decisions):
    """Average the per-level balance losses of one forward pass."""
    losses = [load_balance_loss(d) for d in decisions]
    return sum(losses) / len(losses)


class ExpertFFN(nn.Module):
    """Feed-forward expert over feature maps: 1x1 expand x2 -> GELU -> 1x1 back."""

    def __init__(self, channels: int):
        super().__init__()
        self.up = nn.Conv2d(channels, 2 * channels, 1)
        self.act = nn.GELU()
        self.down = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(self.act(self.up(x)))


class DynamicExperts(nn.Module):
    """Sparse expert mixture with a noisy gate and Top(P) dynamic routing."""

    def __init__(self, channels: int, n_experts: int = 4, threshold: float = 0.4):
        super().__init__()
        if n_experts < 1:
            raise ValueError("need at least one expert")
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [0,1]")
        self.channels = channels
        self.n_experts = n_experts
        self.threshold = threshold
        self.experts = nn.ModuleList(ExpertFFN(channels) for _ in range(n_experts))
        self.w_gate = nn.Parameter(torch.zeros(channels, n_experts))
        self.w_noise = nn.Parameter(torch.zeros(channels, n_experts))

    def gate_logits(self, guide: torch.Tensor, training: bool, generator=None) -> torch.Tensor:
        """Per-sample gate logits from pooled guidance features [B,C,H,W].

        Training adds zero-mean Gaussian noise scaled by a learned softplus
        width; inference is noise-free and deterministic.
        """
        pooled = guide.mean(dim=(2, 3))
        logits = pooled @ self.w_gate
        if training:
            width = nn.functional.softplus(pooled @ self.w_noise)
            xi = torch.randn(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
            logits = logits + xi * width
        return logits

    def route(self, guide: torch.Tensor, training: bool, generator=None) -> RoutingDecision:
        logits = self.gate_logits(guide, training, generator)
        probs = torch.softmax(logits, dim=-1)
        return top_p_route(probs, self.threshold)

    def forward(self, features: torch.Tensor, guide: torch.Tensor, training: bool, generator=None):
        """Mix expert outputs on ``features`` with weights routed from ``guide``.

        Only experts active for at least one sample run, and each runs only
        on its active rows.
        """
        if features.shape != guide.shape:
            raise ValueError("features and guidance shapes differ")
        decision = self.route(guide, training, generator)
        weights = decision.weights.to(features.dtype)
        out = torch.zeros_like(features)
        for i, expert in enumerate(self.experts):
            rows = decision.active_mask[:, i]
            if not bool(rows.any()):
                continue
            idx = rows.nonzero(as_tuple=True)[0]
            part = expert(features[idx]) * weights[idx, i][:, None, None, None]
            buf = torch.zeros_like(features)
            buf[idx] = part
            out = out + buf
        return out, decision
