"""Residual diffusion core: schedules, forward process, samplers, loss.

The forward process interpolates from the clean image toward the degraded
one while injecting Gaussian noise and subtracting a shared-distribution
fraction of the degraded input:

    I_t = I_0 + abar_t * I_res + bbar_t * eps - dbar_t * I_in

with cumulative coefficients pinned at the terminal step (abar_T = 1,
dbar_T = 0.9), so every degradation type ends at the same distribution
0.1 * I_in + bbar_T * eps.

All operations below are pure functions of their inputs plus an explicit
seed. They are written against plain array semantics (scalar coefficients,
elementwise arithmetic) so they accept numpy arrays and torch tensors
alike, in 32- or 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .labels import Weather

DEFAULT_T = 100
DEFAULT_BETA_BAR_T = 0.1
TERMINAL_SHARED_FRACTION = 0.9


def _same_shape(a, b) -> bool:
    return tuple(a.shape) == tuple(b.shape)


def _all_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(x).all())


def seeded_noise_like(x, seed: int):
    """Standard-normal noise shaped like ``x``, deterministic in ``seed``.

    Drawn from a numpy PCG64 stream so the values are identical whether the
    caller works in numpy or torch.
    """
    noise = np.random.default_rng(seed).standard_normal(tuple(x.shape))
    if isinstance(x, torch.Tensor):
        return torch.from_numpy(noise).to(dtype=x.dtype)
    return noise.astype(x.dtype, copy=False)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step and cumulative diffusion coefficients for T steps.

    Per-step arrays (``alpha``, ``beta``, ``delta``) have length T and are
    indexed by t-1. Cumulative arrays have length T+1 and are indexed by t
    directly; entry 0 is the empty sum (so ``beta_bar[0] == 0``).
    """

    T: int
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    delta_bar: np.ndarray

    def alpha_t(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def beta_t(self, t: int) -> float:
        return float(self.beta[t - 1])

    def delta_t(self, t: int) -> float:
        return float(self.delta[t - 1])

    def abar(self, t) -> float:
        return self.alpha_bar[t] if np.ndim(t) else float(self.alpha_bar[t])

    def bbar(self, t) -> float:
        return self.beta_bar[t] if np.ndim(t) else float(self.beta_bar[t])

    def dbar(self, t) -> float:
        return self.delta_bar[t] if np.ndim(t) else float(self.delta_bar[t])


def build_schedule(T: int = DEFAULT_T, beta_bar_T: float = DEFAULT_BETA_BAR_T) -> DiffusionSchedule:
    """Build the linear/sqrt coefficient family.

    abar_t = t/T, dbar_t = 0.9 t/T, bbar_t = beta_bar_T * sqrt(t/T); the
    per-step values follow by differencing (beta in quadrature). The
    terminal constraints abar_T = 1 and dbar_T = 0.9 hold exactly.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if beta_bar_T <= 0:
        raise ValueError(f"beta_bar_T must be > 0, got {beta_bar_T}")

    frac = np.arange(T + 1, dtype=np.float64) / T
    alpha_bar = frac.copy()
    delta_bar = TERMINAL_SHARED_FRACTION * frac
    beta_bar = beta_bar_T * np.sqrt(frac)

    alpha = np.diff(alpha_bar)
    delta = np.diff(delta_bar)
    beta_sq = np.diff(beta_bar**2)
    if np.any(beta_sq < 0):
        raise ValueError("beta_bar must be nondecreasing in quadrature")
    beta = np.sqrt(beta_sq)

    sched = DiffusionSchedule(
        T=T,
        alpha=alpha,
        beta=beta,
        delta=delta,
        alpha_bar=alpha_bar,
        beta_bar=beta_bar,
        delta_bar=delta_bar,
    )
    if not (np.all(np.diff(beta_bar) > 0) and beta_bar[1] > 0):
        raise ValueError("beta_bar must be strictly increasing with beta_bar_1 > 0")
    return sched


@dataclass
class DiffusionState:
    """A latent image I_t at step t (t = 0 is clean, t = T is terminal)."""

    image: object
    t: int


@dataclass
class DegradedPair:
    """A clean/degraded image pair with its weather label.

    ``residual`` is degraded - clean; the constructor checks consistency.
    """

    clean: object
    degraded: object
    residual: object = field(default=None)
    label: Weather = Weather.RAIN

    def __post_init__(self):
        if not _same_shape(self.clean, self.degraded):
            raise ValueError("clean and degraded shapes differ")
        if self.residual is None:
            self.residual = self.degraded - self.clean
        elif not _same_shape(self.residual, self.clean):
            raise ValueError("residual shape differs from images")
        else:
            err = abs(self.residual - (self.degraded - self.clean)).max()
            if float(err) > 1e-7:
                raise ValueError(f"residual != degraded - clean (max err {float(err):.3g})")
        self.label = Weather(self.label)


def diffuse(s: DiffusionSchedule, clean, degraded, t, eps):
    """Closed-form forward diffusion, valid for scalar or per-sample t.

    With scalar ``t`` the inputs may have any matching shape. With a
    sequence ``t`` the inputs are treated as batches whose leading axis
    matches ``len(t)``.
    """
    if np.ndim(t):
        t = np.asarray(t)
        if t.min() < 1 or t.max() > s.T:
            raise ValueError(f"t out of range [1, {s.T}]")
        shape = (len(t),) + (1,) * (clean.ndim - 1)
        ab = s.alpha_bar[t].reshape(shape)
        bb = s.beta_bar[t].reshape(shape)
        db = s.delta_bar[t].reshape(shape)
        if isinstance(clean, torch.Tensor):
            ab = torch.from_numpy(ab).to(clean.dtype)
            bb = torch.from_numpy(bb).to(clean.dtype)
            db = torch.from_numpy(db).to(clean.dtype)
    else:
        if not 1 <= t <= s.T:
            raise ValueError(f"t={t} out of range [1, {s.T}]")
        ab, bb, db = s.abar(t), s.bbar(t), s.dbar(t)
    if not (_same_shape(clean, degraded) and _same_shape(clean, eps)):
        raise ValueError("clean, degraded and eps must share one shape")
    residual = degraded - clean
    return clean + ab * residual + bb * eps - db * degraded


def forward_sample(s: DiffusionSchedule, pair: DegradedPair, t: int, eps) -> DiffusionState:
    """Sample I_t from a pair at step t with the given noise draw."""
    image = diffuse(s, pair.clean, pair.degraded, int(t), eps)
    return DiffusionState(image=image, t=int(t))


def estimate_noise(s: DiffusionSchedule, state: DiffusionState, cond, res_hat):
    """Recover the noise consistent with I_t and a residual estimate.

    Inverts the forward closed form under I_0 = I_in - res:

        eps = (I_t - (I_in - res) - abar_t * res + dbar_t * I_in) / bbar_t
    """
    t = state.t
    if not 1 <= t <= s.T:
        raise ValueError(f"t={t} out of range [1, {s.T}]")
    bb = s.bbar(t)
    if bb <= 0:
        raise ValueError("beta_bar_t vanished; schedule is invalid")
    return (state.image - (cond - res_hat) - s.abar(t) * res_hat + s.dbar(t) * cond) / bb


def reverse_mean_sigma(s: DiffusionSchedule, state: DiffusionState, cond, res_hat, eps_hat):
    """Posterior mean and noise scale for one reverse step t -> t-1.

        mean  = I_t - alpha_t * res_hat + delta_t * I_in - (beta_t^2 / bbar_t) * eps_hat
        sigma = beta_t * bbar_{t-1} / bbar_t      (0 at t = 1)
    """
    t = state.t
    if t < 1:
        raise ValueError("nothing to reverse at t=0")
    if t > s.T:
        raise ValueError(f"t={t} exceeds T={s.T}")
    if not (_same_shape(state.image, res_hat) and _same_shape(state.image, eps_hat)):
        raise ValueError("res_hat and eps_hat must match the latent shape")
    bt, bb = s.beta_t(t), s.bbar(t)
    mean = state.image - s.alpha_t(t) * res_hat + s.delta_t(t) * cond - (bt**2 / bb) * eps_hat
    sigma = bt * s.bbar(t - 1) / bb
    return mean, sigma


def sampling_timesteps(T: int, S: int) -> list[int]:
    """S timesteps uniformly spaced from T down to 1, both endpoints included."""
    if not 1 <= S <= T:
        raise ValueError(f"S={S} out of range [1, {T}]")
    if S == 1:
        return [T]
    ts = np.rint(np.linspace(T, 1, S)).astype(int)
    return [int(t) for t in ts]


def implicit_sample(
    s: DiffusionSchedule,
    model: Callable,
    cond,
    S: int = 3,
    strategy: str = "noise_projected",
    rng_seed: int = 0,
):
    """Deterministic few-step restoration of ``cond`` (degraded image).

    ``model(latent, cond, t) -> res_hat`` supplies the residual estimate.
    The chain starts at I_T = 0.1 * I_in + bbar_T * eps with seeded eps and
    visits S uniformly spaced timesteps from T down to 1.

    ``noise_projected`` re-projects each estimate through the forward
    closed form (progressively shedding noise); ``eq5_literal`` steps by
    cumulative-coefficient differences and keeps the initial noise until
    the end. Both finish by substituting I_0 = I_in - res_hat at the last
    visited step.
    """
    if strategy not in ("noise_projected", "eq5_literal"):
        raise ValueError(f"unknown strategy {strategy!r}")
    ts = sampling_timesteps(s.T, S)

    eps = seeded_noise_like(cond, rng_seed)
    latent = (1.0 - s.dbar(s.T)) * cond + s.bbar(s.T) * eps

    res_hat = None
    for i, t in enumerate(ts):
        res_hat = model(latent, cond, t)
        if not _all_finite(res_hat):
            raise RuntimeError(f"model output is non-finite at t={t} (step {i + 1}/{S})")
        if i == len(ts) - 1:
            break
        t_next = ts[i + 1]
        if strategy == "noise_projected":
            eps_hat = estimate_noise(s, DiffusionState(latent, t), cond, res_hat)
            clean_hat = cond - res_hat
            latent = clean_hat + s.abar(t_next) * res_hat - s.dbar(t_next) * cond + s.bbar(t_next) * eps_hat
        else:
            latent = (
                latent
                - (s.abar(t) - s.abar(t_next)) * res_hat
                + (s.dbar(t) - s.dbar(t_next)) * cond
            )
    return cond - res_hat


def residual_loss(res_true, res_hat):
    """Mean absolute error between true and estimated residuals."""
    if not _same_shape(res_true, res_hat):
        raise ValueError("residual shapes differ")
    return abs(res_true - res_hat).mean()
