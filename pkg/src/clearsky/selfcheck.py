"""Analytic invariant suite behind the ``selfcheck`` CLI command.

Every check is a closed-form or oracle-backed property that must hold on
any machine in a few seconds; failures indicate a broken build, not a bad
training run.
"""

from __future__ import annotations

import time

import numpy as np
import torch

from .desm import RoutingDecision, load_balance_loss, top_p_mask
from .diffusion import (
    DegradedPair,
    DiffusionState,
    build_schedule,
    diffuse,
    estimate_noise,
    forward_sample,
    implicit_sample,
    seeded_noise_like,
)
from .pipeline import EmaState


def check_schedule_constraints() -> bool:
    for T in (2, 7, 100, 1000):
        for bbT in (0.05, 0.1, 1.0):
            s = build_schedule(T, bbT)
            if abs(s.abar(T) - 1.0) > 1e-12 or abs(s.dbar(T) - 0.9) > 1e-12:
                return False
            if abs(np.sum(s.beta**2) - bbT**2) > 1e-10:
                return False
            if abs(np.sum(s.alpha) - 1.0) > 1e-10 or abs(np.sum(s.delta) - 0.9) > 1e-10:
                return False
            if not (np.all(np.diff(s.beta_bar) > 0) and s.bbar(1) > 0):
                return False
    return True


def _random_pair(rng: np.random.Generator, size: int = 8) -> DegradedPair:
    clean = rng.uniform(0, 1, size=(size, size, 3))
    degraded = np.clip(clean + rng.uniform(-0.3, 0.5, size=clean.shape), 0, 1)
    return DegradedPair(clean=clean, degraded=degraded)


def check_terminal_identity(cases: int = 100) -> bool:
    rng = np.random.default_rng(0)
    for i in range(cases):
        T = int(rng.integers(2, 200))
        s = build_schedule(T, float(rng.uniform(0.05, 1.0)))
        pair = _random_pair(rng)
        eps = rng.standard_normal(pair.clean.shape)
        state = forward_sample(s, pair, T, eps)
        target = 0.1 * pair.degraded + s.bbar(T) * eps
        if np.max(np.abs(state.image - target)) > 1e-6:
            return False
    return True


def check_oracle_sampler(cases: int = 20) -> bool:
    rng = np.random.default_rng(1)
    for i in range(cases):
        T = int(rng.integers(10, 150))
        s = build_schedule(T, float(rng.uniform(0.05, 0.5)))
        pair = _random_pair(rng)
        oracle = lambda latent, cond, t: pair.residual
        for S in (1, 2, 3, 10):
            for strategy in ("noise_projected", "eq5_literal"):
                out = implicit_sample(s, oracle, pair.degraded, S=S, strategy=strategy, rng_seed=i)
                if np.max(np.abs(out - pair.clean)) > 1e-5:
                    return False
    return True


def check_top_p_semantics(n_vectors: int = 10_000) -> bool:
    rng = np.random.default_rng(2)
    per_n = n_vectors // 4
    for n in (2, 4, 8, 16):
        raw = rng.gamma(0.6, size=(per_n, n))
        probs = raw / raw.sum(axis=1, keepdims=True)
        thresholds = rng.uniform(0.0, 1.0, size=per_n)
        for p_vec, thr in zip(probs, thresholds):
            mask = top_p_mask(p_vec, float(thr))
            active = p_vec[mask]
            if mask.sum() < 1:
                return False
            if active.sum() < min(thr, p_vec.sum()) - 1e-9:
                return False
            order = np.argsort(-p_vec, kind="stable")
            k = int(mask.sum())
            if not np.array_equal(np.sort(order[:k]), np.flatnonzero(mask)):
                return False  # active set must be the top-k prefix
            if k > 1 and p_vec[order[: k - 1]].sum() >= thr + 1e-9:
                return False  # prefix must be minimal
            wider = top_p_mask(p_vec, float(min(1.0, thr + 0.2)))
            if wider.sum() < mask.sum():
                return False  # active count monotone in the threshold
    return True


def check_balance_closed_forms() -> bool:
    def loss_of(rows) -> float:
        probs = torch.as_tensor(np.asarray(rows, dtype=np.float64))
        mask = torch.ones_like(probs, dtype=torch.bool)
        return float(load_balance_loss(RoutingDecision(probs, mask, probs)))

    n = 4
    uniform = [[1.0 / n] * n] * 8
    if abs(loss_of(uniform) - 1.0) > 1e-9:
        return False
    collapsed = [[1.0, 0.0, 0.0, 0.0]] * 8
    if abs(loss_of(collapsed) - float(n)) > 1e-9:
        return False
    # f = (.5,.5,0,0), P = (.4,.6,0,0) -> 4*(0.2+0.3) = 2.0
    mixed = [[0.55, 0.45, 0.0, 0.0], [0.25, 0.75, 0.0, 0.0]]
    probs = torch.as_tensor(np.asarray(mixed))
    mask = torch.ones_like(probs, dtype=torch.bool)
    if abs(float(load_balance_loss(RoutingDecision(probs, mask, probs))) - 2.0) > 1e-9:
        return False
    return True


def check_ema_closed_form() -> bool:
    model = torch.nn.Linear(3, 3).double()
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(2.0)
    ema = EmaState(model, decay=0.995)
    s0 = 2.0
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(-1.0)
    k = 37
    for _ in range(k):
        ema.update(model)
    expected = -1.0 + (s0 - (-1.0)) * 0.995**k
    for shadow in ema.shadow.values():
        if float((shadow - expected).abs().max()) > 1e-10:
            return False
    return True


CHECKS = [
    ("schedule constraints", check_schedule_constraints),
    ("terminal-state identity", check_terminal_identity),
    ("oracle-sampler exactness", check_oracle_sampler),
    ("Top(P) routing semantics", check_top_p_semantics),
    ("load-balance closed forms", check_balance_closed_forms),
    ("EMA closed form", check_ema_closed_form),
]


def run_selfcheck(verbose: bool = True) -> bool:
    """Run every analytic invariant; returns True iff all pass."""
    all_ok = True
    for name, fn in CHECKS:
        start = time.time()
        ok = bool(fn())
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name} ({time.time() - start:.2f}s)")
        if not ok and not verbose:
            break
    return all_ok
