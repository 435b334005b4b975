"""Full-reference metrics and the manifest evaluation runner."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from .diffusion import implicit_sample
from .labels import WEATHER_NAMES
from .weathergen import DatasetManifest

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_float_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE), capped at 100 dB for identical images."""
    a, b = _as_float_array(a), _as_float_array(b)
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(data_range**2 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window, valid region, channel mean."""
    a, b = _as_float_array(a), _as_float_array(b)
    if a.shape != b.shape:
        raise ValueError("ssim inputs must share a shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    win = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        xx = convolve2d(x * x, win, mode="valid") - mu_x**2
        yy = convolve2d(y * y, win, mode="valid") - mu_y**2
        xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class EvalReport:
    """Aggregate restoration quality over one manifest split."""

    overall: dict
    per_class: dict
    sample_count: int
    sample_steps: int
    strategy: str
    used_ema: bool
    config_digest: str
    generated_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_json(self) -> str:
        return json.dumps(dataclasses_to_dict(self), sort_keys=True, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def dataclasses_to_dict(report: EvalReport) -> dict:
    return {
        "overall": report.overall,
        "per_class": report.per_class,
        "sample_count": report.sample_count,
        "sample_steps": report.sample_steps,
        "strategy": report.strategy,
        "used_ema": report.used_ema,
        "config_digest": report.config_digest,
        "generated_at": report.generated_at,
    }


def _mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


def restore_image(model, schedule, bank, enc, degraded, steps: int = 3,
                  strategy: str = "noise_projected", seed: int = 0):
    """Restore one [H,W,3] image (or [B,3,H,W] batch) deterministically."""
    single = not isinstance(degraded, torch.Tensor)
    if single:
        x = torch.from_numpy(np.ascontiguousarray(degraded)).permute(2, 0, 1)[None].float()
    else:
        x = degraded

    def model_fn(latent, cond, t):
        with torch.no_grad():
            res, _ = model(latent, cond, t, bank, enc, training=False)
        return res

    out = implicit_sample(schedule, model_fn, x, S=steps, strategy=strategy, rng_seed=seed)
    if single:
        return out[0].permute(1, 2, 0).numpy().astype(np.float64)
    return out


def evaluate(model, ema, schedule, manifest: DatasetManifest, split: str = "test",
             steps: int = 3, strategy: str = "noise_projected", use_ema: bool = True,
             seed: int = 0, bank=None, enc=None, batch_size: int = 16,
             report_path=None, config_digest_src: dict | None = None) -> EvalReport:
    """Score a model over a manifest split, per class and overall."""
    records = manifest.split(split)
    eval_model = copy.deepcopy(model)
    if use_ema:
        if ema is None:
            raise ValueError("use_ema requires an EMA state")
        ema.copy_to(eval_model)
    eval_model.eval()

    rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        cleans, degradeds, labels = [], [], []
        for rec in chunk:
            clean, degraded, label = manifest.load_pair(rec)
            cleans.append(clean)
            degradeds.append(degraded)
            labels.append(int(label))
        cond = torch.from_numpy(np.stack(degradeds)).permute(0, 3, 1, 2).float()
        restored = restore_image(eval_model, schedule, bank, enc, cond,
                                 steps=steps, strategy=strategy, seed=seed + start)
        restored = restored.permute(0, 2, 3, 1).numpy().astype(np.float64)
        restored = np.clip(restored, 0.0, 1.0)
        for clean, degraded, label, rest in zip(cleans, degradeds, labels, restored):
            rows.append({
                "label": label,
                "psnr": psnr(rest, clean),
                "ssim": ssim(rest, clean),
                "psnr_in": psnr(degraded, clean),
                "ssim_in": ssim(degraded, clean),
            })

    def summarize(subset) -> dict:
        out = {
            "count": len(subset),
            "psnr": _mean([r["psnr"] for r in subset]),
            "ssim": _mean([r["ssim"] for r in subset]),
            "psnr_input": _mean([r["psnr_in"] for r in subset]),
            "ssim_input": _mean([r["ssim_in"] for r in subset]),
        }
        out["psnr_delta"] = out["psnr"] - out["psnr_input"]
        out["ssim_delta"] = out["ssim"] - out["ssim_input"]
        return out

    per_class = {}
    for label, name in enumerate(WEATHER_NAMES):
        subset = [r for r in rows if r["label"] == label]
        per_class[name] = summarize(subset) if subset else {"count": 0, "absent": True}

    digest_src = json.dumps(config_digest_src or {}, sort_keys=True).encode()
    report = EvalReport(
        overall=summarize(rows),
        per_class=per_class,
        sample_count=len(rows),
        sample_steps=steps,
        strategy=strategy,
        used_ema=use_ema,
        config_digest=hashlib.sha256(digest_src).hexdigest()[:16],
    )
    if report_path:
        report.save(report_path)
    return report
