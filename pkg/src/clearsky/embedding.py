"""Frozen joint image/prompt embedding space and the learnable prompt bank.

The encoders are seeded random-feature maps with the interface of a large
vision-language model: a deterministic image encoder and a prompt (text)
encoder projecting into one D-dimensional unit sphere, where similarity is
cosine. Parameters are generated once from a seed and never trained; the
prompt encoder stays differentiable with respect to its *input* so prompt
tokens can be learned against it. Any object with the same two methods
(``encode_image``, ``encode_prompt``) can be dropped in as a replacement.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

EMBED_DIM = 512
PROMPT_TOKENS = 16
PROMPT_INIT_STD = 0.02
PATCH_SIZE = 8
BANK_FORMAT_VERSION = 1

_BANK_KEYS = ("prompt_rain", "prompt_haze", "prompt_snow")


def patch_features(imgs: torch.Tensor, patch: int = PATCH_SIZE) -> torch.Tensor:
    """[B, H, W, C] -> [B, P, C*patch^2 + 5] fixed per-patch features.

    Each non-overlapping patch is contrast-standardized (so weather texture
    dominates scene color) and augmented with five scaled statistics of the
    raw patch: mean, spread, horizontal/vertical gradient energy, and the
    standardized peak. Ragged edges are cropped.
    """
    p = patch
    b, hgt, wid, ch = imgs.shape
    if hgt < p or wid < p:
        raise ValueError(f"image smaller than patch size {p}")
    hp, wp = hgt // p, wid // p
    x = imgs[:, : hp * p, : wp * p, :]
    x = x.reshape(b, hp, p, wp, p, ch).permute(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, hp * wp, p, p, ch)
    flat = x.reshape(b, hp * wp, p * p * ch)
    mean = flat.mean(dim=-1, keepdim=True)
    std = flat.std(dim=-1, keepdim=True)
    xn = (x - mean[..., None, None]) / (std[..., None, None] + 0.05)
    gx = (xn[:, :, :, 1:, :] - xn[:, :, :, :-1, :]).abs().mean(dim=(-1, -2, -3)).unsqueeze(-1)
    gy = (xn[:, :, 1:, :, :] - xn[:, :, :-1, :, :]).abs().mean(dim=(-1, -2, -3)).unsqueeze(-1)
    xn = xn.reshape(b, hp * wp, p * p * ch)
    peak = xn.max(dim=-1).values.unsqueeze(-1)
    aniso = (gx - gy) / (gx + gy + 0.05)
    bright = (xn > 2.0).to(xn.dtype).mean(dim=-1, keepdim=True)
    stats = [12.0 * mean, 24.0 * std, 12.0 * gx, 12.0 * gy, 4.0 * peak, 6.0 * aniso, 16.0 * bright]
    return torch.cat([xn] + stats, dim=-1)


def patch_feature_width(patch: int = PATCH_SIZE, channels: int = 3) -> int:
    return channels * patch * patch + 7


def cosine(a, b):
    """Cosine similarity between two vectors (numpy or torch)."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a = torch.as_tensor(a)
        b = torch.as_tensor(b)
        na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
        if float(na) == 0.0 or float(nb) == 0.0:
            raise ValueError("cosine undefined for zero vectors")
        return (a * b).sum() / (na * nb)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(a @ b / (na * nb))


class FrozenEncoders:
    """Seeded, immutable image and prompt encoders sharing one latent space.

    Image path: fixed per-patch featurization (``patch_features``) -> fixed
    random linear -> tanh -> mean over patches -> fixed projection -> unit
    norm. Prompt path: the same shape of pipeline over the N prompt tokens.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM, hidden: int = 512, patch: int = PATCH_SIZE):
        self.seed = int(seed)
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.patch = int(patch)
        rng = np.random.default_rng(self.seed)
        p2 = patch_feature_width(patch)
        scale_img = 1.5 / np.sqrt(p2)
        self._img_w = torch.from_numpy(rng.normal(0.0, scale_img, size=(p2, hidden)))
        self._img_b = torch.from_numpy(rng.normal(0.0, 1.0, size=(hidden,)))
        self._img_proj = torch.from_numpy(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, dim)))
        scale_txt = 1.0 / np.sqrt(dim)
        self._txt_w = torch.from_numpy(rng.normal(0.0, scale_txt, size=(dim, hidden)))
        self._txt_b = torch.from_numpy(rng.normal(0.0, 1.0, size=(hidden,)))
        self._txt_proj = torch.from_numpy(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, dim)))

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for t in (self._img_w, self._img_b, self._img_proj, self._txt_w, self._txt_b, self._txt_proj):
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def encode_image(self, img):
        """Embed one [H,W,3] image or a batch [B,H,W,3] onto the unit sphere."""
        single = hasattr(img, "ndim") and img.ndim == 3
        is_np = not isinstance(img, torch.Tensor)
        x = torch.as_tensor(np.asarray(img)) if is_np else img
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError("expected [H,W,3] or [B,H,W,3] image input")
        dt = x.dtype if x.is_floating_point() else torch.float64
        x = x.to(dt)
        feats = torch.tanh(patch_features(x, self.patch) @ self._img_w.to(dt) + self._img_b.to(dt))
        z = feats.mean(dim=1) @ self._img_proj.to(dt)
        z = z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)
        if single:
            z = z[0]
        return z.numpy() if is_np else z

    def encode_prompt(self, prompt):
        """Embed an [N,D] prompt (or batch [K,N,D]); differentiable in the input."""
        is_np = not isinstance(prompt, torch.Tensor)
        x = torch.as_tensor(np.asarray(prompt)) if is_np else prompt
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"expected [N,{self.dim}] or [K,N,{self.dim}] prompt input")
        dt = x.dtype
        feats = torch.tanh(x @ self._txt_w.to(dt) + self._txt_b.to(dt))
        z = feats.mean(dim=1) @ self._txt_proj.to(dt)
        z = z / torch.linalg.vector_norm(z, dim=-1, keepdim=True)
        if single:
            z = z[0]
        return z.detach().numpy() if is_np else z


@dataclass
class PromptBank:
    """Three learnable prompt token matrices, indexed (rain, haze, snow)."""

    prompts: torch.Tensor  # [3, N, D]
    seed: int
    n_tokens: int = PROMPT_TOKENS
    dim: int = EMBED_DIM

    def __post_init__(self):
        expected = (3, self.n_tokens, self.dim)
        if tuple(self.prompts.shape) != expected:
            raise ValueError(f"prompt bank shape {tuple(self.prompts.shape)} != {expected}")
        if not torch.isfinite(self.prompts).all():
            raise ValueError("prompt bank contains non-finite entries")

    def clone(self) -> "PromptBank":
        return PromptBank(self.prompts.detach().clone(), self.seed, self.n_tokens, self.dim)


def init_prompts(seed: int, n_tokens: int = PROMPT_TOKENS, dim: int = EMBED_DIM) -> PromptBank:
    """Gaussian-initialized prompt bank (std 0.02), deterministic in seed."""
    rng = np.random.default_rng(seed)
    arr = rng.normal(0.0, PROMPT_INIT_STD, size=(3, n_tokens, dim))
    return PromptBank(torch.from_numpy(arr), seed=int(seed), n_tokens=n_tokens, dim=dim)


def save_prompt_bank(path, bank: PromptBank, extra_meta: dict | None = None) -> None:
    """Persist a bank as a named-array container with metadata."""
    meta = {"format_version": BANK_FORMAT_VERSION, "seed": bank.seed, "n_tokens": bank.n_tokens, "dim": bank.dim}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {key: bank.prompts[i].detach().numpy() for i, key in enumerate(_BANK_KEYS)}
    np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_prompt_bank(path) -> PromptBank:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format_version") != BANK_FORMAT_VERSION:
                raise ValueError(f"unsupported prompt bank version {meta.get('format_version')}")
            mats = [data[key] for key in _BANK_KEYS]
    except KeyError as exc:
        raise ValueError(f"prompt bank file {path} is missing key {exc}") from exc
    except (OSError, EOFError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read prompt bank {path}: {exc}") from exc
    prompts = torch.from_numpy(np.stack(mats))
    return PromptBank(prompts, seed=int(meta["seed"]), n_tokens=int(meta["n_tokens"]), dim=int(meta["dim"]))
