"""Stage 1: align learnable weather prompts with degraded images.

Each of the three prompts is pulled toward its weather class by a
softmax cross-entropy over cosine similarities in the frozen embedding
space. Only prompt entries receive gradients; the encoders never change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .embedding import FrozenEncoders, PromptBank
from .labels import Weather


@dataclass
class Stage1Config:
    iterations: int = 8000
    lr: float = 5e-6
    batch_size: int = 64
    image_size: int | None = 224  # None = use images at native size
    temperature: float = 1.0
    n_augment: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("iterations, lr and batch_size must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    ri = (np.arange(size) * (h / size)).astype(int).clip(0, h - 1)
    ci = (np.arange(size) * (w / size)).astype(int).clip(0, w - 1)
    return img[np.ix_(ri, ci)]


def augment_image(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Seeded flip / zoom / rotate augmentation for stage-1 images.

    Rotation is by 180 degrees only: quarter turns would turn near-vertical
    rain into horizontal streaks, an orientation no weather class produces.
    """
    out = img
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = np.rot90(out, k=2)
    if rng.random() < 0.5:
        h, w = out.shape[:2]
        scale = rng.uniform(0.8, 1.0)
        ch, cw = max(int(h * scale), 8), max(int(w * scale), 8)
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        out = _resize_nearest(out[y0 : y0 + ch, x0 : x0 + cw], h)
    return np.ascontiguousarray(out)


def prompt_embeddings(enc: FrozenEncoders, bank_prompts: torch.Tensor) -> torch.Tensor:
    """Encode the three prompts -> [3, D] unit rows in (rain, haze, snow) order."""
    return enc.encode_prompt(bank_prompts)


def similarity_logits(enc: FrozenEncoders, bank: PromptBank, images) -> np.ndarray:
    """Cosine logits [B, 3] between image embeddings and encoded prompts."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.shape[0] == 0:
        raise ValueError("empty image batch")
    emb = torch.from_numpy(enc.encode_image(imgs))
    pe = prompt_embeddings(enc, bank.prompts.detach().to(torch.float64))
    return (emb @ pe.T).numpy()


def cross_entropy_loss(logits, labels, temperature: float = 1.0):
    """Batch-mean softmax cross entropy over the three class logits."""
    is_np = not isinstance(logits, torch.Tensor)
    lg = torch.as_tensor(np.asarray(logits, dtype=np.float64)) if is_np else logits
    if lg.ndim == 1:
        lg = lg[None]
    lb = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if lb.min() < 0 or lb.max() >= lg.shape[1]:
        raise ValueError("labels must index the logit columns")
    loss = torch.nn.functional.cross_entropy(lg / temperature, lb)
    return float(loss) if is_np else loss


def classify_degradation(enc: FrozenEncoders, bank: PromptBank, image) -> Weather:
    """Argmax weather class of one image; ties resolve to the lowest index."""
    logits = similarity_logits(enc, bank, image)[0]
    return Weather(int(np.argmax(logits)))


def _encode_dataset(
    enc: FrozenEncoders,
    dataset: Sequence,
    cfg: Stage1Config,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cache (augmented) image embeddings once; encoders are frozen anyway."""
    images, labels = [], []
    for img, label in dataset:
        img = np.asarray(img, dtype=np.float64)
        if cfg.image_size is not None:
            img = _resize_nearest(img, cfg.image_size)
        images.append(img)
        labels.append(int(label))
        for _ in range(max(cfg.n_augment - 1, 0)):
            images.append(augment_image(img, rng))
            labels.append(int(label))
    present = set(labels)
    if present != {0, 1, 2}:
        raise ValueError(f"dataset must contain all three classes, got labels {sorted(present)}")
    emb = enc.encode_image(np.stack(images))
    emb = torch.from_numpy(emb) if not isinstance(emb, torch.Tensor) else emb
    return emb, torch.as_tensor(labels, dtype=torch.long)


def train_prompts(
    cfg: Stage1Config,
    enc: FrozenEncoders,
    bank: PromptBank,
    dataset: Sequence,
    log_path=None,
) -> tuple[PromptBank, list[dict]]:
    """Adam on prompt entries only; returns the trained bank and loss history.

    ``dataset`` is a sequence of (image [H,W,3] in [0,1], label) pairs.
    """
    rng = np.random.default_rng(cfg.seed)
    emb, labels = _encode_dataset(enc, dataset, cfg, rng)

    prompts = bank.prompts.detach().to(torch.float64).clone().requires_grad_(True)
    opt = torch.optim.Adam([prompts], lr=cfg.lr)
    history = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iterations):
            idx = rng.choice(len(labels), size=min(cfg.batch_size, len(labels)), replace=False)
            idx_t = torch.as_tensor(idx)
            pe = prompt_embeddings(enc, prompts)
            logits = emb[idx_t] @ pe.T
            loss = cross_entropy_loss(logits, labels[idx_t], cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                acc = float((torch.argmax(logits, dim=1) == labels[idx_t]).double().mean())
            record = {"iteration": it, "loss": loss.item(), "accuracy": acc}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_file:
            log_file.close()

    trained = PromptBank(prompts.detach(), seed=bank.seed, n_tokens=bank.n_tokens, dim=bank.dim)
    return trained, history


def prompt_accuracy(enc: FrozenEncoders, bank: PromptBank, dataset: Sequence) -> float:
    """Fraction of (image, label) pairs classified correctly by the bank."""
    images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in dataset])
    labels = np.asarray([int(label) for _, label in dataset])
    logits = similarity_logits(enc, bank, images)
    return float((np.argmax(logits, axis=1) == labels).mean())
