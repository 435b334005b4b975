"""Stage 2: diffusion restoration training with EMA and checkpointing.

One process, one seeded root: data order and timestep draws come from a
numpy generator, noise and gate randomness from a torch generator, so two
runs with the same seed produce bit-identical loss trajectories, and a
checkpoint resumes the exact trajectory it interrupted.
"""

from __future__ import annotations

import dataclasses
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .desm import multi_level_balance_loss
from .diffusion import DiffusionSchedule, build_schedule, diffuse, residual_loss
from .embedding import FrozenEncoders, PromptBank
from .restorer import RestorerConfig, RestorerModel
from .weathergen import DatasetManifest

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable, incomplete, or incompatible checkpoints."""


@dataclass
class Stage2Config:
    iterations: int = 5000  # paper scale: 400k at 256x256
    lr: float = 8e-5
    batch_size: int = 6
    lambda_balance: float = 0.01
    ema_decay: float = 0.995
    crop_size: int = 64
    seed: int = 0
    wpg_on: bool = True
    desm_on: bool = True
    balance_on: bool = True
    grad_clip: float = 0.0  # 0 disables
    # diffusion
    total_steps: int = 100
    beta_bar_T: float = 0.1
    sample_steps: int = 3
    sample_strategy: str = "noise_projected"
    use_ema_eval: bool = True
    # model
    levels: int = 3
    base_channels: int = 32
    time_embed_dim: int = 128
    n_experts: int = 4
    route_threshold: float = 0.4
    encoder_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.lambda_balance < 0:
            raise ValueError("lambda_balance must be nonnegative")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations, batch_size and lr must be positive")

    def restorer_config(self) -> RestorerConfig:
        return RestorerConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            time_embed_dim=self.time_embed_dim,
            n_experts=self.n_experts,
            route_threshold=self.route_threshold,
            total_steps=self.total_steps,
            use_wpg=self.wpg_on,
            use_desm=self.desm_on,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_file(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in sorted(self.to_dict().items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "Stage2Config":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        casts = {"int": int, "float": float, "str": str,
                 "bool": lambda s: s.strip().lower() in ("true", "1", "yes")}
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key in types:
                values[key] = casts[str(types[key])](raw.strip())
        return cls(**values)


class EmaState:
    """Shadow copy of model parameters: shadow <- d*shadow + (1-d)*param."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = float(decay)
        self.shadow = {name: p.detach().clone() for name, p in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            s = self.shadow[name]
            if s.shape != p.shape:
                raise ValueError(f"EMA shape mismatch for {name}")
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, model: torch.nn.Module) -> None:
        for name, p in model.named_parameters():
            p.copy_(self.shadow[name])


def ema_update(ema: EmaState, model: torch.nn.Module) -> EmaState:
    ema.update(model)
    return ema


def compute_losses(model, schedule: DiffusionSchedule, bank, enc, clean, degraded,
                   t, eps, cfg: Stage2Config, generator=None):
    """Diffuse, predict, and score one batch; returns (total, parts, aux).

    ``model`` is anything with the RestorerModel forward signature, which
    lets tests substitute oracles. With lambda_balance == 0 or balance off
    the total is exactly the residual term.
    """
    latent = diffuse(schedule, clean, degraded, t, eps)
    res_true = degraded - clean
    res_hat, aux = model(latent, degraded, torch.as_tensor(np.asarray(t)), bank, enc,
                         training=True, generator=generator)
    l_res = residual_loss(res_true, res_hat)
    if aux["decisions"]:
        l_bal = multi_level_balance_loss(aux["decisions"])
    else:
        l_bal = torch.zeros((), dtype=l_res.dtype)
    total = l_res + cfg.lambda_balance * l_bal if cfg.balance_on else l_res
    return total, {"loss_res": l_res, "loss_balance": l_bal}, aux


def _routing_summary(aux) -> dict:
    out = {}
    if aux["decisions"]:
        freq = torch.stack([d.activation_frequency() for d in aux["decisions"]]).mean(dim=0)
        out["expert_freq"] = [round(float(v), 4) for v in freq]
    if aux["prompt_index"] is not None:
        counts = torch.bincount(aux["prompt_index"], minlength=3)
        out["prompt_hist"] = [int(v) for v in counts]
    return out


class Stage2Trainer:
    """Owns the model, optimizer, EMA and all randomness for one run."""

    def __init__(self, cfg: Stage2Config, manifest: DatasetManifest, bank: PromptBank,
                 enc: FrozenEncoders, split: str = "train"):
        self.cfg = cfg
        self.bank = bank
        self.enc = enc
        self.schedule = build_schedule(cfg.total_steps, cfg.beta_bar_T)
        records = manifest.split(split)
        cleans, degradeds = [], []
        for rec in records:
            clean, degraded, _ = manifest.load_pair(rec)
            cleans.append(clean.astype(np.float32))
            degradeds.append(degraded.astype(np.float32))
        self.clean = np.stack(cleans)
        self.degraded = np.stack(degradeds)
        self.model = RestorerModel(cfg.restorer_config(), enc if cfg.wpg_on else None)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=(0.9, 0.99))
        self.ema = EmaState(self.model, cfg.ema_decay)
        self.np_rng = np.random.default_rng(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.iteration = 0

    def sample_batch(self):
        """Seeded batch with random crop + horizontal flip augmentation."""
        n, h, w = self.clean.shape[:3]
        c = min(self.cfg.crop_size, h, w)
        idx = self.np_rng.integers(0, n, size=self.cfg.batch_size)
        clean = np.empty((len(idx), c, c, 3), dtype=np.float32)
        degraded = np.empty_like(clean)
        for row, i in enumerate(idx):
            y0 = int(self.np_rng.integers(0, h - c + 1))
            x0 = int(self.np_rng.integers(0, w - c + 1))
            cl = self.clean[i, y0 : y0 + c, x0 : x0 + c]
            dg = self.degraded[i, y0 : y0 + c, x0 : x0 + c]
            if self.np_rng.random() < 0.5:
                cl, dg = cl[:, ::-1], dg[:, ::-1]
            clean[row], degraded[row] = cl, dg
        to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).permute(0, 3, 1, 2)
        return to_t(clean), to_t(degraded)

    def training_step(self, batch=None) -> dict:
        """One optimizer update; returns the loss components and gate stats."""
        clean, degraded = batch if batch is not None else self.sample_batch()
        t = self.np_rng.integers(1, self.cfg.total_steps + 1, size=clean.shape[0])
        eps = torch.randn(clean.shape, generator=self.torch_gen, dtype=clean.dtype)
        total, parts, aux = compute_losses(
            self.model, self.schedule, self.bank, self.enc,
            clean, degraded, t, eps, self.cfg, generator=self.torch_gen,
        )
        if not torch.isfinite(total):
            raise RuntimeError(
                "non-finite training loss: "
                + json.dumps({
                    "iteration": self.iteration,
                    "t": [int(v) for v in t],
                    "loss_res": parts["loss_res"].item(),
                    "loss_balance": parts["loss_balance"].item(),
                    **_routing_summary(aux),
                })
            )
        self.opt.zero_grad()
        total.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.ema.update(self.model)
        self.iteration += 1
        record = {
            "iteration": self.iteration,
            "loss_res": parts["loss_res"].item(),
            "loss_balance": parts["loss_balance"].item(),
            "total": total.item(),
            **_routing_summary(aux),
        }
        return record

    def train(self, iterations: int | None = None, log_path=None) -> list[dict]:
        steps = self.cfg.iterations if iterations is None else iterations
        history = []
        log_file = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                record = self.training_step()
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
        finally:
            if log_file:
                log_file.close()
        return history

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def resume(cls, path, manifest: DatasetManifest, enc: FrozenEncoders | None = None,
               split: str = "train") -> "Stage2Trainer":
        ckpt = load_checkpoint(path)
        cfg = Stage2Config.from_dict(ckpt["config"])
        enc = enc or FrozenEncoders(seed=cfg.encoder_seed)
        bank = PromptBank(ckpt["bank"], seed=int(ckpt["bank_seed"]))
        trainer = cls(cfg, manifest, bank, enc, split=split)
        trainer.model.load_state_dict(ckpt["model"])
        for name, arr in ckpt["ema"].items():
            trainer.ema.shadow[name] = arr.clone()
        trainer.opt.load_state_dict(ckpt["optimizer"])
        trainer.np_rng.bit_generator.state = ckpt["np_rng_state"]
        trainer.torch_gen.set_state(ckpt["torch_rng_state"])
        trainer.iteration = ckpt["iteration"]
        return trainer


def _flatten_opt_state(opt: torch.optim.Adam) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays, meta = {}, {"param_groups": sd["param_groups"], "state_keys": {}}
    for pid, st in sd["state"].items():
        meta["state_keys"][str(pid)] = sorted(st.keys())
        for key, val in st.items():
            arr = val.detach().cpu().numpy() if isinstance(val, torch.Tensor) else np.asarray(val)
            arrays[f"opt.{pid}.{key}"] = arr
    return arrays, meta


def save_checkpoint(path, trainer: Stage2Trainer) -> None:
    """Write a self-contained npz checkpoint (model, EMA, optimizer, rng, bank)."""
    model_state = {f"model.{k}": v.detach().cpu().numpy() for k, v in trainer.model.state_dict().items()}
    ema_state = {f"ema.{k}": v.cpu().numpy() for k, v in trainer.ema.shadow.items()}
    opt_arrays, opt_meta = _flatten_opt_state(trainer.opt)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": trainer.cfg.to_dict(),
        "iteration": trainer.iteration,
        "has_ema": True,
        "param_shapes": {k: list(v.shape) for k, v in model_state.items()},
        "optimizer": opt_meta,
        "np_rng_state": trainer.np_rng.bit_generator.state,
        "bank_seed": trainer.bank.seed,
    }
    arrays = {
        "manifest": np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8),
        "rng.torch": trainer.torch_gen.get_state().numpy(),
        "bank.prompts": trainer.bank.prompts.detach().cpu().numpy(),
        **model_state,
        **ema_state,
        **opt_arrays,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    """Read a checkpoint back; explicit errors for corrupt or drifted files."""
    try:
        with np.load(path) as data:
            if "manifest" not in data:
                raise CheckpointError(f"{path}: missing manifest")
            manifest = json.loads(bytes(data["manifest"]).decode())
            if manifest.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported version {manifest.get('format_version')}")
            model, ema = {}, {}
            for key in manifest["param_shapes"]:
                if key not in data:
                    raise CheckpointError(f"{path}: missing array {key}")
                arr = data[key]
                if list(arr.shape) != manifest["param_shapes"][key]:
                    raise CheckpointError(f"{path}: shape drift in {key}")
                model[key.removeprefix("model.")] = torch.from_numpy(arr)
            for key in data.files:
                if key.startswith("ema."):
                    ema[key.removeprefix("ema.")] = torch.from_numpy(data[key])
            opt_meta = manifest["optimizer"]
            opt_state = {"param_groups": opt_meta["param_groups"], "state": {}}
            for pid, keys in opt_meta["state_keys"].items():
                st = {}
                for key in keys:
                    name = f"opt.{pid}.{key}"
                    if name not in data:
                        raise CheckpointError(f"{path}: missing optimizer array {name}")
                    arr = data[name]
                    st[key] = torch.from_numpy(arr) if arr.ndim else torch.tensor(float(arr))
                opt_state["state"][int(pid)] = st
            return {
                "config": manifest["config"],
                "iteration": manifest["iteration"],
                "model": model,
                "ema": ema,
                "optimizer": opt_state,
                "np_rng_state": manifest["np_rng_state"],
                "torch_rng_state": torch.from_numpy(data["rng.torch"].copy()),
                "bank": torch.from_numpy(data["bank.prompts"].copy()),
                "bank_seed": manifest["bank_seed"],
            }
    except (zipfile.BadZipFile, OSError, EOFError, KeyError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_model_for_eval(path, enc: FrozenEncoders | None = None):
    """Rebuild (model, ema, bank, enc, schedule, config) from a checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = Stage2Config.from_dict(ckpt["config"])
    enc = enc or FrozenEncoders(seed=cfg.encoder_seed)
    model = RestorerModel(cfg.restorer_config(), enc if cfg.wpg_on else None)
    model.load_state_dict(ckpt["model"])
    ema = EmaState(model, cfg.ema_decay)
    for name in ema.shadow:
        ema.shadow[name] = ckpt["ema"][name].clone()
    bank = PromptBank(ckpt["bank"], seed=int(ckpt["bank_seed"]))
    schedule = build_schedule(cfg.total_steps, cfg.beta_bar_T)
    return model, ema, bank, enc, schedule, cfg
