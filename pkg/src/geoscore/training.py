"""Two-stage training: context-restoration pretraining, then multi-task fine-tuning.

Every random draw of step ``t`` (batch indices, patch centres, transform
labels, latent noise) comes from a generator seeded with ``(seed, stage, t)``.
A run split at any step and resumed from a checkpoint therefore replays the
exact same sequence as an uninterrupted run.
"""

from __future__ import annotations

import copy
import io
import json
import logging
import os
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses
from .datamodel import DatasetManifest, load_slice
from .errors import CheckpointMismatch, ConfigError, CorruptCheckpoint, DivergenceDetected
from .geoxform import NUM_CLASSES, sample_patch_swap, swap_patches, transform_batch
from .network import GeoVAE, NetConfig, is_geo_param

log = logging.getLogger(__name__)

STAGES = ("pretrain", "multitask")
_STAGE_CODE = {"pretrain": 1, "multitask": 2}
CHECKPOINT_FORMAT = "geoscore-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    batch_size: int = 16
    steps: int = 1000
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epsilon: float = 1.0
    beta_kl: float = 1e-4
    seed: int = 0
    checkpoint_interval: int = 0
    input_size: int = 128
    # multitask stage only: keep the transform head fixed and train the VAE
    # on untransformed slices (the reconstruction-only ablation)
    freeze_geo: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        losses.check_weights(self.epsilon, self.beta_kl)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def step_optimizer(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: OptimizerState,
    hyper: TrainConfig,
) -> tuple[dict[str, torch.Tensor], OptimizerState]:
    """One Adam (or plain SGD) update. Inputs are not modified.

    Parameters whose gradient is ``None`` are left untouched, moments included.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise DivergenceDetected(f"non-finite gradient for {name}")
    new_params = dict(params)
    if hyper.optimizer == "sgd":
        for name, g in grads.items():
            if g is not None:
                new_params[name] = params[name] - hyper.lr * g
        return new_params, OptimizerState(state.step + 1, dict(state.m), dict(state.v))

    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        if g is None:
            continue
        m_prev = state.m.get(name, torch.zeros_like(g))
        v_prev = state.v.get(name, torch.zeros_like(g))
        m[name] = b1 * m_prev + (1 - b1) * g
        v[name] = b2 * v_prev + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**t)
        v_hat = v[name] / (1 - b2**t)
        new_params[name] = params[name] - hyper.lr * m_hat / (v_hat.sqrt() + hyper.adam_eps)
    return new_params, OptimizerState(t, m, v)


@dataclass(frozen=True)
class LogRecord:
    step: int
    losses: losses.LossBreakdown
    wall_time: float


class TrainLog(list):
    """List of ``LogRecord`` with strictly increasing step indices."""

    def append(self, record: LogRecord) -> None:
        if self and record.step <= self[-1].step:
            raise ValueError("step indices must be strictly increasing")
        super().append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r.losses, name) for r in self])

    def write(self, path: str | os.PathLike, append: bool = False) -> None:
        path = Path(path)
        mode = "a" if append and path.exists() else "w"
        with open(path, mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write("step\tl_cr\tl_geo\tl_rec\tl_kl\tl_total\n")
            for r in self:
                fh.write("\t".join([str(r.step)] + [repr(float(v)) for v in r.losses.as_row()]) + "\n")


def load_train_images(data, split: str = "train") -> np.ndarray:
    """``(N, S, S)`` float32 array from a manifest split or an array-like of slices."""
    if isinstance(data, DatasetManifest):
        entries = data.split(split)
        if not entries:
            raise ConfigError(f"the {split} split is empty")
        return np.stack([load_slice(e.image_path).pixels for e in entries]).astype(np.float32)
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ConfigError("expected a non-empty (N, S, S) array of training slices")
    return arr


def _step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STAGE_CODE[stage], int(step)])


def _batch(images: np.ndarray, config: TrainConfig, step: int):
    """Draw the inputs, targets and labels for one step."""
    rng = _step_rng(config.seed, config.stage, step)
    idx = rng.integers(images.shape[0], size=config.batch_size)
    clean = images[idx]
    labels = None
    if config.stage == "pretrain":
        corrupted = np.stack([swap_patches(x, sample_patch_swap(x, rng)) for x in clean])
        inputs, targets = torch.from_numpy(corrupted), torch.from_numpy(clean)
    elif config.freeze_geo:
        inputs = targets = torch.from_numpy(clean)
    else:
        labels = rng.integers(NUM_CLASSES, size=config.batch_size)
        inputs = targets = transform_batch(torch.from_numpy(clean).unsqueeze(1), labels).squeeze(1)
    noise = torch.Generator().manual_seed(int(rng.integers(2**62)))
    return inputs.unsqueeze(1), targets.unsqueeze(1), labels, noise


def compute_losses(model: GeoVAE, inputs, targets, labels, config: TrainConfig, generator=None, mode="train"):
    """Return ``(objective tensor, LossBreakdown)`` for one batch."""
    dtype = next(model.parameters()).dtype
    out = model(inputs.to(dtype), mode=mode, generator=generator)
    targets = targets.to(dtype)
    kl = losses.l_kl(out.mu, out.log_var)
    if config.stage == "pretrain":
        cr = losses.l_cr(targets, out.reconstruction)
        total = cr + config.beta_kl * kl
        breakdown = losses.LossBreakdown(
            l_cr=cr.item(), l_kl=kl.item(), l_total=total.item(),
            epsilon=config.epsilon, beta_kl=config.beta_kl,
        )
        return total, breakdown
    rec = losses.l_rec(targets, out.reconstruction)
    if labels is None:
        geo = torch.zeros((), dtype=dtype)
    else:
        geo = losses.l_geo(out.geo_logits, labels)
    total = losses.combine(geo, rec, kl, config.epsilon, config.beta_kl)
    breakdown = losses.LossBreakdown(
        l_geo=geo.item(), l_rec=rec.item(), l_kl=kl.item(), l_total=total.item(),
        epsilon=config.epsilon, beta_kl=config.beta_kl,
    )
    return total, breakdown


def _trainable(name: str, config: TrainConfig) -> bool:
    if is_geo_param(name):
        return config.stage == "multitask" and not config.freeze_geo
    return True


def train(
    model: GeoVAE,
    data,
    config: TrainConfig,
    *,
    start_step: int = 0,
    opt_state: OptimizerState | None = None,
    checkpoint_path: str | os.PathLike | None = None,
) -> tuple[GeoVAE, TrainLog, OptimizerState]:
    """Run steps ``start_step .. config.steps - 1`` of ``config.stage`` on a copy of ``model``."""
    images = load_train_images(data)
    if images.shape[1:] != (model.config.input_size,) * 2:
        raise ConfigError(
            f"slices are {images.shape[1]}x{images.shape[2]}, model expects {model.config.input_size}"
        )
    model = copy.deepcopy(model)
    model.train()
    opt_state = opt_state or OptimizerState()
    named = dict(model.named_parameters())
    for name, p in named.items():
        p.requires_grad_(_trainable(name, config))
    trainlog = TrainLog()
    for step in range(start_step, config.steps):
        t0 = time.perf_counter()
        inputs, targets, labels, noise = _batch(images, config, step)
        total, breakdown = compute_losses(model, inputs, targets, labels, config, generator=noise)
        if not np.isfinite(breakdown.l_total):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        model.zero_grad(set_to_none=True)
        total.backward()
        params = {n: p.detach() for n, p in named.items()}
        grads = {n: (p.grad if p.requires_grad else None) for n, p in named.items()}
        new_params, opt_state = step_optimizer(params, grads, opt_state, config)
        with torch.no_grad():
            for n, p in named.items():
                if new_params[n] is not params[n]:
                    p.copy_(new_params[n])
        trainlog.append(LogRecord(step, breakdown, time.perf_counter() - t0))
        if config.checkpoint_interval and checkpoint_path and (step + 1) % config.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, model, opt_state, config, step + 1)
        if step % 100 == 0:
            log.debug("%s step %d loss %.6f", config.stage, step, breakdown.l_total)
    for p in named.values():
        p.requires_grad_(True)
    model.zero_grad(set_to_none=True)
    model.eval()
    return model, trainlog, opt_state


def pretrain(model, data, config: TrainConfig, **kwargs):
    """Context restoration: reconstruct slices from patch-swapped copies. Transform head frozen."""
    return train(model, data, config.replace(stage="pretrain"), **kwargs)


def train_multitask(model, data, config: TrainConfig, **kwargs):
    """Joint transform classification and reconstruction of the transformed slice."""
    return train(model, data, config.replace(stage="multitask"), **kwargs)


@dataclass
class Checkpoint:
    model: GeoVAE
    optimizer: OptimizerState
    train_config: dict
    step: int
    extra: dict = field(default_factory=dict)

    @property
    def net_config(self) -> NetConfig:
        return self.model.config


def save_checkpoint(
    path: str | os.PathLike,
    model: GeoVAE,
    opt_state: OptimizerState | None,
    config: TrainConfig | dict | None,
    step: int,
    extra: dict | None = None,
) -> None:
    """Write params, optimizer moments, configs and step counter to an npz container."""
    opt_state = opt_state or OptimizerState()
    if isinstance(config, TrainConfig):
        config = asdict(config)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": model.config.to_dict(),
        "train_config": config or {},
        "step": int(step),
        "optimizer_step": int(opt_state.step),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    for name, t in opt_state.m.items():
        arrays[f"adam_m/{name}"] = t.cpu().numpy()
    for name, t in opt_state.v.items():
        arrays[f"adam_v/{name}"] = t.cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expect: NetConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path}: not a geoscore checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported checkpoint version {meta.get('version')}")
    net_config = NetConfig.from_dict(meta["net_config"])
    if expect is not None and expect != net_config:
        raise CheckpointMismatch(f"{path}: checkpoint config {net_config} differs from expected {expect}")
    dtype = getattr(torch, meta["dtype"])
    model = GeoVAE(net_config).to(dtype)
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"{path}: parameter set does not match its config ({exc})") from exc
    model.eval()
    opt = OptimizerState(
        step=meta["optimizer_step"],
        m={k[len("adam_m/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("adam_v/")},
    )
    return Checkpoint(model, opt, meta["train_config"], meta["step"], meta.get("extra", {}))
