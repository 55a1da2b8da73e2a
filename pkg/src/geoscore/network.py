"""VAE with a geometric-transformation classification head.

Encoder: stride-2 3x3 convolutions with ReLU. The last feature map feeds both
the latent heads (mean and log-variance, fully connected) and the transform
head (global average pool + one linear layer). The decoder mirrors the
encoder with stride-2 transposed convolutions and ends in a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .geoxform import NUM_CLASSES

GEO_HEAD_PREFIX = "geo_head."


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 128
    filters: tuple[int, ...] = (32, 64, 128, 256)
    latent_dim: int = 128
    num_classes: int = NUM_CLASSES
    # "avg": global average pool before the transform head; "flatten": the head
    # sees the whole final feature map, keeping spatial position
    geo_pool: str = "avg"

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.geo_pool not in ("avg", "flatten"):
            raise ConfigError(f"geo_pool must be 'avg' or 'flatten', got {self.geo_pool!r}")
        if not self.filters or any(f < 1 for f in self.filters):
            raise ConfigError(f"filter counts must be positive, got {self.filters}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_size % 8 != 0:
            raise ConfigError(f"input_size {self.input_size} is not divisible by 8")
        if self.input_size % (2 ** len(self.filters)) != 0:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**{len(self.filters)}"
            )

    @property
    def feature_side(self) -> int:
        return self.input_size // 2 ** len(self.filters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{**d, "filters": tuple(d["filters"])})


class ForwardOutput(NamedTuple):
    reconstruction: torch.Tensor
    mu: torch.Tensor
    log_var: torch.Tensor
    geo_logits: torch.Tensor


class GeoVAE(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        chans = (1,) + config.filters
        self.encoder = nn.Sequential(
            *[
                layer
                for c_in, c_out in zip(chans[:-1], chans[1:])
                for layer in (nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU())
            ]
        )
        top = config.filters[-1]
        flat = top * config.feature_side**2
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_log_var = nn.Linear(flat, config.latent_dim)
        self.fc_decode = nn.Linear(config.latent_dim, flat)

        rev = config.filters[::-1] + (1,)
        layers: list[nn.Module] = []
        for c_in, c_out in zip(rev[:-1], rev[1:]):
            layers.append(nn.ConvTranspose2d(c_in, c_out, 3, stride=2, padding=1, output_padding=1))
            layers.append(nn.ReLU())
        self.decoder = nn.Sequential(*layers[:-1])
        self.geo_head = nn.Linear(top if config.geo_pool == "avg" else flat, config.num_classes)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        feats = self.encoder(x)
        flat = feats.flatten(1)
        return feats, self.fc_mu(flat), self.fc_log_var(flat)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        c = self.config
        h = F.relu(self.fc_decode(z)).view(-1, c.filters[-1], c.feature_side, c.feature_side)
        return torch.sigmoid(self.decoder(h))

    def forward(
        self,
        x: torch.Tensor,
        mode: str = "eval",
        generator: torch.Generator | None = None,
    ) -> ForwardOutput:
        """Run both heads on a batch ``x`` of shape (N, 1, S, S).

        In ``train`` mode the latent is sampled with the reparameterization
        trick using ``generator``; in ``eval`` mode the latent mean is decoded.
        """
        s = self.config.input_size
        if x.dim() != 4 or x.shape[1:] != (1, s, s):
            raise ValueError(f"expected input of shape (N, 1, {s}, {s}), got {tuple(x.shape)}")
        feats, mu, log_var = self.encode(x)
        if mode == "train":
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            z = mu + torch.exp(0.5 * log_var) * eps
        elif mode == "eval":
            z = mu
        else:
            raise ValueError(f"unknown mode {mode!r}")
        pooled = feats.mean(dim=(2, 3)) if self.config.geo_pool == "avg" else feats.flatten(1)
        geo_logits = self.geo_head(pooled)
        return ForwardOutput(self.decode(z), mu, log_var, geo_logits)


def init_params(seed: int, config: NetConfig, dtype: torch.dtype = torch.float32) -> GeoVAE:
    """Build a model with He-normal (fan-in) weights and zero biases."""
    model = GeoVAE(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = module.weight
                if isinstance(module, nn.ConvTranspose2d):
                    fan_in = w.shape[0] * w.shape[2] * w.shape[3]
                else:
                    fan_in = w[0].numel()
                w.copy_(torch.randn(w.shape, generator=gen, dtype=dtype) * (2.0 / fan_in) ** 0.5)
                module.bias.zero_()
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def is_geo_param(name: str) -> bool:
    return name.startswith(GEO_HEAD_PREFIX)
