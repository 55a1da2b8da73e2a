"""Training objectives.

All reconstruction terms are pixel-averaged squared errors, so the loss
weights do not depend on the slice resolution. Functions accept tensors and
return tensors so they can be differentiated; array-likes are converted.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError


def _t(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(a, dtype=torch.float64)


def _mse(target, prediction) -> torch.Tensor:
    target, prediction = _t(target), _t(prediction)
    if target.shape != prediction.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(prediction.shape)}")
    return ((target - prediction) ** 2).mean()


def l_cr(original, reconstruction_of_corrupted) -> torch.Tensor:
    """Context-restoration loss: error of restoring ``original`` from its swapped version."""
    return _mse(original, reconstruction_of_corrupted)


def l_rec(x, reconstruction) -> torch.Tensor:
    return _mse(x, reconstruction)


def l_geo(geo_logits, true_class) -> torch.Tensor:
    """Cross-entropy of the transform head, averaged over the batch.

    Accepts a single logit vector with an integer class or a ``(N, K)`` batch
    with ``N`` labels.
    """
    logits = _t(geo_logits)
    target = torch.as_tensor(true_class, dtype=torch.long)
    if logits.dim() == 1:
        logits, target = logits.unsqueeze(0), target.reshape(1)
    k = logits.shape[-1]
    if target.numel() and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"class index outside [0, {k})")
    # log_softmax uses log-sum-exp internally, so saturated logits stay finite
    return F.cross_entropy(logits, target)


def l_kl(mu, log_var) -> torch.Tensor:
    """KL divergence from N(mu, exp(log_var)) to N(0, I), summed over latent dims, batch-averaged."""
    mu, log_var = _t(mu), _t(log_var)
    if mu.dim() == 1:
        mu, log_var = mu.unsqueeze(0), log_var.unsqueeze(0)
    per_sample = -0.5 * (1 + log_var - mu**2 - torch.exp(log_var)).sum(dim=1)
    return per_sample.mean()


def combine(l_geo, l_rec, l_kl, epsilon: float, beta_kl: float):
    """``l_geo + epsilon * l_rec + beta_kl * l_kl``; works on floats or tensors."""
    return l_geo + epsilon * l_rec + beta_kl * l_kl


@dataclass(frozen=True)
class LossBreakdown:
    l_cr: float = 0.0
    l_geo: float = 0.0
    l_rec: float = 0.0
    l_kl: float = 0.0
    l_total: float = 0.0
    epsilon: float = 1.0
    beta_kl: float = 0.0

    def as_row(self) -> list[float]:
        return [self.l_cr, self.l_geo, self.l_rec, self.l_kl, self.l_total]


def check_weights(epsilon: float, beta_kl: float) -> None:
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    if not beta_kl >= 0:
        raise ConfigError(f"beta_kl must be >= 0, got {beta_kl}")


def l_multitask(l_geo: float, l_rec: float, l_kl: float = 0.0, epsilon: float = 1.0, beta_kl: float = 0.0) -> LossBreakdown:
    check_weights(epsilon, beta_kl)
    l_geo, l_rec, l_kl = float(l_geo), float(l_rec), float(l_kl)
    return LossBreakdown(
        l_geo=l_geo,
        l_rec=l_rec,
        l_kl=l_kl,
        l_total=combine(l_geo, l_rec, l_kl, epsilon, beta_kl),
        epsilon=epsilon,
        beta_kl=beta_kl,
    )
