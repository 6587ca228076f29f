"""Training losses: soft Dice, cross-entropy, the per-head hybrid loss and the
weighted sum over supervision heads."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class LossConfig:
    lambda_ce: float = 0.25
    eps: float = 1.0

    def __post_init__(self):
        if self.lambda_ce < 0:
            raise ConfigError(f"lambda_ce must be >= 0, got {self.lambda_ce}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")


def _check_pair(p, g):
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth shape {g.shape}")


def dice_score(p, g, eps=1.0):
    """Per-class (2 sum(p g) + eps) / (sum(p) + sum(g) + eps).

    ``p`` and ``g`` are class-first arrays (C, ...) of probabilities or binary
    masks; every axis except the first is summed.
    """
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_pair(p, g)
    axes = tuple(range(1, p.ndim))
    return (2.0 * (p * g).sum(axis=axes) + eps) / (p.sum(axis=axes) + g.sum(axis=axes) + eps)


def dice_loss(p, g, eps=1.0):
    """1 - mean_c DSC_c, differentiable in ``p`` (a Tensor of probabilities)."""
    p = ad.as_tensor(p)
    g = np.asarray(g, dtype=np.float64)
    _check_pair(p, g)
    axes = tuple(range(1, p.data.ndim))
    inter = ad.sum(ad.mul(p, g), axis=axes)
    denom = ad.add(ad.sum(p, axis=axes), g.sum(axis=axes) + eps)
    dsc = ad.div(ad.add(ad.mul(inter, 2.0), eps), denom)
    return ad.sub(1.0, ad.mean(dsc))


def cross_entropy_loss(logits, labels):
    return ad.cross_entropy(logits, labels)


def hybrid_layer_loss(logits, labels, cfg=LossConfig()):
    """Dice loss on softmax probabilities plus ``lambda_ce`` times cross-entropy."""
    logits = ad.as_tensor(logits)
    g = ad.one_hot(labels, logits.shape[0])
    loss = dice_loss(ad.softmax_channel(logits), g, cfg.eps)
    if cfg.lambda_ce:
        loss = ad.add(loss, ad.mul(cross_entropy_loss(logits, labels), cfg.lambda_ce))
    return loss


def check_simplex(alpha, tol=1e-9):
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > tol:
        raise ContractError(f"weights {alpha.tolist()} are not on the simplex")
    return alpha


def weighted_total_loss(losses, alpha):
    """Convex combination sum_l alpha_l * L_l; works on Tensors or floats."""
    alpha = check_simplex(alpha)
    if len(losses) != len(alpha):
        raise DimensionError(f"{len(losses)} losses but {len(alpha)} weights")
    if not any(isinstance(l, ad.Tensor) for l in losses):
        return float(sum(a * float(l) for a, l in zip(alpha, losses)))
    total = None
    for a, l in zip(alpha, losses):
        term = ad.mul(l, float(a))
        total = term if total is None else ad.add(total, term)
    return total
