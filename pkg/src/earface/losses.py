"""Softmax + center loss per task, and the beta-weighted two-task combination.

For one task with logits ``z_i``, penultimate features ``x_i`` and labels
``y_i`` over a batch of ``m`` samples::

    L = mean_i( -log softmax(z_i)[y_i] ) + lambda/2 * sum_i ||x_i - c_{y_i}||^2

and two tasks combine as ``beta * L_age + (1 - beta) * L_gender``.

The softmax term is averaged over the batch so the default ``lambda`` and
``beta`` do not depend on batch size; the center term keeps the plain sum.
Centers are not trained by backprop; :func:`update_centers` moves them toward
the batch means after each optimiser step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DimensionError

DEFAULT_LAMBDA = 0.1
DEFAULT_BETA = 0.75
DEFAULT_CENTER_ALPHA = 0.5


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _as_labels(labels) -> torch.Tensor:
    t = _as_tensor(labels)
    return t.long().reshape(-1)


@dataclass
class CenterBank:
    """Per-class feature centers for one task (``num_classes x feat_dim``)."""

    centers: torch.Tensor
    alpha: float = DEFAULT_CENTER_ALPHA

    def __post_init__(self):
        self.centers = _as_tensor(self.centers)
        if self.centers.ndim != 2:
            raise DimensionError(f"centers must be 2-D, got shape {tuple(self.centers.shape)}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"center learning rate alpha must be in (0, 1], got {self.alpha}")
        if not torch.isfinite(self.centers).all():
            raise ConfigError("centers must be finite")

    @classmethod
    def zeros(cls, num_classes: int, feat_dim: int, alpha: float = DEFAULT_CENTER_ALPHA, dtype=torch.float32):
        return cls(torch.zeros(num_classes, feat_dim, dtype=dtype), alpha)

    @classmethod
    def from_features(cls, features, labels, num_classes: int, alpha: float = DEFAULT_CENTER_ALPHA) -> "CenterBank":
        """Bank whose centers start at the per-class feature means (zero for absent classes)."""
        x = _as_tensor(features).detach()
        y = _as_labels(labels)
        centers = torch.zeros(num_classes, x.shape[1], dtype=x.dtype)
        for j in torch.unique(y).tolist():
            centers[j] = x[y == j].mean(dim=0)
        return cls(centers, alpha)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.centers.shape[1]

    def clone(self) -> "CenterBank":
        return CenterBank(self.centers.detach().clone(), self.alpha)


@dataclass
class LossBreakdown:
    """Both summands of the per-task loss and their sum, as 0-d tensors."""

    softmax_term: torch.Tensor
    center_term: torch.Tensor
    total: torch.Tensor
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {
            "softmax": float(self.softmax_term.detach()),
            "center": float(self.center_term.detach()),
            "total": float(self.total.detach()),
        }


def softmax_cross_entropy(logits, label) -> torch.Tensor:
    """Negative log softmax probability of the true class.

    ``logits`` of shape ``(n,)`` with an integer label gives a 0-d tensor;
    shape ``(m, n)`` with ``m`` labels gives one loss per row.
    """
    z = _as_tensor(logits)
    single = z.ndim == 1
    if single:
        z = z[None]
    y = _as_labels(label)
    n = z.shape[1]
    if n < 2:
        raise DimensionError(f"need at least 2 classes, got {n}")
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    if (y < 0).any() or (y >= n).any():
        raise IndexError(f"label out of range for {n} classes: {y.tolist()}")
    shifted = z - z.max(dim=1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(shifted).sum(dim=1))
    loss = log_norm - shifted.gather(1, y[:, None]).squeeze(1)
    return loss[0] if single else loss


def _check_features(features: torch.Tensor, labels: torch.Tensor, bank: CenterBank) -> None:
    if features.ndim != 2:
        raise DimensionError(f"features must be (batch, feat_dim), got {tuple(features.shape)}")
    if features.shape[1] != bank.feat_dim:
        raise DimensionError(f"feature width {features.shape[1]} != center width {bank.feat_dim}")
    if features.shape[0] != labels.shape[0]:
        raise DimensionError(f"{features.shape[0]} features but {labels.shape[0]} labels")
    if features.shape[0] < 1:
        raise DimensionError("empty batch")
    if (labels < 0).any() or (labels >= bank.num_classes).any():
        raise IndexError(f"label out of range for {bank.num_classes} centers")


def center_term(features, labels, bank: CenterBank, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    """``lam / 2 * sum_i ||x_i - c_{y_i}||^2``; centers carry no gradient."""
    x = _as_tensor(features)
    y = _as_labels(labels)
    _check_features(x, y, bank)
    c = bank.centers.detach().to(x.dtype)[y]
    return 0.5 * lam * ((x - c) ** 2).sum()


def update_centers(bank: CenterBank, features, labels) -> CenterBank:
    """One center step; returns a new bank and leaves ``bank`` untouched.

    ``c_j += alpha * sum_{i: y_i = j} (x_i - c_j) / (1 + n_j)`` where ``n_j``
    counts class ``j`` in the batch. Classes absent from the batch keep their
    centers bit-for-bit.
    """
    x = _as_tensor(features).detach()
    y = _as_labels(labels)
    _check_features(x, y, bank)
    centers = bank.centers.detach().clone()
    x = x.to(centers.dtype)
    for j in torch.unique(y).tolist():
        mask = y == j
        resid = (x[mask] - centers[j]).sum(dim=0)
        centers[j] = centers[j] + bank.alpha * resid / (1.0 + mask.sum().to(centers.dtype))
    return CenterBank(centers, bank.alpha)


def task_loss(logits, features, labels, bank: CenterBank, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """Softmax (batch mean) plus center term for one task."""
    z = _as_tensor(logits)
    x = _as_tensor(features)
    y = _as_labels(labels)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise DimensionError(f"logits {tuple(z.shape)} do not match {y.shape[0]} labels")
    soft = softmax_cross_entropy(z, y).mean()
    cent = center_term(x, y, bank, lam)
    return LossBreakdown(soft, cent, soft + cent, lam)


def task_loss_grad(logits, features, labels, bank: CenterBank, lam: float = DEFAULT_LAMBDA):
    """Closed-form gradients of ``task_loss(...).total``.

    Returns ``(d_logits, d_features)`` as float64 numpy arrays:
    ``(softmax(z) - onehot(y)) / m`` and ``lam * (x - c_y)``.
    """
    z = np.asarray(_as_tensor(logits).detach(), dtype=np.float64)
    x = np.asarray(_as_tensor(features).detach(), dtype=np.float64)
    y = np.asarray(_as_labels(labels))
    m = z.shape[0]
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(m), y] -= 1.0
    c = np.asarray(bank.centers.detach(), dtype=np.float64)[y]
    return p / m, lam * (x - c)


def multitask_loss(age_total, gender_total, beta: float = DEFAULT_BETA):
    """``beta * age_total + (1 - beta) * gender_total``.

    At ``beta`` = 1 or 0 the unweighted task is dropped entirely, so the
    result equals the other argument exactly (and carries no graph from it).
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must be in [0, 1], got {beta}")
    if beta == 1.0:
        return age_total
    if beta == 0.0:
        return gender_total
    return beta * age_total + (1.0 - beta) * gender_total
