"""Heuristic uncertainty losses, their analytic gradients, and softmax extraction.

Four ways to learn per-pixel uncertainty: regress the residual magnitude,
fit a Gaussian per pixel, classify over discretized pixel values, or regress
a pair of quantiles. All loss functions operate elementwise on arrays (or
scalars) and return per-element losses and gradients; batch training code
averages them. Gradients are exact away from the absolute-value and pinball
kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageTensor, PredictionTriple
from .exceptions import ArgumentError, DomainError, ShapeError

__all__ = [
    "QuantileLevel",
    "SoftmaxHead",
    "residual_magnitude_loss",
    "gaussian_nll_loss",
    "discretize",
    "softmax_ce_loss",
    "softmax_extract",
    "pinball_loss",
    "qr_joint_loss",
    "softplus",
    "sigmoid",
]


@dataclass(frozen=True)
class QuantileLevel:
    """A probability level in (0, 1).

    Used both as the risk level (from which the pair alpha/2, 1 - alpha/2 is
    derived) and as a raw pinball level.
    """

    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ArgumentError(f"level must be in (0, 1), got {self.alpha}")

    @property
    def lower(self) -> float:
        return self.alpha / 2.0

    @property
    def upper(self) -> float:
        return 1.0 - self.alpha / 2.0


@dataclass(frozen=True)
class SoftmaxHead:
    """Per-pixel logits over ``num_bins`` discretized pixel values."""

    num_bins: int
    logits: np.ndarray

    def __post_init__(self):
        if self.num_bins < 2:
            raise ArgumentError(f"need at least 2 bins, got {self.num_bins}")
        arr = np.asarray(self.logits, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != self.num_bins:
            raise ShapeError(
                f"logits must have shape (M, N, {self.num_bins}), got {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise ArgumentError("logits contain non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "logits", arr)

    def probabilities(self) -> np.ndarray:
        """Softmax over the bin axis; rows sum to 1 up to rounding."""
        z = self.logits - self.logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def softplus(x):
    """log(1 + exp(x)), overflow-safe. Strictly positive."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    """Derivative of softplus."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _finite(name, *arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if not np.isfinite(a).all():
            raise ArgumentError(f"{name}: non-finite input")
        out.append(a)
    return out


def residual_magnitude_loss(u_tilde, f_hat, y):
    """Squared gap between the uncertainty head and the prediction error.

    loss = (u - |f - y|)^2, grad_u = 2 (u - |f - y|). Zero exactly when the
    head equals the residual magnitude.
    """
    u, f, y = _finite("residual_magnitude_loss", u_tilde, f_hat, y)
    gap = u - np.abs(f - y)
    return gap * gap, 2.0 * gap


def gaussian_nll_loss(u_tilde, f_hat, y):
    """Per-pixel Gaussian negative log-likelihood with the head in the denominator.

    loss = log(u) + (f - y)^2 / u. Returns (loss, grad_u, grad_f). The head
    value must be strictly positive; training enforces this with a softplus
    transform on the raw output.
    """
    u, f, y = _finite("gaussian_nll_loss", u_tilde, f_hat, y)
    if np.any(u <= 0.0):
        raise DomainError("gaussian_nll_loss requires u_tilde > 0")
    d = f - y
    loss = np.log(u) + d * d / u
    grad_u = 1.0 / u - d * d / (u * u)
    grad_f = 2.0 * d / u
    return loss, grad_u, grad_f


def discretize(y, num_bins: int):
    """Map values in [0, 1] to bin indices {0, ..., num_bins - 1}.

    Round-to-nearest with half-up ties: bin = floor(y * (num_bins - 1) + 0.5).
    Monotone in y, with 0 -> 0 and 1 -> num_bins - 1, and k / (num_bins - 1)
    mapping back to k.
    """
    if num_bins < 2:
        raise ArgumentError(f"need at least 2 bins, got {num_bins}")
    arr = np.asarray(y, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise DomainError("discretize: non-finite input")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError("discretize requires values in [0, 1]")
    bins = np.floor(arr * (num_bins - 1) + 0.5).astype(np.int64)
    if np.ndim(y) == 0:
        return int(bins)
    return bins


def softmax_ce_loss(head: SoftmaxHead, y: ImageTensor):
    """Mean cross-entropy of the per-pixel softmax against the binned target.

    Per pixel: logsumexp(logits) - logits[target_bin], target_bin = discretize(y).
    Returns (mean loss, gradient w.r.t. logits already divided by the pixel
    count), so the gradient matches the mean loss.
    """
    target_y = y.data if isinstance(y, ImageTensor) else np.asarray(y, dtype=np.float64)
    logits = head.logits
    if target_y.shape != logits.shape[:2]:
        raise ShapeError(
            f"target shape {target_y.shape} does not match logits {logits.shape[:2]}"
        )
    target = discretize(target_y, head.num_bins)
    zmax = logits.max(axis=-1)
    lse = np.log(np.exp(logits - zmax[..., None]).sum(axis=-1)) + zmax
    picked = np.take_along_axis(logits, target[..., None], axis=-1)[..., 0]
    loss = float(np.mean(lse - picked))

    n_pix = target_y.size
    grad = head.probabilities()
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    grad = (grad - onehot) / n_pix
    return loss, grad


def _quantile_bin(cum: np.ndarray, beta: float) -> np.ndarray:
    """Smallest 0-based bin whose cumulative probability reaches beta."""
    idx = (cum < beta).sum(axis=-1)
    return np.minimum(idx, cum.shape[-1] - 1)


def softmax_extract(head: SoftmaxHead, level: QuantileLevel) -> PredictionTriple:
    """Extract (prediction, lower length, upper length) from a softmax head.

    The prediction is the argmax bin (lowest index on ties) mapped to its bin
    value; the lengths come from the distribution's alpha/2 and 1 - alpha/2
    quantile bins, floored at zero so a skewed distribution cannot produce a
    negative length.
    """
    probs = head.probabilities()
    k1 = head.num_bins - 1
    cum = np.cumsum(probs, axis=-1)
    f_hat = np.argmax(probs, axis=-1) / k1
    q_lo = _quantile_bin(cum, level.lower) / k1
    q_hi = _quantile_bin(cum, level.upper) / k1
    return PredictionTriple(
        prediction=ImageTensor(f_hat, standardized=True),
        lower_length=ImageTensor(np.maximum(0.0, f_hat - q_lo), standardized=True),
        upper_length=ImageTensor(np.maximum(0.0, q_hi - f_hat), standardized=True),
    )


def pinball_loss(q_hat, y, level: QuantileLevel):
    """Asymmetric quantile loss whose population minimizer is the level-quantile.

    loss = (y - q) * a        if y > q
           (q - y) * (1 - a)  if y <= q
    grad_q is -a above the kink and (1 - a) at or below it.
    """
    q, y = _finite("pinball_loss", q_hat, y)
    a = level.alpha
    above = y > q
    loss = np.where(above, (y - q) * a, (q - y) * (1.0 - a))
    grad_q = np.where(above, -a, 1.0 - a)
    if np.ndim(q_hat) == 0 and np.ndim(y) == 0:
        return float(loss), float(grad_q)
    return loss, grad_q


def qr_joint_loss(q_lo, q_hi, y, level: QuantileLevel) -> float:
    """Mean of the two pinball losses at levels alpha/2 and 1 - alpha/2.

    ``q_lo`` and ``q_hi`` are absolute quantile estimates (not lengths); the
    conversion to interval lengths happens only when a trained model exports
    a PredictionTriple.
    """
    q_lo, q_hi, y = _finite("qr_joint_loss", q_lo, q_hi, y)
    if not (q_lo.shape == q_hi.shape == y.shape):
        raise ShapeError(
            f"quantile/target shapes differ: {q_lo.shape}, {q_hi.shape}, {y.shape}"
        )
    lo_loss, _ = pinball_loss(q_lo, y, QuantileLevel(level.lower))
    hi_loss, _ = pinball_loss(q_hi, y, QuantileLevel(level.upper))
    return float(np.mean(lo_loss + hi_loss))
