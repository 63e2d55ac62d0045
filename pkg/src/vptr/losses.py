"""Training objectives: reconstruction, gradient-difference, adversarial,
and contrastive feature terms, plus the per-stage weighted totals.

Scalar losses are returned as graph tensors so callers can backprop them;
the *_total_loss helpers additionally produce a LossReport with plain-float
bookkeeping for logging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import (Tensor, concat, logsumexp_last, matmul, power, reshape,
                     softplus, t_abs, tmean, transpose, tsum)

__all__ = [
    "LossWeights", "LossReport", "mse_loss", "gdl_loss", "gan_loss_d",
    "gan_loss_g", "info_nce", "contrastive_feature_loss", "ae_total_loss",
    "far_total_loss", "nar_total_loss",
]


@dataclass
class LossWeights:
    """Scalar knobs shared by the stage losses.

    gan_weight scales the adversarial term of the autoencoder objective,
    contrast_weight scales the feature-level contrastive term of the
    one-shot predictor objective, gdl_alpha is the exponent applied to
    gradient-difference residuals, and tau is the temperature dividing
    cosine similarities.
    """

    gan_weight: float = 0.01
    contrast_weight: float = 0.1
    gdl_alpha: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if self.gan_weight < 0:
            raise ValueError(f"gan_weight must be >= 0, got {self.gan_weight}")
        if self.contrast_weight < 0:
            raise ValueError(
                f"contrast_weight must be >= 0, got {self.contrast_weight}")
        if self.gdl_alpha < 1:
            raise ValueError(f"gdl_alpha must be >= 1, got {self.gdl_alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass
class LossReport:
    """Named per-term scalars plus the weighted total for one step."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    total: float = 0.0

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * v for k, v in self.terms.items())

    def json_line(self, **extra) -> str:
        """One deterministic JSON text line (sorted keys, no timestamps)."""
        rec = dict(extra)
        rec.update(self.terms)
        rec["total"] = self.total
        return json.dumps(rec, separators=(",", ":"), sort_keys=True)


def _check_reduce(reduce: str):
    if reduce not in ("mean", "sum"):
        raise ValueError(f"reduce must be 'mean' or 'sum', got {reduce!r}")


def mse_loss(x: Tensor, x_hat: Tensor, reduce: str = "mean"):
    """Squared error between frame stacks, averaged over every element.

    ``reduce='sum'`` keeps the raw summed form instead.
    """
    _check_reduce(reduce)
    if x.shape != x_hat.shape:
        raise ValueError(f"mse_loss shape mismatch: {x.shape} vs {x_hat.shape}")
    d = x - x_hat
    sq = d * d
    return tmean(sq) if reduce == "mean" else tsum(sq)


def gdl_loss(x: Tensor, x_hat: Tensor, alpha: float = 1.0,
             reduce: str = "mean"):
    """Image gradient difference loss over the trailing two axes.

    Penalizes |d| = | |adjacent-pixel diff of x| - |same diff of x_hat| |
    raised to ``alpha``, for both vertical and horizontal neighbor pairs.
    Averaged over the difference-term count; ``reduce='sum'`` for the raw sum.
    """
    _check_reduce(reduce)
    if x.shape != x_hat.shape:
        raise ValueError(f"gdl_loss shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.ndim < 2 or x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ValueError(f"gdl_loss needs frames of at least 2x2, got {x.shape}")

    def grads(t):
        dv = t[..., 1:, :] - t[..., :-1, :]
        dh = t[..., :, 1:] - t[..., :, :-1]
        return t_abs(dv), t_abs(dh)

    xv, xh = grads(x)
    hv, hh = grads(x_hat)
    tv = t_abs(xv - hv)
    th = t_abs(xh - hh)
    if alpha != 1.0:
        tv = power(tv, alpha)
        th = power(th, alpha)
    raw = tsum(tv) + tsum(th)
    if reduce == "sum":
        return raw
    return raw * (1.0 / (tv.size + th.size))


def gan_loss_d(d, real: Tensor, fake: Tensor):
    """Discriminator objective: score real frames high, generated ones low.

    Binary cross-entropy on the patch logit grids returned by ``d``; the
    generated frames are cut from the generator graph here, so only ``d``'s
    parameters receive gradient.
    """
    logits_real = d(real)
    logits_fake = d(fake.detach())
    return tmean(softplus(-logits_real)) + tmean(softplus(logits_fake))


def gan_loss_g(d, fake: Tensor):
    """Non-saturating generator objective: make ``d`` score fakes high."""
    return tmean(softplus(-d(fake)))


def _unit_rows(x: Tensor, eps: float = 1e-12):
    n2 = tsum(x * x, axis=-1, keepdims=True)
    return x / power(n2 + eps, 0.5)


def _similarity_terms(anchors: Tensor, positives: Tensor, tau: float):
    """Per-location NCE terms for row-normalized maps of shape (B, S, d).

    Positions align anchors with positives; every other location of the
    positive map serves as a negative with its gradient blocked.  The
    diagonal of the negative logit grid is disabled with a large negative
    constant so the positive is not counted twice.
    """
    b, s, _ = anchors.shape
    inv_t = 1.0 / tau
    pos = tsum(anchors * positives, axis=-1) * inv_t            # (B, S)
    negs = matmul(anchors, transpose(positives.detach(), (0, 2, 1))) * inv_t
    mask = np.zeros((s, s), dtype=anchors.dtype)
    np.fill_diagonal(mask, -1e9)
    blocked = negs + Tensor(mask)
    logits = concat([reshape(pos, (b, s, 1)), blocked], axis=-1)  # (B, S, S+1)
    return logsumexp_last(logits) - pos


def info_nce(v: Tensor, v_pos: Tensor, v_negs: Tensor, tau: float = 0.07):
    """Contrastive loss for one anchor vector against one positive and M
    negatives; similarity is cosine scaled by 1/tau.  M = 0 gives 0.
    """
    if v_negs is None or v_negs.shape[0] == 0:
        return Tensor(np.zeros((), dtype=v.dtype))
    u = _unit_rows(reshape(v, (1, -1)))
    up = _unit_rows(reshape(v_pos, (1, -1)))
    un = _unit_rows(v_negs)
    inv_t = 1.0 / tau
    pos = tsum(u * up) * inv_t
    neg = tsum(un * u, axis=-1) * inv_t
    row = concat([reshape(pos, (1,)), neg], axis=0)
    return logsumexp_last(row) - pos


def _contrastive_core(z: Tensor, z_hat: Tensor, tau: float):
    """Symmetric per-location terms for feature maps flattened to (B, S, d)."""
    u = _unit_rows(z_hat)
    v = _unit_rows(z)
    t1 = _similarity_terms(u, v, tau)   # predicted anchors, true negatives
    t2 = _similarity_terms(v, u, tau)   # true anchors, predicted negatives
    return t1 + t2


def contrastive_feature_loss(z: Tensor, z_hat: Tensor, tau: float = 0.07,
                             reduce: str = "mean"):
    """Mutual-information surrogate between a predicted feature map and its
    target, both shaped (H, W, d).

    Each spatial location is pulled toward its counterpart and pushed from
    every other location of the opposite map; the push-only collections do
    not propagate gradient.  A single-location map has no negatives and
    scores 0.
    """
    _check_reduce(reduce)
    h, w, dm = z.shape
    s = h * w
    if s == 1:
        return Tensor(np.zeros((), dtype=z.dtype))
    terms = _contrastive_core(reshape(z, (1, s, dm)),
                              reshape(z_hat, (1, s, dm)), tau)
    agg = tmean(terms) if reduce == "mean" else tsum(terms)
    return agg * 0.5


def _contrastive_batched(z: Tensor, z_hat: Tensor, tau: float):
    """Mean contrastive loss over a (..., H, W, d) stack of feature maps."""
    h, w, dm = z.shape[-3:]
    s = h * w
    if s == 1:
        return Tensor(np.zeros((), dtype=z.dtype))
    maps = int(np.prod(z.shape[:-3], dtype=np.int64)) if z.ndim > 3 else 1
    terms = _contrastive_core(reshape(z, (maps, s, dm)),
                              reshape(z_hat, (maps, s, dm)), tau)
    return tmean(terms) * 0.5


def ae_total_loss(x: Tensor, x_hat: Tensor, d=None, weights=None):
    """Stage-one objective: squared error + gradient difference, plus the
    weighted generator side of the adversarial game when a discriminator is
    supplied.

    Returns ``(total, d_loss, report)``.  ``total`` is what the autoencoder
    minimizes; ``d_loss`` is the discriminator's own objective (None when
    the adversarial term is off) and is reported with weight 0 since the
    generator total does not include it.
    """
    w = weights or LossWeights()
    m = mse_loss(x, x_hat)
    g = gdl_loss(x, x_hat, alpha=w.gdl_alpha)
    terms = {"mse": m.item(), "gdl": g.item()}
    scales = {"mse": 1.0, "gdl": 1.0}
    total = m + g
    d_loss = None
    if d is not None and w.gan_weight > 0:
        gg = gan_loss_g(d, x_hat)
        d_loss = gan_loss_d(d, x, x_hat)
        total = total + gg * w.gan_weight
        terms["gan_g"] = gg.item()
        scales["gan_g"] = w.gan_weight
        terms["gan_d"] = d_loss.item()
        scales["gan_d"] = 0.0
    report = LossReport(terms, scales, total.item())
    return total, d_loss, report


def far_total_loss(x: Tensor, x_hat: Tensor, weights=None):
    """Next-frame objective over aligned target and predicted stacks.

    Returns ``(total, report)``.
    """
    w = weights or LossWeights()
    m = mse_loss(x, x_hat)
    g = gdl_loss(x, x_hat, alpha=w.gdl_alpha)
    total = m + g
    report = LossReport({"mse": m.item(), "gdl": g.item()},
                        {"mse": 1.0, "gdl": 1.0}, total.item())
    return total, report


def nar_total_loss(x: Tensor, x_hat: Tensor, z, z_hat, weights=None):
    """One-shot predictor objective over the future window.

    Pixel terms as in far_total_loss plus the weighted contrastive feature
    term between target features ``z`` and predicted features ``z_hat``
    (both (..., H, W, d)).  With contrast_weight 0 the feature maps are not
    touched and may be None.  Returns ``(total, report)``.
    """
    w = weights or LossWeights()
    m = mse_loss(x, x_hat)
    g = gdl_loss(x, x_hat, alpha=w.gdl_alpha)
    terms = {"mse": m.item(), "gdl": g.item()}
    scales = {"mse": 1.0, "gdl": 1.0}
    total = m + g
    if w.contrast_weight > 0:
        if z is None or z_hat is None:
            raise ValueError("contrast_weight > 0 needs feature maps")
        c = _contrastive_batched(z, z_hat, w.tau)
        total = total + c * w.contrast_weight
        terms["contrastive"] = c.item()
        scales["contrastive"] = w.contrast_weight
    report = LossReport(terms, scales, total.item())
    return total, report
