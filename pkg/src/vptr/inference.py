"""Inference regimes for the two predictor variants plus evaluation
metrics and their CSV/JSON table plumbing.

The autoregressive model can roll forward purely in feature space (one
pixel decode at the end) or round-trip through pixels every step; the
one-shot model emits every future position in a single pass.  All metrics
are pure numpy functions of (target, prediction) pairs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .models import far_forward, nar_decode, nar_encode
from .tensor import Tensor, concat, no_grad

REGIMES = ("ril", "rip", "nar")


@dataclass
class PredictionRun:
    """One clip's prediction plus its per-frame metric rows."""

    past: np.ndarray         # (L, C, H, W)
    predicted: np.ndarray    # (F, C, H, W)
    regime: str
    table: list = field(default_factory=list)

    def validate(self) -> "PredictionRun":
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.predicted.shape[0] < 1:
            raise ValueError("need at least one predicted frame")
        lo, hi = float(self.predicted.min()), float(self.predicted.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"predicted values outside [0,1]: [{lo}, {hi}]")
        return self


def _batched(past: np.ndarray):
    if past.ndim == 4:
        return past[None], True
    if past.ndim == 5:
        return past, False
    raise ValueError(f"past frames must be (L,C,H,W) or (B,L,C,H,W), "
                     f"got {past.shape}")


def predict_far_ril(past: np.ndarray, models, f_frames: int) -> np.ndarray:
    """Recurrence in latent space: each step feeds the predicted feature
    straight back; pixels are decoded once for the whole window."""
    if f_frames < 1:
        raise ValueError("f_frames must be >= 1")
    ae, far = models
    arr, squeeze = _batched(past)
    with no_grad():
        feats = ae.encode(Tensor(arr))
        chunks = []
        for _ in range(f_frames):
            out = far_forward(feats, far)
            nxt = out[:, -1:]
            chunks.append(nxt)
            feats = concat([feats, nxt], axis=1)
        frames = ae.decode(concat(chunks, axis=1)).data
    return frames[0] if squeeze else frames


def predict_far_rip(past: np.ndarray, models, f_frames: int) -> np.ndarray:
    """Recurrence through pixels: every predicted feature is decoded to a
    frame and re-encoded before the next step, pinning each step's input
    to the manifold the frozen encoder produces."""
    if f_frames < 1:
        raise ValueError("f_frames must be >= 1")
    ae, far = models
    arr, squeeze = _batched(past)
    with no_grad():
        feats = ae.encode(Tensor(arr))
        frames = []
        for _ in range(f_frames):
            out = far_forward(feats, far)
            frame = ae.decode(out[:, -1:])
            frames.append(frame)
            feats = concat([feats, ae.encode(frame)], axis=1)
        stacked = concat(frames, axis=1).data
    return stacked[0] if squeeze else stacked


def predict_nar(past: np.ndarray, models, f_frames: int) -> np.ndarray:
    """One-shot prediction: a single encoder pass over the past, a single
    decoder pass emitting every future position, one batch decode."""
    if f_frames < 1:
        raise ValueError("f_frames must be >= 1")
    ae, nar = models
    trained_f = nar.queries.q.shape[0]
    if f_frames > trained_f:
        raise ValueError(f"one-shot model emits {trained_f} positions, "
                         f"cannot extend to {f_frames}")
    arr, squeeze = _batched(past)
    with no_grad():
        z = ae.encode(Tensor(arr))
        z_hat = nar_decode(nar_encode(z, nar), nar)
        frames = ae.decode(z_hat[:, :f_frames]).data
    return frames[0] if squeeze else frames


PREDICTORS = {"ril": predict_far_ril, "rip": predict_far_rip,
              "nar": predict_nar}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(x, x_hat, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB so identical frames stay
    finite in aggregates."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * math.log10(peak * peak / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


_SSIM_WIN = _gauss_window()


def _windowed(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    v = sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", v, win)


def ssim(x, x_hat, peak: float = 1.0) -> float:
    """Single-scale structural similarity with an 11x11 Gaussian window
    (sigma 1.5) and the conventional stabilizers C1=(0.01*peak)^2,
    C2=(0.03*peak)^2, averaged over window positions (and channels)."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim expects (H,W) or (C,H,W), got {a.shape}")
    k = _SSIM_WIN.shape[0]
    if a.shape[-2] < k or a.shape[-1] < k:
        raise ValueError(f"frames smaller than the {k}x{k} window: {a.shape}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for ca, cb in zip(a, b):
        mu1 = _windowed(ca, _SSIM_WIN)
        mu2 = _windowed(cb, _SSIM_WIN)
        s11 = _windowed(ca * ca, _SSIM_WIN) - mu1 * mu1
        s22 = _windowed(cb * cb, _SSIM_WIN) - mu2 * mu2
        s12 = _windowed(ca * cb, _SSIM_WIN) - mu1 * mu2
        num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
        den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def diversity_stat(frames) -> float:
    """Mean pairwise per-pixel RMS distance between distinct frames of a
    prediction; collapse to near-identical frames drives this toward 0."""
    arr = np.asarray(frames, dtype=np.float64)
    n = arr.shape[0]
    if n < 2:
        return 0.0
    total, pairs = 0.0, 0
    for i in range(n):
        for j in range(i + 1, n):
            diff = arr[i] - arr[j]
            total += math.sqrt(float(np.mean(diff * diff)))
            pairs += 1
    return total / pairs


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------

CSV_HEADER = ("regime", "clip_id", "t", "mse", "psnr", "ssim")


def metric_rows(regime: str, clip_id: int, target, predicted) -> list:
    """Per-frame rows for one clip; ``t`` counts future positions from 1."""
    rows = []
    for t in range(predicted.shape[0]):
        a, b = target[t], predicted[t]
        rows.append({
            "regime": regime,
            "clip_id": clip_id,
            "t": t + 1,
            "mse": float(np.mean((np.asarray(a, dtype=np.float64)
                                  - np.asarray(b, dtype=np.float64)) ** 2)),
            "psnr": psnr(a, b),
            "ssim": ssim(a, b),
        })
    return rows


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        for r in rows:
            out = dict(r)
            for k in ("mse", "psnr", "ssim"):
                out[k] = f"{r[k]:.8f}"
            w.writerow(out)


def summarize_rows(rows) -> dict:
    """Aggregate rows into per-regime means and per-step MSE curves."""
    regimes = {}
    for r in rows:
        regimes.setdefault(r["regime"], []).append(r)
    out = {}
    for reg, rs in sorted(regimes.items()):
        steps = sorted({r["t"] for r in rs})
        per_step = [float(np.mean([r["mse"] for r in rs if r["t"] == t]))
                    for t in steps]
        out[reg] = {
            "count": len(rs),
            "mse": float(np.mean([r["mse"] for r in rs])),
            "psnr": float(np.mean([r["psnr"] for r in rs])),
            "ssim": float(np.mean([r["ssim"] for r in rs])),
            "per_step_mse": per_step,
        }
    return out


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def evaluate_regime(ae, model, clips: np.ndarray, regime: str,
                    past_frames: int, f_frames: int,
                    chunk: int = 16) -> list:
    """Run one regime over a clip stack and collect per-frame metric rows.

    ``clips`` is (N, T, C, H, W) with T >= past_frames + f_frames.
    """
    if regime not in PREDICTORS:
        raise ValueError(f"unknown regime {regime!r}")
    if clips.shape[1] < past_frames + f_frames:
        raise ValueError(
            f"clips have {clips.shape[1]} frames, need "
            f"{past_frames} past + {f_frames} future")
    rows = []
    predict = PREDICTORS[regime]
    for lo in range(0, len(clips), chunk):
        part = clips[lo:lo + chunk]
        past = part[:, :past_frames]
        target = part[:, past_frames:past_frames + f_frames]
        pred = predict(past, (ae, model), f_frames)
        for i in range(len(part)):
            rows.extend(metric_rows(regime, lo + i, target[i], pred[i]))
    return rows
