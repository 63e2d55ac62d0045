"""Two-stage training: the frame autoencoder first, then a predictor over
its frozen features.

Runs are resume-invariant by construction: batch sampling draws from a
counter-based stream keyed by the step number, and optimizer accumulators
travel inside checkpoints, so save -> load -> continue reproduces the
uninterrupted run bitwise.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .config import ModelConfig, TrainRunConfig
from .data import augment_flip
from .losses import LossWeights, ae_total_loss, far_total_loss, nar_total_loss
from .models import (FrameAutoencoder, PatchDiscriminator, VptrFar, VptrNar,
                     far_forward, load_model, nar_decode, nar_encode,
                     save_model)
from .tensor import Rng, Tensor, no_grad

__all__ = [
    "OptimState", "adam_step", "adamw_step", "clip_global_norm", "grads_of",
    "loss_weights", "train_stage_one", "train_stage_two",
]


def loss_weights(cfg: ModelConfig) -> LossWeights:
    return LossWeights(gan_weight=cfg.gan_weight,
                       contrast_weight=cfg.contrast_weight,
                       gdl_alpha=cfg.gdl_alpha, tau=cfg.temperature)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class OptimState:
    """Adaptive-moment accumulators for one named parameter set.

    Accumulator shapes mirror the parameters; ``step`` counts completed
    updates and feeds the bias correction.  ``extras()`` flattens the state
    into named arrays for checkpointing and ``load_extras`` restores it
    bitwise.
    """

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def extras(self) -> dict:
        out = {"opt.step": np.asarray([self.step], dtype=np.float32)}
        for n, a in self.m.items():
            out[f"opt.m.{n}"] = a
        for n, a in self.v.items():
            out[f"opt.v.{n}"] = a
        return out

    def load_extras(self, extras: dict) -> None:
        self.step = int(extras["opt.step"][0])
        for n in self.m:
            self.m[n] = extras[f"opt.m.{n}"].astype(np.float32, copy=True)
            self.v[n] = extras[f"opt.v.{n}"].astype(np.float32, copy=True)


def _adaptive_step(params: dict, grads: dict, state: OptimState,
                   decay: float) -> None:
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if decay:
            update = update + decay * p.data
        p.data = p.data - state.lr * update


def adam_step(params: dict, grads: dict, state: OptimState) -> None:
    """Bias-corrected adaptive update; ignores weight decay."""
    _adaptive_step(params, grads, state, decay=0.0)


def adamw_step(params: dict, grads: dict, state: OptimState) -> None:
    """Same update with decoupled weight decay from the state."""
    _adaptive_step(params, grads, state, decay=state.weight_decay)


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    """Scale the whole gradient set so its global L2 norm is at most
    ``max_norm``; below the threshold the set passes through unchanged."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}


def grads_of(params: dict) -> dict:
    return {n: p.grad for n, p in params.items() if p.grad is not None}


# ---------------------------------------------------------------------------
# run plumbing
# ---------------------------------------------------------------------------

def _check_finite(report, step: int):
    if not math.isfinite(report.total):
        raise RuntimeError(
            f"training diverged at step {step}: total loss {report.total}")


class _RunLog:
    def __init__(self, out_dir, stage: str):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, f"train-{stage}.jsonl")
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, report, step: int):
        self._fh.write(report.json_line(step=step) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _save(out_dir, stage: str, cfg, model, step: int, opt: OptimState,
          tag=None) -> str:
    name = f"{stage}-{tag}.vptc" if tag else f"{stage}-{step:06d}.vptc"
    path = os.path.join(out_dir, name)
    kind = {"ae": "autoencoder", "disc": "discriminator"}.get(stage, stage)
    save_model(path, kind, cfg, model, step=step, extra_arrays=opt.extras())
    return path


# ---------------------------------------------------------------------------
# stage one
# ---------------------------------------------------------------------------

def train_stage_one(run_cfg: TrainRunConfig, model_cfg: ModelConfig,
                    clips: np.ndarray, resume=None):
    """Train the frame autoencoder (plus the patch discriminator when the
    adversarial weight is positive) on individual frames.

    ``clips`` is a (N, T, C, H, W) float stack; each step samples
    ``batch_size`` frames from the flattened pool.  Returns
    ``(autoencoder, discriminator_or_None, reports)`` where reports is the
    per-step LossReport list of this invocation.
    """
    run_cfg.validate()
    start = 0
    if resume is not None:
        ae, meta, extras = load_model(resume, expect_kind="autoencoder")
        model_cfg = ModelConfig.from_dict(meta["config"])
        start = int(meta["step"])
    else:
        ae = FrameAutoencoder(model_cfg)
    weights = loss_weights(model_cfg)
    use_gan = model_cfg.gan_weight > 0
    disc = PatchDiscriminator(model_cfg) if use_gan else None

    lr = run_cfg.lr if run_cfg.lr is not None else model_cfg.lr_stage_one
    ae_params = dict(ae.named_parameters())
    opt = OptimState(ae_params, lr)
    opt_d = None
    if use_gan:
        d_params = dict(disc.named_parameters())
        opt_d = OptimState(d_params, lr)
    if resume is not None:
        opt.load_extras(extras)
        if use_gan:
            sibling = os.path.join(os.path.dirname(resume),
                                   os.path.basename(resume).replace("ae-", "disc-"))
            disc, _, d_extras = load_model(sibling, expect_kind="discriminator")
            d_params = dict(disc.named_parameters())
            opt_d = OptimState(d_params, lr)
            opt_d.load_extras(d_extras)

    pool = clips.reshape(-1, *clips.shape[2:])
    log = _RunLog(run_cfg.out_dir, "ae")
    reports = []
    try:
        for step in range(start, run_cfg.steps):
            rng = Rng(run_cfg.seed, stream=step)
            idx = rng.choice(len(pool), size=min(run_cfg.batch_size, len(pool)))
            batch = pool[idx]
            if run_cfg.augment:
                batch = np.stack([augment_flip(f, rng) for f in batch])
            x = Tensor(batch)
            xh = ae.decode_frames(ae.encode_frames(x))
            total, d_loss, report = ae_total_loss(
                x, xh, d=disc.score if use_gan else None, weights=weights)
            _check_finite(report, step)

            ae.zero_grad()
            total.backward()
            g = clip_global_norm(grads_of(ae_params), run_cfg.clip_norm)
            adam_step(ae_params, g, opt)
            if use_gan:
                disc.zero_grad()   # discard generator-pass leakage
                d_loss.backward()
                gd = clip_global_norm(grads_of(d_params), run_cfg.clip_norm)
                adam_step(d_params, gd, opt_d)

            reports.append(report)
            if step % run_cfg.log_every == 0 or step == run_cfg.steps - 1:
                log.write(report, step)
            done = step + 1
            if done % run_cfg.checkpoint_every == 0 and done < run_cfg.steps:
                _save(run_cfg.out_dir, "ae", model_cfg, ae, done, opt)
                if use_gan:
                    _save(run_cfg.out_dir, "disc", model_cfg, disc, done, opt_d)
    finally:
        log.close()
    _save(run_cfg.out_dir, "ae", model_cfg, ae, max(run_cfg.steps, start),
          opt, tag="final")
    if use_gan:
        _save(run_cfg.out_dir, "disc", model_cfg, disc,
              max(run_cfg.steps, start), opt_d, tag="final")
    return ae, disc, reports


# ---------------------------------------------------------------------------
# stage two
# ---------------------------------------------------------------------------

def _load_frozen_ae(path) -> FrameAutoencoder:
    ae, _, _ = load_model(path, expect_kind="autoencoder")
    ae.set_requires_grad(False)
    return ae


def train_stage_two(run_cfg: TrainRunConfig, model_cfg: ModelConfig,
                    clips: np.ndarray, resume=None):
    """Train the feature predictor against a frozen stage-one autoencoder.

    The autoregressive variant teacher-forces features of frames 1..T-1 and
    regresses the decoded predictions onto frames 2..T; the one-shot variant
    encodes the past window into memories and emits all future positions in
    a single decoder pass.  Returns ``(model, autoencoder, reports)``.
    """
    run_cfg.validate()
    if run_cfg.stage not in ("far", "nar"):
        raise ValueError(f"stage two expects 'far' or 'nar', got {run_cfg.stage!r}")
    ae = _load_frozen_ae(run_cfg.ae_checkpoint)
    ae_cfg = ae._cfg
    if (ae_cfg.d_model, ae_cfg.feat_hw) != (model_cfg.d_model, model_cfg.feat_hw):
        raise ValueError(
            "autoencoder feature grid "
            f"({ae_cfg.feat_hw}x{ae_cfg.feat_hw}x{ae_cfg.d_model}) does not "
            f"match the predictor config "
            f"({model_cfg.feat_hw}x{model_cfg.feat_hw}x{model_cfg.d_model})")

    start = 0
    if resume is not None:
        model, meta, extras = load_model(resume, expect_kind=run_cfg.stage)
        model_cfg = ModelConfig.from_dict(meta["config"])
        start = int(meta["step"])
    else:
        model = VptrFar(model_cfg) if run_cfg.stage == "far" else VptrNar(model_cfg)

    weights = loss_weights(model_cfg)
    lr = run_cfg.lr if run_cfg.lr is not None else model_cfg.lr_stage_two
    params = dict(model.named_parameters())
    opt = OptimState(params, lr, weight_decay=0.01)
    if resume is not None:
        opt.load_extras(extras)

    window = model_cfg.past_frames + model_cfg.future_frames
    if clips.shape[1] < window:
        raise ValueError(f"clips have {clips.shape[1]} frames, "
                         f"need past+future = {window}")
    use_contrast = run_cfg.stage == "nar" and model_cfg.contrast_weight > 0

    log = _RunLog(run_cfg.out_dir, run_cfg.stage)
    reports = []
    try:
        for step in range(start, run_cfg.steps):
            rng = Rng(run_cfg.seed, stream=step)
            idx = rng.choice(len(clips), size=min(run_cfg.batch_size, len(clips)))
            batch = clips[idx][:, :window]
            if run_cfg.augment:
                batch = np.stack([augment_flip(c, rng) for c in batch])

            if run_cfg.stage == "far":
                with no_grad():
                    z_in = ae.encode(Tensor(batch[:, :-1]))
                z_hat = far_forward(z_in, model)
                x_hat = ae.decode(z_hat)
                total, report = far_total_loss(Tensor(batch[:, 1:]), x_hat,
                                               weights)
            else:
                past = batch[:, :model_cfg.past_frames]
                future = batch[:, model_cfg.past_frames:]
                with no_grad():
                    z_past = ae.encode(Tensor(past))
                    z_true = ae.encode(Tensor(future)) if use_contrast else None
                z_hat = nar_decode(nar_encode(z_past, model), model)
                x_hat = ae.decode(z_hat)
                total, report = nar_total_loss(
                    Tensor(future), x_hat, z_true, z_hat, weights)
            _check_finite(report, step)

            model.zero_grad()
            total.backward()
            g = clip_global_norm(grads_of(params), run_cfg.clip_norm)
            adamw_step(params, g, opt)

            reports.append(report)
            if step % run_cfg.log_every == 0 or step == run_cfg.steps - 1:
                log.write(report, step)
            done = step + 1
            if done % run_cfg.checkpoint_every == 0 and done < run_cfg.steps:
                _save(run_cfg.out_dir, run_cfg.stage, model_cfg, model, done, opt)
    finally:
        log.close()
    _save(run_cfg.out_dir, run_cfg.stage, model_cfg, model,
          max(run_cfg.steps, start), opt, tag="final")
    return model, ae, reports
