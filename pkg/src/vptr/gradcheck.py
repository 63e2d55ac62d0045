"""Finite-difference gradient suite covering every differentiable op and
the two composite training losses.

In 64-bit every op is checked coordinate by coordinate against central
differences.  In 32-bit the same graphs are probed along whole
directions (the analytic gradient direction): a single coordinate's
effect over 2h can sink below float32 loss resolution, so per-coordinate
quotients would measure rounding noise instead of the backward pass,
while a directional derivative keeps the full gradient magnitude as
signal.  For the composite losses even the directional quotient drowns
in 32-bit forward rounding (hundreds of normalization layers), so there
the difference quotient is evaluated on a float64 twin of the model
holding the identical parameter values: the reference is then accurate
to ~1e-10 and the measured error is the 32-bit gradient's own.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .losses import (LossWeights, far_total_loss, gdl_loss, mse_loss,
                     nar_total_loss)
from .models import FrameAutoencoder, VptrFar, VptrNar, far_forward, \
    nar_decode, nar_encode
from .tensor import (Rng, Tensor, broadcast_to, concat, conv2d,
                     conv2d_transposed, exp, finite_diff_check, gelu,
                     layer_norm, leaky_relu, log, logsumexp_last, matmul,
                     no_grad, relu, sigmoid, softmax_last, softplus,
                     t_abs, take_rows, tanh)

# step sizes trade truncation (h^2, steep along attention-query
# directions) against rounding (1/h); composite graphs are curvier and
# need smaller steps than single ops
_H = {np.float32: 1e-3, np.float64: 1e-5}
_H_COMPOSITE = {np.float32: 1e-4, np.float64: 1e-6}
_TOL = {np.float32: 1e-3, np.float64: 1e-5}


def tolerance_for(dtype) -> float:
    return _TOL[np.dtype(dtype).type]


def _rand(rng: Rng, shape, dtype, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(shape, lo, hi).astype(dtype))


def _pos(rng: Rng, shape, dtype):
    return _rand(rng, shape, dtype, 0.5, 2.0)


def _away_from_zero(rng: Rng, shape, dtype):
    x = rng.uniform(shape, 0.2, 1.0).astype(dtype)
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0).astype(dtype)
    return Tensor(x * sign)


def _op_checks(dtype, rng: Rng):
    """(name, f, inputs) triples; every op's backward is exercised.

    Each f maps the input list to a scalar Tensor; weighting by a fixed
    random matrix keeps reductions from cancelling gradient structure.
    """
    w = rng.uniform((3, 4), 0.5, 1.5).astype(dtype)
    idx = np.array([2, 0, 2, 1])
    mask = np.array([True, True, False, True])
    return [
        ("add", lambda xs: (xs[0] + xs[1]).sum(),
         [_rand(rng, (3, 4), dtype), _rand(rng, (4,), dtype)]),
        ("mul", lambda xs: (xs[0] * xs[1]).sum(),
         [_rand(rng, (3, 4), dtype), _rand(rng, (3, 1), dtype)]),
        ("div", lambda xs: (xs[0] / xs[1]).sum(),
         [_rand(rng, (3, 4), dtype), _pos(rng, (3, 4), dtype)]),
        ("power", lambda xs: (xs[0] ** 2.5).sum(),
         [_pos(rng, (3, 4), dtype)]),
        ("abs", lambda xs: t_abs(xs[0]).sum(),
         [_away_from_zero(rng, (3, 4), dtype)]),
        ("exp", lambda xs: exp(xs[0]).sum(), [_rand(rng, (3, 4), dtype)]),
        ("log", lambda xs: log(xs[0]).sum(), [_pos(rng, (3, 4), dtype)]),
        ("sigmoid", lambda xs: (sigmoid(xs[0]) * Tensor(w)).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("tanh", lambda xs: (tanh(xs[0]) * Tensor(w)).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("relu", lambda xs: relu(xs[0]).sum(),
         [_away_from_zero(rng, (3, 4), dtype)]),
        ("leaky_relu", lambda xs: leaky_relu(xs[0], 0.2).sum(),
         [_away_from_zero(rng, (3, 4), dtype)]),
        ("gelu", lambda xs: gelu(xs[0]).sum(), [_rand(rng, (3, 4), dtype)]),
        ("softplus", lambda xs: softplus(xs[0]).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("sum", lambda xs: (xs[0].sum(axis=1, keepdims=True)
                            * Tensor(w[:, :1])).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("mean", lambda xs: (xs[0].mean(axis=0) * Tensor(w[0])).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("reshape", lambda xs: (xs[0].reshape(2, 6) ** 2.0).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("transpose", lambda xs: (xs[0].transpose(1, 0) * Tensor(w)).sum(),
         [_rand(rng, (4, 3), dtype)]),
        ("broadcast_to", lambda xs: (broadcast_to(xs[0], (3, 4))
                                     * Tensor(w)).sum(),
         [_rand(rng, (1, 4), dtype)]),
        ("concat", lambda xs: (concat(xs, axis=1) ** 2.0).sum(),
         [_rand(rng, (3, 2), dtype), _rand(rng, (3, 2), dtype)]),
        ("slice", lambda xs: (xs[0][1:, :2] * Tensor(w[:2, :2])).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("take_rows", lambda xs: (take_rows(xs[0], idx) ** 2.0).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("matmul", lambda xs: (matmul(xs[0], xs[1]) ** 2.0).sum(),
         [_rand(rng, (2, 3, 4), dtype), _rand(rng, (2, 4, 2), dtype)]),
        ("softmax", lambda xs: (softmax_last(xs[0]) * Tensor(w)).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("softmax_masked",
         lambda xs: (softmax_last(xs[0], mask=mask) * Tensor(w)).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("logsumexp",
         lambda xs: (logsumexp_last(xs[0]) * Tensor(w[:, 0])).sum(),
         [_rand(rng, (3, 4), dtype)]),
        ("layer_norm",
         lambda xs: (layer_norm(xs[0], xs[1], xs[2]) * Tensor(w)).sum(),
         [_rand(rng, (3, 4), dtype), _pos(rng, (4,), dtype),
          _rand(rng, (4,), dtype)]),
        ("conv2d", lambda xs: (conv2d(xs[0], xs[1], stride=1, padding=1)
                               ** 2.0).sum(),
         [_rand(rng, (1, 2, 5, 5), dtype), _rand(rng, (3, 2, 3, 3), dtype)]),
        ("conv2d_transposed",
         lambda xs: (conv2d_transposed(xs[0], xs[1], stride=2,
                                       padding=1) ** 2.0).sum(),
         [_rand(rng, (1, 2, 4, 4), dtype), _rand(rng, (2, 3, 4, 4), dtype)]),
    ]


def _directional_check(f, xs, h: float, rng: Rng, probes: int = 3,
                       f_fd=None, shadow=None) -> float:
    """Max relative error of grad.u against a central difference along
    unit directions u: the analytic gradient direction first (largest
    signal), then random ones.  In 32-bit callers pass probes=1 because
    a random direction's projection can sink below forward rounding
    noise and would measure nothing.  ``f_fd`` evaluates the difference
    quotient when it must differ from the differentiated graph (frozen
    stop-gradient branches).  ``shadow=(fn, tensors)`` moves the
    difference quotient onto a float64 twin holding the same values, so
    the reference measures the low-precision gradient instead of its own
    rounding noise."""
    f_fd = f_fd or f
    for t in xs:
        t.requires_grad = True
        t.grad = None
    f(xs).backward()
    grads = [t.grad.astype(np.float64) for t in xs]
    fd_fn, fd_xs = (f_fd, xs) if shadow is None else shadow
    originals = [t.data.copy() for t in fd_xs]

    def _unit(vecs):
        norm = np.sqrt(sum(float((v * v).sum()) for v in vecs))
        return [v / norm for v in vecs]

    directions = [_unit(grads)]
    for _ in range(probes - 1):
        directions.append(_unit([rng.normal(t.shape).astype(np.float64)
                                 for t in xs]))
    worst = 0.0
    for dirs in directions:
        analytic = sum(float((g * u).sum()) for g, u in zip(grads, dirs))
        fp = fm = 0.0
        for sign in (1.0, -1.0):
            for t, orig, u in zip(fd_xs, originals, dirs):
                t.data[...] = (orig.astype(np.float64)
                               + sign * h * u).astype(t.data.dtype)
            with no_grad():
                val = fd_fn(fd_xs).item()
            if sign > 0:
                fp = val
            else:
                fm = val
        for t, orig in zip(fd_xs, originals):
            t.data[...] = orig
        fd = (fp - fm) / (2.0 * h)
        rel = abs(analytic - fd) / (abs(analytic) + abs(fd) + 1e-12)
        worst = max(worst, rel)
    return worst


def _copy_params(src_model, dst_model) -> None:
    """Load ``src_model``'s parameter values into ``dst_model`` (cast to the
    destination dtype), matching by name."""
    dst = dict(dst_model.named_parameters())
    for name, p in src_model.named_parameters():
        dst[name].data[...] = p.data.astype(dst[name].data.dtype)


def _micro_cfg() -> ModelConfig:
    return ModelConfig(frame_hw=8, d_model=8, heads=2, window=2,
                       far_layers=1, nar_enc_layers=1, nar_dec_layers=1,
                       past_frames=3, future_frames=2, ae_stages=2,
                       ae_res_blocks=1, disc_layers=1, init_seed=5)


def _far_pack(cfg, dtype, clip_vals):
    ae = FrameAutoencoder(cfg, dtype=dtype)
    far = VptrFar(cfg, dtype=dtype)
    clip = Tensor(clip_vals.astype(dtype))
    weights = LossWeights(gdl_alpha=1.0)

    def f(_):
        z = ae.encode(clip[:, :-1])
        x_hat = ae.decode(far_forward(z, far))
        return far_total_loss(clip[:, 1:], x_hat, weights=weights)[0]

    probe = [clip, ae.head.w, far.blocks[0].temporal.mha.w_q]
    return ae, far, f, probe


def _far_loss_check(dtype, rng: Rng, h: float, probes: int) -> float:
    cfg = _micro_cfg()
    clip_vals = rng.uniform((1, cfg.past_frames, 1, 8, 8))
    ae, far, f, probe = _far_pack(cfg, dtype, clip_vals)
    if dtype is np.float64:
        return _directional_check(f, probe, h, rng, probes=probes)
    # 32-bit: difference quotients run on a float64 twin at the same point
    ae64, far64, f64, probe64 = _far_pack(cfg, np.float64, clip_vals)
    _copy_params(ae, ae64)
    _copy_params(far, far64)
    probe64[0].data[...] = probe[0].data.astype(np.float64)
    return _directional_check(f, probe, _H_COMPOSITE[np.float64], rng,
                              probes=probes, shadow=(f64, probe64))


def _frozen_contrastive(z_flat: Tensor, z_hat_flat: Tensor, tau: float,
                        frozen_u, frozen_v):
    """Mirror of the symmetric contrastive term with the stop-gradient
    negative collections pinned to baseline arrays, so a difference
    quotient of this function matches the real loss's partial
    derivative (which treats the detached negatives as constants)."""
    _, s, _ = z_flat.shape
    inv_t = 1.0 / tau
    mask = np.zeros((s, s), dtype=z_flat.data.dtype)
    np.fill_diagonal(mask, -1e9)

    def terms(anchors, positives, frozen_negs):
        pos = (anchors * positives).sum(axis=-1) * inv_t
        negs = matmul(anchors, Tensor(frozen_negs.transpose(0, 2, 1).copy())
                      ) * inv_t
        blocked = negs + Tensor(mask)
        b, ss = pos.shape
        logits = concat([pos.reshape(b, ss, 1), blocked], axis=-1)
        return logsumexp_last(logits) - pos

    def unit(x):
        n2 = (x * x).sum(axis=-1, keepdims=True)
        return x / ((n2 + 1e-12) ** 0.5)

    u, v = unit(z_hat_flat), unit(z_flat)
    both = terms(u, v, frozen_v) + terms(v, u, frozen_u)
    return both.mean() * 0.5


def _nar_pack(cfg, dtype, clip_vals):
    ae = FrameAutoencoder(cfg, dtype=dtype)
    nar = VptrNar(cfg, dtype=dtype)
    clip = Tensor(clip_vals.astype(dtype))
    weights = LossWeights(gdl_alpha=1.0, contrast_weight=0.1, tau=0.07)
    fh = cfg.feat_hw
    s = fh * fh

    def pipeline():
        past, future = clip[:, :cfg.past_frames], clip[:, cfg.past_frames:]
        z_hat = nar_decode(nar_encode(ae.encode(past), nar), nar)
        return future, ae.decode(z_hat), z_hat

    state = {}

    def freeze_baseline():
        """Capture the contrastive constants at the current point: the
        stage-one targets (no gradient) and the stop-gradient negative
        banks the finite-difference mirror keeps pinned."""
        with no_grad():
            z_true = Tensor(ae.encode(clip[:, cfg.past_frames:]).data.copy())
            _, _, z_hat0 = pipeline()

        def unit_np(x):
            flat = x.reshape(-1, s, x.shape[-1]).astype(np.float64)
            return (flat / np.sqrt((flat ** 2).sum(-1, keepdims=True)
                                   + 1e-12)).astype(x.dtype)

        state["z_true"] = z_true
        state["frozen_u"] = unit_np(z_hat0.data)
        state["frozen_v"] = unit_np(z_true.data)
        state["z_flat"] = Tensor(
            z_true.data.reshape(-1, s, z_true.shape[-1]).copy())

    freeze_baseline()

    def f(_):
        future, x_hat, z_hat = pipeline()
        return nar_total_loss(future, x_hat, state["z_true"], z_hat,
                              weights=weights)[0]

    def f_fd(_):
        future, x_hat, z_hat = pipeline()
        base = mse_loss(future, x_hat) + gdl_loss(future, x_hat, alpha=1.0)
        zh_flat = z_hat.reshape(-1, s, z_hat.shape[-1])
        c = _frozen_contrastive(state["z_flat"], zh_flat, weights.tau,
                                state["frozen_u"], state["frozen_v"])
        return base + c * weights.contrast_weight

    probe = [clip, nar.queries.q, nar.dec_blocks[0].cross.mha.w_q]
    return ae, nar, f, f_fd, probe, freeze_baseline


def _assert_mirror_matches(f, f_fd) -> None:
    base_real = f(None).item()
    base_mirror = f_fd(None).item()
    if abs(base_real - base_mirror) > 1e-6 * (1.0 + abs(base_real)):
        raise AssertionError(
            f"frozen-negatives mirror drifted from the real loss: "
            f"{base_real} vs {base_mirror}")


def _nar_loss_check(dtype, rng: Rng, h: float, probes: int) -> float:
    cfg = _micro_cfg()
    t_total = cfg.past_frames + cfg.future_frames
    clip_vals = rng.uniform((1, t_total, 1, 8, 8))
    ae, nar, f, f_fd, probe, _ = _nar_pack(cfg, dtype, clip_vals)
    if dtype is np.float64:
        _assert_mirror_matches(f, f_fd)
        return _directional_check(f, probe, h, rng, probes=probes,
                                  f_fd=f_fd)
    # 32-bit: difference quotients run on a float64 twin at the same point
    ae64, nar64, f64, f64_fd, probe64, refreeze = _nar_pack(
        cfg, np.float64, clip_vals)
    _copy_params(ae, ae64)
    _copy_params(nar, nar64)
    probe64[0].data[...] = probe[0].data.astype(np.float64)
    refreeze()  # rebuild the frozen banks at the copied-in point
    _assert_mirror_matches(f64, f64_fd)
    return _directional_check(f, probe, _H_COMPOSITE[np.float64], rng,
                              probes=probes, shadow=(f64_fd, probe64))


def run_suite(dtype=np.float64, seed: int = 0) -> list:
    """(name, max_rel_err) for every op plus the two composite losses."""
    dtype = np.dtype(dtype).type
    h = _H[dtype]
    rng = Rng(seed, stream=41)
    results = []
    for name, f, xs in _op_checks(dtype, rng):
        if dtype is np.float64:
            err = finite_diff_check(lambda ts, fn=f: fn(ts), xs, h=h)
        else:
            err = _directional_check(f, xs, h, rng, probes=1)
        results.append((name, err))
    hc = _H_COMPOSITE[dtype]
    probes = 3 if dtype is np.float64 else 1
    results.append(("far_loss", _far_loss_check(dtype, rng, hc, probes)))
    results.append(("nar_loss", _nar_loss_check(dtype, rng, hc, probes)))
    return results
