"""Prediction regimes, image metrics, and the metric-table plumbing."""

import csv
import json
import math

import numpy as np
import pytest

from conftest import micro_config
from vptr.inference import (
    CSV_HEADER,
    PredictionRun,
    diversity_stat,
    evaluate_regime,
    metric_rows,
    predict_far_ril,
    predict_far_rip,
    predict_nar,
    psnr,
    ssim,
    summarize_rows,
    write_metrics_csv,
    write_summary_json,
)
from vptr.models import FrameAutoencoder, VptrFar, VptrNar
from vptr.tensor import Rng


def _frame(seed, hw=16):
    return Rng(seed).uniform((hw, hw))


def _models(cfg):
    return FrameAutoencoder(cfg), VptrFar(cfg), VptrNar(cfg)


def _past(cfg, batch=2, seed=11):
    shape = (batch, cfg.past_frames, cfg.frame_channels,
             cfg.frame_hw, cfg.frame_hw)
    return Rng(seed).uniform(shape)


# ---------------------------------------------------------------------------
# psnr
# ---------------------------------------------------------------------------

def test_psnr_identical_is_capped():
    x = _frame(0)
    assert psnr(x, x) == 100.0


def test_psnr_known_mse():
    x = np.zeros((16, 16), dtype=np.float32)
    y = np.full((16, 16), 0.1, dtype=np.float32)
    # MSE 0.01 at peak 1 -> 10*log10(1/0.01) = 20 dB
    assert abs(psnr(x, y) - 20.0) < 1e-6


def test_psnr_matches_formula_oracle():
    x, y = _frame(1), _frame(2)
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    want = 10.0 * math.log10(1.0 / mse)
    assert abs(psnr(x, y) - want) < 1e-9


def test_psnr_peak_rescales():
    x = np.zeros((8, 8))
    y = np.full((8, 8), 0.1)
    want = 10.0 * math.log10(4.0 / 0.01)
    assert abs(psnr(x, y, peak=2.0) - want) < 1e-9


def test_psnr_cap_engages_for_tiny_error():
    x = np.zeros((8, 8))
    y = np.full((8, 8), 1e-9)
    assert psnr(x, y) == 100.0


# ---------------------------------------------------------------------------
# ssim
# ---------------------------------------------------------------------------

def test_ssim_identical_is_one():
    x = _frame(3)
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_constant_pair_closed_form():
    c, d = 0.3, 0.2
    x = np.full((16, 16), c)
    y = np.full((16, 16), c + d)
    c1 = 0.01 ** 2
    # contrast/structure terms cancel for flat images, luminance remains
    want = (2.0 * c * (c + d) + c1) / (c * c + (c + d) ** 2 + c1)
    assert abs(ssim(x, y) - want) < 1e-9


def test_ssim_symmetry():
    x, y = _frame(4), _frame(5)
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-9


def test_ssim_bounded_by_one():
    for seed in range(5):
        x, y = _frame(seed), _frame(seed + 100)
        assert ssim(x, y) <= 1.0 + 1e-12


def test_ssim_noise_degrades():
    x = _frame(6)
    noisy = x + 0.2 * Rng(7).normal(x.shape)
    assert ssim(x, noisy) < 0.99


def test_ssim_channel_average():
    x = Rng(8).uniform((2, 16, 16))
    y = Rng(9).uniform((2, 16, 16))
    per = [ssim(x[c], y[c]) for c in range(2)]
    assert abs(ssim(x, y) - float(np.mean(per))) < 1e-12


def test_ssim_rejects_small_frames():
    x = np.zeros((8, 8))
    with pytest.raises(ValueError):
        ssim(x, x)


def test_ssim_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 12)))


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------

def test_diversity_identical_frames_is_zero():
    f = _frame(10)
    assert diversity_stat(np.stack([f, f, f])) == 0.0


def test_diversity_unit_offset_pair():
    f = _frame(11).astype(np.float64)
    assert abs(diversity_stat(np.stack([f, f + 1.0])) - 1.0) < 1e-9


def test_diversity_constant_frames_oracle():
    # pairwise RMS of constants 0,1,3: |0-1|, |0-3|, |1-3| -> mean 2
    frames = np.stack([np.full((4, 4), v) for v in (0.0, 1.0, 3.0)])
    assert abs(diversity_stat(frames) - 2.0) < 1e-12


def test_diversity_single_frame_is_zero():
    assert diversity_stat(_frame(12)[None]) == 0.0


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

def test_ril_call_counts(micro_cfg):
    ae, far, _ = _models(micro_cfg)
    past = _past(micro_cfg)
    predict_far_ril(past, (ae, far), 4)
    assert far.transformer_calls == 4
    assert ae.decode_calls == 1
    assert ae.encode_calls == 1  # only the past frames


def test_rip_call_counts(micro_cfg):
    ae, far, _ = _models(micro_cfg)
    past = _past(micro_cfg)
    predict_far_rip(past, (ae, far), 4)
    assert far.transformer_calls == 4
    assert ae.decode_calls == 4
    assert ae.encode_calls == 5  # past + one re-encode per step


def test_nar_call_counts(micro_cfg):
    ae, _, nar = _models(micro_cfg)
    past = _past(micro_cfg)
    predict_nar(past, (ae, nar), micro_cfg.future_frames)
    assert nar.encoder_calls == 1
    assert nar.decoder_calls == 1
    assert ae.decode_calls == 1
    assert ae.encode_calls == 1


def test_ril_equals_rip_for_one_step(micro_cfg):
    ae, far, _ = _models(micro_cfg)
    past = _past(micro_cfg)
    a = predict_far_ril(past, (ae, far), 1)
    b = predict_far_rip(past, (ae, far), 1)
    assert np.array_equal(a, b)


def test_prediction_shapes_and_range(micro_cfg):
    ae, far, nar = _models(micro_cfg)
    cfg = micro_cfg
    single = _past(cfg, batch=1)[0]
    out = predict_far_ril(single, (ae, far), 3)
    assert out.shape == (3, cfg.frame_channels, cfg.frame_hw, cfg.frame_hw)
    batched = predict_far_rip(_past(cfg, batch=2), (ae, far), 2)
    assert batched.shape == (2, 2, cfg.frame_channels,
                             cfg.frame_hw, cfg.frame_hw)
    one_shot = predict_nar(single, (ae, nar), cfg.future_frames)
    assert one_shot.shape == (cfg.future_frames, cfg.frame_channels,
                              cfg.frame_hw, cfg.frame_hw)
    for arr in (out, batched, one_shot):
        assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_nar_rejects_longer_horizon(micro_cfg):
    ae, _, nar = _models(micro_cfg)
    with pytest.raises(ValueError):
        predict_nar(_past(micro_cfg), (ae, nar), micro_cfg.future_frames + 1)


def test_nar_shorter_horizon_is_prefix(micro_cfg):
    ae, _, nar = _models(micro_cfg)
    past = _past(micro_cfg)
    full = predict_nar(past, (ae, nar), micro_cfg.future_frames)
    short = predict_nar(past, (ae, nar), 1)
    assert np.array_equal(short, full[:, :1])


def test_predictors_validate_horizon(micro_cfg):
    ae, far, nar = _models(micro_cfg)
    past = _past(micro_cfg)
    for fn, model in ((predict_far_ril, far), (predict_far_rip, far),
                      (predict_nar, nar)):
        with pytest.raises(ValueError):
            fn(past, (ae, model), 0)


def test_predictors_validate_past_shape(micro_cfg):
    ae, far, _ = _models(micro_cfg)
    with pytest.raises(ValueError):
        predict_far_ril(np.zeros((3, 8, 8)), (ae, far), 1)


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------

def _toy_rows():
    target = Rng(20).uniform((3, 1, 16, 16))
    pred = Rng(21).uniform((3, 1, 16, 16))
    return target, pred, metric_rows("ril", 5, target, pred)


def test_metric_rows_fields():
    target, pred, rows = _toy_rows()
    assert [r["t"] for r in rows] == [1, 2, 3]
    assert all(r["regime"] == "ril" and r["clip_id"] == 5 for r in rows)
    want = float(np.mean((target[0].astype(np.float64)
                          - pred[0].astype(np.float64)) ** 2))
    assert abs(rows[0]["mse"] - want) < 1e-12


def test_metrics_invariant_under_frame_permutation():
    target, pred, rows = _toy_rows()
    perm = [2, 0, 1]
    rows_p = metric_rows("ril", 5, target[perm], pred[perm])
    key = lambda r: (r["mse"], r["psnr"], r["ssim"])
    assert sorted(map(key, rows)) == sorted(map(key, rows_p))
    a, b = summarize_rows(rows), summarize_rows(rows_p)
    for k in ("mse", "psnr", "ssim"):
        assert abs(a["ril"][k] - b["ril"][k]) < 1e-12


def test_csv_header_and_roundtrip(tmp_path):
    _, _, rows = _toy_rows()
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    text = path.read_text().splitlines()
    assert text[0] == "regime,clip_id,t,mse,psnr,ssim"
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == len(rows)
    for got, want in zip(back, rows):
        assert got["regime"] == want["regime"]
        assert int(got["t"]) == want["t"]
        assert abs(float(got["mse"]) - want["mse"]) < 1e-6


def test_summarize_rows_groups_by_regime():
    rows = [
        {"regime": "ril", "clip_id": 0, "t": 1, "mse": 0.1, "psnr": 10.0,
         "ssim": 0.5},
        {"regime": "ril", "clip_id": 0, "t": 2, "mse": 0.3, "psnr": 5.0,
         "ssim": 0.4},
        {"regime": "nar", "clip_id": 0, "t": 1, "mse": 0.2, "psnr": 7.0,
         "ssim": 0.6},
    ]
    s = summarize_rows(rows)
    assert set(s) == {"ril", "nar"}
    assert abs(s["ril"]["mse"] - 0.2) < 1e-12
    assert s["ril"]["per_step_mse"] == [pytest.approx(0.1),
                                        pytest.approx(0.3)]
    assert s["nar"]["count"] == 1


def test_summary_json_roundtrip(tmp_path):
    _, _, rows = _toy_rows()
    summary = summarize_rows(rows)
    path = tmp_path / "summary.json"
    write_summary_json(path, summary)
    assert json.loads(path.read_text()) == summary


def test_evaluate_regime_counts_and_regimes():
    cfg = micro_config(frame_hw=16)
    ae, far, nar = _models(cfg)
    t_total = cfg.past_frames + cfg.future_frames
    clips = Rng(30).uniform((3, t_total, 1, 16, 16))
    rows = []
    for regime, model in (("ril", far), ("rip", far), ("nar", nar)):
        part = evaluate_regime(ae, model, clips, regime,
                               cfg.past_frames, cfg.future_frames)
        assert len(part) == 3 * cfg.future_frames
        rows.extend(part)
    assert set(summarize_rows(rows)) == {"ril", "rip", "nar"}


def test_evaluate_regime_validates():
    cfg = micro_config(frame_hw=16)
    ae, far, _ = _models(cfg)
    clips = Rng(31).uniform((2, cfg.past_frames + cfg.future_frames,
                             1, 16, 16))
    with pytest.raises(ValueError):
        evaluate_regime(ae, far, clips, "warp", cfg.past_frames, 2)
    with pytest.raises(ValueError):
        evaluate_regime(ae, far, clips, "ril", cfg.past_frames,
                        cfg.future_frames + 1)


def test_prediction_run_validate():
    past = Rng(32).uniform((3, 1, 16, 16))
    pred = Rng(33).uniform((2, 1, 16, 16))
    run = PredictionRun(past=past, predicted=pred, regime="nar")
    assert run.validate() is run
    with pytest.raises(ValueError):
        PredictionRun(past=past, predicted=pred, regime="oops").validate()
    with pytest.raises(ValueError):
        PredictionRun(past=past, predicted=pred + 2.0,
                      regime="nar").validate()
