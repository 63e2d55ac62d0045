"""Factorized spatiotemporal attention primitives.

Feature maps travel as (B, T, H, W, d_model) tensors.  Spatial mixing is
confined to K x K windows (attention over the K^2 positions of each window,
per frame); temporal mixing happens per spatial location (attention over the
T frames at one grid cell).  This factorization drops the attention-matrix
entry count per sample and head from (T*H*W)^2 to T*P*K^4 + H*W*T^2 with
P = H*W/K^2 windows; `vptr.bench` verifies those counts against the
instrumented counter kept here.

Positional information enters through query/key inputs only: a frozen 2-d
sinusoid table (or a learned relative bias on the logits) for spatial
attention, a frozen 1-d sinusoid table for temporal attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .modules import Module, glorot_uniform, normal_init, ones_init, zeros_init
from .tensor import (Rng, Tensor, conv2d, gelu, layer_norm, matmul,
                     softmax_last, take_rows)


class AttentionEntryCounter:
    """Counts attention-matrix entries (rows x heads x len_q x len_k) of every
    multi_head_attention call while enabled; used by the complexity bench."""

    def __init__(self):
        self.enabled = False
        self.total = 0

    def reset(self):
        self.total = 0

    def __enter__(self):
        self.enabled = True
        self.total = 0
        return self

    def __exit__(self, *exc):
        self.enabled = False
        return False


ATTN_ENTRIES = AttentionEntryCounter()


# ---------------------------------------------------------------------------
# patch partition / assembly
# ---------------------------------------------------------------------------

@dataclass
class PatchLayout:
    """Window geometry: K x K windows tiling an H x W grid, P windows total.

    ``patch_index`` / ``local_index`` map a global cell (i, j) to its window
    and position within the window; ``global_index`` inverts them.
    """

    height: int
    width: int
    window: int
    patch_count: int = field(init=False)
    patch_index: np.ndarray = field(init=False, repr=False)
    local_index: np.ndarray = field(init=False, repr=False)
    global_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, w, k = self.height, self.width, self.window
        if h % k or w % k:
            raise ValueError(
                f"window {k} does not divide grid {h}x{w} evenly")
        self.patch_count = (h // k) * (w // k)
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        self.patch_index = (ii // k) * (w // k) + (jj // k)
        self.local_index = (ii % k) * k + (jj % k)
        self.global_index = np.empty((self.patch_count, k * k, 2), dtype=np.int64)
        self.global_index[self.patch_index, self.local_index, 0] = ii
        self.global_index[self.patch_index, self.local_index, 1] = jj


def partition_patches(z: Tensor, layout: PatchLayout) -> Tensor:
    """(B, T, H, W, d) -> (B*T*P, K^2, d); windows row-major over the window
    grid, cells row-major within each window.  Lossless rearrangement."""
    b, t, h, w, d = z.shape
    k = layout.window
    if h != layout.height or w != layout.width:
        raise ValueError(f"feature grid {h}x{w} does not match layout "
                         f"{layout.height}x{layout.width}")
    p = z.reshape(b, t, h // k, k, w // k, k, d)
    p = p.transpose(0, 1, 2, 4, 3, 5, 6)
    return p.reshape(b * t * layout.patch_count, k * k, d)


def assemble_patches(patches: Tensor, layout: PatchLayout, batch: int,
                     time: int) -> Tensor:
    """Exact inverse of partition_patches."""
    k, p = layout.window, layout.patch_count
    rows, kk, d = patches.shape
    if rows != batch * time * p or kk != k * k:
        raise ValueError(
            f"patch tensor {tuple(patches.shape)} does not match layout "
            f"P={p}, K={k} with batch={batch}, time={time}")
    h, w = layout.height, layout.width
    z = patches.reshape(batch, time, h // k, w // k, k, k, d)
    z = z.transpose(0, 1, 2, 4, 3, 5, 6)
    return z.reshape(batch, time, h, w, d)


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def sinusoid_pe_1d(length: int, d_model: int, dtype=np.float32,
                   base: int = 0) -> np.ndarray:
    """Fixed sinusoid table (length, d_model); ``base`` offsets positions."""
    pos = np.arange(base, base + length, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def sinusoid_pe_2d(height: int, width: int, d_model: int,
                   dtype=np.float32) -> np.ndarray:
    """Fixed table (H, W, d_model): first half of channels encodes the row
    coordinate, second half the column, each a 1-d sinusoid."""
    if d_model % 4:
        raise ValueError(f"2-d sinusoid encoding needs d_model % 4 == 0, "
                         f"got {d_model}")
    half = d_model // 2
    rows = sinusoid_pe_1d(height, half, dtype=np.float64)
    cols = sinusoid_pe_1d(width, half, dtype=np.float64)
    pe = np.zeros((height, width, d_model))
    pe[:, :, :half] = rows[:, None, :]
    pe[:, :, half:] = cols[None, :, :]
    return pe.astype(dtype)


class RelativePE2D(Module):
    """Learned per-head logit bias indexed by in-window coordinate offsets.

    The table holds one bias per (delta_row, delta_col) in [-K+1, K-1]^2 and
    per head; logits between window cells depend only on their offset, never
    on absolute position.
    """

    def __init__(self, window: int, heads: int, rng: Rng, dtype=np.float32):
        k = window
        self.table = normal_init(rng, ((2 * k - 1) ** 2, heads), dtype=dtype)
        pos = np.stack(np.meshgrid(np.arange(k), np.arange(k), indexing="ij"),
                       axis=-1).reshape(k * k, 2)
        delta = pos[:, None, :] - pos[None, :, :]
        delta = np.clip(delta, -(k - 1), k - 1) + (k - 1)
        self._index = (delta[..., 0] * (2 * k - 1) + delta[..., 1]).reshape(-1)
        self._window = k

    def bias(self) -> Tensor:
        """(heads, K^2, K^2) additive logit bias."""
        kk = self._window * self._window
        rows = take_rows(self.table, self._index)      # (K^2*K^2, heads)
        return rows.reshape(kk, kk, -1).transpose(2, 0, 1)


def causal_mask(t: int) -> np.ndarray:
    """Lower-triangular (inclusive) TxT boolean mask; True = attend allowed."""
    return np.tril(np.ones((t, t), dtype=bool))


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------

class MhaWeights(Module):
    """Packed projection matrices for h heads of width d_model/h."""

    def __init__(self, d_model: int, heads: int, rng: Rng, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by "
                             f"{heads} heads")
        self.w_q = glorot_uniform(rng, d_model, d_model, dtype=dtype)
        self.w_k = glorot_uniform(rng, d_model, d_model, dtype=dtype)
        self.w_v = glorot_uniform(rng, d_model, d_model, dtype=dtype)
        self.w_o = glorot_uniform(rng, d_model, d_model, dtype=dtype)
        self._heads = heads
        self._d_model = d_model

    @property
    def heads(self) -> int:
        return self._heads


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         w: MhaWeights, mask=None,
                         logit_bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over the last axis of (rows, len, d).

    Parameters
    ----------
    q_in, k_in, v_in : Tensor
        (rows, len_q, d_model) queries and (rows, len_k, d_model) keys and
        values; ``rows`` is whatever batch flattening the caller chose.
    mask : bool array, optional
        Broadcastable over (len_q, len_k); True = attend.  Fully masked
        rows yield zero attention output.
    logit_bias : Tensor, optional
        (heads, len_q, len_k) additive bias (relative positional encoding).

    Scale is 1/sqrt(d_model/heads); the h head outputs are concatenated and
    passed through the output projection.
    """
    rows, len_q, d = q_in.shape
    len_k = k_in.shape[1]
    h = w.heads
    if d != w._d_model or k_in.shape[2] != d or v_in.shape[2] != d:
        raise ValueError(f"channel dim mismatch: inputs {d}, weights "
                         f"{w._d_model}")
    if mask is not None:
        m = np.asarray(mask)
        for got, want in zip(m.shape[-2:], (len_q, len_k)):
            if got not in (1, want):
                raise ValueError(f"mask shape {m.shape} does not broadcast "
                                 f"over ({len_q}, {len_k})")
    dh = d // h
    scale = 1.0 / math.sqrt(dh)

    q = matmul(q_in, w.w_q).reshape(rows, len_q, h, dh).transpose(0, 2, 1, 3)
    k = matmul(k_in, w.w_k).reshape(rows, len_k, h, dh).transpose(0, 2, 1, 3)
    v = matmul(v_in, w.w_v).reshape(rows, len_k, h, dh).transpose(0, 2, 1, 3)

    logits = matmul(q * scale, k.transpose(0, 1, 3, 2))
    if ATTN_ENTRIES.enabled:
        ATTN_ENTRIES.total += rows * h * len_q * len_k
    if logit_bias is not None:
        logits = logits + logit_bias
    attn = softmax_last(logits, mask=mask)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(rows, len_q, d)
    return matmul(out, w.w_o)


# ---------------------------------------------------------------------------
# attention sublayers (pre-norm residual)
# ---------------------------------------------------------------------------

class LocalSpatialMHSA(Module):
    """Window-local spatial self-attention over each frame.

    Attention runs independently inside every K x K window of every frame;
    the positional signal is either a frozen 2-d sinusoid added to queries
    and keys or a learned relative logit bias (``pe_mode="relative"``).
    """

    def __init__(self, d_model: int, heads: int, layout: PatchLayout,
                 pe_mode: str, rng: Rng, dtype=np.float32):
        if pe_mode not in ("absolute", "relative"):
            raise ValueError(f"unknown spatial pe_mode: {pe_mode}")
        self.norm_gain = ones_init(d_model, dtype=dtype)
        self.norm_bias = zeros_init(d_model, dtype=dtype)
        self.mha = MhaWeights(d_model, heads, rng, dtype=dtype)
        self.rpe = (RelativePE2D(layout.window, heads, rng, dtype=dtype)
                    if pe_mode == "relative" else None)
        self._layout = layout
        self._pe_mode = pe_mode
        if pe_mode == "absolute":
            table = sinusoid_pe_2d(layout.height, layout.width, d_model, dtype)
            pe = partition_patches(
                Tensor(table[None, None]), layout)  # (P, K^2, d)
            self._pe = pe.data
        else:
            self._pe = None

    def forward(self, z: Tensor) -> Tensor:
        b, t, hh, ww, d = z.shape
        lay = self._layout
        kk, p = lay.window ** 2, lay.patch_count
        xn = layer_norm(z, self.norm_gain, self.norm_bias)
        patches = partition_patches(xn, lay)
        if self._pe_mode == "absolute":
            qk = (patches.reshape(b * t, p, kk, d) + Tensor(self._pe)
                  ).reshape(b * t * p, kk, d)
            out = multi_head_attention(qk, qk, patches, self.mha)
        else:
            out = multi_head_attention(patches, patches, patches, self.mha,
                                       logit_bias=self.rpe.bias())
        return z + assemble_patches(out, lay, b, t)


class TemporalMHSA(Module):
    """Per-location self-attention across time, optionally causal.

    Each spatial grid cell attends over its own T positions; no spatial
    mixing.  A frozen 1-d sinusoid (offset by ``index_base``) is added to
    queries and keys.
    """

    def __init__(self, d_model: int, heads: int, rng: Rng, causal: bool,
                 dtype=np.float32):
        self.norm_gain = ones_init(d_model, dtype=dtype)
        self.norm_bias = zeros_init(d_model, dtype=dtype)
        self.mha = MhaWeights(d_model, heads, rng, dtype=dtype)
        self._causal = causal
        self._dtype = dtype

    def forward(self, z: Tensor, index_base: int = 0) -> Tensor:
        b, t, hh, ww, d = z.shape
        xn = layer_norm(z, self.norm_gain, self.norm_bias)
        x = xn.transpose(0, 2, 3, 1, 4).reshape(b * hh * ww, t, d)
        pe = Tensor(sinusoid_pe_1d(t, d, self._dtype, base=index_base))
        qk = x + pe
        mask = causal_mask(t) if self._causal else None
        out = multi_head_attention(qk, qk, x, self.mha, mask=mask)
        out = out.reshape(b, hh, ww, t, d).transpose(0, 3, 1, 2, 4)
        return z + out


class EncDecTemporalMHA(Module):
    """Cross-attention from future-query positions onto past memories,
    per spatial location (no spatial mixing, no mask)."""

    def __init__(self, d_model: int, heads: int, rng: Rng, dtype=np.float32):
        self.norm_gain = ones_init(d_model, dtype=dtype)
        self.norm_bias = zeros_init(d_model, dtype=dtype)
        self.mha = MhaWeights(d_model, heads, rng, dtype=dtype)
        self._dtype = dtype

    def forward(self, queries: Tensor, memories: Tensor) -> Tensor:
        b, f, hh, ww, d = queries.shape
        bm, l, hm, wm, dm = memories.shape
        if (hm, wm) != (hh, ww):
            raise ValueError(f"memory grid {hm}x{wm} does not match query "
                             f"grid {hh}x{ww}")
        qn = layer_norm(queries, self.norm_gain, self.norm_bias)
        q = qn.transpose(0, 2, 3, 1, 4).reshape(b * hh * ww, f, d)
        m = memories.transpose(0, 2, 3, 1, 4).reshape(b * hh * ww, l, d)
        q = q + Tensor(sinusoid_pe_1d(f, d, self._dtype, base=l))
        k = m + Tensor(sinusoid_pe_1d(l, d, self._dtype))
        out = multi_head_attention(q, k, m, self.mha)
        out = out.reshape(b, hh, ww, f, d).transpose(0, 3, 1, 2, 4)
        return queries + out


class FullSpatioTemporalMHA(Module):
    """Joint attention over all (time, in-window cell) pairs per window.

    Drop-in replacement for EncDecTemporalMHA with entry count (T*K^2)^2 per
    window per head instead of H*W*T^2 total; kept as the expensive ablation
    arm of the complexity comparison.
    """

    def __init__(self, d_model: int, heads: int, layout: PatchLayout,
                 rng: Rng, dtype=np.float32):
        self.norm_gain = ones_init(d_model, dtype=dtype)
        self.norm_bias = zeros_init(d_model, dtype=dtype)
        self.mha = MhaWeights(d_model, heads, rng, dtype=dtype)
        self._layout = layout
        self._dtype = dtype
        self._pe2d = partition_patches(
            Tensor(sinusoid_pe_2d(layout.height, layout.width, d_model,
                                  dtype)[None, None]), layout).data

    def _tokens(self, z: Tensor, time_base: int):
        """(B, T, H, W, d) -> (B*P, T*K^2, d) with spatial+temporal PE."""
        b, t, hh, ww, d = z.shape
        lay = self._layout
        kk, p = lay.window ** 2, lay.patch_count
        patches = partition_patches(z, lay).reshape(b, t, p, kk, d)
        patches = patches.transpose(0, 2, 1, 3, 4)  # (B, P, T, K^2, d)
        pe_t = sinusoid_pe_1d(t, d, self._dtype, base=time_base)
        pe = self._pe2d[:, None, :, :] + pe_t[None, :, None, :]  # (P,T,K^2,d)
        tokens = patches.reshape(b * p, t * kk, d)
        with_pe = (patches + Tensor(pe)).reshape(b * p, t * kk, d)
        return tokens, with_pe

    def forward(self, queries: Tensor, memories: Tensor) -> Tensor:
        b, f, hh, ww, d = queries.shape
        l = memories.shape[1]
        if memories.shape[2:4] != (hh, ww):
            raise ValueError(f"memory grid {tuple(memories.shape[2:4])} does "
                             f"not match query grid {hh}x{ww}")
        lay = self._layout
        kk, p = lay.window ** 2, lay.patch_count
        qn = layer_norm(queries, self.norm_gain, self.norm_bias)
        q_plain, q_pe = self._tokens(qn, time_base=l)
        m_plain, m_pe = self._tokens(memories, time_base=0)
        out = multi_head_attention(q_pe, m_pe, m_plain, self.mha)
        out = out.reshape(b, p, f, kk, d).transpose(0, 2, 1, 3, 4)
        out = assemble_patches(out.reshape(b * f * p, kk, d), lay, b, f)
        return queries + out


class ConvFFN(Module):
    """Pointwise expand -> 3x3 depth-wise conv -> pointwise contract, with
    layer norms and GELUs, applied per frame; residual output."""

    def __init__(self, d_model: int, rng: Rng, expand: int = 4,
                 dtype=np.float32):
        hidden = d_model * expand
        self.norm1_gain = ones_init(d_model, dtype=dtype)
        self.norm1_bias = zeros_init(d_model, dtype=dtype)
        self.w_in = glorot_uniform(rng, d_model, hidden, dtype=dtype)
        self.b_in = zeros_init(hidden, dtype=dtype)
        self.w_dw = glorot_uniform(rng, 9, 1, shape=(hidden, 1, 3, 3),
                                   dtype=dtype)
        self.norm2_gain = ones_init(hidden, dtype=dtype)
        self.norm2_bias = zeros_init(hidden, dtype=dtype)
        self.w_out = glorot_uniform(rng, hidden, d_model, dtype=dtype)
        self.b_out = zeros_init(d_model, dtype=dtype)
        self._hidden = hidden

    def forward(self, z: Tensor) -> Tensor:
        b, t, hh, ww, d = z.shape
        c = self._hidden
        x = layer_norm(z, self.norm1_gain, self.norm1_bias)
        x = gelu(matmul(x, self.w_in) + self.b_in)
        x = x.reshape(b * t, hh, ww, c).transpose(0, 3, 1, 2)
        x = conv2d(x, self.w_dw, stride=1, padding=1, groups=c)
        x = x.transpose(0, 2, 3, 1).reshape(b, t, hh, ww, c)
        x = gelu(layer_norm(x, self.norm2_gain, self.norm2_bias))
        x = matmul(x, self.w_out) + self.b_out
        return z + x


class MlpFFN(Module):
    """Standard two-layer feed-forward sublayer (pre-norm residual)."""

    def __init__(self, d_model: int, rng: Rng, expand: int = 4,
                 dtype=np.float32):
        hidden = d_model * expand
        self.norm_gain = ones_init(d_model, dtype=dtype)
        self.norm_bias = zeros_init(d_model, dtype=dtype)
        self.w_in = glorot_uniform(rng, d_model, hidden, dtype=dtype)
        self.b_in = zeros_init(hidden, dtype=dtype)
        self.w_out = glorot_uniform(rng, hidden, d_model, dtype=dtype)
        self.b_out = zeros_init(d_model, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        x = layer_norm(z, self.norm_gain, self.norm_bias)
        x = gelu(matmul(x, self.w_in) + self.b_in)
        return z + matmul(x, self.w_out) + self.b_out
