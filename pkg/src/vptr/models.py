"""Model assemblies: transformer blocks, the autoregressive and
non-autoregressive predictors, the CNN frame autoencoder, the patch
discriminator, and checkpoint serialization.

The two predictors share one block design (window-local spatial attention,
conv feed-forward, per-location temporal attention, plain feed-forward; all
pre-norm residual).  The autoregressive variant stacks causally masked
blocks and is trained by teacher forcing; the non-autoregressive variant
encodes past features into memories and decodes all future positions in a
single pass from learned query maps.

Predictor outputs stay in the residual feature stream with no final norm:
the frozen pixel decoder was fitted to raw encoder features, and a trailing
normalization would shift them out of its input distribution.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .attention import (ConvFFN, EncDecTemporalMHA, FullSpatioTemporalMHA,
                        LocalSpatialMHSA, MlpFFN, PatchLayout, TemporalMHSA)
from .config import ModelConfig
from .modules import Module, glorot_uniform, normal_init, zeros_init
from .tensor import (Rng, Tensor, broadcast_to, conv2d, conv2d_transposed,
                     gelu, layer_norm, leaky_relu, sigmoid)

# rng streams so each model kind draws independent init noise from one seed
_STREAM_AE, _STREAM_FAR, _STREAM_NAR, _STREAM_DISC = 101, 102, 103, 104


# ---------------------------------------------------------------------------
# conv layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, rng: Rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, dtype=np.float32):
        fan_in = (c_in // groups) * k * k
        fan_out = (c_out // groups) * k * k
        self.w = glorot_uniform(rng, fan_in, fan_out,
                                shape=(c_out, c_in // groups, k, k), dtype=dtype)
        self.b = zeros_init((c_out, 1, 1), dtype=dtype)
        self._stride, self._padding, self._groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self._stride, self._padding,
                      self._groups) + self.b


class ConvTranspose2d(Module):
    def __init__(self, rng: Rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int = 0, dtype=np.float32):
        self.w = glorot_uniform(rng, c_in * k * k, c_out * k * k,
                                shape=(c_in, c_out, k, k), dtype=dtype)
        self.b = zeros_init((c_out, 1, 1), dtype=dtype)
        self._stride, self._padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_transposed(x, self.w, self._stride, self._padding) + self.b


_NORM_CONSTS = {}


def channel_norm(x: Tensor) -> Tensor:
    """Normalize each position's channel vector to mean 0 / variance 1.

    Parameter-free: a pure statistic, not an affine layer.  Without it the
    conv stacks are free to grow activations multiplicatively; sigmoid
    heads then saturate to exact 0/1 in float32 and training freezes with
    identically zero gradients.
    """
    c = x.shape[1]
    key = (c, x.data.dtype)
    if key not in _NORM_CONSTS:
        _NORM_CONSTS[key] = (Tensor(np.ones(c, dtype=x.data.dtype)),
                             Tensor(np.zeros(c, dtype=x.data.dtype)))
    gain, bias = _NORM_CONSTS[key]
    y = x.transpose(0, 2, 3, 1)
    return layer_norm(y, gain, bias).transpose(0, 3, 1, 2)


class ResBlock(Module):
    """Two 3x3 convs with a residual add (normalized at the branch input,
    so the residual stream's scale stays bounded with depth)."""

    def __init__(self, rng: Rng, channels: int, dtype=np.float32):
        self.conv1 = Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1.forward(channel_norm(x))
        return x + self.conv2.forward(gelu(y))


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

class VidHRFormerBlock(Module):
    """Local spatial MHSA -> Conv-FFN -> temporal MHSA -> MLP FFN,
    each sublayer pre-norm residual; shape (B,T,H,W,d) preserved."""

    def __init__(self, cfg: ModelConfig, layout: PatchLayout, rng: Rng,
                 causal: bool, dtype=np.float32):
        d, h = cfg.d_model, cfg.heads
        self.spatial = LocalSpatialMHSA(d, h, layout, cfg.pe_mode, rng, dtype)
        self.conv_ffn = ConvFFN(d, rng, dtype=dtype)
        self.temporal = TemporalMHSA(d, h, rng, causal=causal, dtype=dtype)
        self.mlp_ffn = MlpFFN(d, rng, dtype=dtype)

    def forward(self, z: Tensor, index_base: int = 0) -> Tensor:
        z = self.spatial.forward(z)
        z = self.conv_ffn.forward(z)
        z = self.temporal.forward(z, index_base=index_base)
        return self.mlp_ffn.forward(z)


class NarDecoderBlock(Module):
    """Decoder block: the shared sublayers plus cross-attention onto the
    encoder memories and an output Conv-FFN.  Self-attention over the query
    positions is unmasked and runs before the cross-attention."""

    def __init__(self, cfg: ModelConfig, layout: PatchLayout, rng: Rng,
                 dtype=np.float32):
        d, h = cfg.d_model, cfg.heads
        self.spatial = LocalSpatialMHSA(d, h, layout, cfg.pe_mode, rng, dtype)
        self.conv_ffn = ConvFFN(d, rng, dtype=dtype)
        self.temporal = TemporalMHSA(d, h, rng, causal=False, dtype=dtype)
        if cfg.feda:
            self.cross = FullSpatioTemporalMHA(d, h, layout, rng, dtype)
        else:
            self.cross = EncDecTemporalMHA(d, h, rng, dtype)
        self.out_ffn = ConvFFN(d, rng, dtype=dtype)

    def forward(self, q: Tensor, memories: Tensor, index_base: int) -> Tensor:
        q = self.spatial.forward(q)
        q = self.conv_ffn.forward(q)
        q = self.temporal.forward(q, index_base=index_base)
        q = self.cross.forward(q, memories)
        return self.out_ffn.forward(q)


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

class VptrFar(Module):
    """Autoregressive predictor: causally masked block stack.

    ``far_forward`` consumes features at positions 1..T-1 and returns
    predictions for positions 2..T (position t of the output predicts frame
    t+1 from frames <= t).
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        layout = PatchLayout(cfg.feat_hw, cfg.feat_hw, cfg.window)
        rng = Rng(cfg.init_seed, stream=_STREAM_FAR)
        self.blocks = [VidHRFormerBlock(cfg, layout, rng, causal=True,
                                        dtype=dtype)
                       for _ in range(cfg.far_layers)]
        self._cfg = cfg
        self.transformer_calls = 0

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[1] < 1:
            raise ValueError("need at least one input frame (T >= 2 overall)")
        self.transformer_calls += 1
        for blk in self.blocks:
            z = blk.forward(z)
        return z


def far_forward(z: Tensor, model: VptrFar) -> Tensor:
    """Teacher-forcing pass: z_{1..T-1} -> predictions for z_{2..T}."""
    return model.forward(z)


class FutureQueries(Module):
    """Learned (F, H, W, d_model) query maps, independent of the input clip."""

    def __init__(self, cfg: ModelConfig, rng: Rng, dtype=np.float32):
        self.q = normal_init(
            rng, (cfg.future_frames, cfg.feat_hw, cfg.feat_hw, cfg.d_model),
            scale=0.02, dtype=dtype)

    def batched(self, batch: int) -> Tensor:
        f, h, w, d = self.q.shape
        return broadcast_to(self.q.reshape(1, f, h, w, d), (batch, f, h, w, d))


class VptrNar(Module):
    """Non-autoregressive predictor: unmasked encoder over past features,
    decoder that emits all F future positions in one pass from learned
    queries; decoder and encoder couple only through the memories."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        layout = PatchLayout(cfg.feat_hw, cfg.feat_hw, cfg.window)
        rng = Rng(cfg.init_seed, stream=_STREAM_NAR)
        self.enc_blocks = [VidHRFormerBlock(cfg, layout, rng, causal=False,
                                            dtype=dtype)
                           for _ in range(cfg.nar_enc_layers)]
        self.dec_blocks = [NarDecoderBlock(cfg, layout, rng, dtype=dtype)
                           for _ in range(cfg.nar_dec_layers)]
        self.queries = FutureQueries(cfg, rng, dtype=dtype)
        self._cfg = cfg
        self.encoder_calls = 0
        self.decoder_calls = 0

    def encode(self, z: Tensor) -> Tensor:
        self.encoder_calls += 1
        for blk in self.enc_blocks:
            z = blk.forward(z)
        return z

    def decode(self, memories: Tensor) -> Tensor:
        self.decoder_calls += 1
        batch, past = memories.shape[0], memories.shape[1]
        q = self.queries.batched(batch)
        for blk in self.dec_blocks:
            q = blk.forward(q, memories, index_base=past)
        return q


def nar_encode(z: Tensor, model: VptrNar) -> Tensor:
    """Past features z_{1..L} -> memories e_{1..L}."""
    return model.encode(z)


def nar_decode(memories: Tensor, model: VptrNar) -> Tensor:
    """Memories -> predicted features for positions L+1..L+F, one pass."""
    return model.decode(memories)


# ---------------------------------------------------------------------------
# frame autoencoder and discriminator
# ---------------------------------------------------------------------------

class FrameAutoencoder(Module):
    """Per-frame CNN encoder/decoder around the d_model feature grid.

    Encoder: 7x7 stem, ``ae_stages`` stride-2 3x3 convs doubling channels up
    to d_model, then ``ae_res_blocks`` residual blocks.  Decoder mirrors with
    transposed convs and ends in a sigmoid so frames live in [0,1].  No skip
    connections: the predictor replaces the bottleneck entirely.  Every conv
    is followed by a parameter-free channel normalization, and the encoder
    output is normalized, so the feature interface the predictors see is
    standardized per position.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        rng = Rng(cfg.init_seed, stream=_STREAM_AE)
        stages, d = cfg.ae_stages, cfg.d_model
        if d % (1 << stages):
            raise ValueError(f"d_model {d} not divisible by 2^{stages}")
        _ = cfg.feat_hw  # raises on bad frame/stage geometry
        c0 = d >> stages
        self.stem = Conv2d(rng, cfg.frame_channels, c0, 7, padding=3,
                           dtype=dtype)
        self.down = [Conv2d(rng, c0 << i, c0 << (i + 1), 3, stride=2,
                            padding=1, dtype=dtype) for i in range(stages)]
        self.enc_res = [ResBlock(rng, d, dtype=dtype)
                        for _ in range(cfg.ae_res_blocks)]
        self.dec_res = [ResBlock(rng, d, dtype=dtype)
                        for _ in range(cfg.ae_res_blocks)]
        self.up = [ConvTranspose2d(rng, c0 << (i + 1), c0 << i, 4, stride=2,
                                   padding=1, dtype=dtype)
                   for i in reversed(range(stages))]
        self.head = Conv2d(rng, c0, cfg.frame_channels, 7, padding=3,
                           dtype=dtype)
        self._cfg = cfg
        self.encode_calls = 0
        self.decode_calls = 0

    def encode_frames(self, x: Tensor) -> Tensor:
        """(N, C, H, W) frames -> (N, d_model, h, w) feature maps."""
        y = gelu(channel_norm(self.stem.forward(x)))
        for conv in self.down:
            y = gelu(channel_norm(conv.forward(y)))
        for blk in self.enc_res:
            y = blk.forward(y)
        return channel_norm(y)

    def decode_frames(self, z: Tensor) -> Tensor:
        y = z
        for blk in self.dec_res:
            y = blk.forward(y)
        for conv in self.up:
            y = gelu(channel_norm(conv.forward(y)))
        return sigmoid(self.head.forward(y))

    def encode(self, clip: Tensor) -> Tensor:
        """VideoClip (B,T,C,H,W) -> FeatureMap5D (B,T,h,w,d_model)."""
        self.encode_calls += 1
        b, t, c, h, w = clip.shape
        feats = self.encode_frames(clip.reshape(b * t, c, h, w))
        d, fh, fw = feats.shape[1:]
        return feats.transpose(0, 2, 3, 1).reshape(b, t, fh, fw, d)

    def decode(self, z: Tensor) -> Tensor:
        """FeatureMap5D (B,T,h,w,d_model) -> VideoClip (B,T,C,H,W)."""
        self.decode_calls += 1
        b, t, fh, fw, d = z.shape
        feats = z.reshape(b * t, fh, fw, d).transpose(0, 3, 1, 2)
        frames = self.decode_frames(feats)
        c, h, w = frames.shape[1:]
        return frames.reshape(b, t, c, h, w)


def cnn_encode(x: Tensor, model: FrameAutoencoder) -> Tensor:
    return model.encode(x)


def cnn_decode(z: Tensor, model: FrameAutoencoder) -> Tensor:
    return model.decode(z)


class PatchDiscriminator(Module):
    """Conv stack mapping a frame to a spatial grid of realism logits
    (one decision per receptive-field patch, never a single scalar)."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        rng = Rng(cfg.init_seed, stream=_STREAM_DISC)
        c0 = 16
        chans = [cfg.frame_channels] + [c0 << i for i in range(cfg.disc_layers)]
        self.convs = [Conv2d(rng, chans[i], chans[i + 1], 4, stride=2,
                             padding=1, dtype=dtype)
                      for i in range(cfg.disc_layers)]
        self.head = Conv2d(rng, chans[-1], 1, 3, padding=1, dtype=dtype)

    def score(self, frames: Tensor) -> Tensor:
        """(N, C, H, W) -> (N, 1, H/2^n, W/2^n) logit grid."""
        y = frames
        for conv in self.convs:
            y = leaky_relu(conv.forward(y), 0.2)
        return self.head.forward(y)


def discriminator_score(frames: Tensor, model: PatchDiscriminator) -> Tensor:
    return model.score(frames)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"VPTC"
_CKPT_VERSION = 1


def save_checkpoint(path, meta: dict, named_arrays) -> None:
    """Write magic, version, length-prefixed JSON meta, then per array:
    name length u32, utf-8 name, ndim u32, dims u32[], f32 LE data."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in named_arrays:
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint back as (meta, {name: float32 array})."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    arrays = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        end = off + 4 * count
        if end > len(raw):
            raise ValueError(f"truncated checkpoint at parameter {name!r}")
        arrays[name] = np.frombuffer(
            raw[off:end], dtype="<f4").reshape(dims).copy()
        off = end
    return meta, arrays


def save_model(path, kind: str, cfg: ModelConfig, model: Module,
               step: int = 0, extra_arrays: dict | None = None) -> None:
    meta = {"kind": kind, "config": cfg.to_dict(), "step": step}
    items = list(model.named_parameters())
    if extra_arrays:
        items += [(f"extra/{k}", v) for k, v in sorted(extra_arrays.items())]
    save_checkpoint(path, meta, ((n, t.data if isinstance(t, Tensor) else t)
                                 for n, t in items))


_BUILDERS = {}


def load_model(path, expect_kind: str | None = None, dtype=np.float32):
    """Rebuild a model from a checkpoint; returns (model, meta, extras)."""
    meta, arrays = load_checkpoint(path)
    kind = meta.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"checkpoint {path} holds a {kind!r} model, "
                         f"expected {expect_kind!r}")
    cfg = ModelConfig.from_dict(meta["config"])
    model = _BUILDERS[kind](cfg, dtype=dtype)
    extras = {}
    params = dict(model.named_parameters())
    for name, arr in arrays.items():
        if name.startswith("extra/"):
            extras[name[len("extra/"):]] = arr
            continue
        if name not in params:
            raise ValueError(f"checkpoint parameter {name!r} not in model")
        if params[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name!r}: checkpoint "
                             f"{arr.shape}, model {params[name].data.shape}")
        params[name].data = arr.astype(dtype)
    missing = set(params) - {n for n in arrays if not n.startswith("extra/")}
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]}")
    return model, meta, extras


_BUILDERS.update({
    "autoencoder": lambda cfg, dtype: FrameAutoencoder(cfg, dtype=dtype),
    "far": lambda cfg, dtype: VptrFar(cfg, dtype=dtype),
    "nar": lambda cfg, dtype: VptrNar(cfg, dtype=dtype),
    "discriminator": lambda cfg, dtype: PatchDiscriminator(cfg, dtype=dtype),
})
