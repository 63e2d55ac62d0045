"""Synthetic bouncing-shape video clips, dataset splits, and the bit-exact
tensor file format used for clips, features, and predictions.

Every clip is a pure function of its ShapeSpec list, and specs are drawn
from counter-based streams, so a (seed, config) pair reproduces the same
dataset bitwise on any platform.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

SHAPE_KINDS = ("square", "circle", "cross")

# stream-id bases partitioning the spec generator; splits can never collide
_SPLIT_STREAMS = {"train": 1_000_000, "val": 2_000_000, "test": 3_000_000,
                  "stress": 4_000_000}

MAX_NDIM = 32
_MAX_ELEMS = 1 << 40


class TensorFileError(Exception):
    """Base for malformed tensor-file conditions."""


class BadMagicError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class DimOverflowError(TensorFileError):
    pass


# ---------------------------------------------------------------------------
# moving shapes
# ---------------------------------------------------------------------------

@dataclass
class ShapeSpec:
    """One moving shape: raster kind, size, start position, velocity,
    intensity.  Position (x, y) is the top-left corner in (column, row)
    pixels; velocity (dx, dy) is in pixels per frame.
    """

    kind: str = "square"
    size: int = 8
    x: float = 0.0
    y: float = 0.0
    dx: float = 1.0
    dy: float = 1.0
    intensity: float = 1.0

    def validate(self, h_img: int, w_img: int):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.size < 1 or self.size > h_img or self.size > w_img:
            raise ValueError(
                f"shape size {self.size} does not fit a {h_img}x{w_img} frame")
        for pos, vel, span in ((self.x, self.dx, w_img - self.size),
                               (self.y, self.dy, h_img - self.size)):
            if not 0 <= pos <= span:
                raise ValueError(f"shape starts outside the frame: {self}")
            if span == 0 and vel != 0:
                raise ValueError(f"shape fills the axis but moves: {self}")
            if abs(vel) > max(span, 0):
                raise ValueError(f"per-frame velocity exceeds travel: {self}")


def _reflect(p0: float, v: float, t: np.ndarray, span: float) -> np.ndarray:
    """Position under reflective bouncing inside [0, span] as a closed-form
    fold of the free trajectory (triangle wave of period 2*span)."""
    if span <= 0:
        return np.zeros_like(t, dtype=np.float64)
    m = np.mod(p0 + v * t, 2.0 * span)
    return np.where(m <= span, m, 2.0 * span - m)


def _raster(kind: str, size: int, intensity: float) -> np.ndarray:
    tile = np.zeros((size, size), dtype=np.float32)
    if kind == "square":
        tile[:] = intensity
    elif kind == "circle":
        c = (size - 1) / 2.0
        r = size / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        tile[(yy - c) ** 2 + (xx - c) ** 2 <= r * r] = intensity
    else:  # cross
        bar = max(1, size // 3)
        lo = (size - bar) // 2
        tile[lo:lo + bar, :] = intensity
        tile[:, lo:lo + bar] = intensity
    return tile


def generate_clip(specs, t_frames: int, h_img: int, w_img: int) -> np.ndarray:
    """Render T frames of constant-velocity shapes bouncing off the frame
    borders.  Overlaps compose by max intensity.  Returns (T, 1, H, W)
    float32 in [0, 1].
    """
    if t_frames < 1:
        raise ValueError(f"need at least one frame, got {t_frames}")
    for spec in specs:
        spec.validate(h_img, w_img)
    frames = np.zeros((t_frames, 1, h_img, w_img), dtype=np.float32)
    ts = np.arange(t_frames, dtype=np.float64)
    for spec in specs:
        xs = _reflect(spec.x, spec.dx, ts, w_img - spec.size)
        ys = _reflect(spec.y, spec.dy, ts, h_img - spec.size)
        tile = _raster(spec.kind, spec.size, spec.intensity)
        for t in range(t_frames):
            c = int(np.floor(xs[t] + 0.5))
            r = int(np.floor(ys[t] + 0.5))
            region = frames[t, 0, r:r + spec.size, c:c + spec.size]
            np.maximum(region, tile, out=region)
    return frames


def augment_flip(clip: np.ndarray, rng: Rng) -> np.ndarray:
    """Flip a whole (T, C, H, W) clip vertically and/or horizontally, each
    with probability one half; every frame gets the same flip."""
    draws = rng.uniform((2,))
    out = clip
    if draws[0] < 0.5:
        out = np.flip(out, axis=-2)
    if draws[1] < 0.5:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class ClipDataset:
    """One split of rendered clips plus the provenance needed to re-derive
    it: the global seed and per-clip stream ids."""

    clips: np.ndarray          # (N, T, 1, H, W) float32
    split: str = "train"
    seed: int = 0
    streams: tuple = ()


def _draw_specs(rng: Rng, h_img, w_img, n_shapes, size) -> list:
    specs = []
    for _ in range(n_shapes):
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))] \
            if n_shapes > 1 else "square"
        span_x, span_y = w_img - size, h_img - size
        x = float(rng.integers(0, span_x + 1))
        y = float(rng.integers(0, span_y + 1))
        # nonzero per-axis speed so motion is always informative
        dx = float(rng.integers(1, 3)) * (1 if rng.uniform(()) < 0.5 else -1)
        dy = float(rng.integers(1, 3)) * (1 if rng.uniform(()) < 0.5 else -1)
        intensity = float(np.round(0.5 + 0.5 * rng.uniform(()), 3))
        specs.append(ShapeSpec(kind, size, x, y, dx, dy, intensity))
    return specs


def make_split(seed: int, split: str, n_clips: int, t_frames: int = 20,
               h_img: int = 32, w_img: int = 32, shape_size: int = 8,
               n_shapes: int = 1) -> ClipDataset:
    """Render one split; clip i is driven by stream base + i of ``seed``."""
    base = _SPLIT_STREAMS[split]
    clips = np.empty((n_clips, t_frames, 1, h_img, w_img), dtype=np.float32)
    streams = []
    for i in range(n_clips):
        stream = base + i
        rng = Rng(seed, stream=stream)
        specs = _draw_specs(rng, h_img, w_img, n_shapes, shape_size)
        clips[i] = generate_clip(specs, t_frames, h_img, w_img)
        streams.append(stream)
    return ClipDataset(clips, split, seed, tuple(streams))


def generate_dataset(root, seed: int = 0, counts=None, t_frames: int = 20,
                     h_img: int = 32, w_img: int = 32,
                     shape_size: int = 8) -> dict:
    """Write train/val/test splits of single-shape clips plus a two-shape
    overlap stress split, one tensor file per split, and a manifest.

    Returns the manifest dict.
    """
    counts = dict(counts or {"train": 2000, "val": 200, "test": 200,
                             "stress": 64})
    os.makedirs(root, exist_ok=True)
    manifest = {
        "seed": seed,
        "clip_len": t_frames,
        "frame_size": [h_img, w_img],
        "shape_size": shape_size,
        "splits": {},
    }
    for split, n in counts.items():
        n_shapes = 2 if split == "stress" else 1
        ds = make_split(seed, split, n, t_frames, h_img, w_img, shape_size,
                        n_shapes)
        fname = f"{split}.vptt"
        write_tensor_file(os.path.join(root, fname), ds.clips)
        manifest["splits"][split] = {
            "file": fname,
            "count": n,
            "shapes_per_clip": n_shapes,
            "stream_base": _SPLIT_STREAMS[split],
        }
    path = os.path.join(root, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_split(root, split: str) -> np.ndarray:
    """Read one split's clip stack as written by generate_dataset."""
    with open(os.path.join(root, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    entry = manifest["splits"][split]
    return read_tensor_file(os.path.join(root, entry["file"]))


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

def write_tensor_file(path, arr) -> None:
    """Serialize a float array: magic ``VPTT``, version u32 1, ndim u32,
    dims u32 each, then float32 little-endian payload."""
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise ValueError("tensor files need at least one dimension")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > MAX_NDIM:
        raise ValueError(f"too many dimensions: {arr.ndim} > {MAX_NDIM}")
    if any(d >= 1 << 32 for d in arr.shape):
        raise ValueError(f"dimension too large for the header: {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"VPTT")
        fh.write(struct.pack("<II", 1, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ends inside {what}")
    return buf


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != b"VPTT":
            raise BadMagicError(f"not a tensor file (magic {magic!r})")
        version, ndim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != 1:
            raise TensorFileError(f"unsupported tensor file version {version}")
        if ndim < 1 or ndim > MAX_NDIM:
            raise DimOverflowError(f"ndim {ndim} outside [1, {MAX_NDIM}]")
        dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
        numel = 1
        for d in dims:
            numel *= d
            if numel > _MAX_ELEMS:
                raise DimOverflowError(f"element count overflows: dims {dims}")
        payload = _read_exact(fh, 4 * numel, "payload")
        if fh.read(1):
            raise TensorFileError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return arr.copy()


def export_pgm(frame, path) -> None:
    """Write one grayscale frame as binary PGM; [0, 1] maps to 0..255 with
    half-up rounding."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected one grayscale frame, got shape {arr.shape}")
    level = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = level.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(level.tobytes())
