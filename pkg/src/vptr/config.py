"""Model and training-run configuration.

Two named model configs exist: ``ModelConfig.toy()`` (32x32x1 frames,
d_model 64, runs on a laptop CPU) and ``ModelConfig.paper_scale()``
(64x64x3 frames, d_model 528, 12-layer stack).  Everything downstream is a
pure function of these values, including parameter counts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    """All architecture and loss hyperparameters."""

    frame_hw: int = 32          # square frame side in pixels
    frame_channels: int = 1
    d_model: int = 64           # feature channels on the 8x8 grid
    heads: int = 8
    window: int = 4             # local spatial attention window side K
    far_layers: int = 4
    nar_enc_layers: int = 2
    nar_dec_layers: int = 4
    past_frames: int = 10       # L
    future_frames: int = 10     # F
    ae_stages: int = 2          # stride-2 stages; feature grid = frame/2^stages
    ae_res_blocks: int = 4
    disc_layers: int = 3
    pe_mode: str = "absolute"   # spatial PE: "absolute" or "relative"
    feda: bool = False          # full spatiotemporal enc-dec attention ablation
    gan_weight: float = 0.01        # lambda_1
    contrast_weight: float = 0.1    # lambda_2
    gdl_alpha: float = 1.0
    temperature: float = 0.07
    lr_stage_one: float = 2e-4
    lr_stage_two: float = 1e-4
    init_seed: int = 0

    @property
    def feat_hw(self) -> int:
        if self.frame_hw % (1 << self.ae_stages):
            raise ValueError(
                f"frame size {self.frame_hw} not divisible by "
                f"2^{self.ae_stages} downsampling")
        return self.frame_hw >> self.ae_stages

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(frame_hw=64, frame_channels=3, d_model=528, heads=8,
                    window=4, far_layers=12, nar_enc_layers=4,
                    nar_dec_layers=8, ae_stages=3, disc_layers=3)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class TrainRunConfig:
    """One training run: stage, schedule, dataset and output paths."""

    stage: str = "ae"           # "ae", "far" or "nar"
    steps: int = 500
    batch_size: int = 4
    seed: int = 0
    lr: float | None = None    # None -> stage default from ModelConfig
    clip_norm: float = 1.0
    data_dir: str = "data"
    out_dir: str = "runs"
    ae_checkpoint: str | None = None   # required for far/nar stages
    checkpoint_every: int = 500
    log_every: int = 10
    augment: bool = False

    def validate(self) -> "TrainRunConfig":
        if self.stage not in ("ae", "far", "nar"):
            raise ValueError(f"unknown training stage {self.stage!r}")
        if self.stage != "ae" and not self.ae_checkpoint:
            raise ValueError(
                f"stage {self.stage!r} requires ae_checkpoint from stage one")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainRunConfig":
        return cls.from_dict(json.loads(text))
