"""Dataclass configurations for every pipeline stage.

Defaults follow the full-scale setup (64-dim embeddings, 512-wide recurrent
layers, 90/10 split).  The desk-scale experiments override widths through
``RunConfig`` JSON files rather than editing these defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ValidationError

ARPABET_39 = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P",
    "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)


@dataclass
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    silence_labels: tuple = ("sil", "sp", "")

    @property
    def frame_shift(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def frame_length(self) -> float:
        return self.win_length / self.sample_rate

    def validate(self):
        _positive(self, "sample_rate", "n_fft", "win_length", "hop_length", "n_mels", "log_floor")
        if self.win_length > self.n_fft:
            raise ValidationError("win_length must not exceed n_fft")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValidationError("need 0 <= fmin < fmax <= sample_rate/2")


@dataclass
class PlcsdConfig:
    n_mels: int = 80
    d_c: int = 64
    d_s: int = 64
    encoder_width: int = 512  # bidirectional: half per direction
    decoder_width: int = 512
    classifier_hidden: int = 64  # 0 gives a plain linear classifier
    discriminator_width: int = 64
    # learning rates for the six sub-steps, in training-table order
    learning_rates: tuple = (1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4)
    contrast_weight: float = 1.0
    critic_steps: int = 1  # repeats of sub-steps 3 and 5 per minibatch
    batch_size: int = 32
    gate_threshold: float = 0.5
    max_decode_frames: int = 100
    prob_clip: float = 1e-7
    max_epochs: int = 50
    patience: int = 5
    min_improvement: float = 0.01
    seed: int = 0

    def validate(self):
        _positive(self, "n_mels", "d_c", "d_s", "encoder_width", "decoder_width",
                  "discriminator_width", "batch_size", "max_decode_frames", "max_epochs", "patience")
        if self.encoder_width % 2:
            raise ValidationError("encoder_width must be even (split across two directions)")
        if self.classifier_hidden < 0:
            raise ValidationError("classifier_hidden must be >= 0")
        if len(self.learning_rates) != 6 or any(lr <= 0 for lr in self.learning_rates):
            raise ValidationError("learning_rates needs six positive entries")
        if not 0 < self.gate_threshold < 1:
            raise ValidationError("gate_threshold must lie in (0, 1)")
        if not 0 < self.prob_clip < 0.5:
            raise ValidationError("prob_clip must lie in (0, 0.5)")


@dataclass
class AcousticConfig:
    n_mels: int = 80
    d_t: int = 64
    d_s: int = 64
    phone_embedding: int = 64
    text_conv_layers: int = 3
    text_kernel: int = 5
    prenet_width: int = 128
    prenet_dropout: float = 0.5
    attention_rnn_width: int = 512
    decoder_rnn_width: int = 512
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    attention: str = "location"  # or "content"
    guided_attention_weight: float = 1.0
    guided_attention_sigma: float = 0.2
    gate_weight: float = 1.0
    gate_threshold: float = 0.5
    max_decode_frames: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self):
        _positive(self, "n_mels", "d_t", "d_s", "phone_embedding", "prenet_width",
                  "attention_rnn_width", "decoder_rnn_width", "attention_dim", "text_kernel",
                  "max_decode_frames", "learning_rate", "batch_size", "epochs")
        if self.attention not in ("location", "content"):
            raise ValidationError(f"unknown attention type {self.attention!r}")
        if not 0 < self.gate_threshold < 1:
            raise ValidationError("gate_threshold must lie in (0, 1)")
        if not 0 <= self.prenet_dropout < 1:
            raise ValidationError("prenet_dropout must lie in [0, 1)")


@dataclass
class PredictorConfig:
    d_t: int = 64
    d_s: int = 64
    model_dim: int = 64
    n_blocks: int = 3
    n_heads: int = 2
    conv_kernel: int = 3
    conv_hidden: int = 256
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0

    def validate(self):
        _positive(self, "d_t", "d_s", "model_dim", "n_blocks", "n_heads", "conv_kernel",
                  "conv_hidden", "learning_rate", "batch_size", "epochs")
        if self.model_dim % self.n_heads:
            raise ValidationError("model_dim must be divisible by n_heads")


@dataclass
class VocoderConfig:
    n_iter: int = 60
    pinv_reg: float = 1e-4


@dataclass
class PitchConfig:
    f_min: float = 60.0
    f_max: float = 400.0
    window: int = 1024
    hop: int = 256
    voicing_threshold: float = 0.45


@dataclass
class RunConfig:
    manifest: str = ""
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    train_fraction: float = 0.9
    phones: tuple = ()  # phone inventory; empty means the 39 ARPABET phones
    mel: MelConfig = field(default_factory=MelConfig)
    plcsd: PlcsdConfig = field(default_factory=PlcsdConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    pitch: PitchConfig = field(default_factory=PitchConfig)

    def validate(self):
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)")
        if len(set(self.phones)) != len(self.phones):
            raise ValidationError("phones must be unique")
        for sub in (self.mel, self.plcsd, self.acoustic, self.predictor):
            sub.validate()
        n_mels = self.mel.n_mels
        if self.plcsd.n_mels != n_mels or self.acoustic.n_mels != n_mels:
            raise ValidationError("n_mels must agree across mel, plcsd and acoustic sections")
        if self.acoustic.d_s != self.plcsd.d_s or self.predictor.d_s != self.plcsd.d_s:
            raise ValidationError("style dimension d_s must agree across stages")
        if self.predictor.d_t != self.acoustic.d_t:
            raise ValidationError("text dimension d_t must agree between acoustic and predictor")
        return self

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return from_dict(cls, raw).validate()


def from_dict(cls, raw: dict[str, Any]):
    """Build a (nested) dataclass from plain JSON data, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ValidationError(f"{cls.__name__}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ValidationError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            value = from_dict(type(default), value)
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def to_dict(cfg) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _positive(cfg, *names):
    for name in names:
        if getattr(cfg, name) <= 0:
            raise ValidationError(f"{type(cfg).__name__}.{name} must be positive")
