"""Generation: reconstruction, style transfer, predictor-driven TTS and vocoding."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import acoustic, plcsd
from .config import MelConfig, VocoderConfig
from .corpus import MelSpectrogram, PhoneInventory, Utterance, analysis_window, mel_filterbank, write_wav
from .errors import ValidationError
from .formats import save_mel

MODES = ("reconstruct", "transfer", "tts")


def interpolate_style_sequence(seq, target_len: int) -> np.ndarray:
    """Piecewise-linear resampling of a vector sequence to ``target_len`` items.

    Output ``j`` sits at source position ``p = j (L-1) / (T-1)`` and blends the
    two neighbouring vectors; both endpoints are reproduced exactly.
    """
    seq = np.asarray(seq)
    if seq.ndim != 2 or len(seq) == 0:
        raise ValidationError("style sequence must be a non-empty (L, d) array")
    if target_len < 1:
        raise ValidationError("target length must be >= 1")
    n = len(seq)
    if n == 1:
        return np.repeat(seq, target_len, axis=0)
    if target_len == 1:
        return seq[[(n - 1) // 2]].copy()
    pos = np.arange(target_len) * (n - 1) / (target_len - 1)
    lo = np.floor(pos).astype(int)
    hi = np.ceil(pos).astype(int)
    alpha = (pos - lo).astype(seq.dtype)[:, None]
    return (1 - alpha) * seq[lo] + alpha * seq[hi]


@dataclass
class SynthesisModels:
    """Frozen components needed for generation."""

    style_model: plcsd.PLCSD
    text_encoder: acoustic.TextEncoder
    acoustic_model: acoustic.AcousticModel
    predictor: acoustic.StylePredictor | None = None
    max_frames: int | None = None
    checkpoint_hashes: dict = field(default_factory=dict)

    @property
    def inventory(self) -> PhoneInventory:
        return self.style_model.inventory

    def eval(self):
        for m in (self.style_model, self.text_encoder, self.acoustic_model, self.predictor):
            if m is not None:
                m.eval()
        return self


@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    text_seq: np.ndarray
    style_seq: np.ndarray
    alignment: np.ndarray
    truncated: bool

    @property
    def combined(self) -> np.ndarray:
        return acoustic.combine(self.text_seq, self.style_seq)


def _generate(text_seq, style_seq, models: SynthesisModels, frame_shift) -> SynthesisResult:
    out = acoustic.acoustic_forward(acoustic.combine(text_seq, style_seq), models.acoustic_model,
                                    max_frames=models.max_frames)
    return SynthesisResult(MelSpectrogram(out.frames, frame_shift), text_seq, style_seq, out.alignment,
                           out.truncated)


def reference_style(reference: Utterance, models: SynthesisModels) -> np.ndarray:
    return acoustic.utterance_style_sequence(reference, models.style_model)


def transfer(source_phones: Sequence[str], reference: Utterance, models: SynthesisModels) -> SynthesisResult:
    models.eval()
    text = acoustic.encode_text(list(source_phones), models.text_encoder, models.inventory)
    style = interpolate_style_sequence(reference_style(reference, models), len(text))
    return _generate(text, style, models, reference.mel.frame_shift)


def reconstruct(utt: Utterance, models: SynthesisModels) -> SynthesisResult:
    return transfer(utt.phone_sequence, utt, models)


def synthesize_tts(phones: Sequence[str], models: SynthesisModels, frame_shift: float = 256 / 22050):
    if models.predictor is None:
        raise ValidationError("tts mode needs a trained style predictor")
    models.eval()
    text = acoustic.encode_text(list(phones), models.text_encoder, models.inventory)
    style = models.predictor.predict(text)
    return _generate(text, style, models, frame_shift)


# --- vocoder ----------------------------------------------------------------

def _stft(x, cfg: MelConfig, n_frames):
    win = analysis_window(cfg)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * win, axis=1)


def _istft(spec, cfg: MelConfig):
    win = analysis_window(cfg)
    n = spec.shape[0]
    length = (n - 1) * cfg.hop_length + cfg.n_fft
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n):
        s = i * cfg.hop_length
        out[s:s + cfg.n_fft] += frames[i]
        norm[s:s + cfg.n_fft] += win ** 2
    # the first and last samples are covered only by window tails; a relative floor keeps them bounded
    return out / np.maximum(norm, 0.1 * norm.max())


def mel_to_linear(mel_frames: np.ndarray, cfg: MelConfig, reg: float) -> np.ndarray:
    """Regularised least-squares inversion of the mel filterbank, clipped at zero."""
    fb = mel_filterbank(cfg)
    gram = fb.T @ fb
    lam = reg * np.trace(gram) / gram.shape[0]
    inv = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), fb.T)
    return np.maximum(np.exp(np.asarray(mel_frames, dtype=np.float64)) @ inv.T, 0.0)


def vocode(mel: MelSpectrogram, mel_cfg: MelConfig | None = None, cfg: VocoderConfig | None = None) -> np.ndarray:
    """Griffin-Lim from a log-mel spectrogram; returns ``n_frames * hop`` samples."""
    mel_cfg = mel_cfg or MelConfig()
    cfg = cfg or VocoderConfig()
    if mel.n_frames == 0:
        raise ValidationError("empty mel-spectrogram")
    if mel.n_mels != mel_cfg.n_mels:
        raise ValidationError(f"mel has {mel.n_mels} bands, vocoder configured for {mel_cfg.n_mels}")
    mag = mel_to_linear(mel.frames, mel_cfg, cfg.pinv_reg)
    n = mel.n_frames
    phase = np.ones_like(mag, dtype=np.complex128)
    x = _istft(mag * phase, mel_cfg)
    for _ in range(cfg.n_iter):
        spec = _stft(x, mel_cfg, n)
        phase = np.exp(1j * np.angle(spec))
        x = _istft(mag * phase, mel_cfg)
    return x[:n * mel_cfg.hop_length]


# --- requests -----------------------------------------------------------------

@dataclass
class GenerationRequest:
    mode: str
    source_phones: list = field(default_factory=list)
    reference: Utterance | None = None
    output_stem: str = "out"

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.mode in ("reconstruct", "transfer") and self.reference is None:
            raise ValidationError(f"{self.mode} mode needs a reference utterance")
        if self.mode in ("transfer", "tts") and not self.source_phones:
            raise ValidationError(f"{self.mode} mode needs source phones")
        return self


def run_request(req: GenerationRequest, models: SynthesisModels, mel_cfg: MelConfig,
                voc_cfg: VocoderConfig | None = None, extra_sidecar: dict | None = None,
                write_audio: bool = True) -> dict:
    """Generate, then write ``<stem>.mel`` (+ ``.wav``) and a ``<stem>.json`` sidecar."""
    req.validate()
    if req.mode == "reconstruct":
        res = reconstruct(req.reference, models)
        phones = list(req.reference.phone_sequence)
    elif req.mode == "transfer":
        res = transfer(req.source_phones, req.reference, models)
        phones = list(req.source_phones)
    else:
        res = synthesize_tts(req.source_phones, models, mel_cfg.frame_shift)
        phones = list(req.source_phones)
    stem = Path(req.output_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_mel(stem.with_suffix(".mel"), res.mel)
    sidecar = {
        "mode": req.mode,
        "source_phones": phones,
        "reference_id": req.reference.id if req.reference is not None else None,
        "n_frames": res.mel.n_frames,
        "truncated": res.truncated,
        "checkpoint_hashes": models.checkpoint_hashes,
        **(extra_sidecar or {}),
    }
    if write_audio and res.mel.n_mels == mel_cfg.n_mels:
        wav_path = stem.with_suffix(".wav")
        write_wav(wav_path, vocode(res.mel, mel_cfg, voc_cfg), mel_cfg.sample_rate)
        sidecar["audio_path"] = str(wav_path)
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return sidecar
