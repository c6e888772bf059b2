"""Corpus ingestion: alignments, audio, mel-spectrograms and phone segments."""
from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ARPABET_39, MelConfig
from .errors import ValidationError

DEFAULT_SILENCE = frozenset(MelConfig().silence_labels)


@dataclass(frozen=True)
class PhoneInventory:
    phones: tuple

    def __post_init__(self):
        if not self.phones:
            raise ValidationError("phone inventory must not be empty")
        if len(set(self.phones)) != len(self.phones):
            raise ValidationError("phone labels must be unique")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.phones)})

    @classmethod
    def arpabet(cls) -> "PhoneInventory":
        return cls(ARPABET_39)

    @property
    def size(self) -> int:
        return len(self.phones)

    def __len__(self):
        return len(self.phones)

    def __contains__(self, label):
        return label in self._index

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"unknown phone {label!r}") from None

    def indices(self, labels: Iterable[str]) -> list[int]:
        return [self.index(p) for p in labels]


@dataclass
class MelSpectrogram:
    """Log-mel frames, shape ``(n_frames, n_mels)``, stored as float32."""

    frames: np.ndarray
    frame_shift: float
    frame_length: float = 0.0
    sample_rate: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] == 0:
            raise ValidationError(f"mel frames must be 2-D with n_mels > 0, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("mel frames contain non-finite values")
        self.frames = frames

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def slice(self, start: int, end: int) -> "MelSpectrogram":
        return MelSpectrogram(self.frames[start:end], self.frame_shift, self.frame_length, self.sample_rate)


@dataclass(frozen=True)
class AlignmentEntry:
    label: str
    start: float
    end: float


@dataclass
class Utterance:
    id: str
    audio_path: str
    phone_sequence: list
    alignment: list
    mel: MelSpectrogram | None = None

    def validate(self, silence_labels=DEFAULT_SILENCE):
        phones = [e.label for e in self.alignment if e.label not in silence_labels]
        if not phones:
            raise ValidationError(f"utterance {self.id}: alignment contains no phones")
        if list(self.phone_sequence) != phones:
            raise ValidationError(
                f"utterance {self.id}: phone sequence {self.phone_sequence} does not match alignment {phones}")
        return self


@dataclass
class PhoneSegment:
    utterance_id: str
    index_in_utterance: int
    phone: str
    mel: MelSpectrogram
    frame_range: tuple = field(default=(0, 0))

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames


# --- alignment files -------------------------------------------------------

def parse_alignment(obj, source="<alignment>") -> tuple[str, list[AlignmentEntry]]:
    if not isinstance(obj, dict) or "entries" not in obj:
        raise ValidationError(f"{source}: expected an object with 'id' and 'entries'")
    utt_id = obj.get("id")
    if not isinstance(utt_id, str):
        raise ValidationError(f"{source}: field 'id' must be a string")
    raw = obj["entries"]
    if not isinstance(raw, list):
        raise ValidationError(f"{source}: field 'entries' must be a list")
    if not raw:
        raise ValidationError(f"{source}: 'entries' is empty; an utterance needs at least one phone")
    entries = []
    for i, item in enumerate(raw):
        where = f"{source}: entries[{i}]"
        if not isinstance(item, dict):
            raise ValidationError(f"{where}: expected an object")
        for key, kind in (("label", str), ("start", (int, float)), ("end", (int, float))):
            if key not in item:
                raise ValidationError(f"{where}: missing field '{key}'")
            if not isinstance(item[key], kind) or isinstance(item[key], bool):
                raise ValidationError(f"{where}.{key}: wrong type {type(item[key]).__name__}")
        entry = AlignmentEntry(item["label"], float(item["start"]), float(item["end"]))
        if not (math.isfinite(entry.start) and math.isfinite(entry.end)) or entry.start < 0:
            raise ValidationError(f"{where}: times must be finite and non-negative")
        if entry.start >= entry.end:
            raise ValidationError(f"{where}: start {entry.start} >= end {entry.end}")
        entries.append(entry)
    for i, (a, b) in enumerate(zip(entries, entries[1:])):
        if b.start < a.start:
            raise ValidationError(f"{source}: entries[{i + 1}] is not sorted by start time")
        if b.start < a.end:
            raise ValidationError(f"{source}: entries[{i}] and entries[{i + 1}] overlap")
    return utt_id, entries


def load_alignment(path) -> list[AlignmentEntry]:
    return load_alignment_record(path)[1]


def load_alignment_record(path) -> tuple[str, list[AlignmentEntry]]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_alignment(obj, source=str(path))


def save_alignment(path, utt_id: str, entries: Sequence[AlignmentEntry]):
    obj = {"id": utt_id, "entries": [{"label": e.label, "start": e.start, "end": e.end} for e in entries]}
    Path(path).write_text(json.dumps(obj, indent=1))


# --- audio -----------------------------------------------------------------

def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono WAV into float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValidationError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        data = w.readframes(w.getnframes())
    if expected_rate is not None and rate != expected_rate:
        raise ValidationError(f"{path}: sample rate {rate} != configured {expected_rate}")
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# --- mel analysis ----------------------------------------------------------

def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3)
    log = 15.0 + np.log(np.maximum(f, 1e-10) / 1000.0) / (np.log(6.4) / 27.0)
    return np.where(f >= 1000.0, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * (200.0 / 3)
    log = 1000.0 * np.exp((np.log(6.4) / 27.0) * (m - 15.0))
    return np.where(m >= 15.0, log, lin)


def mel_band_centers(cfg: MelConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular, area-normalised filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rise = (freqs[None, :] - lower) / (center - lower)
    fall = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    fb *= (2.0 / (upper - lower))
    return fb


def analysis_window(cfg: MelConfig) -> np.ndarray:
    win = np.hanning(cfg.win_length + 1)[:-1]  # periodic Hann
    pad = cfg.n_fft - cfg.win_length
    return np.pad(win, (pad // 2, pad - pad // 2))


def frame_count(n_samples: int, cfg: MelConfig) -> int:
    return (n_samples - cfg.n_fft) // cfg.hop_length + 1


def stft_magnitude(audio: np.ndarray, cfg: MelConfig) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    n = frame_count(len(audio), cfg)
    if len(audio) < cfg.n_fft or n < 1:
        raise ValidationError(f"audio of {len(audio)} samples is shorter than one frame ({cfg.n_fft})")
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n)[:, None]
    return np.abs(np.fft.rfft(audio[idx] * analysis_window(cfg), axis=1))


def compute_mel(audio: np.ndarray, sample_rate: int, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Log-magnitude mel-spectrogram without centre padding."""
    cfg = cfg or MelConfig()
    if sample_rate != cfg.sample_rate:
        raise ValidationError(f"sample rate {sample_rate} does not match configured {cfg.sample_rate}")
    if len(audio) == 0:
        raise ValidationError("audio is empty")
    mag = stft_magnitude(audio, cfg)
    mel = mag @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames, cfg.frame_shift, cfg.frame_length, cfg.sample_rate)


# --- segmentation and splitting ---------------------------------------------

def time_to_frame(t: float, frame_shift: float) -> int:
    x = t / frame_shift
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def segment_utterance(utt: Utterance, silence_labels=DEFAULT_SILENCE,
                      inventory: PhoneInventory | None = None) -> list[PhoneSegment]:
    if utt.mel is None:
        raise ValidationError(f"utterance {utt.id}: mel not computed")
    utt.validate(silence_labels)
    hop = utt.mel.frame_shift
    n = utt.mel.n_frames
    segments = []
    for entry in utt.alignment:
        if entry.label in silence_labels:
            continue
        if inventory is not None and entry.label not in inventory:
            raise ValidationError(f"utterance {utt.id}: phone {entry.label!r} not in inventory")
        start = min(max(time_to_frame(entry.start, hop), 0), n)
        end = min(max(time_to_frame(entry.end, hop), 0), n)
        if end <= start:
            raise ValidationError(
                f"utterance {utt.id}: entry {entry.label} [{entry.start}, {entry.end}] maps to an empty frame range")
        segments.append(PhoneSegment(utt.id, len(segments), entry.label, utt.mel.slice(start, end), (start, end)))
    return segments


def split_dataset(utterances: Sequence, train_fraction: float = 0.9, seed: int = 0):
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)")
    if len(utterances) < 2:
        raise ValidationError("need at least two utterances to split")
    order = np.random.default_rng(seed).permutation(len(utterances))
    n_train = int(math.floor(len(utterances) * train_fraction + 0.5))
    n_train = min(max(n_train, 1), len(utterances) - 1)
    return [utterances[i] for i in order[:n_train]], [utterances[i] for i in order[n_train:]]


# --- manifests -------------------------------------------------------------

def load_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(records, list):
        raise ValidationError(f"{path}: manifest must be a JSON list")
    for i, rec in enumerate(records):
        for key in ("id", "phones", "alignment_path"):
            if key not in rec:
                raise ValidationError(f"{path}: record {i} missing '{key}'")
        if "audio_path" not in rec and "mel_path" not in rec:
            raise ValidationError(f"{path}: record {i} needs 'audio_path' or 'mel_path'")
    return records


def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q
