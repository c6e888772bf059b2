"""Objective metrics: VDE, GPE, FFE, MCD, pitch tracking and embedding separability."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from sklearn.metrics import silhouette_score

from .config import PitchConfig
from .corpus import MelSpectrogram
from .errors import ValidationError

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


@dataclass
class PitchTrack:
    f0: np.ndarray
    voiced: np.ndarray
    frame_shift: float = 0.0

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0.shape != self.voiced.shape:
            raise ValidationError("f0 and voicing arrays differ in length")
        if np.any((self.f0 > 0) != self.voiced):
            raise ValidationError("f0 must be positive exactly on voiced frames")

    def __len__(self):
        return len(self.f0)


@dataclass
class MetricReport:
    vde: float
    gpe: float
    ffe: float
    mcd: float
    n_frames: int
    gpe_defined: bool = True

    def to_json(self) -> dict:
        return asdict(self)


# --- pitch ----------------------------------------------------------------------

def extract_pitch(waveform, sample_rate: int, config: PitchConfig | None = None) -> PitchTrack:
    """Autocorrelation F0 tracker with parabolic peak refinement.

    A frame is voiced when its normalised autocorrelation peak inside
    ``[sr/f_max, sr/f_min]`` reaches ``voicing_threshold``.  The shortest lag
    within 90% of the best peak wins, which suppresses octave-down errors.
    """
    cfg = config or PitchConfig()
    x = np.asarray(waveform, dtype=np.float64)
    win, hop = cfg.window, cfg.hop
    if len(x) < win:
        raise ValidationError(f"audio of {len(x)} samples is shorter than the {win}-sample analysis window")
    n = (len(x) - win) // hop + 1
    lo = max(1, int(math.floor(sample_rate / cfg.f_max)))
    hi = min(win - 2, int(math.ceil(sample_rate / cfg.f_min)))
    f0 = np.zeros(n)
    for i in range(n):
        frame = x[i * hop:i * hop + win]
        frame = frame - frame.mean()
        energy = float(frame @ frame)
        if energy < 1e-10 * win:
            continue
        spec = np.fft.rfft(frame, 2 * win)
        acf = np.fft.irfft(spec * np.conj(spec))[:win]
        sq = np.concatenate([[0.0], np.cumsum(frame ** 2)])
        lags = np.arange(lo, hi + 2)
        e_head = sq[win - lags]  # sum of x_t^2 for t < win - lag
        e_tail = sq[win] - sq[lags]  # sum of x_{t+lag}^2
        r = acf[lags] / np.sqrt(np.maximum(e_head * e_tail, 1e-300))
        peaks = np.where((r[1:-1] >= r[:-2]) & (r[1:-1] > r[2:]))[0] + 1
        if len(peaks) == 0:
            continue
        best = r[peaks].max()
        if best < cfg.voicing_threshold:
            continue
        k = peaks[np.argmax(r[peaks] >= 0.9 * best)]
        a, b, c = r[k - 1], r[k], r[k + 1]
        denom = a - 2 * b + c
        offset = 0.5 * (a - c) / denom if denom != 0 else 0.0
        freq = sample_rate / (lags[k] + offset)
        if cfg.f_min <= freq <= cfg.f_max:
            f0[i] = freq
    return PitchTrack(f0, f0 > 0, hop / sample_rate)


# --- frame-level pitch metrics -------------------------------------------------

def _check_equal(ref: PitchTrack, syn: PitchTrack):
    if len(ref) != len(syn):
        raise ValidationError(f"tracks differ in length ({len(ref)} vs {len(syn)}); align them first")
    if len(ref) == 0:
        raise ValidationError("empty pitch tracks")


def pitch_error_counts(ref: PitchTrack, syn: PitchTrack, threshold: float = 0.2) -> dict:
    _check_equal(ref, syn)
    voicing_err = ref.voiced != syn.voiced
    both = ref.voiced & syn.voiced
    gross = both & (np.abs(syn.f0 - ref.f0) > threshold * ref.f0)
    return {"n": len(ref), "voicing": int(voicing_err.sum()), "both_voiced": int(both.sum()),
            "gross": int(gross.sum())}


def vde(ref: PitchTrack, syn: PitchTrack) -> float:
    c = pitch_error_counts(ref, syn)
    return c["voicing"] / c["n"]


def gpe(ref: PitchTrack, syn: PitchTrack, threshold: float = 0.2) -> float:
    """Gross pitch error rate over frames voiced in both tracks (0 when there are none)."""
    c = pitch_error_counts(ref, syn, threshold)
    return c["gross"] / c["both_voiced"] if c["both_voiced"] else 0.0


def ffe(ref: PitchTrack, syn: PitchTrack, threshold: float = 0.2) -> float:
    c = pitch_error_counts(ref, syn, threshold)
    return (c["voicing"] + c["gross"]) / c["n"]


# --- dynamic time warping --------------------------------------------------------

def dtw(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost monotone path with unit steps (down, right, diagonal)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    return path[::-1]


def _track_features(t: PitchTrack) -> np.ndarray:
    logf = np.where(t.voiced, np.log(np.where(t.voiced, t.f0, 1.0)), 0.0)
    return np.stack([t.voiced.astype(np.float64) * 10.0, logf], axis=1)


def align_tracks(ref: PitchTrack, syn: PitchTrack) -> tuple[PitchTrack, PitchTrack]:
    """Warp both tracks onto their DTW path (log-F0 plus a heavily weighted voicing bit)."""
    a, b = _track_features(ref), _track_features(syn)
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    path = dtw(cost)
    ia = np.array([p[0] for p in path])
    ib = np.array([p[1] for p in path])
    return (PitchTrack(ref.f0[ia], ref.voiced[ia], ref.frame_shift),
            PitchTrack(syn.f0[ib], syn.voiced[ib], syn.frame_shift))


# --- mel cepstral distortion ---------------------------------------------------

def mel_cepstrum(frames: np.ndarray, n_coeffs: int = 13) -> np.ndarray:
    return dct(np.asarray(frames, dtype=np.float64), type=2, norm="ortho", axis=-1)[..., :n_coeffs]


def cepstral_distance(c_ref: np.ndarray, c_syn: np.ndarray) -> np.ndarray:
    """Per-frame distortion in dB; inputs exclude c0."""
    diff = np.atleast_2d(c_ref) - np.atleast_2d(c_syn)
    return MCD_CONST * np.sqrt((diff ** 2).sum(-1))


def mcd(ref_mel, syn_mel, n_coeffs: int = 13, align: bool = True) -> float:
    ref = ref_mel.frames if isinstance(ref_mel, MelSpectrogram) else np.asarray(ref_mel)
    syn = syn_mel.frames if isinstance(syn_mel, MelSpectrogram) else np.asarray(syn_mel)
    if ref.shape[1] != syn.shape[1]:
        raise ValidationError(f"band count mismatch ({ref.shape[1]} vs {syn.shape[1]})")
    c_ref = mel_cepstrum(ref, n_coeffs)[:, 1:]
    c_syn = mel_cepstrum(syn, n_coeffs)[:, 1:]
    if not align:
        if len(c_ref) != len(c_syn):
            raise ValidationError("unaligned MCD needs equal frame counts")
        return float(cepstral_distance(c_ref, c_syn).mean())
    dist = np.sqrt(((c_ref[:, None, :] - c_syn[None, :, :]) ** 2).sum(-1))
    path = dtw(dist)
    return float(MCD_CONST * np.mean([dist[i, j] for i, j in path]))


def evaluate_pair(ref_wave, syn_wave, ref_mel, syn_mel, sample_rate, pitch_cfg=None,
                  threshold: float = 0.2) -> MetricReport:
    ref_t = extract_pitch(ref_wave, sample_rate, pitch_cfg)
    syn_t = extract_pitch(syn_wave, sample_rate, pitch_cfg)
    a, b = align_tracks(ref_t, syn_t)
    c = pitch_error_counts(a, b, threshold)
    return MetricReport(
        vde=c["voicing"] / c["n"],
        gpe=c["gross"] / c["both_voiced"] if c["both_voiced"] else 0.0,
        ffe=(c["voicing"] + c["gross"]) / c["n"],
        mcd=mcd(ref_mel, syn_mel),
        n_frames=c["n"],
        gpe_defined=c["both_voiced"] > 0,
    )


# --- embeddings ------------------------------------------------------------------

def embedding_separability(vectors, labels) -> float:
    """Mean silhouette coefficient (Euclidean) of ``vectors`` grouped by ``labels``."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValidationError("separability needs at least two labels")
    if counts.min() < 2:
        raise ValidationError("separability needs at least two points per label")
    return float(silhouette_score(x, labels, metric="euclidean"))


TSV_HEADER = ("utterance_id", "index", "phone", "embedding_kind")


def write_embeddings_tsv(path, rows):
    """``rows``: iterables of (utterance_id, index, phone, kind, vector)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        rows = list(rows)
        dim = len(rows[0][4]) if rows else 0
        w.writerow(list(TSV_HEADER) + [f"d{k}" for k in range(dim)])
        for utt, idx, phone, kind, vec in rows:
            w.writerow([utt, idx, phone, kind] + ["%.9g" % v for v in np.asarray(vec, dtype=np.float32)])


def read_embeddings_tsv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        if tuple(header[:4]) != TSV_HEADER:
            raise ValidationError(f"{path}: unexpected header {header[:4]}")
        return [(row[0], int(row[1]), row[2], row[3], np.array(row[4:], dtype=np.float32)) for row in r]


def export_embeddings(segments, model, path):
    """Content and style embedding rows for every segment (2n rows)."""
    from . import plcsd

    zc = plcsd.encode_content(segments, model)
    zs = plcsd.encode_style(segments, model)
    rows = []
    for seg, c, s in zip(segments, zc, zs):
        rows.append((seg.utterance_id, seg.index_in_utterance, seg.phone, "content", c))
        rows.append((seg.utterance_id, seg.index_in_utterance, seg.phone, "style", s))
    write_embeddings_tsv(path, rows)
    return path


def sample_per_phone(segments, phones, per_phone: int, seed: int = 0):
    """Random subset with ``per_phone`` segments of each listed phone (fewer if unavailable)."""
    rng = np.random.default_rng(seed)
    chosen = []
    for p in phones:
        idx = [i for i, s in enumerate(segments) if s.phone == p]
        take = rng.permutation(idx)[:per_phone]
        chosen.extend(segments[i] for i in sorted(take))
    return chosen


def write_asr_manifest(path, items):
    """``items``: (audio path, reference phone/word transcript) pairs for external ASR scoring."""
    Path(path).write_text(json.dumps([{"audio_path": str(a), "reference": ref} for a, ref in items], indent=1))
