"""Factorised synthetic corpus with known content and style ground truth.

Each phone owns a constant spectral template; each style owns a temporal
contour (a DCT-II cosine of its own order), a duration, and modulates the
frames along a fixed spectral tilt.  A segment is::

    frames[t] = template[phone] + amplitude * contour[style](t) * tilt + noise

Contours sum to zero over the segment, so the per-band time average recovers
the phone template exactly when noise is off.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ARPABET_39
from .corpus import AlignmentEntry, MelSpectrogram, PhoneInventory, PhoneSegment, Utterance
from .errors import ValidationError

SYNTH_FRAME_SHIFT = 256 / 22050


@dataclass
class SyntheticGenerator:
    n_phones: int
    n_styles: int
    seed: int = 0
    n_mels: int = 20
    noise: float = 0.1
    amplitude: float = 1.0
    # optional nuisance factors, off by default: contour gain drawn from U(1 - j, 1 + j)
    # and frames added from U{-j..j}
    amplitude_jitter: float = 0.0
    duration_jitter: int = 0
    base_duration: int = 5
    duration_step: int = 2
    templates: np.ndarray = field(init=False, repr=False)
    tilt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_phones < 2 or self.n_styles < 2:
            raise ValidationError("synthetic corpus needs n_phones >= 2 and n_styles >= 2")
        if self.n_phones > len(ARPABET_39):
            raise ValidationError(f"at most {len(ARPABET_39)} synthetic phones")
        rng = np.random.default_rng(self.seed)
        self.templates = rng.normal(0.0, 1.0, size=(self.n_phones, self.n_mels))
        self.tilt = np.linspace(1.5, 0.5, self.n_mels)
        self.inventory = PhoneInventory(ARPABET_39[:self.n_phones])

    def duration(self, style: int) -> int:
        return self.base_duration + self.duration_step * style

    def contour(self, style: int, n_frames: int | None = None) -> np.ndarray:
        n = self.duration(style) if n_frames is None else n_frames
        tau = (np.arange(n) + 0.5) / n
        return np.sqrt(2.0) * np.cos(np.pi * (style + 1) * tau)

    def render(self, phone: int, style: int, rng: np.random.Generator | None = None,
               n_frames: int | None = None) -> np.ndarray:
        """Segment frames; ``rng=None`` gives the clean rendering with no nuisance variation."""
        gain = self.amplitude
        if rng is not None:
            gain *= rng.uniform(1 - self.amplitude_jitter, 1 + self.amplitude_jitter)
            if n_frames is None and self.duration_jitter:
                n_frames = self.duration(style) + int(rng.integers(-self.duration_jitter, self.duration_jitter + 1))
        c = self.contour(style, n_frames)
        frames = self.templates[phone][None, :] + gain * c[:, None] * self.tilt[None, :]
        if rng is not None and self.noise > 0:
            frames = frames + rng.normal(0.0, self.noise, size=frames.shape)
        return frames.astype(np.float32)

    def segments(self, n: int, seed: int = 0, clean: bool = False) -> tuple[list[PhoneSegment], np.ndarray]:
        rng = np.random.default_rng(seed)
        phones = rng.integers(0, self.n_phones, size=n)
        styles = rng.integers(0, self.n_styles, size=n)
        segs = []
        for k, (p, s) in enumerate(zip(phones, styles)):
            mel = MelSpectrogram(self.render(p, s, None if clean else rng), SYNTH_FRAME_SHIFT)
            segs.append(PhoneSegment(f"seg{k:05d}", 0, self.inventory.phones[p], mel, (0, mel.n_frames)))
        return segs, styles

    def utterances(self, n: int, min_phones: int = 3, max_phones: int = 6, seed: int = 1):
        """Return ``(utterances, styles)`` where ``styles[i]`` lists the per-phone style ids."""
        rng = np.random.default_rng(seed)
        utts, all_styles = [], []
        for i in range(n):
            m = int(rng.integers(min_phones, max_phones + 1))
            phones = rng.integers(0, self.n_phones, size=m)
            styles = rng.integers(0, self.n_styles, size=m)
            utt = self.compose(f"syn{i:05d}", phones, styles, rng)
            utts.append(utt)
            all_styles.append(styles)
        return utts, all_styles

    def compose(self, utt_id, phones, styles, rng=None) -> Utterance:
        blocks, entries, t = [], [], 0
        for p, s in zip(phones, styles):
            block = self.render(int(p), int(s), rng)
            entries.append(AlignmentEntry(self.inventory.phones[p], t * SYNTH_FRAME_SHIFT,
                                          (t + len(block)) * SYNTH_FRAME_SHIFT))
            blocks.append(block)
            t += len(block)
        mel = MelSpectrogram(np.concatenate(blocks), SYNTH_FRAME_SHIFT)
        labels = [self.inventory.phones[p] for p in phones]
        return Utterance(utt_id, f"synthetic://{utt_id}", labels, entries, mel)

    def nearest_phone(self, frames: np.ndarray) -> int:
        mean = np.asarray(frames).mean(axis=0)
        return int(np.argmin(((self.templates - mean) ** 2).sum(axis=1)))

    def nearest_style(self, frames: np.ndarray, phone: int) -> int:
        """Style whose noiseless rendering for ``phone`` is closest under DTW."""
        from .evalmetrics import dtw

        frames = np.asarray(frames, dtype=np.float64)
        costs = []
        for s in range(self.n_styles):
            ref = self.render(phone, s).astype(np.float64)
            dist = np.sqrt(((frames[:, None, :] - ref[None, :, :]) ** 2).sum(-1))
            path = dtw(dist)
            costs.append(np.mean([dist[i, j] for i, j in path]))
        return int(np.argmin(costs))


    def force_align(self, frames: np.ndarray, phones) -> list[np.ndarray]:
        """Split ``frames`` into one contiguous run per phone, in order.

        Each run is scored by its squared distance to the best clean rendering of its
        phone over every style, stretched to the run length; the split with the lowest
        total wins.  Runs are at most twice the longest style duration.
        """
        frames = np.asarray(frames, dtype=np.float64)
        phones = [int(p) for p in phones]
        n, m = len(frames), len(phones)
        if m == 0 or n < m:
            raise ValidationError(f"cannot align {m} phones to {n} frames")
        max_len = 2 * self.duration(self.n_styles - 1)
        # best[t, k]: phones 0..k-1 cover frames 0..t-1 exactly
        best = np.full((n + 1, m + 1), np.inf)
        back = np.zeros((n + 1, m + 1), dtype=int)
        best[0, 0] = 0.0
        for k in range(1, m + 1):
            p = phones[k - 1]
            for t in range(k, n - (m - k) + 1):
                for d in range(1, min(max_len, t - (k - 1)) + 1):
                    if not np.isfinite(best[t - d, k - 1]):
                        continue
                    seg = frames[t - d:t]
                    c = min(((seg - self.render(p, s, n_frames=d)) ** 2).sum() for s in range(self.n_styles))
                    if best[t - d, k - 1] + c < best[t, k]:
                        best[t, k], back[t, k] = best[t - d, k - 1] + c, t - d
        if not np.isfinite(best[n, m]):
            raise ValidationError(f"cannot align {m} phones to {n} frames")
        bounds, t = [], n
        for k in range(m, 0, -1):
            bounds.append((back[t, k], t))
            t = back[t, k]
        return [np.arange(a, b) for a, b in reversed(bounds)]

def make_synthetic_corpus(n_phones: int, n_styles: int, n_segments: int, seed: int = 0,
                          noise: bool = True, n_mels: int = 20):
    """Segments plus their hidden style labels (for evaluation only).

    ``noise=False`` switches off every nuisance source (additive noise, gain and
    duration jitter) so segments depend on (phone, style) alone.
    """
    gen = SyntheticGenerator(n_phones, n_styles, seed=seed, n_mels=n_mels)
    return gen.segments(n_segments, seed=seed, clean=not noise)

