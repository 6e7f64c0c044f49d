"""WAV loading for onset analysis: mono mixdown, resampling, 8 s cap."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ParseError, ValidationError

ANALYSIS_RATE = 16_000
MAX_SECONDS = 8.0


@dataclass(frozen=True)
class AudioClip:
    """Mono samples in [-1, 1]; capped at 8 seconds."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate: must be positive")
        if not np.isfinite(self.samples).all():
            raise ValidationError("samples: must be finite")
        if self.duration > MAX_SECONDS + 1e-9:
            raise ValidationError(f"samples: clip exceeds {MAX_SECONDS} s")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


def load_wav(path: str | Path, target_sr: int = ANALYSIS_RATE) -> AudioClip:
    """Read a PCM WAV, average stereo to mono, resample, clip to 8 s."""
    try:
        sr, raw = wavfile.read(str(path))
    except (ValueError, EOFError) as exc:
        raise ParseError(f"{path}: not a readable WAV file ({exc})") from exc
    data = np.asarray(raw).astype(np.float64)
    if raw.dtype == np.int16:
        data /= 32768.0
    elif raw.dtype == np.int32:
        data /= 2147483648.0
    elif raw.dtype == np.uint8:
        data = (data - 128.0) / 128.0
    if data.ndim == 2:
        data = data.mean(axis=1)
    if sr != target_sr:
        ratio = Fraction(target_sr, int(sr))
        data = resample_poly(data, ratio.numerator, ratio.denominator)
    max_len = int(MAX_SECONDS * target_sr)
    data = data[:max_len]
    return AudioClip(samples=np.clip(data, -1.0, 1.0), sample_rate=target_sr)


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples as 16-bit PCM. Test/fixture helper."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(str(path), sample_rate, (pcm * 32767.0).astype(np.int16))
