"""Audio-physics correlation metrics.

For every annotated impact we compute two scalars: the kinetic energy
released at the contact, 0.5 * m * |v_pre^2 - v_post^2|, from the object's
velocity track, and the onset strength of the audio near the impact time
(log-magnitude spectral flux with per-bin maximum filtering, peak within a
small search window). Per sound class, APCC is the correlation between the
two sequences; APCC-delta aggregates |rho_generated - rho_ground_truth|
over classes, lower meaning the generated audio reproduces the real
energy-to-onset coupling more closely. Published systems land roughly in
the 0.3-0.7 range on real benchmarks, which bounds what "good" looks like.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.stats import pearsonr, spearmanr

from .audio_io import AudioClip, load_wav
from .errors import DegenerateError, EvaluationError, ValidationError
from .velocity import VelocityTrack

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 2048
DEFAULT_HOP = 512
DEFAULT_HALF_WINDOW_S = 0.05
DEFAULT_MAX_FILTER = 3
DEFAULT_K_FRAMES = 3
MIN_CLASS_EVENTS = 3


def stft_magnitude(clip: AudioClip, window: int, hop: int) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, frames = (N - window)//hop + 1."""
    if window < 64 or window & (window - 1):
        raise ValidationError("window: must be a power of two >= 64")
    if not 1 <= hop <= window:
        raise ValidationError("hop: must satisfy 1 <= hop <= window")
    samples = np.asarray(clip.samples, dtype=np.float64)
    n = samples.shape[0]
    if n < window:
        raise ValidationError(f"clip of {n} samples is shorter than one window")
    n_frames = (n - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    return np.abs(np.fft.rfft(samples[idx] * hann, axis=1))


def onset_envelope(mag: np.ndarray, max_filter_width: int = DEFAULT_MAX_FILTER) -> np.ndarray:
    """Log-magnitude spectral flux against a max-filtered previous frame.

    env[n] = sum_f max(0, log1p(mag[n, f]) - maxfilter(log1p(mag[n-1]))[f]),
    env[0] = 0. The maximum filter suppresses flux from small frequency
    wobble between frames.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[0] < 2:
        raise ValidationError("onset_envelope: need a (frames >= 2, bins) grid")
    logmag = np.log1p(mag)
    ref = maximum_filter1d(logmag[:-1], size=max_filter_width, axis=1, mode="nearest")
    flux = np.maximum(0.0, logmag[1:] - ref).sum(axis=1)
    return np.concatenate(([0.0], flux))


def onset_envelope_for_clip(
    clip: AudioClip,
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    max_filter_width: int = DEFAULT_MAX_FILTER,
) -> np.ndarray:
    """Onset envelope with frame n centered at time n*hop/sr.

    The clip is zero-padded by window//2 on both sides before the STFT so
    envelope frames align with absolute clip time; the raw stft_magnitude
    frames are left-aligned and would read ~window/2 early.
    """
    pad = window // 2
    padded = AudioClip(
        samples=np.concatenate([np.zeros(pad), clip.samples, np.zeros(pad)]),
        sample_rate=clip.sample_rate,
    )
    return onset_envelope(stft_magnitude(padded, window, hop), max_filter_width)


def impact_onset_strength(
    env: np.ndarray,
    impact_time: float,
    hop: int,
    sr: int,
    half_window: float = DEFAULT_HALF_WINDOW_S,
) -> float:
    """Peak of the onset envelope within +-half_window seconds of the impact."""
    env = np.asarray(env, dtype=np.float64)
    lo = max(0, math.ceil((impact_time - half_window) * sr / hop))
    hi = min(env.shape[0] - 1, math.floor((impact_time + half_window) * sr / hop))
    if hi < lo:
        raise EvaluationError(
            f"no envelope frames within {half_window} s of t={impact_time}"
        )
    return float(env[lo : hi + 1].max())


def kinetic_energy_change(mass: float, v_pre: float, v_post: float) -> float:
    """0.5 * mass * |v_pre^2 - v_post^2| in joules."""
    if mass < 0 or v_pre < 0 or v_post < 0:
        raise ValidationError("kinetic_energy_change: inputs must be non-negative")
    return 0.5 * mass * abs(v_pre * v_pre - v_post * v_post)


def pre_post_velocities(
    track: VelocityTrack, impact_time: float, fps: float, k: int = DEFAULT_K_FRAMES
) -> tuple[float, float]:
    """Mean defined speeds over the k transitions before/after the impact frame.

    Speed index l spans frames l -> l+1, so the pre window is transitions
    [F-k, F-1] and the post window [F, F+k-1] for impact frame F. Windows
    with no defined speed raise EvaluationError (the event is excluded).
    """
    if k < 1:
        raise ValidationError("k: window must be >= 1 frame")
    n_frames = len(track.visible)
    frame = int(round(impact_time * fps))
    if not 0 <= frame <= n_frames - 1:
        raise EvaluationError(
            f"impact at t={impact_time} falls on frame {frame}, outside the track"
        )
    v = track.velocities

    def window_mean(lo: int, hi: int) -> float:
        vals = [v[i] for i in range(max(0, lo), min(len(v), hi + 1)) if v[i] is not None]
        if not vals:
            raise EvaluationError(
                f"no defined velocity in window [{lo}, {hi}] around frame {frame}"
            )
        return float(np.mean(vals))

    return window_mean(frame - k, frame - 1), window_mean(frame, frame + k - 1)


def class_correlation(
    events: Sequence[tuple[float, float]], flavor: str = "pearson"
) -> float:
    """Correlation between (delta_ke, onset_strength) pairs of one class."""
    if len(events) < MIN_CLASS_EVENTS:
        raise DegenerateError(f"need >= {MIN_CLASS_EVENTS} events, got {len(events)}")
    x = np.asarray([e[0] for e in events], dtype=np.float64)
    y = np.asarray([e[1] for e in events], dtype=np.float64)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateError("constant sequence: correlation undefined")
    if flavor == "pearson":
        rho = pearsonr(x, y).statistic
    elif flavor == "spearman":
        rho = spearmanr(x, y).statistic
    else:
        raise ValidationError(f"correlation flavor '{flavor}' unknown")
    return float(np.clip(rho, -1.0, 1.0))


def apcc_delta(per_class: Sequence[tuple[float, float]], weights=None) -> float:
    """Mean over classes of |rho_gen - rho_gt| (optionally event-weighted)."""
    if len(per_class) == 0:
        raise EvaluationError("apcc_delta: no included classes")
    gaps = np.asarray([abs(gen - gt) for gt, gen in per_class], dtype=np.float64)
    if weights is None:
        return float(gaps.mean())
    weights = np.asarray(weights, dtype=np.float64)
    return float((gaps * weights).sum() / weights.sum())


@dataclass
class ImpactEvent:
    video_id: str
    class_label: str
    impact_time: float
    object_id: str
    v_pre: float
    v_post: float
    mass: float
    delta_ke: float
    onset_strength_gt: float
    onset_strength_gen: float


@dataclass
class ClassResult:
    class_label: str
    rho_gt: float
    rho_gen: float
    abs_delta: float
    event_count: int


@dataclass
class ApccReport:
    classes: list[ClassResult]
    apcc_delta: Optional[float]
    excluded_classes: list[dict] = field(default_factory=list)
    excluded_events: list[dict] = field(default_factory=list)
    events: list[ImpactEvent] = field(default_factory=list)
    flavor: str = "pearson"
    aggregation: str = "unweighted"


@dataclass(frozen=True)
class ApccSettings:
    window: int = DEFAULT_WINDOW
    hop: int = DEFAULT_HOP
    half_window_s: float = DEFAULT_HALF_WINDOW_S
    max_filter_width: int = DEFAULT_MAX_FILTER
    k_frames: int = DEFAULT_K_FRAMES
    flavor: str = "pearson"
    aggregation: str = "unweighted"   # or "event_weighted"


def _aggregate(
    events: list[ImpactEvent],
    excluded_events: list[dict],
    settings: ApccSettings,
) -> ApccReport:
    by_class: dict[str, list[ImpactEvent]] = {}
    for ev in events:
        by_class.setdefault(ev.class_label, []).append(ev)
    classes: list[ClassResult] = []
    excluded_classes: list[dict] = []
    for label in sorted(by_class):
        evs = by_class[label]
        try:
            rho_gt = class_correlation(
                [(e.delta_ke, e.onset_strength_gt) for e in evs], settings.flavor
            )
            rho_gen = class_correlation(
                [(e.delta_ke, e.onset_strength_gen) for e in evs], settings.flavor
            )
        except DegenerateError as exc:
            excluded_classes.append(
                {"class_label": label, "reason": str(exc), "event_count": len(evs)}
            )
            continue
        classes.append(
            ClassResult(label, rho_gt, rho_gen, abs(rho_gen - rho_gt), len(evs))
        )
    delta = None
    if classes:
        weights = [c.event_count for c in classes] if settings.aggregation == "event_weighted" else None
        delta = apcc_delta([(c.rho_gt, c.rho_gen) for c in classes], weights)
    return ApccReport(
        classes=classes,
        apcc_delta=delta,
        excluded_classes=excluded_classes,
        excluded_events=excluded_events,
        events=events,
        flavor=settings.flavor,
        aggregation=settings.aggregation,
    )


def evaluate_impacts(
    impacts: Sequence[dict],
    tracks: dict[str, dict],
    gt_dir: str | Path,
    gen_dir: str | Path,
    settings: ApccSettings = ApccSettings(),
) -> ApccReport:
    """Full evaluation over annotated impacts.

    ``impacts`` holds {video_id, class, time_s, object_id}; ``tracks`` maps
    video_id to {"fps": float, "tracks": {object_id: VelocityTrack}}.
    Events whose velocity windows are occluded, whose mass is unknown, or
    whose audio is missing are excluded and reported, never imputed.
    """
    gt_dir, gen_dir = Path(gt_dir), Path(gen_dir)
    envelopes: dict[tuple[str, str], tuple[np.ndarray, int]] = {}

    def envelope_for(directory: Path, video_id: str, kind: str):
        key = (kind, video_id)
        if key not in envelopes:
            clip = load_wav(directory / f"{video_id}.wav")
            env = onset_envelope_for_clip(
                clip, settings.window, settings.hop, settings.max_filter_width
            )
            envelopes[key] = (env, clip.sample_rate)
        return envelopes[key]

    events: list[ImpactEvent] = []
    excluded: list[dict] = []
    for imp in impacts:
        vid, label = imp["video_id"], imp["class"]
        t_imp, oid = float(imp["time_s"]), imp["object_id"]
        try:
            entry = tracks.get(vid)
            if entry is None:
                raise EvaluationError(f"no velocity tracks for video '{vid}'")
            track = entry["tracks"].get(oid)
            if track is None:
                raise EvaluationError(f"no track for object '{oid}' in video '{vid}'")
            if track.mass_kg is None:
                raise EvaluationError(f"object '{oid}' has unknown mass")
            v_pre, v_post = pre_post_velocities(track, t_imp, entry["fps"], settings.k_frames)
            dke = kinetic_energy_change(track.mass_kg, v_pre, v_post)
            env_gt, sr = envelope_for(gt_dir, vid, "gt")
            env_gen, _ = envelope_for(gen_dir, vid, "gen")
            onset_gt = impact_onset_strength(env_gt, t_imp, settings.hop, sr,
                                             settings.half_window_s)
            onset_gen = impact_onset_strength(env_gen, t_imp, settings.hop, sr,
                                              settings.half_window_s)
        except (EvaluationError, FileNotFoundError) as exc:
            log.info("excluding impact %s@%.3fs: %s", vid, t_imp, exc)
            excluded.append(
                {"video_id": vid, "class_label": label, "time_s": t_imp, "reason": str(exc)}
            )
            continue
        events.append(
            ImpactEvent(
                video_id=vid, class_label=label, impact_time=t_imp, object_id=oid,
                v_pre=v_pre, v_post=v_post, mass=track.mass_kg, delta_ke=dke,
                onset_strength_gt=onset_gt, onset_strength_gen=onset_gen,
            )
        )
    return _aggregate(events, excluded, settings)
