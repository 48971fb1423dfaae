"""Procedural paired AV clips with a known, measurable cross-modal link.

A soft ball bounces vertically at latent resolution; its class picks the
bounce period and color, and a seeded random walk jitters the bounce
phase.  Audio is the magnitude spectrum of a windowed sinusoid whose
pitch follows ball height, sampled at sub-frame offsets, so video height
and the dominant audio bin are strongly correlated by construction.
Everything is deterministic in (class_id, seed, length).

Clips are stored in a small binary format: magic "RFAV", a version word,
eight u32 header fields, then the video tensor followed by the audio
tensor as little-endian float32.
"""
from __future__ import annotations

import dataclasses
import struct

import numpy as np

MAGIC = b"RFAV"
VERSION = 1
_HEADER = struct.Struct("<4sI8I")

BOUNCE_PERIODS = (8.0, 12.0, 18.0, 27.0)
PALETTE = ((1.0, 0.25, 0.25), (0.25, 1.0, 0.25),
           (0.25, 0.25, 1.0), (1.0, 1.0, 0.25))

# pitch range in bin units; kept inside the spectrum with margin so the
# dominant bin moves affinely with height without clipping
_BIN_LO = 2.5
_BIN_HI = 12.5

# per-frame phase jitter of the bounce (random walk, radians).  Without it
# the trajectory is exactly predictable from a few video frames and a
# trained model never needs the audio branch; the jitter leaves a residual
# the same-frame audio measures independently, so cross-modal fusion pays.
PHASE_JITTER = 0.5

# i.i.d. per-frame height offset (uniform, pixels).  Past frames carry no
# information about it, the same frame's audio pitch encodes it exactly, so
# a trained estimator must read position from audio rather than extrapolate
# it from video history; that readout is what audio-conditioned video
# generation relies on.
HEIGHT_DITHER = 1.2

# spectra are scaled well above unit noise while the ball blob stays small:
# under the shared per-frame noise level, pitch must read out earlier in t
# than ball position, or a model has no reason to let audio lead video
AUDIO_GAIN = 6.0
BALL_SIGMA = 0.6


@dataclasses.dataclass(frozen=True)
class ToyGeometry:
    channels: int = 4
    height: int = 8
    width: int = 8
    segments_per_frame: int = 4
    mel_bins: int = 16
    class_count: int = 4


DEFAULT_GEOMETRY = ToyGeometry()


@dataclasses.dataclass(frozen=True)
class Clip:
    video: np.ndarray
    audio: np.ndarray
    class_id: int
    seed: int

    @property
    def frames(self) -> int:
        return self.video.shape[0]


class ClipFormatError(ValueError):
    pass


class BadMagicError(ClipFormatError):
    pass


class VersionError(ClipFormatError):
    pass


class TruncationError(ClipFormatError):
    pass


# ---------------------------------------------------------------------------
# frame codecs

# tonal grid for rendered intensities: multiples of 1/1024 map through
# 2x-1 and back without any float32 rounding, keeping the codec exact
TONE_STEPS = 1024


def quantize_tone(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(rgb, dtype=np.float64) * TONE_STEPS) / TONE_STEPS


def encode_frame(rgb: np.ndarray) -> np.ndarray:
    """[3,h,w] in [0,1] -> [4,h,w] in [-1,1] plus a derived luminance channel.

    Exactly invertible on the renderer's tonal grid (see quantize_tone).
    """
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected [3,h,w], got {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError("color values must lie in [0, 1]")
    color = 2.0 * rgb - 1.0
    luma = color.mean(axis=0, keepdims=True)
    return np.concatenate([color, luma], axis=0)


def decode_frame(latent: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_frame; the luminance channel is dropped."""
    latent = np.asarray(latent, dtype=np.float32)
    if latent.ndim != 3 or latent.shape[0] != 4:
        raise ValueError(f"expected [4,h,w], got {latent.shape}")
    return (latent[:3] + 1.0) / 2.0


# ---------------------------------------------------------------------------
# rendering

def render_ball_video(heights: np.ndarray, color,
                      geometry: ToyGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Render a soft ball at the given per-frame heights, encoded latents."""
    heights = np.asarray(heights, dtype=np.float64)
    rows = np.arange(geometry.height, dtype=np.float64)[:, None]
    cols = np.arange(geometry.width, dtype=np.float64)[None, :]
    x_center = (geometry.width - 1) / 2.0
    sigma = BALL_SIGMA
    frames = []
    for y in heights:
        blob = np.exp(-((rows - y) ** 2 + (cols - x_center) ** 2)
                      / (2.0 * sigma * sigma))
        rgb = np.asarray(color, dtype=np.float64)[:, None, None] * blob
        frames.append(encode_frame(quantize_tone(np.clip(rgb, 0.0, 1.0))))
    return np.stack(frames).astype(np.float32)


def audio_from_heights(heights: np.ndarray,
                       geometry: ToyGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Per-segment pitch spectra: [T, segments] heights -> [T, segments, bins].

    Each segment is the rFFT magnitude of one Hann-windowed sinusoid whose
    frequency is an affine function of normalized ball height; the window
    leaks energy into every spectrum, so no frame is ever silent.
    """
    heights = np.asarray(heights, dtype=np.float64)
    if heights.ndim != 2:
        raise ValueError(f"expected [frames, segments] heights, got {heights.shape}")
    n_samples = 2 * (geometry.mel_bins - 1)
    window = np.hanning(n_samples)
    n = np.arange(n_samples)
    norm = heights / (geometry.height - 1)
    freq_bins = _BIN_LO + (_BIN_HI - _BIN_LO) * norm
    waves = np.sin(2.0 * np.pi * freq_bins[..., None] * n / n_samples)
    spectra = np.abs(np.fft.rfft(waves * window, axis=-1))
    return (AUDIO_GAIN * spectra / (n_samples / 4.0)).astype(np.float32)


def class_heights(class_id: int, phase: float, frames: int, *,
                  oversample: int = 1, jitter: np.ndarray | None = None,
                  geometry: ToyGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Bounce trajectory for a class, sampled ``oversample`` per frame.

    ``jitter`` is an optional per-frame phase offset sequence, linearly
    interpolated at sub-frame sample times.
    """
    if not 0 <= class_id < geometry.class_count:
        raise ValueError(f"class_id {class_id} outside [0, {geometry.class_count})")
    period = BOUNCE_PERIODS[class_id]
    tau = np.arange(frames * oversample, dtype=np.float64) / oversample
    total = 2.0 * np.pi * tau / period + phase
    if jitter is not None:
        jitter = np.asarray(jitter, dtype=np.float64)
        if jitter.shape != (frames,):
            raise ValueError(f"jitter must hold one offset per frame, "
                             f"got shape {jitter.shape}")
        total = total + np.interp(tau, np.arange(frames, dtype=np.float64),
                                  jitter)
    mid = (geometry.height - 1) / 2.0
    amp = mid - 1.0
    y = mid + amp * np.sin(total)
    return y.reshape(frames, oversample)


def generate_clip(class_id: int, seed: int, frames: int,
                  geometry: ToyGeometry = DEFAULT_GEOMETRY) -> Clip:
    """Deterministic paired AV clip; the seed picks phase and its jitter walk."""
    if frames < 1:
        raise ValueError("frames must be at least 1")
    if not 0 <= class_id < len(BOUNCE_PERIODS):
        raise ValueError(f"class_id must be in [0, {len(BOUNCE_PERIODS)}), "
                         f"got {class_id}")
    rng = np.random.default_rng([class_id, seed, frames])
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    # constant in cycle units: keeps the per-frame jitter below the
    # deterministic phase advance for every class, so the walk never runs
    # the phase backwards and zero-crossing period counts stay clean
    sigma = PHASE_JITTER * BOUNCE_PERIODS[0] / BOUNCE_PERIODS[class_id]
    jitter = np.cumsum(rng.normal(0.0, sigma, size=frames))
    dither = rng.uniform(-HEIGHT_DITHER, HEIGHT_DITHER, size=frames)
    sub = class_heights(class_id, phase, frames, jitter=jitter,
                        oversample=geometry.segments_per_frame,
                        geometry=geometry)
    # dither is constant within a frame so every sub-frame audio segment
    # pins the same offset the rendered ball shows
    sub = np.clip(sub + dither[:, None], 0.5, geometry.height - 1.5)
    video = render_ball_video(sub[:, 0], PALETTE[class_id], geometry)
    audio = audio_from_heights(sub, geometry)
    return Clip(video, audio, class_id, seed)


# ---------------------------------------------------------------------------
# measurements

def ball_height_series(video: np.ndarray) -> np.ndarray:
    """Intensity-weighted centroid row per frame, from the luminance channel."""
    video = np.asarray(video)
    luma = (video[:, -1] + 1.0) / 2.0
    luma = np.clip(luma, 0.0, None)
    rows = np.arange(video.shape[2], dtype=np.float64)[None, :, None]
    total = luma.sum(axis=(1, 2))
    total = np.where(total <= 1e-12, 1.0, total)
    return (luma * rows).sum(axis=(1, 2)) / total


def dominant_bin_series(audio: np.ndarray) -> np.ndarray:
    """Argmax spectral bin of each frame's segment-averaged spectrum."""
    audio = np.asarray(audio)
    return audio.mean(axis=1).argmax(axis=-1).astype(np.float64)


def av_correlation(video: np.ndarray, audio: np.ndarray) -> float:
    """Pearson correlation between ball height and dominant audio bin."""
    h = ball_height_series(video)
    b = dominant_bin_series(audio)
    if h.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(h, b)[0, 1])


# boxcar width for the crossing estimator; suppresses frame-rate noise
# (the dither above) while leaving periods of 5+ frames intact
_PERIOD_SMOOTH = 3


def estimate_period_zero_crossings(series: np.ndarray) -> float:
    """Mean spacing between upward zero crossings of the centered series.

    The series is lightly smoothed first so single-frame noise does not
    spray extra crossings around each true one.
    """
    centered = np.asarray(series, dtype=np.float64)
    centered = centered - centered.mean()
    if len(centered) >= 2 * _PERIOD_SMOOTH:
        kernel = np.full(_PERIOD_SMOOTH, 1.0 / _PERIOD_SMOOTH)
        centered = np.convolve(centered, kernel, mode="valid")
    sign = centered > 0.0
    ups = np.flatnonzero(sign[1:] & ~sign[:-1])
    if len(ups) < 2:
        raise ValueError("too few zero crossings to estimate a period")
    return float(np.mean(np.diff(ups)))


# ---------------------------------------------------------------------------
# clip file format

def _expect(data: bytes, n: int, what: str) -> None:
    if len(data) < n:
        raise TruncationError(f"file ends inside {what}: "
                              f"have {len(data)} bytes, need {n}")


def write_clip(path, clip: Clip) -> None:
    frames, c, h, w = clip.video.shape
    _, spf, mel = clip.audio.shape
    if clip.audio.shape[0] != frames:
        raise ValueError("video and audio frame counts differ")
    header = _HEADER.pack(MAGIC, VERSION, frames, c, h, w, spf, mel,
                          clip.class_id, clip.seed)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(clip.video, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(clip.audio, dtype="<f4").tobytes())


def read_clip(path) -> Clip:
    with open(path, "rb") as f:
        data = f.read()
    _expect(data, _HEADER.size, "header")
    magic, version, frames, c, h, w, spf, mel, class_id, seed = \
        _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    video_count = frames * c * h * w
    audio_count = frames * spf * mel
    _expect(data, _HEADER.size + 4 * (video_count + audio_count), "tensor data")
    offset = _HEADER.size
    video = np.frombuffer(data, dtype="<f4", count=video_count, offset=offset)
    offset += 4 * video_count
    audio = np.frombuffer(data, dtype="<f4", count=audio_count, offset=offset)
    return Clip(video.reshape(frames, c, h, w).copy(),
                audio.reshape(frames, spf, mel).copy(), class_id, seed)


class ClipWriter:
    """Streaming frame-by-frame writer for a clip of known length.

    The format keeps all video before all audio, so the writer maintains
    two cursors and seeks; memory use is one frame, not the clip.
    """

    def __init__(self, path, n_frames: int, class_id: int, seed: int,
                 geometry: ToyGeometry = DEFAULT_GEOMETRY):
        self.geometry = geometry
        self.n_frames = n_frames
        self._video_bytes = 4 * geometry.channels * geometry.height * geometry.width
        self._audio_bytes = 4 * geometry.segments_per_frame * geometry.mel_bins
        self._audio_start = _HEADER.size + n_frames * self._video_bytes
        self._written = 0
        self._f = open(path, "wb")
        self._f.write(_HEADER.pack(MAGIC, VERSION, n_frames, geometry.channels,
                                   geometry.height, geometry.width,
                                   geometry.segments_per_frame,
                                   geometry.mel_bins, class_id, seed))

    def append(self, video_frame: np.ndarray, audio_segment: np.ndarray) -> None:
        if self._written >= self.n_frames:
            raise ValueError("clip is already complete")
        i = self._written
        self._f.seek(_HEADER.size + i * self._video_bytes)
        self._f.write(np.ascontiguousarray(video_frame, dtype="<f4").tobytes())
        self._f.seek(self._audio_start + i * self._audio_bytes)
        self._f.write(np.ascontiguousarray(audio_segment, dtype="<f4").tobytes())
        self._written += 1

    def close(self) -> None:
        if self._written != self.n_frames:
            self._f.close()
            raise ValueError(f"clip incomplete: {self._written} of "
                             f"{self.n_frames} frames written")
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._f.close()
        return False


# ---------------------------------------------------------------------------
# manifests

def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="ascii") as f:
        for class_id, seed, length in entries:
            f.write(f"{class_id},{seed},{length}\n")


def read_manifest(path) -> list[tuple[int, int, int]]:
    entries = []
    with open(path, encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected class,seed,length")
            entries.append(tuple(int(p) for p in parts))
    return entries


def generate_corpus(entries, geometry: ToyGeometry = DEFAULT_GEOMETRY) -> list[Clip]:
    return [generate_clip(c, s, n, geometry) for c, s, n in entries]
