"""Sliding-window sampler: warm up once, then emit one frame per sweep.

The window holds T frames at staircase noise levels.  Pre-rolling runs the
whole window up from pure noise over N = S steps; after it, slot 0 is
clean.  Popping emits slot 0, shifts the window, and appends a fresh noise
slot, leaving the staircase one notch down.  A sweep integrates S/T Euler
substeps (every live frame advances by exactly 1/S in t) and pops again.
Streams of any length reuse the same window buffers, so peak memory never
depends on how many frames have been emitted.

Velocity fields are callables ``fn(video_window, audio_window, ts,
frame_base) -> (phi_v, phi_a)``; ``frame_base`` is the stream index of
slot 0.  ``as_velocity`` adapts a trained network, ``oracle_velocity``
builds the analytic field that reproduces a known target stream exactly.
"""
from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .flowmatch import interpolate
from .model import RFlavNetwork, network_forward
from .numerics import no_grad
from .schedule import PhaseKind, TimestepVector, preroll_timesteps, rolling_timesteps


class Conditioning(enum.Enum):
    NONE = "none"
    AUDIO_TO_VIDEO = "a2v"
    VIDEO_TO_AUDIO = "v2a"


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    window: int = 10
    steps_per_frame: int = 20
    conditioning: Conditioning = Conditioning.NONE
    class_id: int | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.steps_per_frame < 1:
            raise ValueError("steps_per_frame must be positive")
        if self.steps_per_frame % self.window != 0:
            raise ValueError("steps_per_frame must be divisible by window")

    @property
    def substeps_per_sweep(self) -> int:
        return self.steps_per_frame // self.window

    @property
    def preroll_steps(self) -> int:
        return self.steps_per_frame


@dataclasses.dataclass(frozen=True)
class FrameGeometry:
    channels: int = 4
    height: int = 8
    width: int = 8
    segments_per_frame: int = 4
    mel_bins: int = 16

    def video_shape(self, frames: int) -> tuple[int, ...]:
        return (frames, self.channels, self.height, self.width)

    def audio_shape(self, frames: int) -> tuple[int, ...]:
        return (frames, self.segments_per_frame, self.mel_bins)


@dataclasses.dataclass
class RollingState:
    window_video: np.ndarray
    window_audio: np.ndarray
    ts: TimestepVector
    frames_emitted: int
    rng: np.random.Generator
    stage: str  # "init" -> "prerolled" -> "rolling"
    evals: int = 0
    cond_truth: np.ndarray | None = None
    cond_noise: np.ndarray | None = None


class SamplerStateError(RuntimeError):
    """Sampler op called out of its legal state-machine order."""


def geometry_of(net: RFlavNetwork) -> FrameGeometry:
    c = net.cfg
    return FrameGeometry(c.channels, c.height, c.width,
                         c.segments_per_frame, c.mel_bins)


def as_velocity(net, class_id: int | None = None):
    """Adapt a network (or pass through any velocity callable)."""
    if isinstance(net, RFlavNetwork):
        def fn(video, audio, ts, frame_base):
            del frame_base
            with no_grad():
                phi_v, phi_a = network_forward(net, video, audio, ts, y=class_id)
            return phi_v.data, phi_a.data

        return fn
    if callable(net):
        return net
    raise TypeError(f"expected a network or velocity callable, got {type(net)}")


def oracle_velocity(targets_video: np.ndarray, targets_audio: np.ndarray):
    """Analytic field whose Euler integration lands on the given targets.

    On the straight noising path the true velocity toward target x from the
    point x_t at level t is (x - x_t)/(1 - t), a constant along the path,
    so every Euler step stays exact.  Slots past the end of the target
    stream, and slots already at t=1, get zero velocity.
    """
    targets_video = np.asarray(targets_video)
    targets_audio = np.asarray(targets_audio)

    def fn(video, audio, ts, frame_base):
        phi_v = np.zeros_like(video)
        phi_a = np.zeros_like(audio)
        for k, t in enumerate(ts.t):
            idx = frame_base + k
            if idx >= len(targets_video) or t >= 1.0:
                continue
            inv = 1.0 / (1.0 - t)
            phi_v[k] = (targets_video[idx] - video[k]) * inv
            phi_a[k] = (targets_audio[idx] - audio[k]) * inv
        return phi_v, phi_a

    return fn


# ---------------------------------------------------------------------------
# state machine

def init_state(cfg: SamplerConfig, geometry: FrameGeometry,
               rng: np.random.Generator,
               conditioning_truth: np.ndarray | None = None) -> RollingState:
    """Fill the window with standard noise at the all-noise schedule."""
    video = rng.standard_normal(geometry.video_shape(cfg.window)).astype(np.float32)
    audio = rng.standard_normal(geometry.audio_shape(cfg.window)).astype(np.float32)
    state = RollingState(video, audio, preroll_timesteps(cfg.window, 1.0),
                         frames_emitted=0, rng=rng, stage="init")
    if cfg.conditioning is not Conditioning.NONE:
        if conditioning_truth is None:
            raise ValueError("conditioning requires ground-truth frames")
        state.cond_truth = np.asarray(conditioning_truth, dtype=np.float32)
        source = (video if cfg.conditioning is Conditioning.VIDEO_TO_AUDIO
                  else audio)
        state.cond_noise = source.copy()
    elif conditioning_truth is not None:
        raise ValueError("ground truth given but conditioning is disabled")
    return state


def _impose_conditioning(state: RollingState, cfg: SamplerConfig) -> None:
    # overwrite the conditioning modality with its forward-process point at
    # each slot's current t; the slot's own entry noise is the fixed endpoint
    if cfg.conditioning is Conditioning.NONE:
        return
    window = (state.window_video
              if cfg.conditioning is Conditioning.VIDEO_TO_AUDIO
              else state.window_audio)
    truth = state.cond_truth
    for k, t in enumerate(state.ts.t):
        idx = state.frames_emitted + k
        if idx >= len(truth):
            continue  # past the given stream: slot runs free as context
        if t >= 1.0:
            window[k] = truth[idx]
        else:
            window[k] = interpolate(truth[idx], state.cond_noise[k], float(t))


def _evaluate(state: RollingState, velocity_fn, cfg: SamplerConfig):
    _impose_conditioning(state, cfg)
    phi_v, phi_a = velocity_fn(state.window_video, state.window_audio,
                               state.ts, state.frames_emitted)
    state.evals += 1
    return phi_v, phi_a


def _integrate(state: RollingState, cfg: SamplerConfig, phi_v, phi_a,
               dt_per_frame: np.ndarray) -> None:
    dt_v = dt_per_frame.reshape(-1, 1, 1, 1).astype(state.window_video.dtype)
    dt_a = dt_per_frame.reshape(-1, 1, 1).astype(state.window_audio.dtype)
    if cfg.conditioning is not Conditioning.VIDEO_TO_AUDIO:
        state.window_video += dt_v * phi_v
    if cfg.conditioning is not Conditioning.AUDIO_TO_VIDEO:
        state.window_audio += dt_a * phi_a


def preroll(state: RollingState, velocity_fn, cfg: SamplerConfig) -> RollingState:
    """Run the whole window up from pure noise; slot 0 ends clean."""
    if state.stage != "init":
        raise SamplerStateError("preroll requires a freshly initialized state")
    n_steps = cfg.preroll_steps
    for n in range(1, n_steps + 1):
        prev = preroll_timesteps(cfg.window, 1.0 - (n - 1) / n_steps)
        state.ts = prev
        phi_v, phi_a = _evaluate(state, velocity_fn, cfg)
        nxt = preroll_timesteps(cfg.window, 1.0 - n / n_steps)
        _integrate(state, cfg, phi_v, phi_a, nxt.t - prev.t)
        state.ts = nxt
    state.stage = "prerolled"
    return state


def pop_ready_frame(state: RollingState, cfg: SamplerConfig):
    """Emit clean slot 0, shift the window, append a fresh noise slot."""
    if state.stage not in ("prerolled", "rolling"):
        raise SamplerStateError("pop requires a prerolled or rolling state")
    if state.ts.t[0] != 1.0:
        raise SamplerStateError(f"slot 0 is at t={state.ts.t[0]}, not clean")
    _impose_conditioning(state, cfg)
    video = state.window_video[0].copy()
    audio = state.window_audio[0].copy()
    state.window_video[:-1] = state.window_video[1:]
    state.window_audio[:-1] = state.window_audio[1:]
    state.window_video[-1] = state.rng.standard_normal(
        state.window_video.shape[1:]).astype(state.window_video.dtype)
    state.window_audio[-1] = state.rng.standard_normal(
        state.window_audio.shape[1:]).astype(state.window_audio.dtype)
    if state.cond_noise is not None:
        state.cond_noise[:-1] = state.cond_noise[1:]
        state.cond_noise[-1] = (
            state.window_video[-1]
            if cfg.conditioning is Conditioning.VIDEO_TO_AUDIO
            else state.window_audio[-1])
    state.ts = rolling_timesteps(cfg.window, 1.0)
    state.frames_emitted += 1
    state.stage = "rolling"
    return video, audio, state


def roll_sweep(state: RollingState, velocity_fn, cfg: SamplerConfig):
    """Advance every frame by 1/S per substep until slot 0 is clean; emit it."""
    if state.stage != "rolling":
        raise SamplerStateError("roll_sweep requires a popped rolling state")
    substeps = cfg.substeps_per_sweep
    for s in range(1, substeps + 1):
        prev = rolling_timesteps(cfg.window, 1.0 - (s - 1) / substeps)
        state.ts = prev
        phi_v, phi_a = _evaluate(state, velocity_fn, cfg)
        nxt = rolling_timesteps(cfg.window, 1.0 - s / substeps)
        _integrate(state, cfg, phi_v, phi_a, nxt.t - prev.t)
        state.ts = nxt
    return pop_ready_frame(state, cfg)


def generate_stream(net, cfg: SamplerConfig, n_frames: int, sink,
                    *, geometry: FrameGeometry | None = None,
                    rng: np.random.Generator | None = None,
                    seed: int = 0,
                    conditioning_truth: np.ndarray | None = None) -> RollingState:
    """Emit n_frames AV pairs to ``sink(video_frame, audio_segment)``.

    The first emission is the preroll-terminal frame; each further frame
    costs one sweep.  Returns the final state (eval counter included).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    velocity_fn = as_velocity(net, cfg.class_id)
    if geometry is None:
        if not isinstance(net, RFlavNetwork):
            raise ValueError("geometry is required for a bare velocity field")
        geometry = geometry_of(net)
    if rng is None:
        rng = np.random.default_rng(seed)
    state = init_state(cfg, geometry, rng, conditioning_truth)
    preroll(state, velocity_fn, cfg)
    video, audio, state = pop_ready_frame(state, cfg)
    sink(video, audio)
    for _ in range(n_frames - 1):
        video, audio, state = roll_sweep(state, velocity_fn, cfg)
        sink(video, audio)
    return state


def conditional_generate(net, cfg: SamplerConfig, ground_truth: np.ndarray,
                         n_frames: int, *,
                         geometry: FrameGeometry | None = None,
                         rng: np.random.Generator | None = None,
                         seed: int = 0, sink=None) -> np.ndarray:
    """Generate the free modality against a fixed conditioning stream.

    ``ground_truth`` holds the conditioning modality's frames (audio for
    a2v, video for v2a) and must cover at least ``n_frames``.  Returns the
    generated modality stacked over frames; ``sink``, when given, receives
    every emitted (video, audio) pair.
    """
    if cfg.conditioning is Conditioning.NONE:
        raise ValueError("conditional_generate needs a2v or v2a conditioning")
    ground_truth = np.asarray(ground_truth)
    if len(ground_truth) < n_frames:
        raise ValueError(f"ground truth covers {len(ground_truth)} frames, "
                         f"need {n_frames}")
    free: list[np.ndarray] = []

    def collect(video, audio):
        free.append(video if cfg.conditioning is Conditioning.AUDIO_TO_VIDEO
                    else audio)
        if sink is not None:
            sink(video, audio)

    generate_stream(net, cfg, n_frames, collect, geometry=geometry,
                    rng=rng, seed=seed, conditioning_truth=ground_truth)
    return np.stack(free)
