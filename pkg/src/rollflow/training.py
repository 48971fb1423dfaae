"""Window-based training loop with adaptive-moment updates.

Each step draws a staircase/ramp timestep vector, noises a batch of clip
windows along the straight-line forward process, regresses the network
output against the constant velocity of that line, and applies one
bias-corrected adaptive-moment update.  State checkpoints capture the
parameters, both moment accumulators, the step counter, and the RNG, so
a resumed run continues the exact trajectory.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import numerics as nx
from .checkpoint import (CheckpointError, model_config_from_dict,
                         model_config_to_dict, read_archive, write_archive)
from .flowmatch import modality_loss, velocity_target
from .model import ModelConfig, RFlavNetwork, build_network, network_forward
from .numerics import Tensor
from .schedule import (ScheduleConfig, TimestepVector, rolling_timesteps,
                       sample_training_schedule)

EVAL_PHASES = (0.1, 0.5, 0.9)
EVAL_NOISE_SEED = 59233
RECENT_CAP = 100


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    total_steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        # rate zero is a legal degenerate update (loss still computed)
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must not be negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.total_steps < 1:
            raise ValueError("total steps must be at least 1")
        for beta in (self.beta1, self.beta2):
            if not 0.0 <= beta < 1.0:
                raise ValueError("moment decay rates must lie in [0, 1)")


@dataclasses.dataclass(frozen=True)
class ClipWindow:
    """One training example: aligned video/audio frames plus class label."""

    video: np.ndarray
    audio: np.ndarray
    class_id: int | None = None


@dataclasses.dataclass
class TrainState:
    config: TrainConfig
    net: RFlavNetwork
    m1: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    last_loss_v: float = math.nan
    last_loss_a: float = math.nan
    recent: list[float] = dataclasses.field(default_factory=list)

    def mean_recent_loss(self) -> float:
        return float(np.mean(self.recent)) if self.recent else math.nan


def init_train_state(cfg: TrainConfig) -> TrainState:
    net = build_network(cfg.model, seed=cfg.seed)
    m1 = {name: np.zeros_like(p.data) for name, p in net.params.items()}
    m2 = {name: np.zeros_like(p.data) for name, p in net.params.items()}
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(cfg, net, m1, m2, 0, rng)


def sample_window(clips, window: int, rng: np.random.Generator) -> ClipWindow:
    """Uniform clip choice, uniform window start inside the clip."""
    if not clips:
        raise TrainingError("no clips to sample from")
    clip = clips[int(rng.integers(len(clips)))]
    frames = clip.video.shape[0]
    if frames < window:
        raise TrainingError(f"clip of {frames} frames is shorter than the "
                            f"{window}-frame window")
    start = int(rng.integers(frames - window + 1))
    return ClipWindow(clip.video[start:start + window],
                      clip.audio[start:start + window],
                      getattr(clip, "class_id", None))


def _staircase_noisy(clean: np.ndarray, noise: np.ndarray,
                     ts: TimestepVector) -> np.ndarray:
    t = ts.t.astype(clean.dtype).reshape((-1,) + (1,) * (clean.ndim - 1))
    return t * clean + (1.0 - t) * noise


def train_step(state: TrainState, batch,
               rng: np.random.Generator | None = None
               ) -> tuple[TrainState, float]:
    """One optimizer step over a batch of clip windows."""
    if not batch:
        raise TrainingError("empty batch")
    if rng is None:
        rng = state.rng
    cfg = state.config
    ts = sample_training_schedule(cfg.schedule, rng)
    use_classes = cfg.model.classes is not None

    state.net.zero_grads()
    sum_v: Tensor | None = None
    sum_a: Tensor | None = None
    for item in batch:
        eps_v = rng.standard_normal(item.video.shape, dtype=np.float32)
        eps_a = rng.standard_normal(item.audio.shape, dtype=np.float32)
        noisy_v = _staircase_noisy(item.video, eps_v, ts)
        noisy_a = _staircase_noisy(item.audio, eps_a, ts)
        phi_v = velocity_target(item.video, eps_v).phi
        phi_a = velocity_target(item.audio, eps_a).phi
        y = item.class_id if use_classes else None
        pred_v, pred_a = network_forward(state.net, noisy_v, noisy_a, ts, y)
        loss_v = modality_loss(pred_v, phi_v, ts)
        loss_a = modality_loss(pred_a, phi_a, ts)
        sum_v = loss_v if sum_v is None else nx.add(sum_v, loss_v)
        sum_a = loss_a if sum_a is None else nx.add(sum_a, loss_a)

    inv = 1.0 / len(batch)
    loss = nx.mul(nx.add(sum_v, sum_a), np.float32(inv))
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step}; "
                            "aborting before the update")
    loss.backward()
    _adam_update(state)
    state.step += 1
    state.last_loss_v = float(sum_v.data) * inv
    state.last_loss_a = float(sum_a.data) * inv
    state.recent.append(value)
    del state.recent[:-RECENT_CAP]
    return state, value


def _adam_update(state: TrainState) -> None:
    cfg = state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in state.net.params.items():
        grad = p.grad
        if grad is None:
            continue
        m = state.m1[name]
        v = state.m2[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (grad * grad)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2)
                                                   + cfg.adam_eps)


def run_training(state: TrainState, clips, *, steps: int | None = None,
                 metrics_path=None, callback=None) -> TrainState:
    """Drive train_step; metrics are "step,loss_v,loss_a" lines."""
    total = state.config.total_steps if steps is None else steps
    window = state.config.schedule.window
    lines = []
    for _ in range(total):
        batch = [sample_window(clips, window, state.rng)
                 for _ in range(state.config.batch_size)]
        _, loss = train_step(state, batch)
        lines.append(f"{state.step},{state.last_loss_v:.8e},"
                     f"{state.last_loss_a:.8e}")
        if callback is not None:
            callback(state, loss)
    if metrics_path is not None:
        with open(metrics_path, "a", encoding="ascii") as f:
            for line in lines:
                f.write(line + "\n")
    return state


def evaluate(net, clips, schedule_cfg: ScheduleConfig, *,
             phases=EVAL_PHASES, noise_seed: int = EVAL_NOISE_SEED
             ) -> tuple[float, float]:
    """Deterministic per-modality weighted velocity MSE on a fixed grid.

    ``net`` may be a network or a callable (noisy_v, noisy_a, ts, y) ->
    (pred_v, pred_a); the leading window of each clip is scored at every
    phase in ``phases`` with noise from a dedicated fixed-seed stream.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("eval set must not be empty")
    window = schedule_cfg.window
    forward = net if callable(net) else (
        lambda nv, na, ts, y: network_forward(net, nv, na, ts, y))
    use_classes = (not isinstance(net, RFlavNetwork)
                   or net.cfg.classes is not None)
    rng = np.random.default_rng(noise_seed)
    total_v = 0.0
    total_a = 0.0
    count = 0
    with nx.no_grad():
        for clip in clips:
            if clip.video.shape[0] < window:
                raise ValueError("clip shorter than the schedule window")
            video = clip.video[:window]
            audio = clip.audio[:window]
            for phase in phases:
                ts = rolling_timesteps(window, phase)
                eps_v = rng.standard_normal(video.shape, dtype=np.float32)
                eps_a = rng.standard_normal(audio.shape, dtype=np.float32)
                noisy_v = _staircase_noisy(video, eps_v, ts)
                noisy_a = _staircase_noisy(audio, eps_a, ts)
                y = getattr(clip, "class_id", None) if use_classes else None
                pred_v, pred_a = forward(noisy_v, noisy_a, ts, y)
                phi_v = velocity_target(video, eps_v).phi
                phi_a = velocity_target(audio, eps_a).phi
                total_v += float(modality_loss(pred_v, phi_v, ts).data)
                total_a += float(modality_loss(pred_a, phi_a, ts).data)
                count += 1
    return total_v / count, total_a / count


# ---------------------------------------------------------------------------
# checkpointing

def _schedule_to_dict(cfg: ScheduleConfig) -> dict:
    return {"window": cfg.window,
            "preroll_probability": cfg.preroll_probability}


def _train_config_to_dict(cfg: TrainConfig) -> dict:
    return {"model": model_config_to_dict(cfg.model),
            "schedule": _schedule_to_dict(cfg.schedule),
            "learning_rate": cfg.learning_rate,
            "beta1": cfg.beta1,
            "beta2": cfg.beta2,
            "adam_eps": cfg.adam_eps,
            "batch_size": cfg.batch_size,
            "total_steps": cfg.total_steps,
            "seed": cfg.seed}


def train_config_from_dict(data: dict) -> TrainConfig:
    try:
        return TrainConfig(
            model=model_config_from_dict(data["model"]),
            schedule=ScheduleConfig(**data["schedule"]),
            learning_rate=data["learning_rate"],
            beta1=data["beta1"],
            beta2=data["beta2"],
            adam_eps=data["adam_eps"],
            batch_size=data["batch_size"],
            total_steps=data["total_steps"],
            seed=data["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad training config record: {exc}") from exc


def save_train_state(path, state: TrainState) -> None:
    def _or_none(x: float):
        return x if math.isfinite(x) else None

    config = {"kind": "train-state",
              "train": _train_config_to_dict(state.config),
              "step": state.step,
              "rng": state.rng.bit_generator.state,
              "last_loss": [_or_none(state.last_loss_v),
                            _or_none(state.last_loss_a)],
              "recent": state.recent}
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.net.params.items():
        tensors[name] = p.data
        tensors["m1." + name] = state.m1[name]
        tensors["m2." + name] = state.m2[name]
    write_archive(path, config, tensors)


def load_train_state(path) -> TrainState:
    config, tensors = read_archive(path)
    if config.get("kind") != "train-state":
        raise CheckpointError(
            f"not a training archive: {config.get('kind')!r}")
    cfg = train_config_from_dict(config["train"])
    params: dict[str, np.ndarray] = {}
    m1: dict[str, np.ndarray] = {}
    m2: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("m1."):
            m1[name[3:]] = arr
        elif name.startswith("m2."):
            m2[name[3:]] = arr
        else:
            params[name] = arr
    if set(params) != set(m1) or set(params) != set(m2):
        raise CheckpointError("moment tensors do not match parameters")
    net = RFlavNetwork(cfg.model,
                       {name: Tensor(arr, requires_grad=True)
                        for name, arr in params.items()},
                       dtype=np.float32)
    state_dict = config["rng"]
    bit_gen = getattr(np.random, state_dict["bit_generator"])()
    bit_gen.state = state_dict
    rng = np.random.Generator(bit_gen)
    lv, la = config.get("last_loss", [None, None])
    return TrainState(cfg, net, m1, m2, int(config["step"]), rng,
                      last_loss_v=math.nan if lv is None else float(lv),
                      last_loss_a=math.nan if la is None else float(la),
                      recent=[float(x) for x in config.get("recent", [])])
