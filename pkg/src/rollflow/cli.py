"""Command-line interface: dataset, train, generate, analyze, check.

Every run-affecting knob lives in a key=value config file (or repeated
--set overrides); the effective configuration is echoed before any work
so a run can be reproduced from its captured output alone.  Exit codes:
0 success, 1 usage error, 2 data error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import flowmatch
from . import numerics as nx
from .analysis import (DEFAULT_DRIFT_WINDOW, DEFAULT_LOOP_THRESHOLD,
                       clip_loop_report, corpus_loop_rate, feature_drift,
                       format_loop_record)
from .checkpoint import CheckpointError, load_network
from .model import (BlockVariant, ModelConfig, adaln_modulate, build_network)
from .rolling import (Conditioning, FrameGeometry, SamplerConfig,
                      conditional_generate, generate_stream, oracle_velocity)
from .schedule import (loss_weight, preroll_timesteps, rolling_timesteps,
                       ScheduleConfig)
from .toydata import (Clip, ClipFormatError, ClipWriter, ToyGeometry,
                      generate_clip, read_clip, read_manifest, write_clip)
from .training import (TrainConfig, TrainingError, init_train_state,
                       load_train_state, run_training, save_train_state)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Flat key=value view of every tunable; unknown keys are rejected."""

    variant: str = "temporal-average-cond"
    depth: int = 12
    hidden: int = 128
    heads: int = 8
    patch: int = 2
    mlp_ratio: float = 2.0
    classes: int | None = 4
    channels: int = 4
    height: int = 8
    width: int = 8
    segments_per_frame: int = 4
    mel_bins: int = 16
    window: int = 10
    preroll_probability: float = 0.2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    total_steps: int = 2000
    seed: int = 0
    steps_per_frame: int = 20

    def model_config(self) -> ModelConfig:
        try:
            variant = BlockVariant(self.variant)
        except ValueError:
            names = ", ".join(v.value for v in BlockVariant)
            raise UsageError(f"variant must be one of: {names}")
        try:
            return ModelConfig(variant=variant, depth=self.depth,
                               hidden=self.hidden, heads=self.heads,
                               patch=self.patch, channels=self.channels,
                               height=self.height, width=self.width,
                               segments_per_frame=self.segments_per_frame,
                               mel_bins=self.mel_bins, classes=self.classes,
                               mlp_ratio=self.mlp_ratio)
        except ValueError as exc:
            raise UsageError(str(exc))

    def schedule_config(self) -> ScheduleConfig:
        try:
            return ScheduleConfig(self.window, self.preroll_probability)
        except ValueError as exc:
            raise UsageError(str(exc))

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(model=self.model_config(),
                               schedule=self.schedule_config(),
                               learning_rate=self.learning_rate,
                               beta1=self.beta1, beta2=self.beta2,
                               adam_eps=self.adam_eps,
                               batch_size=self.batch_size,
                               total_steps=self.total_steps, seed=self.seed)
        except ValueError as exc:
            raise UsageError(str(exc))

    def toy_geometry(self) -> ToyGeometry:
        return ToyGeometry(channels=self.channels, height=self.height,
                           width=self.width,
                           segments_per_frame=self.segments_per_frame,
                           mel_bins=self.mel_bins,
                           class_count=max(self.classes or 1, 1))


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS[name]
    raw = raw.strip()
    if name == "classes":
        if raw.lower() in ("none", ""):
            return None
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"classes expects an integer or 'none', "
                            f"got {raw!r}")
    if field.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"{name} expects an integer, got {raw!r}")
    if field.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"{name} expects a number, got {raw!r}")
    return raw


def _parse_pairs(pairs, source: str) -> dict:
    out = {}
    for lineno, line in pairs:
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, "
                             f"got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_run_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config: {exc}")
        pairs = [(i, line.split("#", 1)[0].strip())
                 for i, line in enumerate(text.splitlines(), start=1)]
        values.update(_parse_pairs([(i, s) for i, s in pairs if s], str(path)))
    values.update(_parse_pairs(
        [(i, s) for i, s in enumerate(overrides, start=1)], "--set"))
    return RunConfig(**values)


def echo_config(cfg: RunConfig, out) -> None:
    print("# effective config", file=out)
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        print(f"{name}={'none' if value is None else value}", file=out)


# ---------------------------------------------------------------------------
# commands

def _config_from_args(ns) -> RunConfig:
    return load_run_config(getattr(ns, "config", None),
                           getattr(ns, "set", None) or ())


def cmd_dataset(ns, out) -> int:
    cfg = _config_from_args(ns)
    echo_config(cfg, out)
    try:
        entries = read_manifest(ns.manifest)
    except (OSError, ValueError) as exc:
        raise DataError(f"bad manifest: {exc}")
    geometry = cfg.toy_geometry()
    outdir = Path(ns.outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        for class_id, seed, length in entries:
            clip = generate_clip(class_id, seed, length, geometry)
            write_clip(outdir / f"clip_c{class_id}_s{seed}_n{length}.rfav",
                       clip)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc))
    print(f"wrote {len(entries)} clips to {outdir}", file=out)
    return 0


def _load_clip_dir(path: Path) -> list[tuple[str, Clip]]:
    files = sorted(path.glob("*.rfav"))
    if not files:
        raise DataError(f"no .rfav clips in {path}")
    out = []
    for f in files:
        try:
            out.append((f.name, read_clip(f)))
        except (OSError, ClipFormatError) as exc:
            raise DataError(f"{f}: {exc}")
    return out


def cmd_train(ns, out) -> int:
    cfg = _config_from_args(ns)
    echo_config(cfg, out)
    clips = [clip for _, clip in _load_clip_dir(Path(ns.data))]
    if ns.resume is not None:
        try:
            state = load_train_state(ns.resume)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"cannot resume: {exc}")
    else:
        state = init_train_state(cfg.train_config())
    if ns.steps is not None:
        steps = ns.steps
    else:
        steps = max(state.config.total_steps - state.step, 0)
    try:
        run_training(state, clips, steps=steps, metrics_path=ns.metrics)
    except TrainingError as exc:
        raise DataError(str(exc))
    try:
        save_train_state(ns.out, state)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint: {exc}")
    print(f"step {state.step}: loss_v={state.last_loss_v:.6f} "
          f"loss_a={state.last_loss_a:.6f}", file=out)
    print(f"saved checkpoint to {ns.out}", file=out)
    return 0


def _load_network_any(path):
    try:
        return load_network(path)
    except CheckpointError:
        pass
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}")
    try:
        return load_train_state(path).net
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint: {exc}")


def cmd_generate(ns, out) -> int:
    cfg = _config_from_args(ns)
    echo_config(cfg, out)
    if ns.frames < 1:
        raise UsageError("--frames must be at least 1")
    net = _load_network_any(ns.checkpoint)
    model_cfg = net.cfg
    geometry = FrameGeometry(model_cfg.channels, model_cfg.height,
                             model_cfg.width, model_cfg.segments_per_frame,
                             model_cfg.mel_bins)
    conditioning = Conditioning.NONE
    truth_clip = None
    if ns.a2v is not None:
        conditioning = Conditioning.AUDIO_TO_VIDEO
    elif ns.v2a is not None:
        conditioning = Conditioning.VIDEO_TO_AUDIO
    steps = ns.steps if ns.steps is not None else cfg.steps_per_frame
    class_id = ns.class_id
    try:
        sampler = SamplerConfig(window=cfg.window, steps_per_frame=steps,
                                conditioning=conditioning, class_id=class_id)
    except ValueError as exc:
        raise UsageError(str(exc))

    toy_geom = ToyGeometry(channels=geometry.channels, height=geometry.height,
                           width=geometry.width,
                           segments_per_frame=geometry.segments_per_frame,
                           mel_bins=geometry.mel_bins,
                           class_count=max(model_cfg.classes or 1, 1))
    if conditioning is Conditioning.NONE:
        try:
            writer = ClipWriter(ns.out, ns.frames, class_id or 0, ns.seed,
                                geometry=toy_geom)
            state = generate_stream(net, sampler, ns.frames,
                                    lambda v, a: writer.append(v, a),
                                    geometry=geometry, seed=ns.seed)
            writer.close()
        except OSError as exc:
            raise DataError(f"cannot write clip: {exc}")
        print(f"emitted {ns.frames} frames ({state.evals} network "
              f"evaluations) to {ns.out}", file=out)
        return 0

    source = ns.a2v if ns.a2v is not None else ns.v2a
    try:
        truth_clip = read_clip(source)
    except (OSError, ClipFormatError) as exc:
        raise DataError(f"{source}: {exc}")
    if truth_clip.frames < ns.frames:
        raise DataError(f"conditioning clip has {truth_clip.frames} frames, "
                        f"need {ns.frames}")
    if class_id is None and model_cfg.classes is not None:
        class_id = truth_clip.class_id
        sampler = dataclasses.replace(sampler, class_id=class_id)
    if conditioning is Conditioning.AUDIO_TO_VIDEO:
        truth = truth_clip.audio[:ns.frames]
    else:
        truth = truth_clip.video[:ns.frames]
    free = conditional_generate(net, sampler, truth, ns.frames,
                                geometry=geometry, seed=ns.seed)
    if conditioning is Conditioning.AUDIO_TO_VIDEO:
        clip = Clip(video=free, audio=truth.copy(),
                    class_id=class_id or 0, seed=ns.seed)
    else:
        clip = Clip(video=truth.copy(), audio=free,
                    class_id=class_id or 0, seed=ns.seed)
    try:
        write_clip(ns.out, clip)
    except OSError as exc:
        raise DataError(f"cannot write clip: {exc}")
    print(f"emitted {ns.frames} {conditioning.value} frames to {ns.out}",
          file=out)
    return 0


def cmd_analyze(ns, out) -> int:
    cfg = _config_from_args(ns)
    echo_config(cfg, out)
    do_loop = ns.loop or not ns.drift
    do_drift = ns.drift
    threshold = (ns.threshold if ns.threshold is not None
                 else DEFAULT_LOOP_THRESHOLD)
    path = Path(ns.path)
    if path.is_dir():
        named = _load_clip_dir(path)
        if do_loop:
            try:
                rate, reports = corpus_loop_rate(
                    [clip.video for _, clip in named], threshold)
            except ValueError as exc:
                raise DataError(str(exc))
            for (name, _), report in zip(named, reports):
                print(format_loop_record(name, report), file=out)
            print(f"# corpus loop rate: {rate:.3f}", file=out)
        if do_drift:
            for name, clip in named:
                profile = _drift_or_error(clip.video, ns.drift_window)
                values = ",".join(f"{v:.4f}" for v in profile.drift)
                print(f"{name}\tdrift={values}", file=out)
        return 0
    try:
        clip = read_clip(path)
    except (OSError, ClipFormatError) as exc:
        raise DataError(f"{path}: {exc}")
    if do_loop:
        try:
            report = clip_loop_report(clip.video, threshold)
        except ValueError as exc:
            raise DataError(str(exc))
        print(format_loop_record(path.name, report), file=out)
    if do_drift:
        profile = _drift_or_error(clip.video, ns.drift_window)
        for i, value in enumerate(profile.drift):
            print(f"window {i}: drift={value:.6f}", file=out)
    return 0


def _drift_or_error(video, window):
    try:
        return feature_drift(video, window=window)
    except ValueError as exc:
        raise DataError(str(exc))


# ---------------------------------------------------------------------------
# verification suite

@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _check_schedule() -> CheckResult:
    t = rolling_timesteps(10, 0.5).t
    gaps = np.diff(t)
    if np.max(np.abs(gaps + 0.1)) > 1e-12:
        return CheckResult("schedule", False, "rolling gap differs from 1/T")
    for phase in (0.0, 0.3, 1.0):
        roll = rolling_timesteps(6, phase).t
        pre = preroll_timesteps(6, phase).t
        if np.any(roll < 0.0) or np.any(roll > 1.0) or np.any(pre > 1.0):
            return CheckResult("schedule", False, "timestep out of range")
    if not np.array_equal(rolling_timesteps(8, 0.0).t,
                          preroll_timesteps(8, 0.0).t):
        return CheckResult("schedule", False,
                           "preroll(0) does not match rolling(0)")
    grid = np.array([0.25, 0.5, 0.75])
    w = loss_weight(grid)
    if abs(w[0] - w[2]) > 1e-12 or w[1] < w[0]:
        return CheckResult("schedule", False, "weight asymmetry")
    if loss_weight(0.0) != 0.0 or loss_weight(1.0) != 0.0:
        return CheckResult("schedule", False, "nonzero endpoint weight")
    return CheckResult("schedule", True, "staircase, ranges, weights")


def _check_gradients() -> CheckResult:
    rng = np.random.default_rng(5)
    worst = 0.0

    def check(fn, shape):
        nonlocal worst
        x = nx.Tensor(rng.normal(size=shape), requires_grad=True)
        worst = max(worst, nx.grad_check(fn, x))

    # weighted-sum probes keep the scalar well conditioned for central
    # differences; a plain sum of a normalized output is nearly constant
    scale = np.linspace(-1.0, 2.0, 12).reshape(3, 4)
    check(lambda t: nx.sum_(nx.mul(nx.softmax(t, axis=-1), scale)), (3, 4))
    check(lambda t: nx.sum_(nx.mul(nx.layer_normalize(t), scale)), (3, 4))
    # the second factor must be hoisted: anything reading t.data inside
    # the probe would shift along with the finite-difference perturbation
    rhs = rng.normal(size=(4, 3))
    check(lambda t: nx.sum_(nx.square(nx.matmul(t, rhs))), (3, 4))
    check(lambda t: nx.sum_(nx.gelu(t)), (3, 4))
    q = rng.normal(size=(2, 4, 3))
    v = rng.normal(size=(2, 4, 3))
    check(lambda t: nx.sum_(nx.square(nx.attention(q, t, v))), (2, 4, 3))

    cond = rng.normal(size=(2, 6))
    w_mod = nx.Tensor(rng.normal(size=(6, 18)) * 0.1, requires_grad=False)
    b_mod = nx.Tensor(np.zeros(18), requires_grad=False)
    proj = rng.normal(size=(2, 3, 6))

    def mod_probe(t):
        h, gate = adaln_modulate(t, nx.as_tensor(cond), w_mod, b_mod, 1e-6)
        return nx.add(nx.sum_(nx.mul(h, proj)), nx.sum_(nx.square(gate)))

    try:
        check(mod_probe, (2, 3, 6))
    except nx.NumericsError as exc:
        return CheckResult("gradients", False, str(exc))
    if worst >= 1e-4:
        return CheckResult("gradients", False,
                           f"max relative error {worst:.2e}")
    return CheckResult("gradients", True, f"max relative error {worst:.2e}")


def _check_flow_target() -> CheckResult:
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 5))
    eps = rng.normal(size=(6, 5))
    phi = flowmatch.velocity_target(x, eps).phi
    landed = flowmatch.euler_step(eps, phi, 1.0)
    err = float(np.max(np.abs(landed - x)))
    if err > 1e-12:
        return CheckResult("flow-target", False,
                           f"one-step landing error {err:.2e}")
    mid = flowmatch.interpolate(x, eps, 0.5)
    err2 = float(np.max(np.abs(flowmatch.euler_step(mid, phi, 0.5) - x)))
    if err2 > 1e-12:
        return CheckResult("flow-target", False,
                           f"half-step landing error {err2:.2e}")
    return CheckResult("flow-target", True, "Euler lands on clean data")


def _check_oracle_sampler() -> CheckResult:
    geometry = FrameGeometry(1, 2, 2, 1, 3)
    frames = 6
    rng = np.random.default_rng(3)
    tv = rng.normal(size=geometry.video_shape(frames)).astype(np.float32)
    ta = rng.normal(size=geometry.audio_shape(frames)).astype(np.float32)
    field = oracle_velocity(tv, ta)
    got_v, got_a = [], []
    cfg = SamplerConfig(window=3, steps_per_frame=39)
    generate_stream(field, cfg, frames,
                    lambda v, a: (got_v.append(v), got_a.append(a)),
                    geometry=geometry, seed=0)
    err = max(float(np.max(np.abs(np.stack(got_v) - tv))),
              float(np.max(np.abs(np.stack(got_a) - ta))))
    if err > 1e-3:
        return CheckResult("oracle-sampler", False,
                           f"emission error {err:.2e}")
    return CheckResult("oracle-sampler", True,
                       f"6 frames within {err:.1e} of target")


def run_checks() -> list[CheckResult]:
    return [_check_schedule(), _check_gradients(), _check_flow_target(),
            _check_oracle_sampler()]


def cmd_check(ns, out) -> int:
    del ns
    results = run_checks()
    for res in results:
        status = "PASS" if res.ok else "FAIL"
        print(f"check {res.name}: {status} ({res.detail})", file=out)
    return 0 if all(res.ok for res in results) else 3


# ---------------------------------------------------------------------------
# argument plumbing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rollflow",
                     description="Rolling flow-matching toy AV system")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", default=None,
                       help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")

    p = sub.add_parser("dataset", help="generate clip corpus from manifest")
    add_config_flags(p)
    p.add_argument("manifest")
    p.add_argument("outdir")
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train on a clip directory")
    add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="sample a stream from a checkpoint")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--steps", type=int, default=None,
                   help="denoising steps per frame interval")
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--a2v", default=None, metavar="CLIP",
                       help="condition on this clip's audio")
    group.add_argument("--v2a", default=None, metavar="CLIP",
                       help="condition on this clip's video")
    p.add_argument("--class", dest="class_id", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("analyze", help="loop/drift reports for clips")
    add_config_flags(p)
    p.add_argument("path")
    p.add_argument("--loop", action="store_true")
    p.add_argument("--drift", action="store_true")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--drift-window", type=int, default=DEFAULT_DRIFT_WINDOW)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("check", help="run the verification suite")
    p.set_defaults(fn=cmd_check)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        return ns.fn(ns, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
