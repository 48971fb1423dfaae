"""Sampler state machine: preroll, sweeps, streaming, conditioning."""
import numpy as np
import pytest

from rollflow.rolling import (
    Conditioning,
    FrameGeometry,
    SamplerConfig,
    SamplerStateError,
    conditional_generate,
    generate_stream,
    init_state,
    oracle_velocity,
    pop_ready_frame,
    preroll,
    roll_sweep,
)
from rollflow.schedule import PhaseKind

TINY = FrameGeometry(channels=1, height=2, width=2, segments_per_frame=1,
                     mel_bins=3)


def make_targets(geometry, n, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    tv = (rng.normal(size=geometry.video_shape(n)) * scale).astype(np.float32)
    ta = (rng.normal(size=geometry.audio_shape(n)) * scale).astype(np.float32)
    return tv, ta


def zero_velocity(video, audio, ts, frame_base):
    return np.zeros_like(video), np.zeros_like(audio)


class TestInitState:
    def test_all_noise_schedule(self):
        cfg = SamplerConfig(window=10, steps_per_frame=20)
        state = init_state(cfg, TINY, np.random.default_rng(0))
        np.testing.assert_array_equal(state.ts.t, np.zeros(10))
        assert state.ts.phase_kind is PhaseKind.PREROLL
        assert state.frames_emitted == 0

    def test_deterministic_given_seed(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        a = init_state(cfg, TINY, np.random.default_rng(7))
        b = init_state(cfg, TINY, np.random.default_rng(7))
        np.testing.assert_array_equal(a.window_video, b.window_video)
        np.testing.assert_array_equal(a.window_audio, b.window_audio)

    def test_noise_statistics(self):
        geometry = FrameGeometry(channels=8, height=16, width=16,
                                 segments_per_frame=4, mel_bins=32)
        cfg = SamplerConfig(window=50, steps_per_frame=50)
        state = init_state(cfg, geometry, np.random.default_rng(1))
        pooled = np.concatenate([state.window_video.ravel(),
                                 state.window_audio.ravel()])
        assert pooled.size >= 100_000
        assert abs(pooled.mean()) < 0.05
        assert abs(pooled.var() - 1.0) < 0.05

    def test_config_divisibility_enforced(self):
        with pytest.raises(ValueError):
            SamplerConfig(window=10, steps_per_frame=25)


class TestPreroll:
    def test_final_schedule(self):
        cfg = SamplerConfig(window=10, steps_per_frame=20)
        state = init_state(cfg, TINY, np.random.default_rng(2))
        preroll(state, zero_velocity, cfg)
        np.testing.assert_allclose(state.ts.t, 1.0 - np.arange(10) / 10.0)
        assert state.evals == cfg.preroll_steps

    def test_oracle_recovers_first_frame(self):
        cfg = SamplerConfig(window=10, steps_per_frame=100)
        tv, ta = make_targets(TINY, 20, seed=3)
        state = init_state(cfg, TINY, np.random.default_rng(4))
        preroll(state, oracle_velocity(tv, ta), cfg)
        np.testing.assert_allclose(state.window_video[0], tv[0], atol=1e-3)
        np.testing.assert_allclose(state.window_audio[0], ta[0], atol=1e-3)

    def test_double_preroll_rejected(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        state = init_state(cfg, TINY, np.random.default_rng(5))
        preroll(state, zero_velocity, cfg)
        with pytest.raises(SamplerStateError):
            preroll(state, zero_velocity, cfg)

    def test_pop_before_preroll_rejected(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        state = init_state(cfg, TINY, np.random.default_rng(6))
        with pytest.raises(SamplerStateError):
            pop_ready_frame(state, cfg)


class TestSweep:
    def _armed_state(self, cfg, velocity, seed=0):
        state = init_state(cfg, TINY, np.random.default_rng(seed))
        preroll(state, velocity, cfg)
        pop_ready_frame(state, cfg)
        return state

    def test_post_sweep_schedule(self):
        cfg = SamplerConfig(window=10, steps_per_frame=20)
        state = self._armed_state(cfg, zero_velocity)
        roll_sweep(state, zero_velocity, cfg)
        np.testing.assert_allclose(state.ts.t, [0.9, 0.8, 0.7, 0.6, 0.5,
                                                0.4, 0.3, 0.2, 0.1, 0.0])
        assert state.ts.phase_kind is PhaseKind.ROLL

    def test_one_frame_per_sweep(self):
        cfg = SamplerConfig(window=5, steps_per_frame=10)
        state = self._armed_state(cfg, zero_velocity)
        start = state.frames_emitted
        for i in range(1, 6):
            roll_sweep(state, zero_velocity, cfg)
            assert state.frames_emitted == start + i

    def test_evals_per_sweep(self):
        cfg = SamplerConfig(window=5, steps_per_frame=20)
        state = self._armed_state(cfg, zero_velocity)
        before = state.evals
        roll_sweep(state, zero_velocity, cfg)
        assert state.evals - before == cfg.substeps_per_sweep == 4

    def test_sweep_requires_pop(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        state = init_state(cfg, TINY, np.random.default_rng(8))
        preroll(state, zero_velocity, cfg)
        with pytest.raises(SamplerStateError):
            roll_sweep(state, zero_velocity, cfg)


class TestGenerateStream:
    def test_emits_requested_count(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        frames = []
        generate_stream(zero_velocity, cfg, 7,
                        lambda v, a: frames.append((v, a)),
                        geometry=TINY, seed=9)
        assert len(frames) == 7

    def test_eval_budget(self):
        # first frame comes straight out of preroll; each further frame
        # costs one sweep of S/T evaluations
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        state = generate_stream(zero_velocity, cfg, 1, lambda v, a: None,
                                geometry=TINY, seed=10)
        assert state.evals == cfg.preroll_steps
        state = generate_stream(zero_velocity, cfg, 5, lambda v, a: None,
                                geometry=TINY, seed=10)
        assert state.evals == cfg.preroll_steps + 4 * cfg.substeps_per_sweep

    def test_oracle_completeness(self):
        cfg = SamplerConfig(window=10, steps_per_frame=100)
        n = 25
        tv, ta = make_targets(TINY, n + cfg.window, seed=11)
        out_v, out_a = [], []
        generate_stream(oracle_velocity(tv, ta), cfg, n,
                        lambda v, a: (out_v.append(v), out_a.append(a)),
                        geometry=TINY, seed=12)
        np.testing.assert_allclose(np.stack(out_v), tv[:n], atol=1e-3)
        np.testing.assert_allclose(np.stack(out_a), ta[:n], atol=1e-3)

    def test_bit_identical_reruns(self):
        cfg = SamplerConfig(window=5, steps_per_frame=10)
        tv, ta = make_targets(TINY, 30, seed=13)

        def run():
            vs = []
            generate_stream(oracle_velocity(tv, ta), cfg, 12,
                            lambda v, a: vs.append((v.copy(), a.copy())),
                            geometry=TINY, seed=14)
            return vs

        for (v1, a1), (v2, a2) in zip(run(), run()):
            np.testing.assert_array_equal(v1, v2)
            np.testing.assert_array_equal(a1, a2)

    def test_window_buffers_reused(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)
        state = init_state(cfg, TINY, np.random.default_rng(15))
        preroll(state, zero_velocity, cfg)
        buf_v, buf_a = state.window_video, state.window_audio
        pop_ready_frame(state, cfg)
        for _ in range(20):
            roll_sweep(state, zero_velocity, cfg)
        assert state.window_video is buf_v
        assert state.window_audio is buf_a

    def test_sink_failure_propagates(self):
        cfg = SamplerConfig(window=4, steps_per_frame=8)

        def sink(v, a):
            raise IOError("disk full")

        with pytest.raises(IOError):
            generate_stream(zero_velocity, cfg, 2, sink, geometry=TINY)


class TestConditional:
    def test_a2v_replays_audio_bitwise(self):
        cfg = SamplerConfig(window=5, steps_per_frame=10,
                            conditioning=Conditioning.AUDIO_TO_VIDEO)
        tv, ta = make_targets(TINY, 20, seed=16)
        pairs = []
        conditional_generate(oracle_velocity(tv, ta), cfg, ta, 8,
                             geometry=TINY, seed=17,
                             sink=lambda v, a: pairs.append((v, a)))
        emitted_audio = np.stack([a for _, a in pairs])
        np.testing.assert_array_equal(emitted_audio, ta[:8])

    def test_v2a_replays_video_bitwise(self):
        cfg = SamplerConfig(window=5, steps_per_frame=10,
                            conditioning=Conditioning.VIDEO_TO_AUDIO)
        tv, ta = make_targets(TINY, 20, seed=18)
        pairs = []
        conditional_generate(oracle_velocity(tv, ta), cfg, tv, 8,
                             geometry=TINY, seed=19,
                             sink=lambda v, a: pairs.append((v, a)))
        emitted_video = np.stack([v for v, _ in pairs])
        np.testing.assert_array_equal(emitted_video, tv[:8])

    def test_free_modality_tracks_oracle(self):
        cfg = SamplerConfig(window=10, steps_per_frame=100,
                            conditioning=Conditioning.AUDIO_TO_VIDEO)
        tv, ta = make_targets(TINY, 40, seed=20)
        video = conditional_generate(oracle_velocity(tv, ta), cfg, ta, 15,
                                     geometry=TINY, seed=21)
        np.testing.assert_allclose(video, tv[:15], atol=1e-3)

    def test_short_ground_truth_rejected(self):
        cfg = SamplerConfig(window=5, steps_per_frame=10,
                            conditioning=Conditioning.AUDIO_TO_VIDEO)
        _, ta = make_targets(TINY, 4, seed=22)
        with pytest.raises(ValueError):
            conditional_generate(zero_velocity, cfg, ta, 8, geometry=TINY)

    def test_conditioning_mode_required(self):
        cfg = SamplerConfig(window=5, steps_per_frame=10)
        _, ta = make_targets(TINY, 10, seed=23)
        with pytest.raises(ValueError):
            conditional_generate(zero_velocity, cfg, ta, 4, geometry=TINY)
