import numpy as np
import pytest

from clipgen import planted_loop_video, random_walk_video
from rollflow import toydata
from rollflow.analysis import (DEFAULT_LOOP_THRESHOLD, DriftProfile,
                               clip_loop_report, corpus_loop_rate,
                               detect_loop, feature_drift, format_loop_record,
                               lag_profile, LagProfile,
                               pairwise_distance_reference,
                               similarity_matrix, window_features,
                               write_loop_reports)


def small_video(seed=0, frames=12):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(frames, 2, 4, 4))


class TestSimilarityMatrix:
    def test_matches_double_loop_reference(self):
        video = small_video()
        got = similarity_matrix(video).values
        want = 1.0 / (1.0 + pairwise_distance_reference(video))
        assert np.max(np.abs(got - want)) < 1e-10

    def test_identical_frames_give_all_ones(self):
        video = np.broadcast_to(small_video(frames=1), (9, 2, 4, 4)).copy()
        m = similarity_matrix(video).values
        assert np.allclose(m, 1.0, atol=1e-12)

    def test_constant_video_gives_all_ones(self):
        video = np.full((10, 2, 4, 4), 0.37)
        m = similarity_matrix(video).values
        assert np.allclose(m, 1.0)

    def test_symmetric_unit_diagonal_bounded(self):
        m = similarity_matrix(small_video(3)).values
        assert np.allclose(m, m.T, atol=1e-12)
        assert np.array_equal(np.diag(m), np.ones(len(m)))
        assert np.all(m > 0.0) and np.all(m <= 1.0)

    def test_rejects_single_frame(self):
        with pytest.raises(ValueError):
            similarity_matrix(small_video(frames=1))


class TestLagProfile:
    def test_matches_hand_loop(self):
        m = similarity_matrix(small_video(7, frames=6))
        r = lag_profile(m).r
        n = m.n
        for k in range(1, n):
            want = np.mean([m.values[i, i + k] for i in range(n - k)])
            assert abs(r[k - 1] - want) < 1e-12

    def test_planted_period_8_has_maxima_at_multiples(self):
        video = planted_loop_video(8, seed=0, frames=64)
        r = lag_profile(similarity_matrix(video)).r
        for lag in (8, 16, 24):
            i = lag - 1
            assert r[i] > r[i - 1] and r[i] > r[i + 1]

    def test_exact_period_dominates_non_multiples(self):
        video = planted_loop_video(9, seed=1, frames=90)
        r = lag_profile(similarity_matrix(video)).r
        rp = r[9 - 1]
        for k in range(1, len(r) + 1):
            if k % 9 != 0:
                assert rp >= r[k - 1]


class TestDetectLoop:
    def test_planted_23_of_240(self):
        video = planted_loop_video(23, seed=0, frames=240)
        report = clip_loop_report(video)
        assert report.is_loop
        assert report.period_frames is not None
        assert 22 <= report.period_frames <= 24

    def test_constant_video_is_not_a_loop(self):
        video = np.full((40, 2, 4, 4), 0.5)
        report = clip_loop_report(video)
        assert not report.is_loop
        assert report.dominance == 0.0
        assert report.period_frames is None

    def test_short_profile_rejected(self):
        with pytest.raises(ValueError):
            detect_loop(LagProfile(np.zeros(5)))

    def test_flag_matches_threshold_comparison(self):
        video = planted_loop_video(11, seed=2, frames=240)
        profile = lag_profile(similarity_matrix(video))
        report = detect_loop(profile, threshold=1e9)
        assert not report.is_loop and report.period_frames is None
        report = detect_loop(profile, threshold=1.0)
        assert report.is_loop and report.dominance > 1.0

    def test_affine_intensity_invariance(self):
        video = planted_loop_video(14, seed=3, frames=240)
        base = clip_loop_report(video)
        shifted = clip_loop_report(2.3 * video + 0.4)
        assert shifted.is_loop == base.is_loop
        assert shifted.period_frames == base.period_frames
        assert abs(shifted.dominance - base.dominance) < 1e-6 * base.dominance

    @pytest.mark.parametrize("period", [5, 9, 17, 23, 32, 37, 40])
    def test_period_within_one_frame(self, period):
        video = planted_loop_video(period, seed=5, frames=240)
        report = clip_loop_report(video)
        assert report.is_loop
        assert abs(report.period_frames - period) <= 1

    def test_random_walks_mostly_pass(self):
        videos = [random_walk_video(seed) for seed in range(10)]
        rate, reports = corpus_loop_rate(videos)
        assert rate <= 0.1
        for report in reports:
            if not report.is_loop:
                assert report.period_frames is None


class TestCorpusRate:
    def test_planted_corpus_flagged(self):
        videos = [planted_loop_video(p, seed=0)
                  for p in (6, 9, 12, 15, 18, 21, 25, 29, 33, 38)]
        rate, reports = corpus_loop_rate(videos)
        assert rate >= 0.9
        assert len(reports) == 10

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            corpus_loop_rate([])

    def test_report_file_format(self, tmp_path):
        videos = [planted_loop_video(10, seed=0),
                  random_walk_video(0)]
        rate, reports = corpus_loop_rate(videos)
        path = tmp_path / "loops.txt"
        write_loop_reports(path, ["a.rfav", "b.rfav"], reports, rate)
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("a.rfav\tloop=")
        assert lines[-1].startswith("# corpus loop rate:")
        record = format_loop_record("x", reports[0])
        assert "dominance=" in record and "period=" in record


class TestWindowFeatures:
    def test_static_window_has_zero_motion(self):
        frame = np.random.default_rng(0).normal(size=(1, 3, 8, 8))
        window = np.broadcast_to(frame, (5, 3, 8, 8)).copy()
        c = 3
        feats = window_features(window)
        motion = feats[2 * c]
        assert motion == 0.0

    def test_feature_layout_and_values(self):
        rng = np.random.default_rng(4)
        window = rng.normal(size=(6, 2, 8, 8))
        feats = window_features(window)
        assert feats.shape == (2 + 2 + 1 + 2 * 16,)
        assert np.allclose(feats[:2], window.mean(axis=(0, 2, 3)))
        assert np.allclose(feats[2:4], window.std(axis=(0, 2, 3)))
        assert np.isclose(feats[4], np.abs(np.diff(window, axis=0)).mean())
        pooled = window.mean(axis=0).reshape(2, 4, 2, 4, 2).mean(axis=(2, 4))
        assert np.allclose(feats[5:], pooled.ravel())

    def test_rejects_non_divisible_extent(self):
        with pytest.raises(ValueError):
            window_features(np.zeros((3, 1, 6, 8)))


class TestFeatureDrift:
    def test_first_entry_zero(self):
        video = small_video(0, frames=40)
        profile = feature_drift(video, window=16)
        assert profile.drift[0] == 0.0

    def test_repeated_window_gives_zero_drift(self):
        window = np.random.default_rng(1).normal(size=(16, 2, 4, 4))
        video = np.concatenate([window] * 4, axis=0)
        profile = feature_drift(video, window=16)
        assert np.allclose(profile.drift, 0.0, atol=1e-12)

    def test_window_count_and_stride(self):
        video = small_video(2, frames=50)
        profile = feature_drift(video, window=16)
        assert profile.stride == 16
        assert len(profile.drift) == (50 - 16) // 16 + 1

    def test_appending_frames_preserves_prefix(self):
        video = small_video(3, frames=64)
        longer = np.concatenate([video, small_video(9, frames=32)], axis=0)
        a = feature_drift(video, window=16).drift
        b = feature_drift(longer, window=16).drift
        assert np.array_equal(a, b[:len(a)])

    def test_shifted_content_drifts(self):
        base = np.random.default_rng(5).normal(size=(16, 2, 4, 4))
        video = np.concatenate([base, base + 3.0], axis=0)
        profile = feature_drift(video, window=16)
        assert profile.drift[1] > 1.0

    def test_too_short_video_rejected(self):
        with pytest.raises(ValueError):
            feature_drift(small_video(0, frames=8), window=16)
        with pytest.raises(ValueError):
            feature_drift(small_video(0, frames=8), window=0)

    def test_returns_profile_type(self):
        profile = feature_drift(small_video(1, frames=32), window=16, stride=8)
        assert isinstance(profile, DriftProfile)
        assert len(profile.drift) == (32 - 16) // 8 + 1


def test_default_threshold_separates_held_out_corpora():
    planted = [clip_loop_report(planted_loop_video(p, seed=9)).dominance
               for p in (7, 13, 19, 26, 31, 36)]
    walks = [clip_loop_report(random_walk_video(s + 50)).dominance
             for s in range(6)]
    assert min(planted) > DEFAULT_LOOP_THRESHOLD
    assert max(walks) < DEFAULT_LOOP_THRESHOLD
