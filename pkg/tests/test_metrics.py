"""Evaluation metrics: MAAC, beat detection, Beat Consistency, Frechet
distance machinery, the feature-extractor autoencoder, FGD, Diversity."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ha2g import metrics as M
from ha2g.audio import MelSpectrogram, mel_spectrogram


class TestMaac:
    def test_direct_evaluation(self):
        prof = M.maac([np.array([[0.0], [10.0], [30.0]])])
        assert prof.values[0] == pytest.approx(15.0)

    def test_constant_angles_excluded(self):
        prof = M.maac([np.full((5, 2), 90.0)])
        np.testing.assert_array_equal(prof.values, 0.0)
        assert not prof.included.any()

    def test_duplicated_clip_same_maac(self):
        rng = np.random.default_rng(0)
        clip = rng.uniform(0, 180, size=(6, 3))
        one = M.maac([clip])
        two = M.maac([clip, clip.copy()])
        np.testing.assert_allclose(one.values, two.values, atol=1e-12)

    def test_too_short(self):
        with pytest.raises(M.TooShort):
            M.maac([np.zeros((1, 3))])
        with pytest.raises(M.TooShort):
            M.maac([])


class TestAngleChangeRate:
    def test_self_normalisation(self):
        # each step changes every angle by exactly its MAAC -> rate = 1
        steps = np.array([0.0, 3.0, 6.0, 9.0])
        clip = np.stack([steps, 2 * steps], axis=1)
        prof = M.maac([clip])
        np.testing.assert_allclose(M.angle_change_rate(clip, prof), 1.0, atol=1e-12)

    def test_zero_motion(self):
        moving = np.linspace(0, 30, 5)[:, None]
        prof = M.maac([moving])
        rate = M.angle_change_rate(np.full((5, 1), 10.0), prof)
        np.testing.assert_array_equal(rate, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_loop(self, seed):
        rng = np.random.default_rng(seed)
        clips = [rng.uniform(0, 180, size=(7, 4)) for _ in range(3)]
        prof = M.maac(clips)
        clip = clips[0]
        ours = M.angle_change_rate(clip, prof)
        for t in range(6):
            total, count = 0.0, 0
            for j in range(4):
                if prof.values[j] > 0:
                    total += abs(clip[t + 1, j] - clip[t, j]) / prof.values[j]
                    count += 1
            assert ours[t] == pytest.approx(total / count, abs=1e-12)

    def test_excluded_angle_not_averaged(self):
        clip = np.stack([np.linspace(0, 30, 4), np.full(4, 42.0)], axis=1)
        prof = M.maac([clip])
        rate = M.angle_change_rate(clip, prof)
        np.testing.assert_allclose(rate, 1.0, atol=1e-12)  # divisor is 1, not 2


class TestDetectMotionBeats:
    def test_worked_example_dip(self):
        beats = M.detect_motion_beats([0.2, 0.1, 0.2], 0.05, fps=15.0)
        np.testing.assert_allclose(beats.times, [1.0 / 15.0])

    def test_worked_example_trivial_wiggle(self):
        rate = [0.11, 0.1, 0.11, 0.1, 0.11]
        assert len(M.detect_motion_beats(rate, 0.05, fps=15.0)) == 0

    def test_monotone_ramp_has_no_beats(self):
        assert len(M.detect_motion_beats(np.linspace(0, 1, 10), 0.05, 15.0)) == 0

    def test_local_maximum_also_counts(self):
        beats = M.detect_motion_beats([0.1, 0.3, 0.1], 0.05, fps=10.0)
        np.testing.assert_allclose(beats.times, [0.1])

    def test_positive_threshold_required(self):
        with pytest.raises(ValueError):
            M.detect_motion_beats([0.1, 0.2, 0.1], 0.0, 15.0)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 9999), t1=st.floats(0.01, 0.15),
           t2=st.floats(0.16, 0.5))
    def test_threshold_monotone(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        rate = np.abs(rng.standard_normal(30)).cumsum() % 1.7
        low = set(np.round(M.detect_motion_beats(rate, t1, 15.0).times, 9))
        high = set(np.round(M.detect_motion_beats(rate, t2, 15.0).times, 9))
        assert high <= low


class TestOnsetStrength:
    def test_constant_spectrogram_is_silent(self):
        mel = MelSpectrogram(np.full((16, 20), 3.0))
        np.testing.assert_array_equal(M.onset_strength(mel), 0.0)

    def test_single_loud_frame(self):
        values = np.full((16, 20), 1e-4)
        values[:, 7] = 1.0
        env = M.onset_strength(MelSpectrogram(values))
        assert env.argmax() == 7

    def test_click_train_spacing(self):
        sr, dur = 16000, 4.0
        t = np.arange(int(sr * dur)) / sr
        audio = np.zeros_like(t)
        for k in range(8):  # 2 Hz clicks
            s0 = int((0.25 + 0.5 * k) * sr)
            audio[s0:s0 + 400] += np.sin(2 * np.pi * 1500 * t[:400]) * np.exp(
                -np.arange(400) / 150)
        mel = mel_spectrogram(audio, bins=64)
        env = M.onset_strength(mel)
        beats = M.detect_audio_beats(env, mel.frames_per_second)
        assert len(beats) >= 6
        spacing = np.diff(beats.times)
        hop_s = 512 / 16000
        assert np.all(np.abs(spacing - 0.5) <= hop_s + 1e-9)


class TestDetectAudioBeats:
    def test_zero_envelope(self):
        assert len(M.detect_audio_beats(np.zeros(50), 31.25)) == 0

    def test_single_impulse(self):
        env = np.zeros(60)
        env[33] = 5.0
        beats = M.detect_audio_beats(env, 31.25)
        np.testing.assert_allclose(beats.times, [33 / 31.25])

    def test_rate_of_click_train(self):
        env = np.zeros(125)  # 4 s at 31.25 envelope frames/s
        env[::16] = 3.0      # ~1.95 Hz
        beats = M.detect_audio_beats(env, 31.25)
        rate = len(beats) / 4.0
        assert 1.4 < rate < 2.6


class TestBeatConsistency:
    def test_identical_beats(self):
        b = M.BeatSet(np.array([0.5, 1.0, 2.0]))
        assert M.beat_consistency(b, M.BeatSet(b.times.copy(), "audio")) == 1.0

    def test_closed_form_tenth_second(self):
        motion = M.BeatSet(np.array([1.1]))
        audio = M.BeatSet(np.array([1.0]), "audio")
        assert M.beat_consistency(motion, audio, sigma=0.1) == pytest.approx(
            math.exp(-0.5), abs=1e-5)

    def test_distant_beats_vanish(self):
        motion = M.BeatSet(np.array([10.0]))
        audio = M.BeatSet(np.array([0.5, 1.0]), "audio")
        assert M.beat_consistency(motion, audio, sigma=0.1) < 1e-20

    def test_empty_raises(self):
        with pytest.raises(M.EmptyBeats):
            M.beat_consistency(M.BeatSet(np.array([])), M.BeatSet(np.array([1.0])))
        with pytest.raises(M.EmptyBeats):
            M.beat_consistency(M.BeatSet(np.array([1.0])), M.BeatSet(np.array([])))

    def test_in_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            motion = M.BeatSet(np.sort(rng.uniform(0, 3, 4)))
            audio = M.BeatSet(np.sort(rng.uniform(0, 3, 5)), "audio")
            bc = M.beat_consistency(motion, audio)
            assert 0.0 < bc <= 1.0


class TestGaussianSummary:
    def test_two_point_fit(self):
        g = M.fit_gaussian(np.array([[1.0], [-1.0]]))
        assert g.mean[0] == pytest.approx(0.0)
        assert g.cov[0, 0] == pytest.approx(2.0)  # unbiased estimator

    def test_identical_rows_zero_cov(self):
        g = M.fit_gaussian(np.tile([2.0, -1.0], (5, 1)))
        np.testing.assert_allclose(g.cov, 0.0, atol=1e-15)

    def test_affine_map_property(self):
        rng = np.random.default_rng(2)
        rows = rng.standard_normal((40, 3))
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal(3)
        g1 = M.fit_gaussian(rows)
        g2 = M.fit_gaussian(rows @ a.T + b)
        np.testing.assert_allclose(g2.mean, a @ g1.mean + b, atol=1e-10)
        np.testing.assert_allclose(g2.cov, a @ g1.cov @ a.T, atol=1e-10)

    def test_insufficient_samples(self):
        with pytest.raises(M.InsufficientSamples):
            M.fit_gaussian(np.ones((1, 4)))


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(M.matrix_sqrt_psd(np.eye(4)), np.eye(4),
                                   atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(M.matrix_sqrt_psd(np.diag([4.0, 9.0])),
                                   np.diag([2.0, 3.0]), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        a = q @ np.diag(rng.uniform(0.1, 4.0, 6)) @ q.T
        r = M.matrix_sqrt_psd(a)
        err = np.linalg.norm(r @ r - a) / max(1.0, np.linalg.norm(a))
        assert err < 1e-8
        np.testing.assert_allclose(r, r.T, atol=1e-12)

    def test_not_symmetric(self):
        with pytest.raises(M.NotSymmetric):
            M.matrix_sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestFrechetDistance:
    def test_identical_gaussians(self):
        rng = np.random.default_rng(3)
        g = M.fit_gaussian(rng.standard_normal((30, 4)))
        assert M.frechet_distance(g, g) == pytest.approx(0.0, abs=1e-8)

    def test_unit_mean_shift(self):
        g1 = M.GaussianSummary(np.array([0.0]), np.array([[1.0]]), 10)
        g2 = M.GaussianSummary(np.array([1.0]), np.array([[1.0]]), 10)
        assert M.frechet_distance(g1, g2) == pytest.approx(1.0, abs=1e-8)

    def test_variance_gap(self):
        g1 = M.GaussianSummary(np.array([0.0]), np.array([[4.0]]), 10)
        g2 = M.GaussianSummary(np.array([0.0]), np.array([[1.0]]), 10)
        assert M.frechet_distance(g1, g2) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetry_and_nonnegativity(self, seed):
        rng = np.random.default_rng(seed)
        g1 = M.fit_gaussian(rng.standard_normal((25, 5)))
        g2 = M.fit_gaussian(rng.standard_normal((25, 5)) * 1.5 + 0.3)
        d12 = M.frechet_distance(g1, g2)
        d21 = M.frechet_distance(g2, g1)
        assert d12 >= 0.0
        assert d12 == pytest.approx(d21, abs=1e-8)

    def test_dim_mismatch(self):
        g1 = M.GaussianSummary(np.zeros(2), np.eye(2), 10)
        g2 = M.GaussianSummary(np.zeros(3), np.eye(3), 10)
        with pytest.raises(M.DimMismatch):
            M.frechet_distance(g1, g2)


@pytest.fixture(scope="module")
def tiny_autoencoder():
    rng = np.random.default_rng(4)
    clips = 0.4 * rng.standard_normal((24, 34, 126))
    auto = M.train_feature_extractor(clips, rng=np.random.default_rng(5),
                                     epochs=8, batch=12)
    return auto, clips


class TestPoseAutoencoder:
    def test_table_layer_sizes(self, tiny_autoencoder):
        auto, _ = tiny_autoencoder
        assert auto.t4 == 12
        assert auto.fc1.w.shape == (384, 256)
        assert auto.fc3.w.shape == (128, 128)
        assert auto.dfc2.w.shape == (64, 136)

    def test_round_trip_shapes(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        from ha2g.autodiff import Tensor
        latent = auto.encode_t(Tensor(clips[:3]))
        assert latent.shape == (3, 128)
        recon = auto.decode_t(latent)
        assert recon.shape == (3, 34, 126)

    def test_identical_clips_identical_latents(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        z1 = auto.encode(clips[:1])
        z2 = auto.encode(clips[:1].copy())
        assert z1.tobytes() == z2.tobytes()

    def test_overfit_single_repeated_clip(self):
        rng = np.random.default_rng(6)
        clip = 0.3 * rng.standard_normal((1, 34, 126))
        corpus = np.repeat(clip, 16, axis=0)
        auto = M.train_feature_extractor(corpus, rng=np.random.default_rng(7),
                                         epochs=200, batch=16, lr=3e-3)
        base = float(np.mean(corpus ** 2))
        err = M.reconstruction_error(auto, corpus)
        assert err < 0.05 * base


class TestFgd:
    def test_self_distance_zero(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        assert M.fgd(clips, clips, auto) == pytest.approx(0.0, abs=1e-6)

    def test_offset_increases_distance(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        values = [M.fgd(clips, clips + off, auto) for off in (0.0, 0.2, 0.5)]
        assert values[0] < values[1] < values[2]

    def test_shuffle_invariance(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        rng = np.random.default_rng(8)
        shuffled = clips[rng.permutation(len(clips))]
        a = M.fgd(clips, clips + 0.1, auto)
        b = M.fgd(shuffled, clips + 0.1, auto)
        # identical up to float summation order inside the moment fits
        assert a == pytest.approx(b, rel=1e-5)

    def test_empty_corpus_rejected(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        with pytest.raises(M.InsufficientSamples):
            M.fgd(clips[:0], clips, auto)


class _OffsetEncoder:
    """Wraps an encoder, translating every latent by a constant."""

    def __init__(self, inner, offset):
        self.inner = inner
        self.offset = offset

    def encode(self, clips):
        return self.inner.encode(clips) + self.offset


class TestDiversity:
    def test_identical_clips_zero(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        same = np.repeat(clips[:1], 10, axis=0)
        assert M.diversity(same, auto, pairs=50, seed=0) == pytest.approx(0.0,
                                                                          abs=1e-9)

    def test_seeded_reproducibility(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        a = M.diversity(clips, auto, pairs=100, seed=42)
        b = M.diversity(clips, auto, pairs=100, seed=42)
        assert a == b

    def test_translation_invariance_of_latents(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        shifted = _OffsetEncoder(auto, offset=7.5)
        a = M.diversity(clips, auto, pairs=120, seed=3)
        b = M.diversity(clips, shifted, pairs=120, seed=3)
        assert a == pytest.approx(b, abs=1e-9)

    def test_too_few_clips(self, tiny_autoencoder):
        auto, clips = tiny_autoencoder
        with pytest.raises(M.TooFewClips):
            M.diversity(clips[:1], auto)
