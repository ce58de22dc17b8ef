"""Network contracts: feature shapes, blending, cascade dims, the
discriminator walk, and the training step."""

import numpy as np
import pytest

from ha2g import autodiff as ad
from ha2g import data as D
from ha2g import model as MO
from ha2g import train as T
from ha2g.autodiff import Tensor
from ha2g.config import RunConfig


@pytest.fixture(scope="module")
def canonical_cfg():
    return RunConfig(frames=34, hidden=16, mel_bins=128, dtype="f64",
                     audio_ch1=8, audio_ch2=12, audio_ch3=16, batch=2)


@pytest.fixture(scope="module")
def hierarchy():
    skel, full = D.corpus_skeleton(43)
    return T.hierarchy_for_depth(skel, full, 6)


@pytest.fixture(scope="module")
def generator(canonical_cfg, hierarchy):
    rng = np.random.default_rng(0)
    return MO.Generator(canonical_cfg, hierarchy, 3, rng, dtype=np.float64)


class TestAudioEncoder:
    def test_canonical_shape_walk(self, generator):
        rng = np.random.default_rng(1)
        mel = Tensor(np.abs(rng.standard_normal((2, 128, 70))))
        feats = generator.audio(mel, 34)
        for f in (feats.low, feats.mid, feats.high):
            assert f.shape == (2, 34, 32)

    def test_amplitude_changes_features_not_shapes(self, generator):
        rng = np.random.default_rng(2)
        mel = np.abs(rng.standard_normal((1, 128, 70)))
        a = generator.audio(Tensor(mel), 34)
        b = generator.audio(Tensor(mel * 2.0), 34)
        assert a.low.shape == b.low.shape
        assert np.abs(a.low.data - b.low.data).max() > 1e-9

    def test_desk_scale_shapes(self):
        cfg = RunConfig(frames=16, mel_bins=32, audio_ch1=6, audio_ch2=8,
                        audio_ch3=10, dtype="f64")
        rng = np.random.default_rng(3)
        enc = MO.AudioEncoder(cfg, rng, dtype=np.float64)
        mel = Tensor(np.abs(rng.standard_normal((1, 32, 33))))
        feats = enc(mel, 16)
        assert feats.high.shape == (1, 16, 32)

    def test_bad_mel_shape(self, generator):
        with pytest.raises(MO.BadMelShape):
            generator.audio(Tensor(np.zeros((1, 64, 70))), 34)
        with pytest.raises(MO.BadMelShape):
            generator.audio(Tensor(np.zeros((1, 128, 10))), 34)


class TestTextEncoder:
    def test_all_padding_is_finite_and_deterministic(self, generator):
        tokens = np.zeros((2, 34), dtype=np.int64)
        a = generator.text(tokens)
        b = generator.text(tokens)
        assert np.isfinite(a.data).all()
        assert a.data.tobytes() == b.data.tobytes()

    @pytest.mark.parametrize("n", [1, 5, 34, 50])
    def test_output_shape(self, generator, n):
        tokens = np.ones((1, n), dtype=np.int64)
        assert generator.text(tokens).shape == (1, n, 32)

    def test_shift_equivariance_in_interior(self, generator):
        rng = np.random.default_rng(4)
        n, k = 40, 3
        tokens = rng.integers(2, 8, size=(1, n))
        shifted = np.roll(tokens, k, axis=1)
        a = generator.text(tokens).data
        b = generator.text(shifted).data
        margin = 12  # half the receptive field plus the shift
        np.testing.assert_allclose(b[0, margin + k:n - margin],
                                   a[0, margin:n - margin - k], atol=1e-10)

    def test_unknown_token_warns_not_fails(self, generator):
        tokens = np.full((1, 5), 999, dtype=np.int64)
        with pytest.warns(UserWarning):
            out = generator.text(tokens)
        assert np.isfinite(out.data).all()


class TestStylePathway:
    def test_columns_are_probability_vectors(self, generator):
        rng = np.random.default_rng(5)
        for _ in range(5):
            _, coord = generator.style(rng.standard_normal(18))
            c = coord.c.data
            np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(c >= 0)

    def test_zero_identity_zero_weights_uniform(self):
        cfg = RunConfig(dtype="f64")
        style = MO.StylePathway(2, cfg, np.random.default_rng(0), dtype=np.float64)
        style.to_coord.w.data[...] = 0.0
        style.to_coord.b.data[...] = 0.0
        _, coord = style(np.zeros(18))
        np.testing.assert_allclose(coord.c.data, 1.0 / 3.0, atol=1e-12)

    def test_unknown_speaker(self, generator):
        with pytest.raises(MO.UnknownSpeaker):
            generator.style.sample(np.array([7]), np.random.default_rng(0))

    def test_reparameterised_sample_shape(self, generator):
        emb = generator.style.sample(np.array([0, 1, 2]), np.random.default_rng(1))
        assert emb.f_id.shape == (3, 18)
        assert emb.mu.shape == (3, 18)
        assert emb.logvar.shape == (3, 18)

    def test_argmax_invariant_to_column_logit_shift(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((1, 3, 6))
        base = ad.softmax(Tensor(logits), axis=1).data
        shifted = logits.copy()
        shifted[0, :, 2] += 5.0  # constant added to one column's logits
        out = ad.softmax(Tensor(shifted), axis=1).data
        np.testing.assert_allclose(out[0, :, 2], base[0, :, 2], atol=1e-12)

    def test_coordinator_validation(self):
        with pytest.raises(ValueError):
            MO.StyleCoordinator(Tensor(np.ones((1, 3, 6))))


class TestBlendFeatures:
    def _feats(self, rng, b=2, n=5, d=32):
        return MO.MultiLevelAudioFeatures(
            low=Tensor(rng.standard_normal((b, n, d))),
            mid=Tensor(rng.standard_normal((b, n, d))),
            high=Tensor(rng.standard_normal((b, n, d))))

    def _coord(self, c):
        return MO.StyleCoordinator(Tensor(np.asarray(c, dtype=np.float64)))

    def test_one_hot_column_selects_level(self):
        rng = np.random.default_rng(7)
        feats = self._feats(rng, b=1)
        c = np.zeros((1, 3, 6))
        c[0, 0, :] = 1.0
        out = MO.blend_features(self._coord(c), feats, 3)
        np.testing.assert_array_equal(out.data, feats.low.data)

    def test_uniform_blend(self):
        rng = np.random.default_rng(8)
        feats = self._feats(rng, b=1)
        c = np.full((1, 3, 6), 1.0 / 3.0)
        out = MO.blend_features(self._coord(c), feats, 1)
        expected = (feats.low.data + feats.mid.data + feats.high.data) / 3.0
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_loop(self, seed):
        rng = np.random.default_rng(seed)
        b, n, d, h = 3, 4, 6, 6
        feats = self._feats(rng, b=b, n=n, d=d)
        logits = rng.standard_normal((b, 3, h))
        c = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        level = int(rng.integers(1, h + 1))
        out = MO.blend_features(self._coord(c), feats, level).data
        stack = (feats.low.data, feats.mid.data, feats.high.data)
        for bi in range(b):
            for ni in range(n):
                for di in range(d):
                    expected = sum(c[bi, l, level - 1] * stack[l][bi, ni, di]
                                   for l in range(3))
                    assert abs(out[bi, ni, di] - expected) < 1e-12

    def test_linearity(self):
        rng = np.random.default_rng(9)
        fa, fb = self._feats(rng), self._feats(rng)
        logits = rng.standard_normal((2, 3, 6))
        c = self._coord(np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True))
        alpha, beta = 0.7, -1.3
        mixed = MO.MultiLevelAudioFeatures(
            low=Tensor(alpha * fa.low.data + beta * fb.low.data),
            mid=Tensor(alpha * fa.mid.data + beta * fb.mid.data),
            high=Tensor(alpha * fa.high.data + beta * fb.high.data))
        lhs = MO.blend_features(c, mixed, 2).data
        rhs = alpha * MO.blend_features(c, fa, 2).data \
            + beta * MO.blend_features(c, fb, 2).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestDecode:
    def test_cascade_dims(self, generator, canonical_cfg, hierarchy):
        rng = np.random.default_rng(10)
        b, n = 2, canonical_cfg.frames
        feats = [Tensor(rng.standard_normal((b, n, 32))) for _ in range(6)]
        seed = Tensor(rng.standard_normal((b, 4, 24)))
        prev0 = generator.seed_prev(seed, n)
        levels, _ = generator.decode(feats, prev0)
        assert [lv.shape[-1] for lv in levels] == [24, 30, 36, 66, 96, 126]

    def test_zero_weights_give_zero_output(self, canonical_cfg):
        rng = np.random.default_rng(11)
        dec = MO.LevelDecoder(24, 24, 32, 8, rng, dtype=np.float64)
        for p in dec.parameters():
            p.data[...] = 0.0
        feat = Tensor(rng.standard_normal((1, 6, 32)))
        prev = Tensor(rng.standard_normal((1, 6, 24)))
        gru_in = Tensor(rng.standard_normal((1, 6, 24)))
        np.testing.assert_array_equal(dec(feat, prev, gru_in).data, 0.0)

    def test_bidirectional_information_flow(self, canonical_cfg):
        rng = np.random.default_rng(12)
        dec = MO.LevelDecoder(24, 24, 32, 8, rng, dtype=np.float64)
        feat = rng.standard_normal((1, 10, 32))
        prev = Tensor(rng.standard_normal((1, 10, 24)))
        gru_in_a = rng.standard_normal((1, 10, 24))
        gru_in_b = gru_in_a.copy()
        gru_in_b[0, 5] += 1.0  # perturb the GRU input at frame 5
        out_a = dec(Tensor(feat), prev, Tensor(gru_in_a)).data
        out_b = dec(Tensor(feat), prev, Tensor(gru_in_b)).data
        diff = np.abs(out_a - out_b).sum(axis=2)[0]
        assert diff[3] > 0 and diff[7] > 0  # both sides of the edit see it

    def test_dim_mismatch(self, canonical_cfg):
        rng = np.random.default_rng(13)
        dec = MO.LevelDecoder(24, 24, 32, 8, rng, dtype=np.float64)
        with pytest.raises(MO.DimMismatch):
            dec.hiddens(Tensor(np.zeros((1, 6, 30))))


class TestGenerate:
    def _inputs(self, generator, rng, b=2):
        mel = Tensor(np.abs(rng.standard_normal((b, 128, 70))))
        identity = rng.standard_normal((b, 18))
        seed = Tensor(rng.standard_normal((b, 4, 24)) * 0.2)
        return mel, identity, seed

    def test_output_contract(self, generator):
        rng = np.random.default_rng(14)
        mel, identity, seed = self._inputs(generator, rng)
        out = generator.generate(mel, identity, seed)
        assert [lv.shape[-1] for lv in out.levels] == [24, 30, 36, 66, 96, 126]
        bones = out.final.data.reshape(2, 34, 42, 3)
        np.testing.assert_allclose(np.linalg.norm(bones, axis=-1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(out.levels[0].data[:, :4], seed.data)

    def test_bit_identical_repeat(self, generator):
        rng = np.random.default_rng(15)
        mel, identity, seed = self._inputs(generator, rng)
        a = generator.generate(mel, identity, seed).final.data
        b = generator.generate(mel, identity, seed).final.data
        assert a.tobytes() == b.tobytes()

    def test_seed_must_be_level_one_dim(self, generator):
        rng = np.random.default_rng(16)
        mel, identity, _ = self._inputs(generator, rng)
        with pytest.raises(MO.DimMismatch):
            generator.generate(mel, identity, Tensor(np.zeros((2, 4, 30))))


class TestDiscriminator:
    def test_table_shape_walk(self):
        rng = np.random.default_rng(17)
        disc = MO.Discriminator(126, 34, rng, hidden=32, dtype=np.float64)
        out = disc(Tensor(rng.standard_normal((1, 34, 126))))
        walk = [tuple(s) for s in disc.last_shapes]
        assert walk[0] == (126, 34)
        assert walk[1] == (16, 32)
        assert walk[2] == (8, 30)
        assert walk[3] == (8, 28)
        assert walk[4] == (28, 64)
        assert walk[5] == (28,)
        assert walk[6] == (1,)
        assert out.shape == (1,)

    def test_output_in_open_interval(self):
        rng = np.random.default_rng(18)
        disc = MO.Discriminator(126, 34, rng, dtype=np.float64)
        out = disc(Tensor(rng.standard_normal((5, 34, 126)) * 3))
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_zero_weights_output_half(self):
        rng = np.random.default_rng(19)
        disc = MO.Discriminator(126, 34, rng, dtype=np.float64)
        for p in disc.parameters():
            p.data[...] = 0.0
        out = disc(Tensor(rng.standard_normal((3, 34, 126))))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_too_short(self):
        rng = np.random.default_rng(20)
        with pytest.raises(MO.TooShort):
            MO.Discriminator(126, 6, rng)
        disc = MO.Discriminator(126, 34, rng)
        with pytest.raises(MO.TooShort):
            disc(Tensor(np.zeros((1, 5, 126))))


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("ts")
    spec = D.CorpusSpec(clips=8, frames=34, joints=43, speakers=3)
    path = D.synth_corpus(spec, seed=31, out_dir=str(out))
    cfg = RunConfig(frames=34, hidden=12, batch=8, mel_bins=32,
                    audio_ch1=6, audio_ch2=8, audio_ch3=10, dtype="f64",
                    lr=2e-3, seed=2)
    clips = D.load_clips(path)
    skel, full_h = D.corpus_skeleton(43)
    hier = T.hierarchy_for_depth(skel, full_h, 6)
    ds = T.prepare_dataset(clips, cfg, skel, hier, str(out))
    prof, mask = T.training_profile(clips, skel)
    sel_a, sel_b = MO.angle_selection(skel)
    return (cfg, hier, ds, prof.means[mask], prof.variances[mask],
            sel_a[:, mask], sel_b[:, mask])


class TestTrainStep:

    def test_pure_huber_overfits_one_batch(self, setup):
        cfg, hier, ds, means, variances, sel_a, sel_b = setup
        weights = T.weights_from_config(cfg)
        weights.lambda_p = weights.lambda_s = weights.lambda_k = weights.lambda_c = 0.0
        gen, disc = T.build_models(cfg, hier, ds.num_speakers, 11)
        go = ad.AdamState.for_params(gen.parameters())
        do = ad.AdamState.for_params(disc.parameters())
        batch = ds.batch(np.arange(8))
        hubers = []
        for step in range(25):
            rec = MO.train_step(gen, disc, batch, cfg, weights, go, do,
                                np.random.default_rng(step), means, variances,
                                sel_a, sel_b)
            hubers.append(rec["huber"])
        assert hubers[-1] < 0.5 * hubers[0]

    def test_loss_reproducible_from_detached_weights(self, setup):
        cfg, hier, ds, means, variances, sel_a, sel_b = setup
        weights = T.weights_from_config(cfg)
        batch = ds.batch(np.arange(8))
        records = []
        for _ in range(2):
            gen, disc = T.build_models(cfg, hier, ds.num_speakers, 7)
            go = ad.AdamState.for_params(gen.parameters())
            do = ad.AdamState.for_params(disc.parameters())
            rec = MO.train_step(gen, disc, batch, cfg, weights, go, do,
                                np.random.default_rng(0), means, variances,
                                sel_a, sel_b)
            records.append(rec)
        assert records[0] == records[1]

    def test_all_parameters_receive_finite_gradients(self, setup):
        cfg, hier, ds, means, variances, sel_a, sel_b = setup
        weights = T.weights_from_config(cfg)
        gen, disc = T.build_models(cfg, hier, ds.num_speakers, 13)
        go = ad.AdamState.for_params(gen.parameters())
        do = ad.AdamState.for_params(disc.parameters())
        batch = ds.batch(np.arange(8))
        MO.train_step(gen, disc, batch, cfg, weights, go, do,
                      np.random.default_rng(1), means, variances, sel_a, sel_b)
        for name, p in list(gen.named_parameters()) + list(disc.named_parameters()):
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name
