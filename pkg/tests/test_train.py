"""Training pipeline integration: CSV logging, checkpoint round trips,
resume determinism, and hierarchy depth selection."""

import os

import numpy as np
import pytest

from ha2g import data as D
from ha2g import train as T
from ha2g.config import RunConfig


def tiny_cfg(**kw):
    base = dict(frames=16, seed_frames=3, hidden=8, batch=8, epochs=2,
                mel_bins=32, audio_ch1=6, audio_ch2=8, audio_ch3=10,
                dtype="f32", lr=1e-3, seed=5, checkpoint_every=0, threads=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("traincorpus")
    spec = D.CorpusSpec(clips=16, frames=16, joints=43, speakers=3)
    path = D.synth_corpus(spec, seed=9, out_dir=str(out))
    return str(out), path, D.load_clips(path)


def read_csv(path):
    lines = open(path).read().splitlines()
    assert lines[0].startswith("#")
    header = lines[1].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[2:]]
    return lines[0], header, rows


class TestHierarchyDepth:
    def test_full_depth(self):
        skel, full = D.corpus_skeleton(43)
        assert T.hierarchy_for_depth(skel, full, 6).pose_dims == \
            (24, 30, 36, 66, 96, 126)

    def test_holistic(self):
        skel, full = D.corpus_skeleton(43)
        h = T.hierarchy_for_depth(skel, full, 1)
        assert h.pose_dims == (126,)

    def test_intermediate(self):
        skel, full = D.corpus_skeleton(43)
        assert T.hierarchy_for_depth(skel, full, 3).pose_dims == (66, 96, 126)

    def test_out_of_range(self):
        skel, full = D.corpus_skeleton(43)
        with pytest.raises(ValueError):
            T.hierarchy_for_depth(skel, full, 7)


class TestDatasetPrep:
    def test_shapes_and_thread_invariance(self, corpus):
        base, path, clips = corpus
        cfg = tiny_cfg()
        skel, full = D.corpus_skeleton(43)
        hier = T.hierarchy_for_depth(skel, full, 6)
        ds1 = T.prepare_dataset(clips, cfg, skel, hier, base, threads=1)
        ds2 = T.prepare_dataset(clips, cfg, skel, hier, base, threads=3)
        assert ds1.mels.shape == (16, 32, 33)
        assert ds1.seeds.shape == (16, 3, 24)
        assert [lv.shape[-1] for lv in ds1.levels] == [24, 30, 36, 66, 96, 126]
        assert ds1.mels.tobytes() == ds2.mels.tobytes()
        assert ds1.num_speakers == 3


class TestTrainRun:
    def test_run_writes_artifacts(self, corpus, tmp_path):
        base, path, clips = corpus
        cfg = tiny_cfg(epochs=2, lambda_h=123.0)
        out = tmp_path / "run"
        state = T.train(clips, cfg, str(out), base)
        assert state.step == 4  # 16 clips / batch 8 * 2 epochs
        assert os.path.exists(out / "ckpt_final.hag")
        comment, header, rows = read_csv(out / "losses.csv")
        assert "lambda_h=123.0" in comment
        assert header == ["step", "epoch", "total", "gan_g", "gan_d", "huber",
                          "phy", "style", "kld", "multi"]
        assert len(rows) == 4
        assert all(np.isfinite(float(r["total"])) for r in rows)

    def test_checkpoint_state_round_trip(self, corpus, tmp_path):
        base, path, clips = corpus
        cfg = tiny_cfg(epochs=1)
        out = tmp_path / "run2"
        state = T.train(clips, cfg, str(out), base)
        skel, full = D.corpus_skeleton(43)
        hier = T.hierarchy_for_depth(skel, full, cfg.levels)
        loaded = T.load_train_checkpoint(str(out / "ckpt_final.hag"), cfg, hier)
        for (name, p), (name2, q) in zip(state.gen.named_parameters(),
                                         loaded.gen.named_parameters()):
            assert name == name2
            np.testing.assert_array_equal(p.data, q.data)
        assert loaded.step == state.step
        assert loaded.gen_opt.t == state.gen_opt.t
        np.testing.assert_array_equal(loaded.gen_opt.m[0], state.gen_opt.m[0])

    def test_resume_reproduces_next_loss(self, corpus, tmp_path):
        base, path, clips = corpus
        straight = tmp_path / "straight"
        T.train(clips, tiny_cfg(epochs=3), str(straight), base)
        _, _, rows3 = read_csv(straight / "losses.csv")

        part = tmp_path / "part"
        T.train(clips, tiny_cfg(epochs=2), str(part), base)
        resumed = tmp_path / "resumed"
        T.train(clips, tiny_cfg(epochs=3), str(resumed), base,
                resume=str(part / "ckpt_final.hag"))
        _, _, rows_r = read_csv(resumed / "losses.csv")
        straight_last = [r for r in rows3 if r["epoch"] == "2"]
        resumed_last = [r for r in rows_r if r["epoch"] == "2"]
        assert len(straight_last) == len(resumed_last) == 2
        for a, b in zip(straight_last, resumed_last):
            assert float(a["total"]) == pytest.approx(float(b["total"]), rel=2e-5)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_reports_batch(self, corpus, tmp_path):
        base, path, clips = corpus
        cfg = tiny_cfg(epochs=1, lr=1e6)  # absurd LR forces a blow-up
        from ha2g.model import NonFiniteLoss
        with pytest.raises(NonFiniteLoss) as exc:
            T.train(clips, cfg, str(tmp_path / "boom"), base)
        assert "step" in str(exc.value)


class TestEvaluate:
    def test_report_fields_and_bc_rows(self, corpus, tmp_path):
        from ha2g import evaluate as E
        from ha2g import metrics as M
        base, path, clips = corpus
        cfg = tiny_cfg(epochs=1)
        out = tmp_path / "evalrun"
        state = T.train(clips, cfg, str(out), base)
        skel, full = D.corpus_skeleton(43)
        hier = T.hierarchy_for_depth(skel, full, cfg.levels)
        ds = T.prepare_dataset(clips, cfg, skel, hier, base)
        encoder = M.train_feature_extractor(ds.finals,
                                            rng=np.random.default_rng(0), epochs=6)
        report = E.evaluate(state.gen, ds, skel, cfg, encoder=encoder,
                            seed=1, pairs=60)
        assert report.fgd >= 0.0
        assert 0.0 <= report.bc <= 1.0
        assert report.diversity >= 0.0
        assert len(report.per_clip_bc) == len(clips)
        doc = report.to_json()
        for key in ("fgd", "bc", "diversity", "config"):
            assert f'"{key}"' in doc
        csv_path = tmp_path / "bc.csv"
        E.write_bc_csv(csv_path, report.per_clip_bc)
        assert len(open(csv_path).read().splitlines()) == len(clips) + 1
