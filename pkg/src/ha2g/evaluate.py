"""Evaluation: generate gestures for a corpus and score FGD, Beat
Consistency, and Diversity against the ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import metrics as M
from .audio import MelSpectrogram
from .autodiff import Tensor
from .config import RunConfig
from .model import Generator
from .pose import PoseSequence, Skeleton, bone_angles
from .train import Dataset


@dataclass
class EvalReport:
    fgd: float
    bc: float
    diversity: float
    per_clip_bc: list            # (clip_id, bc or nan)
    config: dict

    def to_json(self) -> str:
        return json.dumps({"fgd": self.fgd, "bc": self.bc,
                           "diversity": self.diversity, "config": self.config},
                          indent=2)


def generate_corpus(gen: Generator, dataset: Dataset, cfg: RunConfig,
                    seed: int = 0, chunk: int = 64,
                    identity: str = "speaker") -> np.ndarray:
    """Final-level generated poses (S, N, D).

    identity="speaker" conditions on each clip's speaker id (styles are
    still stochastic through the reparameterised embedding);
    identity="sample" draws raw style vectors from N(0, I) instead.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1D5]))
    outs = []
    dt = cfg.np_dtype()
    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        mel = Tensor(dataset.mels[idx].astype(dt))
        seeds = Tensor(dataset.seeds[idx].astype(dt))
        if identity == "speaker":
            who = dataset.speakers[idx]
        else:
            who = rng.standard_normal((len(idx), cfg.id_dim))
        out = gen.generate(mel, who, seeds, rng=rng)
        outs.append(out.final.data.astype(np.float64))
    return np.concatenate(outs, axis=0)


def corpus_beat_consistency(generated: np.ndarray, dataset: Dataset,
                            skeleton: Skeleton, cfg: RunConfig):
    """Mean BC over clips (skipping beat-less clips) plus per-clip rows.

    The MAAC normaliser comes from the ground-truth corpus, so rate units
    are commensurate between models.
    """
    real_angles = [bone_angles(PoseSequence(f.reshape(f.shape[0], -1, 3), fps=cfg.fps),
                               skeleton) for f in dataset.finals]
    profile = M.maac(real_angles)
    fps_mel = cfg.sample_rate / cfg.hop
    rows, scores = [], []
    for i in range(len(dataset)):
        vec = generated[i].reshape(generated.shape[1], -1, 3)
        angles = bone_angles(PoseSequence(vec, fps=cfg.fps), skeleton)
        rate = M.angle_change_rate(angles, profile)
        motion = M.detect_motion_beats(rate, cfg.bc_threshold, cfg.fps)
        mel = MelSpectrogram(dataset.mels[i], sample_rate=cfg.sample_rate,
                             fft_size=cfg.fft_size, hop=cfg.hop)
        audio = M.detect_audio_beats(M.onset_strength(mel), fps_mel)
        if len(motion) == 0 or len(audio) == 0:
            rows.append((dataset.clip_ids[i], float("nan")))
            continue
        bc = M.beat_consistency(motion, audio, cfg.sigma)
        rows.append((dataset.clip_ids[i], bc))
        scores.append(bc)
    mean_bc = float(np.mean(scores)) if scores else 0.0
    return mean_bc, rows


def evaluate(gen: Generator, dataset: Dataset, skeleton: Skeleton, cfg: RunConfig,
             encoder: M.PoseAutoencoder | None = None, seed: int = 0,
             pairs: int = 500, generated: np.ndarray | None = None) -> EvalReport:
    """Score one generator on a corpus; the feature extractor is trained on
    the corpus's ground truth unless one is supplied."""
    if generated is None:
        generated = generate_corpus(gen, dataset, cfg, seed=seed)
    if encoder is None:
        encoder = M.train_feature_extractor(
            dataset.finals, rng=np.random.default_rng(np.random.SeedSequence([seed, 0xFE])))
    fgd = M.fgd(dataset.finals, generated, encoder)
    mean_bc, rows = corpus_beat_consistency(generated, dataset, skeleton, cfg)
    div = M.diversity(generated, encoder, pairs=pairs, seed=seed)
    config = {"seed": seed, "pairs": pairs, "bc_threshold": cfg.bc_threshold,
              "sigma": cfg.sigma, "frames": cfg.frames, "levels": cfg.levels}
    return EvalReport(fgd=float(fgd), bc=mean_bc, diversity=float(div),
                      per_clip_bc=rows, config=config)


def write_bc_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("clip_id,bc\n")
        for clip_id, bc in rows:
            fh.write(f"{clip_id},{bc}\n")
