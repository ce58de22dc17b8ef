"""Training pipeline: dataset preparation, the epoch loop with seeded
batching, loss CSV logging, and checkpoint save/resume."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from .audio import mel_spectrogram, read_wav
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig
from .data import ClipRecord, corpus_skeleton
from .model import (Discriminator, Generator, NonFiniteLoss, angle_selection,
                    train_step)
from .pose import (MotionHierarchy, PoseSequence, Skeleton, angle_statistics,
                   hierarchy_slice)


def align_config_to_corpus(cfg: RunConfig, clips: list[ClipRecord]) -> RunConfig:
    """Clip geometry wins over config defaults: frames, fps, and joint
    count are properties of the corpus."""
    if not clips:
        raise ValueError("corpus is empty")
    frames = {c.frames for c in clips}
    if len(frames) != 1:
        raise ValueError(f"corpus mixes clip lengths {sorted(frames)}")
    cfg.frames = frames.pop()
    cfg.fps = clips[0].fps
    cfg.joints = clips[0].dirvecs.shape[1] + 1
    if cfg.seed_frames >= cfg.frames:
        raise ValueError("seed_frames must be smaller than the clip length")
    return cfg


def hierarchy_for_depth(skeleton: Skeleton, full: MotionHierarchy,
                        depth: int) -> MotionHierarchy:
    """Keep the outermost `depth` levels (depth=1 is holistic decoding)."""
    if not 1 <= depth <= full.depth:
        raise ValueError(f"depth must be in 1..{full.depth}")
    start = full.depth - depth
    return MotionHierarchy(levels=full.levels[start:],
                           bone_masks=full.bone_masks[start:],
                           pose_dims=full.pose_dims[start:])


@dataclass
class Dataset:
    mels: np.ndarray             # (S, bins, T_mel)
    tokens: np.ndarray           # (S, N)
    speakers: np.ndarray         # (S,)
    levels: list                 # per level: (S, N, dims[h])
    seeds: np.ndarray            # (S, M, dims[0])
    finals: np.ndarray           # (S, N, dims[-1]) ground-truth final level
    clip_ids: list
    num_speakers: int

    def __len__(self):
        return len(self.speakers)

    def batch(self, idx) -> dict:
        return {
            "mel": self.mels[idx],
            "tokens": self.tokens[idx],
            "speakers": self.speakers[idx],
            "levels": [lv[idx] for lv in self.levels],
            "seed": self.seeds[idx],
        }


def prepare_dataset(clips: list[ClipRecord], cfg: RunConfig, skeleton: Skeleton,
                    hierarchy: MotionHierarchy, base_dir: str,
                    threads: int = 1) -> Dataset:
    """Decode audio to mel and slice poses per hierarchy level.

    Per-clip work runs on a thread pool; results keep corpus order so the
    outcome is identical for any thread count.
    """
    def mel_of(clip: ClipRecord):
        samples, _ = read_wav(os.path.join(base_dir, clip.audio_path))
        return mel_spectrogram(samples, bins=cfg.mel_bins, sr=cfg.sample_rate,
                               fft_size=cfg.fft_size, hop=cfg.hop).values

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            mels = list(pool.map(mel_of, clips))
    else:
        mels = [mel_of(c) for c in clips]
    t_min = min(m.shape[1] for m in mels)
    mels = np.stack([m[:, :t_min] for m in mels])

    poses = [PoseSequence(c.dirvecs, fps=c.fps) for c in clips]
    levels = []
    for h in range(1, hierarchy.depth + 1):
        levels.append(np.stack([hierarchy_slice(p, h, hierarchy) for p in poses]))
    seeds = levels[0][:, :cfg.seed_frames].copy()
    return Dataset(
        mels=mels,
        tokens=np.stack([c.tokens for c in clips]),
        speakers=np.array([c.speaker for c in clips], dtype=np.int64),
        levels=levels,
        seeds=seeds,
        finals=levels[-1],
        clip_ids=[c.clip_id for c in clips],
        num_speakers=int(max(c.speaker for c in clips)) + 1,
    )


def build_models(cfg: RunConfig, hierarchy: MotionHierarchy, num_speakers: int,
                 seed: int) -> tuple[Generator, Discriminator]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
    dt = cfg.np_dtype()
    gen = Generator(cfg, hierarchy, num_speakers, rng, dtype=dt)
    disc = Discriminator(hierarchy.pose_dims[-1], cfg.frames, rng,
                         hidden=cfg.disc_hidden, dtype=dt)
    return gen, disc


def training_profile(clips: list[ClipRecord], skeleton: Skeleton):
    """Angle statistics over the corpus with zero-variance angles dropped."""
    profile = angle_statistics([PoseSequence(c.dirvecs, fps=c.fps) for c in clips],
                               skeleton)
    mask = profile.variances > 1e-8
    return profile, mask


@dataclass
class TrainState:
    gen: Generator
    disc: Discriminator
    gen_opt: ad.AdamState
    disc_opt: ad.AdamState
    step: int = 0
    epoch: int = 0


def save_train_checkpoint(path, state: TrainState, cfg: RunConfig, num_speakers: int):
    arrays = {}
    for name, p in state.gen.named_parameters():
        arrays[f"gen/{name}"] = p.data
    for name, mod, buf in state.gen._buffers():
        arrays[f"gen/{name}"] = buf
    for name, p in state.disc.named_parameters():
        arrays[f"disc/{name}"] = p.data
    for name, mod, buf in state.disc._buffers():
        arrays[f"disc/{name}"] = buf
    for tag, opt, mod in (("adam_g", state.gen_opt, state.gen),
                          ("adam_d", state.disc_opt, state.disc)):
        names = [n for n, _ in mod.named_parameters()]
        for n, m, v in zip(names, opt.m, opt.v):
            arrays[f"{tag}/{n}/m"] = m
            arrays[f"{tag}/{n}/v"] = v
        arrays[f"{tag}/t"] = np.array([opt.t], dtype=np.float64)
    arrays["meta/step"] = np.array([state.step], dtype=np.float64)
    arrays["meta/epoch"] = np.array([state.epoch], dtype=np.float64)
    arrays["meta/num_speakers"] = np.array([num_speakers], dtype=np.float64)
    write_checkpoint(path, arrays)


def load_train_checkpoint(path, cfg: RunConfig, hierarchy: MotionHierarchy) -> TrainState:
    arrays = read_checkpoint(path)
    num_speakers = int(arrays["meta/num_speakers"][0])
    gen, disc = build_models(cfg, hierarchy, num_speakers, cfg.seed)
    gen.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("gen/")})
    disc.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("disc/")})
    gen_opt = ad.AdamState.for_params(gen.parameters())
    disc_opt = ad.AdamState.for_params(disc.parameters())
    for tag, opt, mod in (("adam_g", gen_opt, gen), ("adam_d", disc_opt, disc)):
        names = [n for n, _ in mod.named_parameters()]
        for i, n in enumerate(names):
            opt.m[i][...] = arrays[f"{tag}/{n}/m"].astype(opt.m[i].dtype)
            opt.v[i][...] = arrays[f"{tag}/{n}/v"].astype(opt.v[i].dtype)
        opt.t = int(arrays[f"{tag}/t"][0])
    return TrainState(gen=gen, disc=disc, gen_opt=gen_opt, disc_opt=disc_opt,
                      step=int(arrays["meta/step"][0]),
                      epoch=int(arrays["meta/epoch"][0]))


def weights_from_config(cfg: RunConfig) -> L.LossWeights:
    return L.LossWeights(lambda_h=cfg.lambda_h, lambda_p=cfg.lambda_p,
                         lambda_s=cfg.lambda_s, lambda_k=cfg.lambda_k,
                         lambda_c=cfg.lambda_c, tau=cfg.tau,
                         epsilon_clip=cfg.epsilon_clip, huber_delta=cfg.huber_delta)


def csv_header(cfg: RunConfig) -> str:
    lambdas = (f"lambda_h={cfg.lambda_h} lambda_p={cfg.lambda_p} "
               f"lambda_s={cfg.lambda_s} lambda_k={cfg.lambda_k} "
               f"lambda_c={cfg.lambda_c} tau={cfg.tau} epsilon={cfg.epsilon_clip} "
               f"lr={cfg.lr} seed={cfg.seed}")
    return (f"# {lambdas}\n"
            "step,epoch,total,gan_g,gan_d,huber,phy,style,kld,multi\n")


def train(clips: list[ClipRecord], cfg: RunConfig, out_dir: str, base_dir: str,
          resume: str | None = None, log_fn=None) -> TrainState:
    """Full training run; writes losses.csv and periodic checkpoints."""
    os.makedirs(out_dir, exist_ok=True)
    align_config_to_corpus(cfg, clips)
    skeleton, full_h = corpus_skeleton(cfg.joints)
    hierarchy = hierarchy_for_depth(skeleton, full_h, cfg.levels)
    dataset = prepare_dataset(clips, cfg, skeleton, hierarchy, base_dir,
                              threads=cfg.threads)
    profile, mask = training_profile(clips, skeleton)
    sel_a, sel_b = angle_selection(skeleton)
    sel_a, sel_b = sel_a[:, mask], sel_b[:, mask]
    means, variances = profile.means[mask], profile.variances[mask]
    weights = weights_from_config(cfg)

    if resume:
        state = load_train_checkpoint(resume, cfg, hierarchy)
    else:
        gen, disc = build_models(cfg, hierarchy, dataset.num_speakers, cfg.seed)
        state = TrainState(gen=gen, disc=disc,
                           gen_opt=ad.AdamState.for_params(gen.parameters()),
                           disc_opt=ad.AdamState.for_params(disc.parameters()))

    steps_per_epoch = max(len(dataset) // cfg.batch, 1)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)

    def step_lr(step):
        if cfg.lr_schedule == "cosine":
            ramp = 0.5 * (1.0 + np.cos(np.pi * min(step / total_steps, 1.0)))
            return cfg.lr * (0.05 + 0.95 * ramp)
        return cfg.lr

    csv_path = os.path.join(out_dir, "losses.csv")
    mode = "a" if (resume and os.path.exists(csv_path)) else "w"
    with open(csv_path, mode) as csv:
        if mode == "w":
            csv.write(csv_header(cfg))
        for epoch in range(state.epoch, cfg.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0xE90C, epoch])).permutation(len(dataset))
            for start in range(0, len(dataset), cfg.batch):
                idx = order[start:start + cfg.batch]
                if len(idx) < 2:
                    continue  # style pairing needs at least two samples
                batch = dataset.batch(idx)
                step_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 0x57E9, state.step]))
                try:
                    record = train_step(state.gen, state.disc, batch, cfg, weights,
                                        state.gen_opt, state.disc_opt, step_rng,
                                        means, variances, sel_a, sel_b,
                                        lr=step_lr(state.step))
                except NonFiniteLoss as exc:
                    raise NonFiniteLoss(
                        f"{exc} [epoch {epoch}, step {state.step}, "
                        f"clips {dataset.clip_ids[idx[0]]}..]") from exc
                csv.write(f"{state.step},{epoch},{record['total']:.6f},"
                          f"{record['gan_g']:.6f},{record['gan_d']:.6f},"
                          f"{record['huber']:.6f},{record['phy']:.6f},"
                          f"{record['style']:.6f},{record['kld']:.6f},"
                          f"{record['multi']:.6f}\n")
                state.step += 1
            state.epoch = epoch + 1
            if log_fn:
                log_fn(epoch, record)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_train_checkpoint(os.path.join(out_dir, f"ckpt_ep{epoch + 1:04d}.hag"),
                                      state, cfg, dataset.num_speakers)
    save_train_checkpoint(os.path.join(out_dir, "ckpt_final.hag"), state, cfg,
                          dataset.num_speakers)
    return state
