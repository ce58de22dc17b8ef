"""The gesture-generation networks: multi-level audio encoder, text
encoder, identity/style pathway with coordinator blending, the cascaded
hierarchical pose decoder, and the sequence discriminator.

Layout conventions: mel spectrograms are (B, bins, T_mel); frame-aligned
features are (B, N, d); poses are (B, N, pose_dim) flattened direction
vectors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import nn
from .autodiff import Tensor
from .config import RunConfig
from .pose import MotionHierarchy, Skeleton

PAD_TOKEN = 0
OOV_TOKEN = 1


class ModelError(Exception):
    pass


class BadMelShape(ModelError):
    pass


class UnknownSpeaker(ModelError):
    pass


class DimMismatch(ModelError):
    pass


class TooShort(ModelError):
    pass


class NonFiniteLoss(ModelError):
    pass


@dataclass
class MultiLevelAudioFeatures:
    low: Tensor   # (B, N, d_a)
    mid: Tensor
    high: Tensor

    def __post_init__(self):
        if not (self.low.shape == self.mid.shape == self.high.shape):
            raise DimMismatch("audio feature levels must share one shape")


@dataclass
class StyleEmbedding:
    f_id: Tensor                 # (B, d_id)
    mu: Tensor | None = None
    logvar: Tensor | None = None


@dataclass
class StyleCoordinator:
    """Column-stochastic (3, H) blend weights, batched as (B, 3, H)."""

    c: Tensor

    def __post_init__(self):
        if not np.all(np.isfinite(self.c.data)):
            raise NonFiniteLoss("style coordinator became non-finite")
        cols = self.c.data.sum(axis=-2)
        if not np.allclose(cols, 1.0, atol=1e-6) or np.any(self.c.data < -1e-9):
            raise ValueError("coordinator columns must be probability vectors")


@dataclass
class GeneratorOutput:
    levels: list          # p-hat per level, (B, N, dims[h])
    final: Tensor         # last level, re-normalised to unit bones
    style: StyleEmbedding
    coordinator: StyleCoordinator


@lru_cache(maxsize=64)
def _interp_matrix(t_in: int, positions: tuple) -> np.ndarray:
    """Linear interpolation matrix sampling a length-t_in signal at the
    given (possibly fractional) positions; resample(x) = x @ M."""
    m = np.zeros((t_in, len(positions)))
    if t_in == 1:
        m[0, :] = 1.0
        return m
    pos = np.clip(np.asarray(positions, dtype=np.float64), 0.0, t_in - 1)
    i0 = np.minimum(np.floor(pos).astype(int), t_in - 2)
    frac = pos - i0
    cols = np.arange(len(positions))
    m[i0, cols] = 1.0 - frac
    m[i0 + 1, cols] = frac
    return m


def _resample_time(x: Tensor, positions) -> Tensor:
    """Sample (B, C, T) at fractional time positions -> (B, C, len(pos))."""
    m = _interp_matrix(x.shape[-1], tuple(positions)).astype(x.data.dtype)
    return ad.matmul(x, Tensor(m))


class AudioEncoder(nn.Module):
    """Strided conv stack over mel frames with taps at three depths.

    Each tap goes through upsample -> conv -> activation -> batch-norm ->
    per-frame linear head, landing on (B, N, d_a) for any clip length.
    The upsample samples each tap at the positions that correspond to the
    output frame centers (accounting for the taps' stride and the valid
    convolutions' trim), so features stay time-aligned with the poses.
    """

    MIN_MEL_FRAMES = 15
    # (stride, center offset) of each tap in mel-frame units
    TAP_GEOMETRY = {1: (2, 1), 2: (4, 3), 3: (8, 7)}

    def __init__(self, cfg: RunConfig, rng, dtype=np.float32):
        super().__init__()
        self.bins = cfg.mel_bins
        self.d_a = cfg.audio_dim
        self.fps = cfg.fps
        self.sample_rate = cfg.sample_rate
        self.fft_size = cfg.fft_size
        self.hop = cfg.hop
        chans = (cfg.audio_ch1, cfg.audio_ch2, cfg.audio_ch3)
        self.conv1 = nn.Conv1d(cfg.mel_bins, chans[0], 3, rng, stride=2, dtype=dtype)
        self.bn1 = nn.BatchNorm(chans[0], rng, dtype=dtype)
        self.conv2 = nn.Conv1d(chans[0], chans[1], 3, rng, stride=2, dtype=dtype)
        self.bn2 = nn.BatchNorm(chans[1], rng, dtype=dtype)
        self.conv3 = nn.Conv1d(chans[1], chans[2], 3, rng, stride=2, dtype=dtype)
        self.bn3 = nn.BatchNorm(chans[2], rng, dtype=dtype)
        for i, ch in enumerate(chans, start=1):
            setattr(self, f"proj{i}", nn.Conv1d(ch, self.d_a, 3, rng, dtype=dtype))
            setattr(self, f"projbn{i}", nn.BatchNorm(self.d_a, rng, dtype=dtype))
            setattr(self, f"head{i}", nn.Linear(self.d_a, self.d_a, rng, dtype=dtype))

    def _tap_positions(self, level: int, n_frames: int) -> np.ndarray:
        """Tap indices matching pose frames -1..n (the k=3 projection conv
        then trims one position at each end, centering output frame i)."""
        stride, offset = self.TAP_GEOMETRY[level]
        frames = np.arange(-1, n_frames + 1)
        centers = (frames + 0.5) * self.sample_rate / self.fps
        mel_pos = (centers - self.fft_size / 2) / self.hop
        return (mel_pos - offset) / stride

    def _tap(self, i: int, x: Tensor, n_frames: int, training: bool) -> Tensor:
        up = _resample_time(x, self._tap_positions(i, n_frames))
        y = getattr(self, f"proj{i}")(up)                     # (B, d_a, N)
        y = ad.leaky_relu(y, 0.2)
        y = getattr(self, f"projbn{i}")(y, training=training)
        y = ad.transpose(y, (0, 2, 1))                        # (B, N, d_a)
        return getattr(self, f"head{i}")(y)

    def __call__(self, mel: Tensor, n_frames: int, training=False) -> MultiLevelAudioFeatures:
        b, bins, t = mel.shape
        if bins != self.bins:
            raise BadMelShape(f"expected {self.bins} mel bins, got {bins}")
        if t < self.MIN_MEL_FRAMES:
            raise BadMelShape(f"need >= {self.MIN_MEL_FRAMES} mel frames, got {t}")
        h1 = ad.leaky_relu(self.bn1(self.conv1(mel), training=training), 0.2)
        h2 = ad.leaky_relu(self.bn2(self.conv2(h1), training=training), 0.2)
        h3 = ad.leaky_relu(self.bn3(self.conv3(h2), training=training), 0.2)
        return MultiLevelAudioFeatures(
            low=self._tap(1, h1, n_frames, training),
            mid=self._tap(2, h2, n_frames, training),
            high=self._tap(3, h3, n_frames, training),
        )


class TextEncoder(nn.Module):
    """Embedding plus a temporal conv stack; the receptive field covers
    around 16 padded words centred on each frame (4 layers, kernel 5)."""

    def __init__(self, cfg: RunConfig, rng, dtype=np.float32):
        super().__init__()
        self.vocab = cfg.vocab
        dims = [cfg.embed_dim, cfg.text_dim, cfg.text_dim, cfg.text_dim, cfg.text_dim]
        self.embed = nn.Embedding(cfg.vocab, cfg.embed_dim, rng, dtype=dtype)
        for i in range(4):
            setattr(self, f"conv{i + 1}",
                    nn.Conv1d(dims[i], dims[i + 1], 5, rng, dtype=dtype))

    def __call__(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if np.any(ids >= self.vocab) or np.any(ids < 0):
            warnings.warn("unknown token id mapped to OOV embedding", stacklevel=2)
            ids = np.where((ids < 0) | (ids >= self.vocab), OOV_TOKEN, ids)
        x = self.embed(ids)                       # (B, N, E)
        x = ad.transpose(x, (0, 2, 1))
        for i in range(4):
            x = ad.pad_axis(x, 2, 2, 2)
            x = getattr(self, f"conv{i + 1}")(x)
            if i < 3:
                x = ad.leaky_relu(x, 0.2)
        return ad.transpose(x, (0, 2, 1))         # (B, N, text_dim)


class StylePathway(nn.Module):
    """Speaker identity -> Gaussian style embedding -> blend coordinator.

    Training looks identities up in a per-speaker (mu, logvar) table and
    reparameterises; inference may bypass the table with a raw vector
    sampled from N(0, I).
    """

    def __init__(self, num_speakers: int, cfg: RunConfig, rng, dtype=np.float32):
        super().__init__()
        self.num_speakers = num_speakers
        self.d_id = cfg.id_dim
        self.levels = cfg.levels
        self.mu_table = nn.Embedding(num_speakers, cfg.id_dim, rng, dtype=dtype, scale=0.3)
        self.logvar_table = nn.Embedding(num_speakers, cfg.id_dim, rng, dtype=dtype, scale=0.0)
        self.logvar_table.table.data -= 4.0  # start with tight per-speaker spread
        self.to_coord = nn.Linear(cfg.id_dim, 3 * cfg.levels, rng, dtype=dtype)

    def sample(self, speaker_ids, rng) -> StyleEmbedding:
        ids = np.asarray(speaker_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.num_speakers):
            raise UnknownSpeaker(f"speaker ids must be in [0, {self.num_speakers})")
        mu = self.mu_table(ids)
        logvar = self.logvar_table(ids)
        eps = rng.standard_normal(size=mu.shape).astype(mu.data.dtype)
        f_id = ad.add(mu, ad.mul(ad.exp(logvar * 0.5), Tensor(eps)))
        return StyleEmbedding(f_id=f_id, mu=mu, logvar=logvar)

    def coordinator(self, f_id: Tensor) -> StyleCoordinator:
        if f_id.data.ndim == 1:
            f_id = ad.reshape(f_id, (1, self.d_id))
        logits = self.to_coord(f_id)                              # (B, 3H)
        c = ad.softmax(ad.reshape(logits, (-1, 3, self.levels)), axis=1)
        return StyleCoordinator(c)

    def __call__(self, identity, rng=None) -> tuple[StyleEmbedding, StyleCoordinator]:
        if isinstance(identity, (int, np.integer)) or (
                isinstance(identity, np.ndarray) and identity.dtype.kind in "iu"):
            emb = self.sample(np.atleast_1d(identity), rng or np.random.default_rng())
        else:
            vec = np.atleast_2d(np.asarray(identity, dtype=self.mu_table.table.data.dtype))
            if vec.shape[-1] != self.d_id:
                raise DimMismatch(f"identity vector must have {self.d_id} components")
            emb = StyleEmbedding(f_id=Tensor(vec))
        return emb, self.coordinator(emb.f_id)


def blend_features(coordinator: StyleCoordinator, feats: MultiLevelAudioFeatures,
                   level: int) -> Tensor:
    """Per-frame linear blend of the three feature levels for one hierarchy
    level (1-based)."""
    c = coordinator.c
    b = c.shape[0]
    out = None
    for row, feat in enumerate((feats.low, feats.mid, feats.high)):
        w = ad.reshape(c[(slice(None), row, level - 1)], (b, 1, 1))
        term = ad.mul(w, feat)
        out = term if out is None else ad.add(out, term)
    return out


class LevelDecoder(nn.Module):
    """One hierarchy level: bi-GRU over the shifted pose sequence, then a
    per-frame linear head on [hidden; previous level; blended audio]."""

    def __init__(self, d_level, d_prev, d_a, hidden, rng, dtype=np.float32):
        super().__init__()
        self.d_level = d_level
        self.gru = nn.BiGRU(d_level, hidden, rng, dtype=dtype)
        self.head = nn.Linear(2 * hidden + d_prev + d_a, d_level, rng, dtype=dtype)

    def hiddens(self, gru_input: Tensor) -> Tensor:
        if gru_input.shape[-1] != self.d_level:
            raise DimMismatch(f"GRU input dim {gru_input.shape[-1]} != {self.d_level}")
        return self.gru(gru_input)

    def head_out(self, hidden: Tensor, prev: Tensor, feat: Tensor) -> Tensor:
        return self.head(ad.concat([hidden, prev, feat], axis=2))

    def __call__(self, feat: Tensor, prev: Tensor, gru_input: Tensor) -> Tensor:
        return self.head_out(self.hiddens(gru_input), prev, feat)


def _shift_one(x: Tensor) -> Tensor:
    """Sequence shifted right by one frame; frame 0 becomes zeros."""
    b, n, d = x.shape
    zeros = Tensor(np.zeros((b, 1, d), dtype=x.data.dtype))
    return ad.concat([zeros, x[:, : n - 1, :]], axis=1)


def _lift(x: Tensor, d_target: int) -> Tensor:
    """Zero-pad a level h-1 pose up to level h dims (levels are nested
    prefixes, so padding appends exactly the new bones)."""
    d = x.shape[-1]
    if d == d_target:
        return x
    return ad.pad_axis(x, 2, 0, d_target - d)


class Generator(nn.Module):
    """Audio/text/style encoders plus the cascaded level decoders."""

    def __init__(self, cfg: RunConfig, hierarchy: MotionHierarchy,
                 num_speakers: int, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dims = hierarchy.pose_dims
        self.audio = AudioEncoder(cfg, rng, dtype=dtype)
        self.text = TextEncoder(cfg, rng, dtype=dtype)
        self.style = StylePathway(num_speakers, cfg, rng, dtype=dtype)
        for h, d in enumerate(self.dims, start=1):
            d_prev = self.dims[h - 2] if h > 1 else self.dims[0]
            setattr(self, f"dec{h}",
                    LevelDecoder(d, d_prev, cfg.audio_dim, cfg.hidden, rng, dtype=dtype))

    def decoder(self, h: int) -> LevelDecoder:
        return getattr(self, f"dec{h}")

    def seed_prev(self, seed: Tensor, n_frames: int) -> Tensor:
        """p-hat^0: the M seed frames followed by zeros, at level-1 dims."""
        b, m, d = seed.shape
        if d != self.dims[0]:
            raise DimMismatch(f"seed poses must be level-1 dim {self.dims[0]}, got {d}")
        if m >= n_frames:
            raise DimMismatch("seed frames must be shorter than the clip")
        zeros = Tensor(np.zeros((b, n_frames - m, d), dtype=seed.data.dtype))
        return ad.concat([seed, zeros], axis=1)

    def decode(self, blends: list, prev0: Tensor, teacher: list | None = None,
               reuse_hiddens: list | None = None):
        """Run the cascade; returns (levels, hiddens).

        With ``teacher`` the GRU input at level h > 1 is the shifted ground
        truth of that level; otherwise it is the shifted, zero-lifted
        output of the previous level (the model's own prediction).  Level 1
        always consumes the shifted seed-padded p-hat^0 so training matches
        inference exactly there (inference never has more history).
        """
        levels, hiddens = [], []
        prev = prev0
        for h in range(1, len(self.dims) + 1):
            dec = self.decoder(h)
            if reuse_hiddens is not None:
                hid = reuse_hiddens[h - 1]
            else:
                if teacher is not None and h > 1:
                    gru_in = _shift_one(teacher[h - 1])
                else:
                    gru_in = _shift_one(_lift(prev, self.dims[h - 1]))
                hid = dec.hiddens(gru_in)
            out = dec.head_out(hid, prev, blends[h - 1])
            levels.append(out)
            hiddens.append(hid)
            prev = out
        return levels, hiddens

    def renormalize(self, pose: Tensor) -> Tensor:
        """Re-normalise each 3-vector bone of a flattened pose to unit length."""
        b, n, d = pose.shape
        v = ad.reshape(pose, (b, n, d // 3, 3))
        sq = ad.sum_(ad.square(v), axis=-1, keepdims=True)
        unit = ad.div(v, ad.sqrt(sq + 1e-12))
        return ad.reshape(unit, (b, n, d))

    def generate(self, mel: Tensor, identity, seed: Tensor, rng=None) -> GeneratorOutput:
        """Full inference pass: audio taps, style blend, cascade, unit-norm."""
        b, n = seed.shape[0], self.cfg.frames
        feats = self.audio(mel, n, training=False)
        emb, coord = self.style(identity, rng=rng)
        blends = [blend_features(coord, feats, h) for h in range(1, len(self.dims) + 1)]
        prev0 = self.seed_prev(seed, n)
        levels, _ = self.decode(blends, prev0, teacher=None)
        m = seed.shape[1]
        levels[0] = ad.concat([seed, levels[0][:, m:, :]], axis=1)
        final = self.renormalize(levels[-1])
        return GeneratorOutput(levels=levels, final=final, style=emb, coordinator=coord)


class Discriminator(nn.Module):
    """Conv stack over time, bi-GRU, then per-frame and whole-clip heads."""

    def __init__(self, d_pose: int, frames: int, rng, hidden=32, dtype=np.float32):
        super().__init__()
        if frames < 7:
            raise TooShort("discriminator needs clips of at least 7 frames")
        self.frames = frames
        self.conv1 = nn.Conv1d(d_pose, 16, 3, rng, dtype=dtype)
        self.bn1 = nn.BatchNorm(16, rng, dtype=dtype)
        self.conv2 = nn.Conv1d(16, 8, 3, rng, dtype=dtype)
        self.bn2 = nn.BatchNorm(8, rng, dtype=dtype)
        self.conv3 = nn.Conv1d(8, 8, 3, rng, dtype=dtype)
        self.gru = nn.BiGRU(8, hidden, rng, dtype=dtype)
        self.fc1 = nn.Linear(2 * hidden, 1, rng, dtype=dtype)
        self.fc2 = nn.Linear(frames - 6, 1, rng, dtype=dtype)
        self.last_shapes: list = []

    def __call__(self, pose: Tensor, training=False) -> Tensor:
        b, n, d = pose.shape
        if n < 7:
            raise TooShort(f"need >= 7 frames, got {n}")
        if n != self.frames:
            raise DimMismatch(f"discriminator built for {self.frames} frames, got {n}")
        shapes = []
        x = ad.transpose(pose, (0, 2, 1))
        shapes.append(x.shape[1:])
        x = ad.leaky_relu(self.bn1(self.conv1(x), training=training), 0.2)
        shapes.append(x.shape[1:])
        x = ad.leaky_relu(self.bn2(self.conv2(x), training=training), 0.2)
        shapes.append(x.shape[1:])
        x = self.conv3(x)
        shapes.append(x.shape[1:])
        x = ad.transpose(x, (0, 2, 1))           # (B, N-6, 8)
        x = self.gru(x)                          # (B, N-6, 2*hidden)
        shapes.append(x.shape[1:])
        x = self.fc1(x)                          # (B, N-6, 1)
        x = ad.reshape(x, (b, n - 6))
        shapes.append(x.shape[1:])
        x = self.fc2(x)                          # (B, 1)
        out = ad.reshape(ad.sigmoid(x), (b,))
        shapes.append(x.shape[1:])
        self.last_shapes = shapes
        return out


def angle_selection(skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Constant matrices picking each angle pair's two bones via matmul."""
    nb = skeleton.bone_count
    a_idx = [a for a, _ in skeleton.angle_pairs]
    b_idx = [b for _, b in skeleton.angle_pairs]
    sel_a = np.zeros((nb, len(a_idx)))
    sel_b = np.zeros((nb, len(b_idx)))
    sel_a[a_idx, np.arange(len(a_idx))] = 1.0
    sel_b[b_idx, np.arange(len(b_idx))] = 1.0
    return sel_a, sel_b


def pose_angles_deg(pose: Tensor, sel_a: np.ndarray, sel_b: np.ndarray) -> Tensor:
    """Included angles (degrees) between bone pairs of a flattened pose.

    Differentiable counterpart of pose.bone_angles for predicted poses.
    """
    b, n, d = pose.shape
    nb = d // 3
    v = ad.transpose(ad.reshape(pose, (b * n, nb, 3)), (0, 2, 1))  # (BN, 3, nb)
    dt = pose.data.dtype
    va = ad.transpose(ad.matmul(v, Tensor(sel_a.astype(dt))), (0, 2, 1))
    vb = ad.transpose(ad.matmul(v, Tensor(sel_b.astype(dt))), (0, 2, 1))
    cos = ad.cosine_similarity(va, vb)                             # (BN, A)
    ang = ad.arccos(cos, guard=1e-6) * (180.0 / np.pi)
    return ad.reshape(ang, (b, n, -1))


def _set_requires_grad(module: nn.Module, flag: bool):
    for _, p in module.named_parameters():
        p.requires_grad = flag


def train_step(gen: Generator, disc: Discriminator, batch: dict, cfg: RunConfig,
               weights: L.LossWeights, gen_opt, disc_opt, rng,
               profile_means, profile_vars, sel_a, sel_b, lr=None) -> dict:
    """One generator update on the weighted total and one discriminator
    update on the adversarial pair; returns every component's value.

    batch: mel (B, bins, T), tokens (B, N), speakers (B,),
    levels (list of (B, N, dims[h]) ground truth), seed (B, M, dims[0]).
    """
    dt = cfg.np_dtype()
    mel = Tensor(batch["mel"].astype(dt))
    gt_levels = [Tensor(lv.astype(dt)) for lv in batch["levels"]]
    seed = Tensor(batch["seed"].astype(dt))
    speakers = np.asarray(batch["speakers"])
    n = cfg.frames

    gen_params = gen.parameters()
    _set_requires_grad(disc, False)
    with ad.Tape() as tape:
        feats = gen.audio(mel, n, training=True)
        f_t = gen.text(batch["tokens"])
        emb1 = gen.style.sample(speakers, rng)
        emb2 = gen.style.sample(np.roll(speakers, 1), rng)
        coord1 = gen.style.coordinator(emb1.f_id)
        coord2 = gen.style.coordinator(emb2.f_id)
        teacher = [t.detach() for t in gt_levels] if cfg.teacher_forcing else None
        prev0 = gen.seed_prev(seed, n)
        blends1 = [blend_features(coord1, feats, h) for h in range(1, len(gen.dims) + 1)]
        levels1, hiddens = gen.decode(blends1, prev0, teacher=teacher)
        if teacher is not None:
            # teacher-forced hiddens depend only on the ground truth, so the
            # style pass reuses them and costs one extra set of heads
            blends2 = [blend_features(coord2, feats, h)
                       for h in range(1, len(gen.dims) + 1)]
            levels2, _ = gen.decode(blends2, prev0, teacher=teacher,
                                    reuse_hiddens=hiddens)
            style_pred1 = levels1[-1]
        else:
            # self-input decoding cannot share hiddens; estimate the style
            # expectation on half the batch to stay within budget
            half = max(len(speakers) // 2, 2)
            blends2 = [blend_features(coord2, feats, h)[:half]
                       for h in range(1, len(gen.dims) + 1)]
            levels2, _ = gen.decode(blends2, prev0[:half], teacher=None)
            style_pred1 = levels1[-1][:half]
            emb1_style = StyleEmbedding(f_id=emb1.f_id[:half])
            emb2_style = StyleEmbedding(f_id=emb2.f_id[:half])

        l_huber = L.huber_hierarchical(levels1, gt_levels, delta=weights.huber_delta)
        d_fake = disc(levels1[-1], training=False)
        l_gan_g = L.generator_gan_loss(d_fake)
        angles = pose_angles_deg(levels1[-1], sel_a, sel_b)
        l_phy = L.physical_loss(angles, profile_means, profile_vars)
        if teacher is not None:
            l_style = L.style_diverging(style_pred1, levels2[-1], emb1.f_id,
                                        emb2.f_id, epsilon_clip=weights.epsilon_clip,
                                        delta=weights.huber_delta)
        else:
            l_style = L.style_diverging(style_pred1, levels2[-1], emb1_style.f_id,
                                        emb2_style.f_id,
                                        epsilon_clip=weights.epsilon_clip,
                                        delta=weights.huber_delta)
        l_kld = L.kld_loss(emb1.mu, emb1.logvar)
        l_multi = L.contrastive_multilevel_batch(f_t, feats.low, feats.mid, feats.high,
                                                 tau=weights.tau)
        l_total = L.total_loss(l_gan_g, l_huber, l_phy, l_style, l_kld, l_multi, weights)
    lr = cfg.lr if lr is None else lr
    grads = ad.backward(tape, l_total, leaves=gen_params)
    ad.adam_step(gen_params, [grads[p] for p in gen_params], gen_opt, lr)
    _set_requires_grad(disc, True)

    disc_params = disc.parameters()
    fake_detached = Tensor(levels1[-1].data.copy())
    with ad.Tape() as tape_d:
        d_real = disc(gt_levels[-1].detach(), training=True)
        d_fake2 = disc(fake_detached, training=False)
        _, l_disc = L.gan_losses(d_real, d_fake2)
    grads_d = ad.backward(tape_d, l_disc, leaves=disc_params)
    ad.adam_step(disc_params, [grads_d[p] for p in disc_params], disc_opt, lr)

    record = {
        "total": float(l_total.data),
        "gan_g": float(l_gan_g.data),
        "gan_d": float(l_disc.data),
        "huber": float(l_huber.data),
        "phy": float(l_phy.data),
        "style": float(l_style.data),
        "kld": float(l_kld.data),
        "multi": float(l_multi.data),
    }
    for name, value in record.items():
        if not np.isfinite(value):
            raise NonFiniteLoss(f"loss {name!r} is {value} (batch of {len(speakers)})")
    return record
