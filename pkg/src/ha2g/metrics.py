"""Evaluation suite: angle-change-rate kinematic beats, audio onset
beats, Beat Consistency, the latent-space Fréchet distance with its
feature-extractor autoencoder, and Diversity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .audio import MelSpectrogram
from .autodiff import Tensor


class MetricError(Exception):
    pass


class TooShort(MetricError):
    pass


class EmptyBeats(MetricError):
    pass


class InsufficientSamples(MetricError):
    pass


class NotSymmetric(MetricError):
    pass


class DimMismatch(MetricError):
    pass


class TooFewClips(MetricError):
    pass


class Divergence(MetricError):
    pass


@dataclass
class BeatSet:
    times: np.ndarray            # seconds, strictly increasing
    source: str = "motion"       # "motion" | "audio"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.size and (np.any(np.diff(self.times) <= 0) or self.times[0] < 0):
            raise ValueError("beat times must be nonnegative and strictly increasing")

    def __len__(self):
        return self.times.size


@dataclass
class MaacProfile:
    """Per-angle mean absolute change per frame step; 0 marks an excluded
    (motionless) angle."""

    values: np.ndarray
    clips: int
    frames: int

    @property
    def included(self) -> np.ndarray:
        return self.values > 0


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if np.abs(self.cov - self.cov.T).max() > 1e-9 * max(1.0, np.abs(self.cov).max()):
            raise NotSymmetric("covariance must be symmetric")
        self.cov = 0.5 * (self.cov + self.cov.T)

    @property
    def dim(self) -> int:
        return self.mean.size


# --- kinematic beats ---------------------------------------------------------

def maac(clips) -> MaacProfile:
    """Mean absolute angle change per angle over a clip collection.

    clips: iterable of (T, A) angle arrays in degrees, T >= 2 each.
    """
    clips = [np.asarray(c, dtype=np.float64) for c in clips]
    if not clips:
        raise TooShort("need at least one clip")
    for c in clips:
        if c.ndim != 2 or c.shape[0] < 2:
            raise TooShort("each clip needs at least 2 frames of angles")
    total = sum(np.abs(np.diff(c, axis=0)).sum(axis=0) for c in clips)
    steps = sum(c.shape[0] - 1 for c in clips)
    return MaacProfile(values=total / steps, clips=len(clips), frames=clips[0].shape[0])


def angle_change_rate(clip, profile: MaacProfile) -> np.ndarray:
    """Per-frame-step motion rate: mean over included angles of
    |delta angle| / MAAC; zero-MAAC angles are excluded from the mean."""
    clip = np.asarray(clip, dtype=np.float64)
    mask = profile.included
    if not np.any(mask):
        return np.zeros(clip.shape[0] - 1)
    delta = np.abs(np.diff(clip[:, mask], axis=0))
    return (delta / profile.values[mask]).mean(axis=1)


def detect_motion_beats(rate, threshold: float, fps: float) -> BeatSet:
    """Local extrema of the rate series whose first-order difference on
    both sides exceeds the threshold; timestamps are index / fps."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    rate = np.asarray(rate, dtype=np.float64)
    beats = []
    for t in range(1, rate.size - 1):
        d_prev = rate[t] - rate[t - 1]
        d_next = rate[t + 1] - rate[t]
        is_min = rate[t] < rate[t - 1] and rate[t] < rate[t + 1]
        is_max = rate[t] > rate[t - 1] and rate[t] > rate[t + 1]
        if (is_min or is_max) and abs(d_prev) > threshold and abs(d_next) > threshold:
            beats.append(t / fps)
    return BeatSet(times=np.asarray(beats), source="motion")


# --- audio beats -------------------------------------------------------------

def onset_strength(mel: MelSpectrogram, eps: float = 1e-6) -> np.ndarray:
    """Half-wave-rectified log spectral flux, one value per mel frame."""
    logmel = np.log(mel.values + eps)
    flux = np.maximum(0.0, np.diff(logmel, axis=1)).sum(axis=0)
    return np.concatenate([[0.0], flux])


def detect_audio_beats(envelope, fps_mel: float, window_s: float = 1.0,
                       k: float = 1.0) -> BeatSet:
    """Local maxima above mean + k*std of a centred window, in seconds."""
    env = np.asarray(envelope, dtype=np.float64)
    if np.any(env < 0):
        raise ValueError("envelope must be nonnegative")
    half = max(int(round(window_s * fps_mel / 2)), 1)
    beats = []
    for t in range(1, env.size - 1):
        if not (env[t] > env[t - 1] and env[t] >= env[t + 1]):
            continue
        lo, hi = max(0, t - half), min(env.size, t + half + 1)
        seg = env[lo:hi]
        if env[t] > seg.mean() + k * seg.std() and env[t] > 0:
            beats.append(t / fps_mel)
    return BeatSet(times=np.asarray(beats), source="audio")


def beat_consistency(motion: BeatSet, audio: BeatSet, sigma: float = 0.1) -> float:
    """Mean Gaussian proximity of each audio beat to its nearest motion beat."""
    if len(audio) == 0 or len(motion) == 0:
        raise EmptyBeats(f"motion={len(motion)} audio={len(audio)} beats")
    d2 = (audio.times[:, None] - motion.times[None, :]) ** 2
    return float(np.mean(np.exp(-d2.min(axis=1) / (2.0 * sigma * sigma))))


# --- Frechet machinery -------------------------------------------------------

def fit_gaussian(features) -> GaussianSummary:
    rows = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if rows.shape[0] < 2:
        raise InsufficientSamples("need at least 2 feature rows")
    mean = rows.mean(axis=0)
    cov = np.cov(rows, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return GaussianSummary(mean=mean, cov=0.5 * (cov + cov.T), count=rows.shape[0])


def matrix_sqrt_psd(a: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if np.abs(a - a.T).max() > 1e-8 * max(1.0, np.abs(a).max()):
        raise NotSymmetric("matrix_sqrt_psd needs a symmetric matrix")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if vals.min() < -1e-8 * max(1.0, abs(vals.max())):
        raise NotSymmetric(f"matrix is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def frechet_distance(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term is evaluated as Tr[(sqrt(S1) S2 sqrt(S1))^(1/2)], which
    is symmetric PSD and equals the trace of (S1 S2)^(1/2).
    """
    if g1.dim != g2.dim:
        raise DimMismatch(f"gaussian dims {g1.dim} vs {g2.dim}")
    s1h = matrix_sqrt_psd(g1.cov)
    inner = s1h @ g2.cov @ s1h
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    mean_term = float(((g1.mean - g2.mean) ** 2).sum())
    trace_term = float(np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
    return max(mean_term + trace_term, 0.0)


# --- feature extractor -------------------------------------------------------

class PoseAutoencoder(nn.Module):
    """Convolutional autoencoder over (N, D) pose clips; latent width 128.

    For the canonical 34x126 clips the layer walk is: conv 126->32 (k3),
    32->64 (k3), 64->64 (k4 s2), 64->32 (k3), then FC 384->256->128->128;
    the decoder mirrors it back through transposed convs to 34x126.
    """

    LATENT = 128

    def __init__(self, frames: int, pose_dim: int, rng, dtype=np.float64):
        super().__init__()
        self.frames = frames
        self.pose_dim = pose_dim
        t4 = ((frames - 4) - 4) // 2 + 1 - 2          # after the four conv layers
        if t4 < 1:
            raise TooShort(f"{frames} frames is too short for the encoder stack")
        self.t4 = t4
        self.enc1 = nn.Conv1d(pose_dim, 32, 3, rng, dtype=dtype)
        self.ebn1 = nn.BatchNorm(32, rng, dtype=dtype)
        self.enc2 = nn.Conv1d(32, 64, 3, rng, dtype=dtype)
        self.ebn2 = nn.BatchNorm(64, rng, dtype=dtype)
        self.enc3 = nn.Conv1d(64, 64, 4, rng, stride=2, dtype=dtype)
        self.ebn3 = nn.BatchNorm(64, rng, dtype=dtype)
        self.enc4 = nn.Conv1d(64, 32, 3, rng, dtype=dtype)
        self.fc1 = nn.Linear(32 * t4, 256, rng, dtype=dtype)
        self.fbn1 = nn.BatchNorm(256, rng, dtype=dtype, mode="feature")
        self.fc2 = nn.Linear(256, 128, rng, dtype=dtype)
        self.fbn2 = nn.BatchNorm(128, rng, dtype=dtype, mode="feature")
        self.fc3 = nn.Linear(128, self.LATENT, rng, dtype=dtype)
        self.dfc1 = nn.Linear(self.LATENT, 64, rng, dtype=dtype)
        self.dbn1 = nn.BatchNorm(64, rng, dtype=dtype, mode="feature")
        self.dfc2 = nn.Linear(64, 4 * frames, rng, dtype=dtype)
        self.dec1 = nn.ConvTranspose1d(4, 32, 3, rng, dtype=dtype)
        self.dbn2 = nn.BatchNorm(32, rng, dtype=dtype)
        self.dec2 = nn.ConvTranspose1d(32, 32, 3, rng, dtype=dtype)
        self.dbn3 = nn.BatchNorm(32, rng, dtype=dtype)
        self.dec3 = nn.Conv1d(32, 32, 3, rng, dtype=dtype)
        self.dec4 = nn.Conv1d(32, pose_dim, 3, rng, dtype=dtype)

    def encode_t(self, poses: Tensor, training=False) -> Tensor:
        b = poses.shape[0]
        x = ad.transpose(poses, (0, 2, 1))
        x = ad.leaky_relu(self.ebn1(self.enc1(x), training=training), 0.2)
        x = ad.leaky_relu(self.ebn2(self.enc2(x), training=training), 0.2)
        x = ad.leaky_relu(self.ebn3(self.enc3(x), training=training), 0.2)
        x = self.enc4(x)
        x = ad.reshape(x, (b, 32 * self.t4))
        x = ad.leaky_relu(self.fbn1(self.fc1(x), training=training), 0.2)
        x = ad.leaky_relu(self.fbn2(self.fc2(x), training=training), 0.2)
        return self.fc3(x)

    def decode_t(self, latent: Tensor, training=False) -> Tensor:
        b = latent.shape[0]
        x = ad.leaky_relu(self.dbn1(self.dfc1(latent), training=training), 0.2)
        x = ad.reshape(self.dfc2(x), (b, 4, self.frames))
        x = ad.leaky_relu(self.dbn2(self.dec1(x), training=training), 0.2)
        x = ad.leaky_relu(self.dbn3(self.dec2(x), training=training), 0.2)
        x = self.dec3(x)
        x = self.dec4(x)
        return ad.transpose(x, (0, 2, 1))

    def encode(self, poses: np.ndarray) -> np.ndarray:
        """Latents for (S, N, D) clips, without recording gradients."""
        poses = np.asarray(poses)
        if poses.ndim == 2:
            poses = poses[None]
        dt = self.fc3.w.data.dtype
        return self.encode_t(Tensor(poses.astype(dt))).data


def train_feature_extractor(poses: np.ndarray, rng=None, epochs=40, batch=64,
                            lr=1e-3, dtype=np.float64) -> PoseAutoencoder:
    """Fit the autoencoder on reconstruction MSE and return it."""
    poses = np.asarray(poses, dtype=dtype)
    s, n_frames, d = poses.shape
    rng = rng or np.random.default_rng(0)
    auto = PoseAutoencoder(n_frames, d, rng, dtype=dtype)
    params = auto.parameters()
    opt = ad.AdamState.for_params(params)
    for epoch in range(epochs):
        order = rng.permutation(s)
        for start in range(0, s, batch):
            chunk = poses[order[start:start + batch]]
            x = Tensor(chunk)
            with ad.Tape() as tape:
                recon = auto.decode_t(auto.encode_t(x, training=True), training=True)
                loss = ad.mean(ad.square(ad.sub(recon, x)))
            if not np.isfinite(loss.data):
                raise Divergence(f"autoencoder loss became {loss.data} at epoch {epoch}")
            grads = ad.backward(tape, loss, leaves=params)
            ad.adam_step(params, [grads[p] for p in params], opt, lr)
    return auto


def reconstruction_error(auto: PoseAutoencoder, poses: np.ndarray) -> float:
    dt = auto.fc3.w.data.dtype
    x = Tensor(np.asarray(poses, dtype=dt))
    recon = auto.decode_t(auto.encode_t(x))
    return float(np.mean((recon.data - x.data) ** 2))


def fgd(real: np.ndarray, generated: np.ndarray, encoder: PoseAutoencoder) -> float:
    """Frechet distance between latent Gaussians of real vs generated clips."""
    if len(real) == 0 or len(generated) == 0:
        raise InsufficientSamples("both corpora must be nonempty")
    g_real = fit_gaussian(encoder.encode(np.asarray(real)))
    g_gen = fit_gaussian(encoder.encode(np.asarray(generated)))
    return frechet_distance(g_real, g_gen)


def diversity(generated: np.ndarray, encoder: PoseAutoencoder,
              pairs: int = 500, seed: int = 0) -> float:
    """Mean latent distance over seeded random clip pairs (with
    replacement; same-clip pairs are redrawn)."""
    clips = np.asarray(generated)
    if len(clips) < 2:
        raise TooFewClips("diversity needs at least 2 clips")
    latents = encoder.encode(clips)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(pairs):
        i = j = 0
        while i == j:
            i, j = rng.integers(len(clips)), rng.integers(len(clips))
        total += float(np.linalg.norm(latents[i] - latents[j]))
    return total / pairs
