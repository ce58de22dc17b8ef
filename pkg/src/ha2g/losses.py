"""Training objectives: hierarchical Huber, multi-level contrastive,
adversarial pair, style diverging, KL divergence, physical angle
constraint, and the weighted total.

Everything is expressed through the autodiff engine so each loss can be
verified against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class LossError(Exception):
    pass


class DimMismatch(LossError):
    pass


class ZeroVector(LossError):
    pass


class IdenticalIdentities(LossError):
    pass


class DegenerateVariance(LossError):
    pass


class NonFinite(LossError):
    pass


@dataclass
class LossWeights:
    lambda_h: float = 200.0
    lambda_p: float = 0.1
    lambda_s: float = 0.05
    lambda_k: float = 0.1
    lambda_c: float = 0.1
    tau: float = 0.07
    epsilon_clip: float = 1000.0
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.tau <= 0 or self.epsilon_clip <= 0 or self.huber_delta <= 0:
            raise ValueError("tau, epsilon_clip and huber_delta must be positive")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def huber_hierarchical(preds, truths, delta=1.0) -> Tensor:
    """Mean over levels of the mean elementwise Huber at each level."""
    if len(preds) != len(truths):
        raise DimMismatch(f"{len(preds)} predicted levels vs {len(truths)} targets")
    terms = []
    for p, t in zip(preds, truths):
        p, t = _as_tensor(p), _as_tensor(t)
        if p.shape != t.shape:
            raise DimMismatch(f"level shape {p.shape} vs {t.shape}")
        terms.append(ad.mean(ad.huber(ad.sub(p, t), delta=delta)))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total * (1.0 / len(terms))


def contrastive_multilevel(f_t, level_feats, positive_index, tau=0.07) -> Tensor:
    """InfoNCE-style objective over one positive and a multi-level pool.

    f_t: (d,) text feature.  level_feats: (3, K, d), the low/mid/high
    features of K samples.  The positive is the high-level feature of
    sample ``positive_index``; the denominator sums every sample at every
    level, per the printed objective.
    """
    f_t = _as_tensor(f_t)
    feats = _as_tensor(level_feats)
    if feats.shape[0] != 3 or feats.shape[-1] != f_t.shape[-1]:
        raise DimMismatch(f"pool shape {feats.shape} vs text {f_t.shape}")
    norms = np.linalg.norm(feats.data, axis=-1)
    if np.linalg.norm(f_t.data) < 1e-12 or np.any(norms < 1e-12):
        raise ZeroVector("cosine similarity undefined for zero vector")
    sims = ad.cosine_similarity(feats, f_t)          # (3, K)
    scaled = sims * (1.0 / tau)
    shift = float(scaled.data.max())                 # detached; exact for logsumexp
    lse = ad.log(ad.sum_(ad.exp(scaled - shift))) + shift
    pos = scaled[(2, int(positive_index))]
    return ad.sub(lse, pos)


def _unit_rows(x: Tensor) -> Tensor:
    sq = ad.sum_(ad.square(x), axis=-1, keepdims=True)
    return ad.div(x, ad.sqrt(sq))


def contrastive_multilevel_batch(f_t, low, mid, high, tau=0.07) -> Tensor:
    """Per-frame, within-batch form: every clip's aligned frame is one
    sample; the positive is the clip's own high-level feature.

    f_t/low/mid/high: (B, N, d).  Returns the mean over clips and frames.
    Cosines are evaluated as dot products of unit rows via batched matmul.
    """
    f_t, low, mid, high = map(_as_tensor, (f_t, low, mid, high))
    b, n, d = f_t.shape
    for feats in (f_t, low, mid, high):
        if np.any(np.linalg.norm(feats.data, axis=-1) < 1e-12):
            raise ZeroVector("cosine similarity undefined for zero vector")
    text_u = _unit_rows(f_t)
    high_u = _unit_rows(high)
    text_t = ad.transpose(text_u, (1, 0, 2))                  # (N, B, d)
    exp_sum = None
    for feats, unit in ((low, None), (mid, None), (high, high_u)):
        feats_u = unit if unit is not None else _unit_rows(feats)
        sims = ad.bmm(text_t, ad.transpose(feats_u, (1, 2, 0)))  # (N, B, B')
        e = ad.exp(sims * (1.0 / tau))
        s = ad.sum_(e, axis=2)                                   # (N, B)
        exp_sum = s if exp_sum is None else ad.add(exp_sum, s)
    pos = ad.sum_(ad.mul(text_u, high_u), axis=-1) * (1.0 / tau)  # (B, N)
    return ad.sub(ad.mean(ad.log(exp_sum)), ad.mean(pos))


def generator_gan_loss(d_fake) -> Tensor:
    """Non-saturating generator objective: -E[log D(fake)]."""
    fake = ad.clip(_as_tensor(d_fake), 1e-7, 1.0 - 1e-7)
    return ad.neg(ad.mean(ad.log(fake)))


def gan_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss); non-saturating generator form."""
    d_real, d_fake = _as_tensor(d_real), _as_tensor(d_fake)
    lo, hi = 1e-7, 1.0 - 1e-7
    real = ad.clip(d_real, lo, hi)
    fake = ad.clip(d_fake, lo, hi)
    disc = ad.sub(ad.neg(ad.mean(ad.log(real))), ad.mean(ad.log(1.0 - fake)))
    return generator_gan_loss(d_fake), disc


def style_diverging(pred1, pred2, id1, id2, epsilon_clip=1000.0, delta=1.0) -> Tensor:
    """Push outputs apart for different identities, ratio clipped at epsilon.

    pred1/pred2: (B, ...) generated poses; id1/id2: (B, d_id).  The Huber
    distance is the per-sequence mean; pairs are reduced by expectation.
    """
    pred1, pred2, id1, id2 = map(_as_tensor, (pred1, pred2, id1, id2))
    if pred1.shape != pred2.shape or id1.shape != id2.shape:
        raise DimMismatch("prediction/identity shape mismatch")
    batched = id1.data.ndim > 1
    l1 = np.abs(id1.data - id2.data).sum(axis=-1 if batched else None)
    if np.any(l1 <= 1e-8):
        raise IdenticalIdentities("identity pair differs by <= 1e-8 in L1")
    if batched:
        dist = ad.mean(ad.huber(ad.sub(pred1, pred2), delta=delta),
                       axis=tuple(range(1, pred1.data.ndim)))
        denom = ad.sum_(ad.abs_(ad.sub(id1, id2)), axis=tuple(range(1, id1.data.ndim)))
    else:
        dist = ad.mean(ad.huber(ad.sub(pred1, pred2), delta=delta))
        denom = ad.sum_(ad.abs_(ad.sub(id1, id2)))
    ratio = ad.clip(ad.div(dist, denom), None, epsilon_clip)
    return ad.neg(ad.mean(ratio))


def kld_loss(mu, logvar) -> Tensor:
    """KL(q || N(0, I)); summed over dims, averaged over any batch axis."""
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise DimMismatch(f"mu {mu.shape} vs logvar {logvar.shape}")
    per = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.add(logvar, 1.0))
    if mu.data.ndim <= 1:
        return ad.sum_(per) * 0.5
    return ad.mean(ad.sum_(per, axis=tuple(range(1, mu.data.ndim)))) * 0.5


def physical_loss(angles, profile_means, profile_vars) -> Tensor:
    """Negative Gaussian log-likelihood of included angles, per frame.

    angles: (..., A) in degrees; the profile gives each angle's mean and
    variance in degrees.  Summed over angles, averaged over frames.
    """
    angles = _as_tensor(angles)
    means = np.asarray(profile_means, dtype=np.float64)
    variances = np.asarray(profile_vars, dtype=np.float64)
    if np.any(variances <= 0):
        raise DegenerateVariance("zero-variance angle; exclude it from the profile")
    dt = angles.data.dtype
    const = 0.5 * float(np.sum(np.log(2.0 * math.pi * variances)))
    dev = ad.sub(angles, Tensor(means.astype(dt)))
    quad = ad.div(ad.square(dev), Tensor((2.0 * variances).astype(dt)))
    n_frames = max(angles.data.size // angles.data.shape[-1], 1)
    return ad.sum_(quad) * (1.0 / n_frames) + const


def total_loss(gan, huber, phy, style, kld, multi, weights: LossWeights) -> Tensor:
    components = [gan, huber, phy, style, kld, multi]
    for c in components:
        if not np.all(np.isfinite(_as_tensor(c).data)):
            raise NonFinite("non-finite loss component")
    gan, huber, phy, style, kld, multi = map(_as_tensor, components)
    out = ad.add(gan, huber * weights.lambda_h)
    out = ad.add(out, phy * weights.lambda_p)
    out = ad.add(out, style * weights.lambda_s)
    out = ad.add(out, kld * weights.lambda_k)
    return ad.add(out, multi * weights.lambda_c)
