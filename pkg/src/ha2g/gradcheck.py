"""Finite-difference verification of every training objective and of
sampled network parameters, all in fp64.

Inputs are nudged away from the Huber/clip kinks so central differences
are valid; the relative error uses max(1, |fd|) as denominator.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .config import RunConfig
from .data import corpus_skeleton
from .model import angle_selection, blend_features
from .train import build_models, hierarchy_for_depth


def param_gradient_check(loss_builder, param: Tensor, eps=1e-5,
                         max_components=4, rng=None) -> float:
    """Analytic vs central-difference gradient for one parameter tensor."""
    with ad.Tape() as tape:
        loss = loss_builder()
    ad.backward(tape, loss, leaves=[param])
    analytic = param.grad.ravel()
    flat = param.data.ravel()
    idx = np.arange(flat.size)
    if flat.size > max_components:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_components, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(loss_builder().data)
        flat[i] = orig - eps
        fm = float(loss_builder().data)
        flat[i] = orig
        fd = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst


def _check_inputs(fn, tensors: dict, eps) -> tuple[float, str]:
    """Max relative error of fn over each named input tensor."""
    worst, worst_name = 0.0, "-"
    for name, t in tensors.items():
        def f(v, name=name):
            args = dict(tensors)
            args[name] = v
            return fn(**args)
        err = ad.gradient_check(f, t, eps=eps)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def loss_checks(seed=0, eps=1e-5):
    rng = np.random.default_rng(seed)
    rows = []

    def t(shape, scale=1.0, shift=0.0):
        return Tensor(shift + scale * rng.standard_normal(shape), requires_grad=True)

    # hierarchical Huber: diffs kept away from the |x| = delta kink
    preds = [t((2, 5, d), scale=0.3) for d in (6, 9)]
    truths = [Tensor(p.data + np.clip(rng.normal(scale=0.3, size=p.shape), -0.8, 0.8))
              for p in preds]
    rows.append(("huber_hierarchical", *_check_inputs(
        lambda p0, p1: L.huber_hierarchical([p0, p1], truths, delta=1.0),
        {"p0": preds[0], "p1": preds[1]}, eps)))

    # contrastive, pool form and batched form
    pool = t((3, 4, 8), scale=1.0, shift=0.1)
    ft = t((8,), shift=0.1)
    rows.append(("contrastive_multilevel", *_check_inputs(
        lambda f_t, feats: L.contrastive_multilevel(f_t, feats, 1, tau=0.07),
        {"f_t": ft, "feats": pool}, eps)))
    batch_feats = {name: t((3, 4, 8), shift=0.1)
                   for name in ("f_t", "low", "mid", "high")}
    rows.append(("contrastive_batch", *_check_inputs(
        lambda f_t, low, mid, high: L.contrastive_multilevel_batch(
            f_t, low, mid, high, tau=0.07),
        batch_feats, eps)))

    # adversarial pair: probabilities away from the clamp bounds
    d_real = Tensor(rng.uniform(0.2, 0.8, size=6), requires_grad=True)
    d_fake = Tensor(rng.uniform(0.2, 0.8, size=6), requires_grad=True)
    rows.append(("gan_generator", *_check_inputs(
        lambda fake: L.gan_losses(d_real, fake)[0], {"fake": d_fake}, eps)))
    rows.append(("gan_discriminator", *_check_inputs(
        lambda real, fake: L.gan_losses(real, fake)[1],
        {"real": d_real, "fake": d_fake}, eps)))

    # style diverging: ratio far below the clip, identities far apart
    p1, p2 = t((3, 4, 6), scale=0.2), t((3, 4, 6), scale=0.2)
    i1 = Tensor(rng.standard_normal((3, 5)) + 2.0, requires_grad=True)
    i2 = Tensor(rng.standard_normal((3, 5)) - 2.0, requires_grad=True)
    rows.append(("style_diverging", *_check_inputs(
        lambda a, b, ia, ib: L.style_diverging(a, b, ia, ib, epsilon_clip=1000.0),
        {"a": p1, "b": p2, "ia": i1, "ib": i2}, eps)))

    # KLD
    mu, logvar = t((4, 7), scale=0.5), t((4, 7), scale=0.3)
    rows.append(("kld", *_check_inputs(
        lambda m, lv: L.kld_loss(m, lv), {"m": mu, "lv": logvar}, eps)))

    # physical constraint
    means = rng.uniform(40, 140, size=9)
    variances = rng.uniform(4, 12, size=9)
    angles = Tensor(means + rng.normal(scale=2.0, size=(5, 9)), requires_grad=True)
    rows.append(("physical", *_check_inputs(
        lambda a: L.physical_loss(a, means, variances), {"a": angles}, eps)))

    # weighted total, flowing through every component
    comps = {name: t((4,), scale=0.4, shift=1.0)
             for name in ("gan", "huber", "phy", "style", "kld", "multi")}
    weights = L.LossWeights()
    rows.append(("total", *_check_inputs(
        lambda gan, huber, phy, style, kld, multi: L.total_loss(
            ad.mean(ad.square(gan)), ad.mean(ad.square(huber)),
            ad.mean(ad.square(phy)), ad.mean(ad.square(style)),
            ad.mean(ad.square(kld)), ad.mean(ad.square(multi)), weights),
        comps, eps)))
    return rows


def tiny_config() -> RunConfig:
    return RunConfig(frames=10, seed_frames=2, hidden=6, mel_bins=16,
                     audio_ch1=6, audio_ch2=8, audio_ch3=10, vocab=8,
                     embed_dim=6, text_dim=8, audio_dim=8, disc_hidden=4,
                     batch=3, dtype="f64")


def network_checks(seed=0, eps=1e-5, max_components=4):
    """Sampled parameter gradients of the generator objective and the
    discriminator objective on a small random batch."""
    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    skeleton, full_h = corpus_skeleton(43)
    hierarchy = hierarchy_for_depth(skeleton, full_h, cfg.levels)
    gen, disc = build_models(cfg, hierarchy, num_speakers=3, seed=seed)
    sel_a, sel_b = angle_selection(skeleton)
    means = np.full(sel_a.shape[1], 90.0)
    variances = np.full(sel_a.shape[1], 25.0)

    b, n = cfg.batch, cfg.frames
    t_mel = 21
    mel = Tensor(np.abs(rng.standard_normal((b, cfg.mel_bins, t_mel))))
    tokens = rng.integers(0, cfg.vocab, size=(b, n))
    speakers = rng.integers(0, 3, size=b)
    gt = [Tensor(rng.standard_normal((b, n, d)) * 0.3) for d in hierarchy.pose_dims]
    seed_poses = Tensor(gt[0].data[:, :cfg.seed_frames])
    weights = L.LossWeights(epsilon_clip=1000.0)
    eps_noise = {"e1": rng.standard_normal((b, cfg.id_dim)),
                 "e2": rng.standard_normal((b, cfg.id_dim))}

    from . import model as MO

    def gen_loss():
        feats = gen.audio(mel, n, training=False)
        f_t = gen.text(tokens)
        mu1, lv1 = gen.style.mu_table(speakers), gen.style.logvar_table(speakers)
        f_id1 = ad.add(mu1, ad.mul(ad.exp(lv1 * 0.5), Tensor(eps_noise["e1"])))
        mu2 = gen.style.mu_table(np.roll(speakers, 1))
        lv2 = gen.style.logvar_table(np.roll(speakers, 1))
        f_id2 = ad.add(mu2, ad.mul(ad.exp(lv2 * 0.5), Tensor(eps_noise["e2"])))
        c1, c2 = gen.style.coordinator(f_id1), gen.style.coordinator(f_id2)
        teacher = [g.detach() for g in gt]
        prev0 = gen.seed_prev(seed_poses, n)
        blends1 = [blend_features(c1, feats, h) for h in range(1, len(gen.dims) + 1)]
        levels1, hidden = gen.decode(blends1, prev0, teacher=teacher)
        blends2 = [blend_features(c2, feats, h) for h in range(1, len(gen.dims) + 1)]
        levels2, _ = gen.decode(blends2, prev0, teacher=teacher, reuse_hiddens=hidden)
        l_h = L.huber_hierarchical(levels1, gt, delta=1.0)
        l_g = L.generator_gan_loss(disc(levels1[-1]))
        ang = MO.pose_angles_deg(levels1[-1], sel_a, sel_b)
        l_p = L.physical_loss(ang, means, variances)
        l_s = L.style_diverging(levels1[-1], levels2[-1], f_id1, f_id2,
                                epsilon_clip=weights.epsilon_clip)
        l_k = L.kld_loss(mu1, lv1)
        l_m = L.contrastive_multilevel_batch(f_t, feats.low, feats.mid, feats.high,
                                             tau=weights.tau)
        return L.total_loss(l_g, l_h, l_p, l_s, l_k, l_m, weights)

    fake = Tensor(rng.standard_normal((b, n, hierarchy.pose_dims[-1])) * 0.3)

    def disc_loss():
        return L.gan_losses(disc(gt[-1].detach()), disc(fake))[1]

    picks = {
        "gen/audio.conv1.w": gen.audio.conv1.w,
        "gen/audio.proj2.w": gen.audio.proj2.w,
        "gen/audio.head3.w": gen.audio.head3.w,
        "gen/text.embed": gen.text.embed.table,
        "gen/text.conv2.w": gen.text.conv2.w,
        "gen/style.mu_table": gen.style.mu_table.table,
        "gen/style.logvar_table": gen.style.logvar_table.table,
        "gen/style.to_coord.w": gen.style.to_coord.w,
        "gen/dec1.gru.fwd.wx": gen.dec1.gru.fwd.wx,
        "gen/dec3.gru.bwd.wh": gen.dec3.gru.bwd.wh,
        "gen/dec6.head.w": gen.dec6.head.w,
        "gen/dec6.gru.fwd.bh": gen.dec6.gru.fwd.bh,
    }
    rng_pick = np.random.default_rng(seed + 1)
    rows = []
    for name, p in picks.items():
        err = param_gradient_check(gen_loss, p, eps=eps,
                                   max_components=max_components, rng=rng_pick)
        rows.append((name, err, name))
    for name, p in (("disc/conv1.w", disc.conv1.w),
                    ("disc/gru.fwd.wh", disc.gru.fwd.wh),
                    ("disc/fc2.w", disc.fc2.w)):
        err = param_gradient_check(disc_loss, p, eps=eps,
                                   max_components=max_components, rng=rng_pick)
        rows.append((name, err, name))
    return rows


def run_gradcheck(seed=0, eps=1e-5):
    """All loss and sampled-parameter checks; returns (rows, worst)."""
    rows = loss_checks(seed=seed, eps=eps)
    rows.extend(network_checks(seed=seed, eps=eps))
    worst = max(r[1] for r in rows)
    return rows, worst
