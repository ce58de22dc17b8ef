"""Command-line surface: gen-data, train, eval, gradcheck, beats,
angle-stats, infer.

Exit codes: 0 success, 1 runtime error, 2 usage error.  --config (or the
HA2G_CONFIG environment variable) names a key=value file; flags override.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .config import ConfigError, RunConfig, load_config


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file (or HA2G_CONFIG)")
    p.add_argument("--seed", type=int, default=None, help="master RNG seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ha2g",
                                 description="hierarchical audio-to-gesture toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a corpus")
    _add_common(p)
    p.add_argument("--clips", type=int, default=500)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--joints", type=int, default=None)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--beat-rate", type=float, default=2.0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train generator and discriminator")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="clips.jsonl path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--mel-bins", type=int, default=None, dest="mel_bins")
    p.add_argument("--lr", type=float, default=None)
    for lam in ("lambda_h", "lambda_p", "lambda_s", "lambda_k", "lambda_c"):
        p.add_argument(f"--{lam.replace('_', '-')}", type=float, default=None,
                       dest=lam)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="generate for a corpus and score metrics")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--bc-csv", help="per-clip BC CSV path")
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--mel-bins", type=int, default=None, dest="mel_bins")
    p.add_argument("--bc-threshold", type=float, default=None, dest="bc_threshold")
    p.add_argument("--sigma", type=float, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("beats", help="dump beats and BC for one clip")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--clip", help="clip id (default: first clip)")
    p.add_argument("--bc-threshold", type=float, default=None, dest="bc_threshold")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--sweep", help="CSV path for BC vs threshold 0.01..0.30")
    p.add_argument("--mel-bins", type=int, default=None, dest="mel_bins")

    p = sub.add_parser("angle-stats", help="angle mean/variance profile of a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="JSON output path (default: stdout)")

    p = sub.add_parser("infer", help="generate gestures for a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="generated clips.jsonl path")
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--mel-bins", type=int, default=None, dest="mel_bins")
    return ap


def _config_from_args(args, keys=()) -> RunConfig:
    overrides = {}
    for key in ("seed", "threads", *keys):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    from .data import BadSpec, CorpusSpec, synth_corpus
    cfg = _config_from_args(args, ("frames", "joints"))
    try:
        spec = CorpusSpec(clips=args.clips, frames=cfg.frames, joints=cfg.joints,
                          speakers=args.speakers, beat_rate=args.beat_rate,
                          fps=cfg.fps, sample_rate=cfg.sample_rate,
                          fft_size=cfg.fft_size, hop=cfg.hop)
    except BadSpec as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    path = synth_corpus(spec, seed=cfg.seed, out_dir=args.out)
    print(f"wrote {args.clips} clips to {path}")
    return 0


def cmd_train(args) -> int:
    from .data import load_clips
    from .train import train
    keys = ("epochs", "batch", "hidden", "levels", "mel_bins", "lr",
            "lambda_h", "lambda_p", "lambda_s", "lambda_k", "lambda_c")
    cfg = _config_from_args(args, keys)
    clips = load_clips(args.corpus)
    base_dir = os.path.dirname(os.path.abspath(args.corpus))

    def log(epoch, record):
        if not args.quiet:
            print(f"epoch {epoch + 1}/{cfg.epochs} total={record['total']:.4f} "
                  f"huber={record['huber']:.4f}")
    train(clips, cfg, args.out, base_dir, resume=args.resume, log_fn=log)
    print(f"checkpoint: {os.path.join(args.out, 'ckpt_final.hag')}")
    return 0


def _load_eval_stack(args, cfg):
    from .data import corpus_skeleton, load_clips
    from .train import (align_config_to_corpus, hierarchy_for_depth,
                        load_train_checkpoint, prepare_dataset)
    clips = load_clips(args.corpus)
    align_config_to_corpus(cfg, clips)
    base_dir = os.path.dirname(os.path.abspath(args.corpus))
    skeleton, full_h = corpus_skeleton(cfg.joints)
    hierarchy = hierarchy_for_depth(skeleton, full_h, cfg.levels)
    state = load_train_checkpoint(args.checkpoint, cfg, hierarchy)
    dataset = prepare_dataset(clips, cfg, skeleton, hierarchy, base_dir,
                              threads=cfg.threads)
    return clips, skeleton, hierarchy, state, dataset


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_bc_csv
    cfg = _config_from_args(args, ("levels", "hidden", "mel_bins",
                                   "bc_threshold", "sigma"))
    _, skeleton, _, state, dataset = _load_eval_stack(args, cfg)
    report = evaluate(state.gen, dataset, skeleton, cfg, seed=cfg.seed,
                      pairs=args.pairs)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    if args.bc_csv:
        write_bc_csv(args.bc_csv, report.per_clip_bc)
    print(f"fgd={report.fgd:.4f} bc={report.bc:.4f} diversity={report.diversity:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    cfg = _config_from_args(args)
    rows, worst = run_gradcheck(seed=cfg.seed, eps=args.eps)
    width = max(len(r[0]) for r in rows)
    print(f"{'check'.ljust(width)}  max_rel_err  worst_tensor")
    failures = 0
    for name, err, tensor_name in rows:
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name.ljust(width)}  {err:.3e}    {tensor_name} [{status}]")
        failures += err >= args.tolerance
    print(f"worst overall: {worst:.3e} (tolerance {args.tolerance:g})")
    return 1 if failures else 0


def cmd_beats(args) -> int:
    from .audio import mel_spectrogram, read_wav
    from .data import corpus_skeleton, load_clips
    from . import metrics as M
    from .pose import PoseSequence, bone_angles
    cfg = _config_from_args(args, ("bc_threshold", "sigma", "mel_bins"))
    clips = load_clips(args.corpus)
    base_dir = os.path.dirname(os.path.abspath(args.corpus))
    skeleton, _ = corpus_skeleton(cfg.joints)
    angles = [bone_angles(PoseSequence(c.dirvecs, fps=c.fps), skeleton) for c in clips]
    profile = M.maac(angles)
    target = next((i for i, c in enumerate(clips) if c.clip_id == args.clip), 0) \
        if args.clip else 0
    clip, ang = clips[target], angles[target]
    rate = M.angle_change_rate(ang, profile)
    samples, _ = read_wav(os.path.join(base_dir, clip.audio_path))
    mel = mel_spectrogram(samples, bins=cfg.mel_bins, sr=cfg.sample_rate,
                          fft_size=cfg.fft_size, hop=cfg.hop)
    env = M.onset_strength(mel)
    audio_beats = M.detect_audio_beats(env, mel.frames_per_second)
    if len(audio_beats) == 0:
        print("error: no audio beats detected", file=sys.stderr)
        return 1
    motion_beats = M.detect_motion_beats(rate, cfg.bc_threshold, clip.fps)
    print(f"clip {clip.clip_id}")
    print("motion beats (s):", " ".join(f"{t:.3f}" for t in motion_beats.times))
    print("audio beats (s):", " ".join(f"{t:.3f}" for t in audio_beats.times))
    if len(motion_beats):
        bc = M.beat_consistency(motion_beats, audio_beats, cfg.sigma)
        print(f"bc={bc:.5f} (threshold={cfg.bc_threshold}, sigma={cfg.sigma})")
    if args.sweep:
        with open(args.sweep, "w") as fh:
            fh.write("threshold,bc,motion_beats\n")
            for i in range(1, 31):
                thr = i / 100.0
                beats = M.detect_motion_beats(rate, thr, clip.fps)
                value = (M.beat_consistency(beats, audio_beats, cfg.sigma)
                         if len(beats) else 0.0)
                fh.write(f"{thr:.2f},{value:.6f},{len(beats)}\n")
        print(f"sweep written to {args.sweep}")
    return 0


def cmd_angle_stats(args) -> int:
    from .data import corpus_skeleton, load_clips
    from .pose import PoseSequence, angle_statistics
    cfg = _config_from_args(args)
    clips = load_clips(args.corpus)
    skeleton, _ = corpus_skeleton(cfg.joints)
    profile = angle_statistics([PoseSequence(c.dirvecs, fps=c.fps) for c in clips],
                               skeleton)
    doc = {"angle_pairs": [list(p) for p in skeleton.angle_pairs],
           "means_deg": profile.means.tolist(),
           "variances_deg2": profile.variances.tolist()}
    text = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_infer(args) -> int:
    from .data import ClipRecord, save_clips
    from .evaluate import generate_corpus
    cfg = _config_from_args(args, ("levels", "hidden", "mel_bins"))
    clips, skeleton, _, state, dataset = _load_eval_stack(args, cfg)
    generated = generate_corpus(state.gen, dataset, cfg, seed=cfg.seed)
    out_clips = []
    for clip, vec in zip(clips, generated):
        out_clips.append(ClipRecord(
            clip_id=clip.clip_id, fps=clip.fps,
            dirvecs=vec.reshape(vec.shape[0], -1, 3),
            audio_path=clip.audio_path, tokens=clip.tokens, speaker=clip.speaker))
    save_clips(out_clips, args.out)
    print(f"wrote {len(out_clips)} generated clips to {args.out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "beats": cmd_beats,
    "angle-stats": cmd_angle_stats,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures exit 1 with a message
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
