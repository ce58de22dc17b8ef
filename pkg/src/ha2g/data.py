"""Corpus formats and the synthetic desk-scale corpus generator.

Clips are stored as JSON-Lines, one record per line, with direction
vectors flattened alongside shape metadata; audio lives in WAV files
next to the corpus file.

The synthetic generator drives audio and pose from one latent beat
train: tone bursts start at the stroke pivots, and bone angles move in
trapezoidal-velocity strokes that come to rest exactly at those pivots,
so kinematic and audio beat detectors agree by construction.  Token
sequences name the per-frame stroke state, which ties text to the
high-level audio content.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .audio import samples_for_clip, write_wav
from .pose import (MotionHierarchy, PoseSequence, Skeleton, _build_hierarchy,
                   _derive_angle_pairs, _ordered_bones, ROOT,
                   default_hierarchy, default_skeleton)


class DataError(Exception):
    pass


class MalformedLine(DataError):
    def __init__(self, line_no: int, reason: str = ""):
        super().__init__(f"line {line_no}: malformed record ({reason})")
        self.line_no = line_no


class MissingField(DataError):
    def __init__(self, name: str, line_no: int | None = None):
        where = f" at line {line_no}" if line_no else ""
        super().__init__(f"missing field {name!r}{where}")
        self.name = name


class BadSpec(DataError):
    pass


@dataclass
class ClipRecord:
    clip_id: str
    fps: float
    dirvecs: np.ndarray          # (N, J-1, 3)
    audio_path: str
    tokens: np.ndarray           # (N,) int token ids
    speaker: int

    REQUIRED = ("clip_id", "fps", "dirvecs", "shape", "audio_path", "tokens", "speaker")

    @property
    def frames(self) -> int:
        return self.dirvecs.shape[0]

    def pose(self) -> PoseSequence:
        return PoseSequence(self.dirvecs, fps=self.fps)

    def to_json(self) -> str:
        return json.dumps({
            "clip_id": self.clip_id,
            "fps": self.fps,
            "dirvecs": [float(v) for v in self.dirvecs.ravel()],
            "shape": list(self.dirvecs.shape),
            "audio_path": self.audio_path,
            "tokens": [int(t) for t in self.tokens],
            "speaker": int(self.speaker),
        })

    @classmethod
    def from_json(cls, doc: dict, line_no: int | None = None) -> "ClipRecord":
        for name in cls.REQUIRED:
            if name not in doc:
                raise MissingField(name, line_no)
        vec = np.array(doc["dirvecs"], dtype=np.float64).reshape(doc["shape"])
        return cls(clip_id=doc["clip_id"], fps=float(doc["fps"]), dirvecs=vec,
                   audio_path=doc["audio_path"],
                   tokens=np.array(doc["tokens"], dtype=np.int64),
                   speaker=int(doc["speaker"]))


def save_clips(clips, path):
    with open(path, "w") as fh:
        for clip in clips:
            fh.write(clip.to_json() + "\n")


def load_clips(path) -> list[ClipRecord]:
    clips = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, str(exc)) from exc
            if not isinstance(doc, dict):
                raise MalformedLine(line_no, "record is not an object")
            clips.append(ClipRecord.from_json(doc, line_no))
    return clips


# --- synthetic corpus --------------------------------------------------------

# token ids: 0 pad, 1 oov, 2 rest frame, 3 upstroke pivot, 4 downstroke pivot
TOKEN_REST, TOKEN_UP, TOKEN_DOWN = 2, 3, 4

# burst start lands this many seconds before the pivot so the spectral-flux
# peak (which fires one hop early on sharp attacks) reports the pivot time
_BURST_LEAD = 0.0


@dataclass
class CorpusSpec:
    clips: int = 500
    frames: int = 34
    joints: int = 43
    speakers: int = 4
    beat_rate: float = 2.0       # strokes per second
    fps: float = 15.0
    sample_rate: int = 16000
    fft_size: int = 1024
    hop: int = 512
    amplitudes: tuple = ()       # per-speaker motion scale; default ramp

    def __post_init__(self):
        if self.clips < 1 or self.frames < 8 or self.speakers < 1:
            raise BadSpec("need clips >= 1, frames >= 8, speakers >= 1")
        if self.joints < 4:
            raise BadSpec("need at least 4 joints")
        if not (0 < self.beat_rate <= self.fps / 3):
            raise BadSpec("beat_rate must be in (0, fps/3]")
        if not self.amplitudes:
            self.amplitudes = tuple(0.6 + 0.25 * i for i in range(self.speakers))
        elif len(self.amplitudes) != self.speakers:
            raise BadSpec("amplitudes must list one scale per speaker")


def chain_skeleton(joints: int) -> tuple[Skeleton, MotionHierarchy]:
    """Simple chain fallback for non-43-joint corpora."""
    parents = [ROOT] + list(range(joints - 1))
    sizes = sorted({max(2, round(joints * (h + 1) / 6)) for h in range(6)})
    levels = []
    prev = 0
    for s in sizes:
        levels.append(list(range(prev, s)))
        prev = s
    bones = _ordered_bones(parents, levels)
    skel = Skeleton(joints, tuple(parents), tuple(bones),
                    tuple(_derive_angle_pairs(bones)))
    return skel, _build_hierarchy(skel, levels)


def corpus_skeleton(joints: int) -> tuple[Skeleton, MotionHierarchy]:
    if joints == 43:
        skel = default_skeleton()
        return skel, default_hierarchy(skel)
    return chain_skeleton(joints)


def _joint_geometry(skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """(depth, side) per joint.

    Sides propagate down subtrees (first branch +1, next -1, ...), which
    keeps in-chain angle differences far from the 180-degree wrap even
    under large swings.
    """
    j = skeleton.joint_count
    depth = np.zeros(j)
    side = np.zeros(j)
    branch_count: dict[int, int] = {}
    order = [c for _, c in skeleton.bone_chain]
    for child in order:
        parent = skeleton.parent_index[child]
        depth[child] = depth[parent] + 1
        if side[parent] != 0:
            side[child] = side[parent]
        else:
            k = branch_count.get(parent, 0)
            branch_count[parent] = k + 1
            side[child] = 1.0 if k % 2 == 0 else -1.0
    return depth, side


def _rest_polar_angles(skeleton: Skeleton, rng) -> np.ndarray:
    """Rest in-plane polar angle per bone, radians.

    Rest angles zigzag along each chain (alternating with bone depth) so
    every chained angle pair has a wide included angle that never crosses
    zero under the stroke swings (see _bone_motion_coeffs: the zigzags
    are phase-aligned).
    """
    depth, side = _joint_geometry(skeleton)
    alphas = np.zeros(skeleton.bone_count)
    for b, (p, c) in enumerate(skeleton.bone_chain):
        phase = depth[c] % 2
        base = side[c] * (0.65 + 1.1 * phase) if depth[c] > 1 else 0.0
        alphas[b] = base + 0.04 * rng.standard_normal()
    return alphas


def _bone_motion_coeffs(skeleton: Skeleton) -> np.ndarray:
    """Signed swing strength per bone; the head is still.

    Adjacent bones swing in anti-phase (sign alternates with depth), so
    the included angles between chained bones carry the full stroke
    amplitude: there is no common-mode motion for a regressor to fit
    while washing out the angle dynamics the beat metric measures.
    """
    depth, side = _joint_geometry(skeleton)
    coeffs = np.zeros(skeleton.bone_count)
    for b, (p, c) in enumerate(skeleton.bone_chain):
        if depth[c] < 1:
            continue
        if depth[c] == 1:
            coeffs[b] = 0.08  # gentle torso sway, under every rest offset
            continue
        sign = 1.0 if depth[c] % 2 else -1.0
        coeffs[b] = sign * 0.32 * (1.0 if side[c] >= 0 else 0.95)
    if skeleton.joint_count == 43:
        # head bones stay still: exercises the zero-motion angle paths
        head = {38, 39, 40, 41, 42}
        for b, (p, c) in enumerate(skeleton.bone_chain):
            if p in head or c in head:
                coeffs[b] = 0.0
    return coeffs


def _beat_frames(spec: CorpusSpec, rng) -> np.ndarray:
    """Interior pivot frames spaced ~fps/beat_rate apart with jitter."""
    step = spec.fps / spec.beat_rate
    frames = []
    t = 2.0 + rng.uniform(0.0, min(step - 1.0, 3.0))
    while t < spec.frames - 3:
        frames.append(int(round(t)))
        t += step + rng.uniform(-1.0, 1.0)
    if not frames:
        frames = [spec.frames // 2]
    return np.unique(np.asarray(frames, dtype=int))


def _stroke_angle_tracks(n_frames: int, pivots: np.ndarray,
                         classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(base, detail) integrals of a trapezoidal speed profile resting at
    pivot+0.5.

    Direction alternates per stroke so the angle swings back and forth,
    and the angle-change rate dips to ~0 exactly at the pivot's rate
    index.  The detail track additionally scales each stroke by its
    class, so fine-grained motion depends on audio content, not just
    beat timing.
    """
    times = np.asarray(pivots, dtype=np.float64) + 0.5
    knots = np.concatenate([[-1.0], times, [n_frames + 1.0]])
    seg_classes = [classes[0], *classes] if len(classes) else [0]
    # dense integration grid: 8 substeps per frame
    sub = 8
    grid = np.arange(n_frames * sub + 1) / sub
    speed = np.zeros_like(grid)
    gain = np.ones_like(grid)
    direction = 1.0
    for i, (a, b) in enumerate(zip(knots[:-1], knots[1:])):
        inside = (grid >= a) & (grid < b)
        tau = np.minimum(grid[inside] - a, b - grid[inside])
        speed[inside] = direction * np.clip(tau, 0.0, 1.0)
        gain[inside] = 1.15 if seg_classes[min(i, len(seg_classes) - 1)] else 0.5
        direction = -direction

    def integrate(signal):
        return np.concatenate(
            [[0.0], np.cumsum((signal[1:] + signal[:-1]) * 0.5 / sub)])[::sub][:n_frames]

    base = integrate(speed)
    detail = integrate(speed * gain)
    scale = max(np.abs(base).max(), 1e-9)
    return base / scale, detail / scale


def _synth_audio(spec: CorpusSpec, pivots: np.ndarray, classes: np.ndarray,
                 speaker: int, rng) -> np.ndarray:
    n_samples = samples_for_clip(spec.frames, spec.fps, spec.sample_rate,
                                 spec.fft_size, spec.hop)
    t = np.arange(n_samples) / spec.sample_rate
    base_freq = 160.0 + 40.0 * speaker
    audio = 0.02 * np.sin(2 * np.pi * base_freq * t)
    audio += 0.0008 * rng.standard_normal(n_samples)
    for pivot, cls in zip(pivots, classes):
        start_s = (pivot + 0.5) / spec.fps - _BURST_LEAD
        s0 = int(round(start_s * spec.sample_rate))
        if s0 < 0 or s0 >= n_samples:
            continue
        dur = int(0.09 * spec.sample_rate)
        seg = np.arange(min(dur, n_samples - s0))
        freq = 2100.0 if cls else 1000.0
        env = np.exp(-seg / (0.03 * spec.sample_rate))
        audio[s0:s0 + len(seg)] += 0.55 * env * np.sin(2 * np.pi * freq * seg / spec.sample_rate)
    return np.clip(audio, -1.0, 1.0)


def synth_clip(spec: CorpusSpec, skeleton: Skeleton, index: int, seed: int):
    """One deterministic clip: (dirvecs, tokens, speaker, audio samples)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    speaker = int(rng.integers(spec.speakers))
    amp = spec.amplitudes[speaker]
    pivots = _beat_frames(spec, rng)
    classes = rng.integers(0, 2, size=len(pivots))
    base, detail = _stroke_angle_tracks(spec.frames, pivots, classes)
    rest = _rest_polar_angles(skeleton, rng)
    rest += 0.05 * (speaker - (spec.speakers - 1) / 2.0)   # per-speaker posture
    coeffs = _bone_motion_coeffs(skeleton)
    depth, _ = _joint_geometry(skeleton)
    fine = np.array([depth[c] >= 5 for _, c in skeleton.bone_chain])

    # smooth low-amplitude wobble keeps every moving angle non-degenerate;
    # still bones stay exactly still so their angles drop out of the
    # MAAC-normalised rate (zero-MAAC exclusion)
    wob_phase = rng.uniform(0, 2 * np.pi, size=skeleton.bone_count)
    wob_freq = rng.uniform(0.2, 0.5, size=skeleton.bone_count)
    frames_t = np.arange(spec.frames)[:, None]
    wobble = 0.004 * amp * (coeffs > 0)[None, :] * np.sin(
        2 * np.pi * wob_freq * frames_t / spec.fps + wob_phase)

    track = np.where(fine[None, :], detail[:, None], base[:, None])
    alphas = rest[None, :] + amp * coeffs[None, :] * track + wobble
    vectors = np.stack([np.sin(alphas), np.zeros_like(alphas), np.cos(alphas)], axis=-1)

    tokens = np.full(spec.frames, TOKEN_REST, dtype=np.int64)
    for pivot, cls in zip(pivots, classes):
        tokens[pivot] = TOKEN_UP if cls else TOKEN_DOWN
    audio = _synth_audio(spec, pivots, classes, speaker, rng)
    return vectors, tokens, speaker, audio, pivots


def synth_corpus(spec: CorpusSpec, seed: int, out_dir) -> str:
    """Write WAVs plus clips.jsonl under out_dir; returns the jsonl path."""
    os.makedirs(out_dir, exist_ok=True)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    skeleton, _ = corpus_skeleton(spec.joints)
    clips = []
    for i in range(spec.clips):
        vectors, tokens, speaker, audio, _ = synth_clip(spec, skeleton, i, seed)
        clip_id = f"clip{i:05d}"
        wav_path = os.path.join("wav", f"{clip_id}.wav")
        write_wav(os.path.join(out_dir, wav_path), audio, spec.sample_rate)
        clips.append(ClipRecord(clip_id=clip_id, fps=spec.fps, dirvecs=vectors,
                                audio_path=wav_path, tokens=tokens, speaker=speaker))
    path = os.path.join(out_dir, "clips.jsonl")
    save_clips(clips, path)
    return path
