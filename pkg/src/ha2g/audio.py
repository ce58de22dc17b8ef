"""WAV decoding, resampling, and the STFT/mel pipeline.

The mel convention is fixed: Hann window, magnitude-squared STFT with no
padding, triangular filterbank over 0..sr/2.  Frame count is therefore
exactly floor((samples - fft_size) / hop) + 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import resample_poly


class AudioError(Exception):
    pass


class UnsupportedFormat(AudioError):
    pass


class CorruptHeader(AudioError):
    pass


class TooShort(AudioError):
    pass


@dataclass
class MelSpectrogram:
    values: np.ndarray           # (bins, frames), nonnegative power
    sample_rate: int = 16000
    fft_size: int = 1024
    hop: int = 512

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0):
            raise ValueError("mel power values must be nonnegative")

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop


def mel_frame_count(samples: int, fft_size=1024, hop=512) -> int:
    return (samples - fft_size) // hop + 1


def samples_for_clip(n_frames: int, fps=15.0, sr=16000, fft_size=1024, hop=512) -> int:
    """Audio length whose unpadded mel has floor(N*(sr/fps)/hop) frames.

    Slightly longer than N/fps seconds so the final STFT window is
    complete; for 34 frames at 15 fps this is exactly 70 mel frames.
    """
    t_mel = int(n_frames * (sr / fps) // hop)
    return fft_size + (t_mel - 1) * hop


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono float64 samples at 16 kHz from a PCM16/float32 RIFF file.

    Stereo is downmixed by averaging; other sample rates go through a
    windowed-sinc polyphase resampler.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise CorruptHeader(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise CorruptHeader(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{path}: {channels} channels unsupported")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: format={audio_format} bits={bits}")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    if rate != 16000:
        g = np.gcd(16000, rate)
        samples = resample_poly(samples, 16000 // g, rate // g)
    return samples, 16000


def write_wav(path, samples: np.ndarray, sr=16000):
    """Write mono PCM16 RIFF."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as fh:
        fh.write(header + data)


@lru_cache(maxsize=8)
def mel_filterbank(bins: int, fft_size: int, sr: int) -> np.ndarray:
    """Triangular filters with unit peaks on the HTK mel scale, 0..sr/2."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_freq = fft_size // 2 + 1
    freqs = np.linspace(0, sr / 2, n_freq)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), bins + 2))
    fb = np.zeros((bins, n_freq))
    for b in range(bins):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_spectrogram(samples: np.ndarray, bins=128, sr=16000,
                    fft_size=1024, hop=512) -> MelSpectrogram:
    """Hann-windowed power STFT through the triangular mel filterbank."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < fft_size:
        raise TooShort(f"need at least {fft_size} samples, got {samples.size}")
    n_frames = mel_frame_count(samples.size, fft_size, hop)
    window = np.hanning(fft_size)
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2      # (frames, n_freq)
    mel = power @ mel_filterbank(bins, fft_size, sr).T    # (frames, bins)
    return MelSpectrogram(values=mel.T, sample_rate=sr, fft_size=fft_size, hop=hop)
