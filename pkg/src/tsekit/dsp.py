"""Waveform containers, STFT/IPD features, frame upsampling, SNR mixing,
and a small RIFF/WAVE PCM-16 codec.

All functions here are pure and gradient-free; spatial features feed the
networks as constant inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, EngineError, ShapeError

DEFAULT_SAMPLE_RATE = 8000
STFT_FRAME = 256   # 32 ms at 8 kHz
STFT_HOP = 128     # 16 ms
PHASE_GUARD = 1e-12
PEAK_CEIL = 0.99


@dataclass
class AudioSignal:
    """Sampled waveform(s): samples[channel, n] in [-1, 1], plus a rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ShapeError(f"AudioSignal: samples must be 1-D or 2-D, got {s.shape}")
        if self.sample_rate <= 0:
            raise EngineError(f"AudioSignal: sample_rate must be positive, got {self.sample_rate}")
        self.samples = s

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]


@dataclass
class Spectrogram:
    """Complex STFT coefficients indexed [channel, frame, bin]."""

    coeffs: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_bins(self) -> int:
        return self.coeffs.shape[2]


def _hann(frame_len: int) -> np.ndarray:
    # periodic Hann: exact weighted overlap-add for any hop <= frame_len
    n = np.arange(frame_len)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / frame_len))


def stft(x: AudioSignal, frame_len: int = STFT_FRAME, hop: int = STFT_HOP) -> Spectrogram:
    """Hann-windowed DFT per frame; T = 1 + floor((len - frame_len)/hop)."""
    if frame_len % 2:
        raise EngineError(f"stft: frame_len must be even, got {frame_len}")
    if hop > frame_len or hop < 1:
        raise EngineError(f"stft: hop {hop} must lie in [1, frame_len={frame_len}]")
    n = x.n_samples
    if n < frame_len:
        raise DataError(f"stft: signal of {n} samples shorter than frame_len {frame_len}")
    n_frames = 1 + (n - frame_len) // hop
    window = _hann(frame_len)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(frame_len)[None, :]
    frames = x.samples[:, idx] * window          # [C, T, frame_len]
    return Spectrogram(np.fft.rfft(frames, axis=-1), frame_len, hop, x.sample_rate)


def istft(spec: Spectrogram) -> AudioSignal:
    """Weighted overlap-add inverse of `stft` (exact where the window
    power sum is nonzero)."""
    window = _hann(spec.frame_len)
    frames = np.fft.irfft(spec.coeffs, n=spec.frame_len, axis=-1) * window
    n = (spec.n_frames - 1) * spec.hop + spec.frame_len
    out = np.zeros((spec.n_channels, n))
    norm = np.zeros(n)
    for t in range(spec.n_frames):
        sl = slice(t * spec.hop, t * spec.hop + spec.frame_len)
        out[:, sl] += frames[:, t, :]
        norm[sl] += window ** 2
    nz = norm > 1e-12
    out[:, nz] /= norm[nz]
    return AudioSignal(out, spec.sample_rate)


def ipd_features(spec: Spectrogram) -> np.ndarray:
    """Inter-channel phase differences as [T, 2F] rows of cos then sin.

    Phase is angle(Y1/Y2); bins where |Y2| < 1e-12 are zeroed (cos 1, sin 0).
    """
    if spec.n_channels != 2:
        raise ShapeError(f"ipd_features: need exactly 2 channels, got {spec.n_channels}")
    y1, y2 = spec.coeffs[0], spec.coeffs[1]
    phi = np.angle(y1 * np.conj(y2))
    phi[np.abs(y2) < PHASE_GUARD] = 0.0
    return np.concatenate([np.cos(phi), np.sin(phi)], axis=1)


def upsample_indices(n_in: int, n_out: int) -> np.ndarray:
    """Nearest-neighbor source index for each of n_out output frames."""
    k = np.arange(n_out)
    return np.minimum(k * n_in // n_out, n_in - 1)


def upsample_frames(feat: np.ndarray, target_frames: int) -> np.ndarray:
    """Repeat-nearest upsampling of [T_in, D] features to [target_frames, D]."""
    feat = np.asarray(feat)
    if feat.ndim != 2 or feat.shape[0] < 1:
        raise DataError(f"upsample_frames: need a nonempty [T, D] matrix, got shape {feat.shape}")
    return feat[upsample_indices(feat.shape[0], target_frames)]


def upsample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Selection matrix M [n_in, n_out] with feat.T @ M == upsampled.T."""
    m = np.zeros((n_in, n_out))
    m[upsample_indices(n_in, n_out), np.arange(n_out)] = 1.0
    return m


def _shift(x: np.ndarray, d: int) -> np.ndarray:
    if d == 0:
        return x.copy()
    out = np.zeros_like(x)
    out[d:] = x[:-d]
    return out


def mix_at_snr(s1: AudioSignal, s2: AudioSignal, snr_db: float,
               delays: tuple[int, int] | None = None):
    """Scale s2 so the s1/s2 power ratio is exactly snr_db, then sum.

    With `delays` = (d1, d2) the mixture gets a second channel where each
    source is delayed by its own integer sample count (the spatial cue);
    channel 1 is always the undelayed sum.  Returns (mixture, ref1, ref2)
    where the refs are the spatialized, scaled sources; one common peak
    normalization factor is applied to all three.
    """
    if s1.sample_rate != s2.sample_rate:
        raise DataError(f"mix_at_snr: sample rates differ ({s1.sample_rate} vs {s2.sample_rate})")
    a, b = s1.channel(0), s2.channel(0)
    if a.shape != b.shape:
        raise ShapeError(f"mix_at_snr: sources must have equal length, got "
                         f"{a.shape[0]} and {b.shape[0]}")
    p1, p2 = np.mean(a ** 2), np.mean(b ** 2)
    if p1 == 0.0 or p2 == 0.0:
        raise DataError("mix_at_snr: silent source (zero power)")
    gain = np.sqrt(p1 / (p2 * 10.0 ** (snr_db / 10.0)))
    b = gain * b

    if delays is None:
        ref1, ref2 = a[None, :], b[None, :]
    else:
        d1, d2 = delays
        ref1 = np.stack([a, _shift(a, int(d1))])
        ref2 = np.stack([b, _shift(b, int(d2))])
    mixture = ref1 + ref2

    peak = np.max(np.abs(mixture))
    if peak > PEAK_CEIL:
        factor = PEAK_CEIL / peak
        mixture, ref1, ref2 = mixture * factor, ref1 * factor, ref2 * factor

    fs = s1.sample_rate
    return AudioSignal(mixture, fs), AudioSignal(ref1, fs), AudioSignal(ref2, fs)


# ---------------------------------------------------------------------------
# RIFF/WAVE, PCM 16-bit, 1-2 channels
# ---------------------------------------------------------------------------

def wav_write(path, x: AudioSignal) -> None:
    """Write 16-bit PCM; samples are clipped to [-1, 1] first."""
    clipped = np.clip(x.samples, -1.0, 1.0)
    q = np.round(clipped * 32767.0).astype("<i2")
    interleaved = q.T.reshape(-1)  # frame-major
    n_ch = x.n_channels
    byte_rate = x.sample_rate * n_ch * 2
    data = interleaved.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, n_ch, x.sample_rate, byte_rate, n_ch * 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)


def wav_read(path) -> AudioSignal:
    """Read a PCM 16-bit RIFF/WAVE file with 1 or 2 channels."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise DataError(f"{path}: malformed WAV header (missing RIFF tag)")
    if raw[8:12] != b"WAVE":
        raise DataError(f"{path}: malformed WAV header (RIFF form type is not WAVE)")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8: pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise DataError(f"{path}: malformed fmt chunk (size {size} < 16)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise DataError(f"{path}: malformed WAV (no fmt chunk)")
    if data is None:
        raise DataError(f"{path}: malformed WAV (no data chunk)")
    audio_format, n_ch, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise DataError(f"{path}: unsupported encoding (audio_format={audio_format}, want PCM=1)")
    if bits != 16:
        raise DataError(f"{path}: unsupported encoding (bits_per_sample={bits}, want 16)")
    if n_ch not in (1, 2):
        raise DataError(f"{path}: unsupported encoding (channels={n_ch}, want 1 or 2)")
    if len(data) % (2 * n_ch):
        raise DataError(f"{path}: malformed data chunk (size {len(data)} not a "
                        f"multiple of the {2 * n_ch}-byte frame)")
    q = np.frombuffer(data, dtype="<i2").astype(np.float64)
    samples = q.reshape(-1, n_ch).T / 32767.0
    return AudioSignal(samples, sample_rate)
