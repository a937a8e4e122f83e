"""STFT/iSTFT, Mel band partitioning and PCM16 WAV I/O.

Framing has no centre padding: frame ``t`` covers samples
``[t*hop, t*hop + fft_size)``. Analysis and synthesis both use a periodic
Hann window and the inverse applies least-squares overlap-add
normalisation (divide by the overlapped sum of squared windows).
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import Tensor, concat, matmul

SAMPLE_RATE = 16000
FFT_SIZE = 320
HOP = 160


class WavFormatError(ValueError):
    pass


@dataclass
class Spectrogram:
    """Complex STFT frames, shape ``(T, F)``."""

    values: np.ndarray
    sample_rate: int = SAMPLE_RATE
    fft_size: int = FFT_SIZE
    hop: int = HOP

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError(f"spectrogram values must be (T, F), got {self.values.shape}")
        if self.values.shape[1] != self.fft_size // 2 + 1:
            raise ValueError(
                f"F={self.values.shape[1]} does not match fft_size={self.fft_size}"
            )
        if not 0 < self.hop <= self.fft_size:
            raise ValueError(f"hop {self.hop} must be in (0, fft_size]")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def num_frames(n_samples: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> int:
    return (n_samples - fft_size) // hop + 1


def frame_signal(x: np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Frames along the last axis: ``(..., N)`` -> ``(..., T, fft_size)``."""
    x = np.asarray(x)
    if fft_size % 2:
        raise ValueError("fft_size must be even")
    if x.shape[-1] < fft_size:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one window ({fft_size})")
    t = num_frames(x.shape[-1], fft_size, hop)
    idx = np.arange(t)[:, None] * hop + np.arange(fft_size)[None, :]
    return x[..., idx]


def stft(wave, fft_size: int = FFT_SIZE, hop: int = HOP,
         sample_rate: int = SAMPLE_RATE) -> Spectrogram:
    frames = frame_signal(np.asarray(wave, dtype=np.float64), fft_size, hop)
    return Spectrogram(np.fft.rfft(frames * hann(fft_size), axis=-1), sample_rate, fft_size, hop)


def stft_batch(waves: np.ndarray, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Complex STFT of a batch ``(N, samples)`` -> ``(N, T, F)``."""
    frames = frame_signal(np.asarray(waves), fft_size, hop)
    return np.fft.rfft(frames * hann(fft_size), axis=-1)


def ola_denominator(n_frames: int, fft_size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Overlapped sum of squared synthesis windows."""
    w2 = hann(fft_size) ** 2
    out = np.zeros((n_frames - 1) * hop + fft_size)
    for t in range(n_frames):
        out[t * hop: t * hop + fft_size] += w2
    return out


def _safe_inverse(den: np.ndarray) -> np.ndarray:
    # only the very first sample has a zero denominator (w[0] = 0)
    inv = np.zeros_like(den)
    ok = den > 1e-10
    inv[ok] = 1.0 / den[ok]
    return inv


def istft(spec: Spectrogram) -> np.ndarray:
    n, hop, t = spec.fft_size, spec.hop, spec.frames
    frames = np.fft.irfft(spec.values, n=n, axis=-1) * hann(n)
    out = np.zeros((t - 1) * hop + n)
    for i in range(t):
        out[i * hop: i * hop + n] += frames[i]
    return out * _safe_inverse(ola_denominator(t, n, hop))


# -- differentiable inverse -----------------------------------------------
_IDFT_CACHE: dict = {}


def _idft_matrices(fft_size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Real/imag synthesis matrices equal to windowed ``irfft`` (``F x n``)."""
    key = (fft_size, np.dtype(dtype).str)
    if key not in _IDFT_CACHE:
        f = fft_size // 2 + 1
        eye = np.eye(f)
        re = np.fft.irfft(eye, n=fft_size, axis=-1) * hann(fft_size)
        im = np.fft.irfft(1j * eye, n=fft_size, axis=-1) * hann(fft_size)
        _IDFT_CACHE[key] = (re.astype(dtype), im.astype(dtype))
    return _IDFT_CACHE[key]


def istft_tensor(re: Tensor, im: Tensor, fft_size: int = FFT_SIZE, hop: int = HOP) -> Tensor:
    """Tape-aware iSTFT of ``(N, T, F)`` real/imag parts -> ``(N, samples)``.

    Requires ``fft_size % hop == 0``; numerically matches :func:`istft`.
    """
    if fft_size % hop:
        raise ValueError("differentiable istft needs hop dividing fft_size")
    n_b, t, _ = re.shape
    a, b = _idft_matrices(fft_size, re.dtype)
    frames = matmul(re, a) + matmul(im, b)  # (N, T, n)
    r = fft_size // hop
    chunks = frames.reshape(n_b, t, r, hop)
    total = None
    for j in range(r):
        part = chunks[:, :, j, :]
        pieces = []
        if j:
            pieces.append(Tensor(np.zeros((n_b, j, hop), dtype=re.dtype)))
        pieces.append(part)
        if r - 1 - j:
            pieces.append(Tensor(np.zeros((n_b, r - 1 - j, hop), dtype=re.dtype)))
        shifted = concat(pieces, axis=1) if len(pieces) > 1 else part
        total = shifted if total is None else total + shifted
    out = total.reshape(n_b, (t + r - 1) * hop)
    inv = _safe_inverse(ola_denominator(t, fft_size, hop)).astype(re.dtype)
    return out * inv


# -- Mel bands ------------------------------------------------------------
@dataclass(frozen=True)
class BandPartition:
    """Contiguous frequency bands given by ``K + 1`` bin boundaries."""

    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"invalid band boundaries {b}")

    @property
    def n_bands(self) -> int:
        return len(self.boundaries) - 1

    @property
    def n_bins(self) -> int:
        return self.boundaries[-1]

    @property
    def widths(self) -> list[int]:
        return [y - x for x, y in zip(self.boundaries, self.boundaries[1:])]

    def slices(self) -> list[slice]:
        return [slice(x, y) for x, y in zip(self.boundaries, self.boundaries[1:])]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_partition(n_bins: int, n_bands: int, sample_rate: int = SAMPLE_RATE) -> BandPartition:
    """Split ``n_bins`` STFT bins into ``n_bands`` contiguous Mel-spaced bands.

    Band edges are uniform on the Mel axis from 0 Hz to Nyquist, mapped to
    fractional bin positions over ``[0, n_bins]``. The fractional widths are
    increasing, so their floors (at least 1) are non-decreasing; leftover
    bins go one at a time to the highest bands, and any excess from the
    1-bin floor is taken back from the highest band that stays no narrower
    than its lower neighbour. Widths are therefore non-decreasing and sum
    to ``n_bins``.
    """
    if not 1 <= n_bands <= n_bins:
        raise ValueError(f"need 1 <= K <= F, got K={n_bands}, F={n_bins}")
    nyq = sample_rate / 2.0
    mels = np.linspace(0.0, float(hz_to_mel(nyq)), n_bands + 1)
    frac = mel_to_hz(mels) / nyq * n_bins
    widths = np.maximum(1, np.floor(np.diff(frac) + 1e-9)).astype(int)
    spare = n_bins - int(widths.sum())
    while spare > 0:
        take = min(spare, n_bands)
        widths[n_bands - take:] += 1
        spare -= take
    while spare < 0:
        for k in range(n_bands - 1, -1, -1):
            lower = widths[k - 1] if k else 1
            if widths[k] - 1 >= lower:
                widths[k] -= 1
                spare += 1
                break
    edges = np.concatenate([[0], np.cumsum(widths)])
    return BandPartition(tuple(int(e) for e in edges))


# -- WAV I/O ----------------------------------------------------------------
def wav_read(path) -> tuple[np.ndarray, int]:
    """Read a PCM16 mono WAV file as floats in ``[-1, 1)``."""
    try:
        with _wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1 or f.getsampwidth() != 2 or f.getcomptype() != "NONE":
                raise WavFormatError(
                    f"{path}: need PCM16 mono, got {f.getnchannels()} ch, "
                    f"{8 * f.getsampwidth()} bit, {f.getcomptype()}"
                )
            n = f.getnframes()
            raw = f.readframes(n)
            rate = f.getframerate()
    except (_wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from None
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def to_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")


def wav_write(path, samples, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = to_pcm16(samples)
    with _wave.open(str(Path(path)), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(sample_rate))
        f.writeframes(pcm.tobytes())
