"""Signal-processing kernels.

Kernels that sit on the gradient path of the renderer (minimum-phase
synthesis, delays, convolution, STFT magnitudes) take and return torch
tensors and are differentiable. Analysis-only helpers (pink noise, band
filtering, energy envelopes, WAV I/O) work on plain numpy arrays.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sps

DEFAULT_SAMPLE_RATE = 48000
DTYPE = torch.float64

MAG_FLOOR = 1e-8
ENV_FLOOR = 1e-12


@dataclass
class AudioClip:
    """A sampled time-domain signal, mono or stereo.

    ``samples`` has shape (channels, n); channels is 1 or 2.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ValueError("samples must be (n,) or (channels, n) with 1 or 2 channels")
        self.samples = s
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def mono(self) -> np.ndarray:
        """The single channel of a mono clip (1D view)."""
        if self.channels != 1:
            raise ValueError("clip is not mono")
        return self.samples[0]

    def scaled(self, factor: float) -> "AudioClip":
        return AudioClip(self.samples * factor, self.sample_rate)


@dataclass
class MagnitudeResponse:
    """One-sided magnitude response over uniform FFT bins 0..Nyquist."""

    bins: np.ndarray
    fft_size: int

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.float64)
        if b.ndim != 1 or len(b) != self.fft_size // 2 + 1:
            raise ValueError("bins must have length fft_size // 2 + 1")
        if np.any(b < 0):
            raise ValueError("magnitude bins must be nonnegative")
        self.bins = b

    @property
    def frequencies(self) -> np.ndarray:
        """Bin centers in cycles/sample * sample_rate; caller supplies the rate."""
        return np.arange(self.fft_size // 2 + 1) / self.fft_size


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE) if x.dtype != DTYPE else x
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def minimum_phase_ir(resp) -> torch.Tensor:
    """Real time-domain filter whose FFT magnitude matches ``resp``, with
    minimum phase reconstructed via the real cepstrum.

    ``resp`` is a MagnitudeResponse or a tensor of one-sided bins (the last
    dimension has length fft_size//2+1). Batched inputs are supported.
    Bins are clamped to a small positive floor before the log.
    """
    if isinstance(resp, MagnitudeResponse):
        bins = _as_tensor(resp.bins)
        n = resp.fft_size
    else:
        bins = _as_tensor(resp)
        n = 2 * (bins.shape[-1] - 1)
    log_mag = torch.log(torch.clamp(bins, min=MAG_FLOOR))
    cep = torch.fft.irfft(log_mag.to(torch.complex128), n=n)
    folded = torch.zeros_like(cep)
    half = n // 2
    folded[..., 0] = cep[..., 0]
    folded[..., 1:half] = 2.0 * cep[..., 1:half]
    if n % 2 == 0:
        folded[..., half] = cep[..., half]
    else:
        folded[..., half] = 2.0 * cep[..., half]
    spectrum = torch.exp(torch.fft.fft(folded.to(torch.complex128)))
    return torch.fft.ifft(spectrum).real


def delay_signal(x, delay: float, rate: float, length: int | None = None) -> torch.Tensor:
    """Shift ``x`` right by delay*rate samples; the fractional part is split
    across the two adjacent sample positions by linear interpolation.

    Output is truncated or zero-padded to ``length`` (default len(x)).
    A delay landing past the output raises a warning and returns zeros.
    """
    x = _as_tensor(x)
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    n_out = int(length) if length is not None else x.shape[-1]
    total = delay * rate
    n0 = int(np.floor(total))
    frac = total - n0
    out = torch.zeros(n_out, dtype=x.dtype)
    if n0 >= n_out:
        warnings.warn(f"delay of {total:.1f} samples exceeds output length {n_out}")
        return out
    m = min(x.shape[-1], n_out - n0)
    if m > 0:
        out[n0 : n0 + m] = out[n0 : n0 + m] + (1.0 - frac) * x[:m]
    if frac > 0 and n0 + 1 < n_out:
        m2 = min(x.shape[-1], n_out - n0 - 1)
        if m2 > 0:
            out[n0 + 1 : n0 + 1 + m2] = out[n0 + 1 : n0 + 1 + m2] + frac * x[:m2]
    return out


def fft_convolve(x, h) -> torch.Tensor:
    """Full linear convolution, length len(x) + len(h) - 1."""
    x = _as_tensor(x)
    h = _as_tensor(h)
    if x.shape[-1] == 0 or h.shape[-1] == 0:
        raise ValueError("fft_convolve requires nonempty inputs")
    n = x.shape[-1] + h.shape[-1] - 1
    X = torch.fft.rfft(x, n=n)
    H = torch.fft.rfft(h, n=n)
    return torch.fft.irfft(X * H, n=n)


def hann_window(n: int) -> torch.Tensor:
    return torch.hann_window(n, periodic=True, dtype=DTYPE)


def stft_mag(x, window_size: int, hop: int) -> torch.Tensor:
    """Hann-windowed magnitude spectrogram, shape (frames, window_size//2+1).

    Frame count is floor((len - window)/hop) + 1; signals shorter than the
    window are zero-padded into a single frame.
    """
    x = _as_tensor(x)
    if window_size <= 0 or (window_size & (window_size - 1)) != 0:
        raise ValueError("window_size must be a power of two")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    n = x.shape[-1]
    if n < window_size:
        x = torch.nn.functional.pad(x, (0, window_size - n))
    frames = x.unfold(-1, window_size, hop)
    return torch.abs(torch.fft.rfft(frames * hann_window(window_size), dim=-1))


def pink_noise(duration: float, rate: int = DEFAULT_SAMPLE_RATE, seed: int = 0) -> np.ndarray:
    """1/f-spectrum noise, RMS-normalized to 1. Deterministic per seed.

    Frequency-domain synthesis: complex white spectrum scaled by 1/sqrt(f).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * rate))
    rng = np.random.default_rng(seed)
    bins = n // 2 + 1
    spectrum = rng.standard_normal(bins) + 1j * rng.standard_normal(bins)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    scale = np.zeros(bins)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    x = np.fft.irfft(spectrum * scale, n=n)
    return x / np.sqrt(np.mean(x**2))


def log_sweep(
    duration: float,
    rate: int = DEFAULT_SAMPLE_RATE,
    f_start: float = 20.0,
    f_end: float = 24000.0,
) -> np.ndarray:
    """Exponential (logarithmic) sine sweep from f_start to f_end."""
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    k = duration / np.log(f_end / f_start)
    phase = 2.0 * np.pi * f_start * k * (np.exp(t / k) - 1.0)
    return np.sin(phase)


def bandpass(x: np.ndarray, center: float, rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """2nd-order Butterworth bandpass, one-third octave around ``center``,
    applied forward only."""
    if not 0 < center < rate / 2:
        raise ValueError("center must lie in (0, rate/2)")
    lo = center * 2 ** (-1.0 / 6.0)
    hi = center * 2 ** (1.0 / 6.0)
    sos = sps.butter(2, [lo, hi], btype="bandpass", fs=rate, output="sos")
    return sps.sosfilt(sos, np.asarray(x, dtype=np.float64))


def log_energy_envelope(x: np.ndarray) -> np.ndarray:
    """log10 of the squared analytic-signal envelope, floored at 1e-12.

    For a constant-amplitude sine the result is flat at log10(A^2); scaling
    the signal by 10 raises it by exactly 2 above the floor.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("signal must be nonempty")
    env = np.abs(sps.hilbert(x)) ** 2
    return np.log10(np.maximum(env, ENV_FLOOR))


# ---------------------------------------------------------------------------
# WAV files: PCM 16/24-bit and 32-bit float, mono and stereo.
# ---------------------------------------------------------------------------

_PCM = 1
_IEEE_FLOAT = 3


def write_wav(path: str | Path, clip: AudioClip, subtype: str = "float32") -> None:
    """Write a WAV file. ``subtype`` is one of pcm16, pcm24, float32."""
    data = clip.samples.T  # (n, channels), interleaved on write
    n, ch = data.shape
    if subtype == "float32":
        fmt, width = _IEEE_FLOAT, 4
        payload = data.astype("<f4").tobytes()
    elif subtype == "pcm16":
        fmt, width = _PCM, 2
        scaled = np.clip(np.round(data * 32767.0), -32768, 32767).astype("<i2")
        payload = scaled.tobytes()
    elif subtype == "pcm24":
        fmt, width = _PCM, 3
        scaled = np.clip(np.round(data * 8388607.0), -8388608, 8388607).astype("<i4")
        b = scaled.astype("<i4").tobytes()
        payload = b"".join(b[i : i + 3] for i in range(0, len(b), 4))
    else:
        raise ValueError(f"unsupported wav subtype {subtype!r}")
    byte_rate = clip.sample_rate * ch * width
    block_align = ch * width
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(payload)))
        f.write(b"WAVEfmt ")
        f.write(struct.pack("<IHHIIHH", 16, fmt, ch, clip.sample_rate, byte_rate, block_align, width * 8))
        f.write(b"data")
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


def read_wav(path: str | Path) -> AudioClip:
    """Read a WAV file (PCM 16/24-bit or 32-bit float)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt_chunk = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        size = struct.unpack("<I", raw[pos + 4 : pos + 8])[0]
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt_chunk = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt_chunk is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    fmt, ch, rate, _, _, bits = fmt_chunk
    if fmt == _IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif fmt == _PCM and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    elif fmt == _PCM and bits == 24:
        b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        full = (
            b[:, 0].astype(np.uint32)
            | (b[:, 1].astype(np.uint32) << 8)
            | (b[:, 2].astype(np.uint32) << 16)
        )
        signed = full.astype(np.int32)
        signed[signed >= 1 << 23] -= 1 << 24
        x = signed.astype(np.float64) / 8388607.0
    else:
        raise ValueError(f"{path}: unsupported format (tag={fmt}, bits={bits})")
    if ch not in (1, 2):
        raise ValueError(f"{path}: {ch} channels unsupported")
    return AudioClip(x.reshape(-1, ch).T, sample_rate=rate)
