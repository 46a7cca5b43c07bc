import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from pytest import approx
from scipy import signal as sps

from rirkit.dsp import (
    AudioClip,
    MagnitudeResponse,
    bandpass,
    delay_signal,
    fft_convolve,
    log_energy_envelope,
    log_sweep,
    minimum_phase_ir,
    pink_noise,
    read_wav,
    stft_mag,
    write_wav,
)

from oracles import min_phase_ref, stft_mag_ref

F64 = torch.float64


class TestAudioClip:
    def test_mono_shapes(self):
        c = AudioClip(np.zeros(100))
        assert c.channels == 1 and c.n_samples == 100
        assert c.duration == approx(100 / 48000)

    def test_stereo(self):
        c = AudioClip(np.zeros((2, 50)))
        assert c.channels == 2
        with pytest.raises(ValueError):
            c.mono

    def test_bad_channels(self):
        with pytest.raises(ValueError):
            AudioClip(np.zeros((3, 10)))


class TestMinimumPhase:
    def test_flat_unit_impulse(self):
        h = minimum_phase_ir(MagnitudeResponse(np.ones(4097), 8192))
        assert float(h[0]) == approx(1.0, abs=1e-9)
        assert float(torch.sum(h[1:] ** 2)) < 1e-6

    def test_flat_gain_two(self):
        h = minimum_phase_ir(MagnitudeResponse(2 * np.ones(4097), 8192))
        assert float(h[0]) == approx(2.0, abs=1e-9)

    def test_smooth_responses_match_oracle_and_magnitude(self, rng):
        for _ in range(20):
            # random smooth response: a few low-order cosine components
            n_bins = 1025
            f = np.linspace(0, np.pi, n_bins)
            coefs = rng.normal(0, 0.4, size=4)
            log_mag = sum(c * np.cos(k * f) for k, c in enumerate(coefs))
            mag = np.exp(log_mag)
            h = minimum_phase_ir(MagnitudeResponse(mag, 2048)).numpy()
            assert h == approx(min_phase_ref(mag), abs=1e-9)
            back = np.abs(np.fft.rfft(h))
            rel_rms = np.sqrt(np.mean((back - mag) ** 2)) / np.sqrt(np.mean(mag**2))
            assert rel_rms < 0.01

    def test_energy_causally_concentrated(self, rng):
        f = np.linspace(0, 1, 4097)
        mag = 1.0 / np.sqrt(1.0 + (f / 0.2) ** 4)
        h = minimum_phase_ir(MagnitudeResponse(mag, 8192)).numpy()
        head = np.sum(h[:4096] ** 2)
        assert head / np.sum(h**2) > 0.99

    def test_floor_applied_to_zero_bins(self):
        mag = np.ones(513)
        mag[100:110] = 0.0
        h = minimum_phase_ir(MagnitudeResponse(mag, 1024))
        assert torch.all(torch.isfinite(h))


class TestDelaySignal:
    def test_zero_delay_identity(self, rng):
        x = rng.normal(size=32)
        assert delay_signal(x, 0.0, 48000).numpy() == approx(x)

    def test_integer_delay(self):
        out = delay_signal(torch.tensor([1.0], dtype=F64), 5 / 48000, 48000, length=8)
        want = np.zeros(8)
        want[5] = 1.0
        assert out.numpy() == approx(want)

    def test_half_sample_delay_split(self):
        out = delay_signal(torch.tensor([1.0], dtype=F64), 0.5 / 48000, 48000, length=4)
        assert out.numpy() == approx([0.5, 0.5, 0.0, 0.0])

    @given(frac=st.floats(0, 0.999))
    @settings(max_examples=30, deadline=None)
    def test_fractional_taps_sum_to_one(self, frac):
        out = delay_signal(torch.tensor([1.0], dtype=F64), (3 + frac) / 1000, 1000, length=8)
        assert float(out.sum()) == approx(1.0, abs=1e-12)

    def test_beyond_length_warns_and_zeroes(self):
        with pytest.warns(UserWarning, match="exceeds"):
            out = delay_signal(torch.ones(4, dtype=F64), 1.0, 48000, length=100)
        assert out.numpy() == approx(np.zeros(100))

    def test_negative_delay_rejected(self):
        with pytest.raises(ValueError):
            delay_signal(torch.ones(4, dtype=F64), -0.1, 48000)


class TestFftConvolve:
    def test_identity_with_impulse(self, rng):
        x = rng.normal(size=50)
        d = np.zeros(1)
        d[0] = 1.0
        assert fft_convolve(x, d).numpy() == approx(x, abs=1e-12)

    def test_commutative(self, rng):
        x, h = rng.normal(size=40), rng.normal(size=13)
        assert fft_convolve(x, h).numpy() == approx(fft_convolve(h, x).numpy(), abs=1e-6)

    def test_matches_naive(self, rng):
        for _ in range(5):
            x, h = rng.normal(size=64), rng.normal(size=64)
            assert fft_convolve(x, h).numpy() == approx(np.convolve(x, h), abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fft_convolve(torch.zeros(0), torch.ones(3))


class TestStftMag:
    def test_zero_signal(self):
        s = stft_mag(torch.zeros(1000), 256, 64)
        assert float(s.max()) == 0.0

    def test_frame_count_formula(self):
        assert stft_mag(torch.zeros(4096), 512, 128).shape == (29, 257)

    def test_short_signal_single_frame(self):
        assert stft_mag(torch.zeros(100), 256, 64).shape == (1, 129)

    def test_sine_at_bin_center_concentrates(self):
        n, window = 4096, 512
        bin_idx = 20
        freq = bin_idx / window
        x = torch.sin(2 * np.pi * freq * torch.arange(n, dtype=F64))
        s = stft_mag(x, window, 128)
        frame = s[5] ** 2
        around = frame[bin_idx - 1 : bin_idx + 2].sum()
        assert float(around / frame.sum()) > 0.90

    def test_matches_reference(self, rng):
        x = rng.normal(size=2000)
        got = stft_mag(torch.as_tensor(x), 256, 64).numpy()
        assert got == approx(stft_mag_ref(x, 256, 64), abs=1e-9)

    def test_translation_covariance(self, rng):
        x = rng.normal(size=1024)
        hop, window = 128, 256
        a = stft_mag(torch.as_tensor(x), window, hop).numpy()
        shifted = np.concatenate([np.zeros(2 * hop), x])
        b = stft_mag(torch.as_tensor(shifted), window, hop).numpy()
        assert b[2 : a.shape[0]] == approx(a[: a.shape[0] - 2], abs=1e-9)

    def test_bad_window_rejected(self):
        with pytest.raises(ValueError):
            stft_mag(torch.zeros(100), 300, 64)


class TestPinkNoise:
    def test_deterministic_per_seed(self):
        assert np.array_equal(pink_noise(0.5, seed=9), pink_noise(0.5, seed=9))
        assert not np.array_equal(pink_noise(0.5, seed=9), pink_noise(0.5, seed=10))

    def test_unit_rms(self):
        for seed in range(3):
            x = pink_noise(1.0, seed=seed)
            assert np.sqrt(np.mean(x**2)) == approx(1.0, abs=1e-6)

    def test_psd_slope_minus_3db_per_octave(self):
        # averaged Welch PSD over 20 seeds, fit in log2(f) over 100 Hz - 10 kHz
        rate = 48000
        psds = []
        for seed in range(20):
            f, p = sps.welch(pink_noise(2.0, rate, seed), fs=rate, nperseg=4096)
            psds.append(p)
        p = np.mean(psds, axis=0)
        sel = (f >= 100) & (f <= 10000)
        slope = np.polyfit(np.log2(f[sel]), 10 * np.log10(p[sel]), 1)[0]
        assert slope == approx(-3.01, abs=1.0)

    def test_octave_power_monotone_decreasing(self):
        rate = 48000
        psds = []
        for seed in range(10):
            f, p = sps.welch(pink_noise(2.0, rate, seed), fs=rate, nperseg=4096)
            psds.append(p)
        p = np.mean(psds, axis=0)
        centers = 125 * 2.0 ** np.arange(7)  # 125 Hz .. 8 kHz
        band_power = [
            p[(f >= c / np.sqrt(2)) & (f < c * np.sqrt(2))].mean() for c in centers
        ]
        assert all(a > b for a, b in zip(band_power, band_power[1:]))

    def test_bad_duration(self):
        with pytest.raises(ValueError):
            pink_noise(0.0)


class TestBandpass:
    def test_dc_rejected(self):
        x = np.ones(48000)
        y = bandpass(x, 70.0, 48000)
        # ignore the filter's initial transient
        assert np.sqrt(np.mean(y[24000:] ** 2)) < 0.01

    def test_center_tone_passes(self):
        t = np.arange(96000) / 48000
        x = np.sin(2 * np.pi * 70.0 * t)
        y = bandpass(x, 70.0, 48000)
        rms_ratio = np.sqrt(np.mean(y[48000:] ** 2)) / np.sqrt(np.mean(x**2))
        assert 20 * np.log10(rms_ratio) == approx(0.0, abs=3.0)

    def test_zero_in_zero_out(self):
        assert bandpass(np.zeros(1000), 70.0, 48000) == approx(np.zeros(1000))

    def test_bad_center(self):
        with pytest.raises(ValueError):
            bandpass(np.zeros(10), 30000.0, 48000)


class TestLogEnergyEnvelope:
    def test_zero_signal_at_floor(self):
        env = log_energy_envelope(np.zeros(256))
        assert env == approx(np.full(256, -12.0))

    def test_scaling_by_ten_adds_two(self, rng):
        x = rng.normal(size=2048)
        a = log_energy_envelope(x)
        b = log_energy_envelope(10 * x)
        mask = a > -10  # comfortably above the floor
        assert b[mask] - a[mask] == approx(np.full(mask.sum(), 2.0), abs=1e-9)

    def test_constant_sine_flat_envelope(self):
        t = np.arange(8192) / 48000
        x = 0.7 * np.sin(2 * np.pi * 1000 * t)
        env = log_energy_envelope(x)[1000:-1000]
        assert env == approx(np.full(len(env), np.log10(0.7**2)), abs=0.05)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            log_energy_envelope(np.array([]))


class TestLogSweep:
    def test_length_and_range(self):
        x = log_sweep(1.0, 48000, 20, 20000)
        assert len(x) == 48000
        assert np.abs(x).max() <= 1.0


class TestWavIO:
    @pytest.mark.parametrize("subtype,atol", [("float32", 1e-7), ("pcm16", 1e-4), ("pcm24", 3e-7)])
    def test_mono_round_trip(self, tmp_path, rng, subtype, atol):
        x = np.clip(rng.normal(scale=0.3, size=1000), -0.99, 0.99)
        path = tmp_path / f"m_{subtype}.wav"
        write_wav(path, AudioClip(x, 48000), subtype=subtype)
        back = read_wav(path)
        assert back.sample_rate == 48000 and back.channels == 1
        assert back.mono == approx(x, abs=atol)

    def test_stereo_round_trip(self, tmp_path, rng):
        x = rng.normal(scale=0.2, size=(2, 500))
        path = tmp_path / "s.wav"
        write_wav(path, AudioClip(x, 44100))
        back = read_wav(path)
        assert back.channels == 2 and back.sample_rate == 44100
        assert back.samples == approx(x, abs=1e-7)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not a wav file at all")
        with pytest.raises(ValueError):
            read_wav(path)
