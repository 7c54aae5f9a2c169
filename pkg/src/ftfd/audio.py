"""Audio front end: WAV input, log-mel spectrograms, alignment to video frames."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
VIDEO_FPS = 25
N_FFT = 800
HOP = 200
N_MELS = 80
FMIN = 55.0
FMAX = 7600.0
LOG_FLOOR = -10.0


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class AudioWindow:
    samples: np.ndarray
    sample_rate: int
    first_frame: int
    num_frames: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel energies ``(1, n_mels, n_steps)`` plus an optional face-sized copy."""

    mels: np.ndarray
    resized: np.ndarray | None = None


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; returns samples scaled to [-1, 1) and the rate."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: not a RIFF/WAVE PCM file ({exc})") from exc
    if channels != 1:
        raise AudioError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise AudioError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: expected sample rate {SAMPLE_RATE} Hz, found {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = to_pcm16(samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Area-normalized triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower = (fft_freqs[None, :] - edges[:-2, None]) / np.diff(edges)[:-1, None]
    upper = (edges[2:, None] - fft_freqs[None, :]) / np.diff(edges)[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def stft_magnitude(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT| with a periodic Hann window and no edge padding; shape ``(n_fft//2+1, n_steps)``."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < n_fft:
        raise AudioError(f"need at least {n_fft} samples for one STFT frame, got {len(samples)}")
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(samples, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def mel_spectrogram(window: AudioWindow | np.ndarray, n_fft: int = N_FFT, hop: int = HOP,
                    n_mels: int = N_MELS) -> Spectrogram:
    """Natural-log mel energies of a window, floored at ``LOG_FLOOR``."""
    if isinstance(window, AudioWindow):
        if window.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample rate must be {SAMPLE_RATE} Hz, got {window.sample_rate}")
        samples = window.samples
    else:
        samples = np.asarray(window, dtype=np.float64)
    if samples.size == 0:
        raise AudioError("empty audio window")
    if not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0:
        raise AudioError("audio samples must be finite and lie in [-1, 1]")
    mag = stft_magnitude(samples, n_fft, hop)
    mel = mel_filterbank(SAMPLE_RATE, n_fft, n_mels) @ mag
    logmel = np.log(np.maximum(mel, np.exp(LOG_FLOOR)))
    return Spectrogram(mels=logmel[None])


def resize_bilinear(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``(..., H, W)`` arrays.

    The output never leaves the input's [min, max] range.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[-2:]
    if H < 1 or W < 1 or target_h < 1 or target_w < 1:
        raise ValueError(f"cannot resize {image.shape} to {target_h}x{target_w}")
    if (H, W) == (target_h, target_w):
        return image.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_coords(H, target_h)
    c0, c1, fc = axis_coords(W, target_w)
    rows = image[..., r0, :] + fr[:, None] * (image[..., r1, :] - image[..., r0, :])
    out = rows[..., c0] + fc * (rows[..., c1] - rows[..., c0])
    return np.clip(out, image.min(), image.max())


def align_window(video_fps: int, t: int, T: int, sample_rate: int, stream_len: int,
                 n_fft: int = N_FFT) -> tuple[int, int]:
    """Sample range ``[start, end)`` covering video frames ``[t, t + T)``.

    Windows shorter than one STFT frame are extended to ``n_fft`` samples
    so a single-frame clip still yields a spectrogram column.
    """
    if t < 0 or T < 1:
        raise ValueError(f"invalid frame range t={t}, T={T}")
    start = t * sample_rate // video_fps
    end = (t + T) * sample_rate // video_fps
    if stream_len - start < n_fft:
        raise AudioError(
            f"audio stream too short: frame {t} starts at sample {start} but only "
            f"{max(stream_len - start, 0)} samples remain (need {n_fft})"
        )
    end = min(max(end, start + n_fft), stream_len)
    return start, end


def audio_window(samples: np.ndarray, t: int, T: int, video_fps: int = VIDEO_FPS,
                 sample_rate: int = SAMPLE_RATE) -> AudioWindow:
    start, end = align_window(video_fps, t, T, sample_rate, len(samples))
    return AudioWindow(np.asarray(samples[start:end], dtype=np.float64), sample_rate, t, T)


def clip_spectrogram(samples: np.ndarray, t: int, T: int, crop: int, n_steps: int) -> Spectrogram:
    """Branch input padded/truncated to ``n_steps`` columns plus a ``crop x crop`` resized map."""
    spec = mel_spectrogram(audio_window(samples, t, T))
    mels = spec.mels
    resized = resize_bilinear(mels, crop, crop)
    have = mels.shape[-1]
    if have >= n_steps:
        grid = mels[..., :n_steps]
    else:
        grid = np.concatenate([mels, np.full(mels.shape[:-1] + (n_steps - have,), LOG_FLOOR)], axis=-1)
    return Spectrogram(mels=grid, resized=resized)
