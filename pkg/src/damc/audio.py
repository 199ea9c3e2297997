"""Audio front-end: WAV I/O, resampling, log-mel spectrograms, frame alignment,
and a Griffin-Lim phase-recovery vocoder for mel-only inputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import dfb
from .errors import EmptyInputError, FormatError


@dataclass
class MelParams:
    sample_rate: int = 16000
    n_mels: int = 80
    win_samples: int = 800
    hop_samples: int = 200
    log_floor: float = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray  # float64 mono in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # [n_frames, n_mels] log power
    n_mels: int
    hop_samples: int
    win_samples: int
    sample_rate: int
    log_floor: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class AlignedWindows:
    """Per-video-frame audio context: a mel window and a waveform window."""

    mel_windows: np.ndarray   # [T, W_mel, n_mels] float32
    wave_windows: np.ndarray  # [T, W_wav] float32
    centers_sec: np.ndarray   # [T]
    fps: float
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.mel_windows.shape[0]


def load_waveform(path) -> Waveform:
    """Load a mono or stereo PCM16 / float32 WAV as normalized mono float."""
    try:
        rate, data = wavfile.read(path)
    except Exception as e:
        raise FormatError(f"cannot read WAV {path}: {e}") from e
    if data.size == 0:
        raise EmptyInputError(f"empty audio: {path}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"unsupported WAV sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples=samples, sample_rate=int(rate))


def save_waveform(path, w: Waveform) -> None:
    """Write a float32 WAV."""
    wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited (polyphase windowed-sinc) resampling."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(samples=w.samples.copy(), sample_rate=w.sample_rate)
    frac = Fraction(target_rate, w.sample_rate)
    out = resample_poly(w.samples, frac.numerator, frac.denominator, padtype="antireflect")
    return Waveform(samples=out, sample_rate=target_rate)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular (HTK-mel, unit peak) filterbank over rfft bins; [n_mels, n_fft//2+1]."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    f_max = sample_rate / 2.0
    mel_pts = np.linspace(0.0, hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_center_freqs(sample_rate: int, n_mels: int) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return 700.0 * (10.0 ** (mel_pts[1:-1] / 2595.0) - 1.0)


def _stft_power(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Power STFT without padding/centering; [n_frames, win//2+1]."""
    n_frames = (len(samples) - win) // hop + 1
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * window[None, :]
    spec = np.fft.rfft(frames, n=win, axis=1)
    return np.abs(spec) ** 2


def compute_mel(w: Waveform, cfg: MelParams | None = None) -> MelSpectrogram:
    """Log-power mel spectrogram with a fixed floor; deterministic."""
    cfg = cfg or MelParams()
    if len(w.samples) < cfg.win_samples:
        raise EmptyInputError("audio shorter than one analysis window")
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    power = _stft_power(w.samples, cfg.win_samples, cfg.hop_samples)
    fb = mel_filterbank(cfg.sample_rate, cfg.win_samples, cfg.n_mels)
    mel_power = power @ fb.T
    values = np.log(np.maximum(mel_power, cfg.log_floor))
    return MelSpectrogram(
        values=values,
        n_mels=cfg.n_mels,
        hop_samples=cfg.hop_samples,
        win_samples=cfg.win_samples,
        sample_rate=cfg.sample_rate,
        log_floor=cfg.log_floor,
    )


def align_windows(
    w: Waveform,
    m: MelSpectrogram,
    fps: float,
    w_mel: int = 16,
    w_wav: int = 3200,
    n_frames: int | None = None,
) -> AlignedWindows:
    """Zero-padded fixed-shape audio windows centered on each video frame.

    Frame i is centered at mel row round(i * sample_rate / (hop * fps)) and at
    waveform sample round(i * sample_rate / fps). Windows are float32 so the
    in-process path and the DFB1 file path see bit-identical values.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    sr = m.sample_rate
    if n_frames is None:
        n_frames = int(np.floor(len(w.samples) / sr * fps))
    mel_vals = m.values.astype(np.float32)
    wav_vals = w.samples.astype(np.float32)
    mel_out = np.zeros((n_frames, w_mel, m.n_mels), dtype=np.float32)
    wav_out = np.zeros((n_frames, w_wav), dtype=np.float32)
    centers = np.zeros(n_frames)
    for i in range(n_frames):
        c_mel = int(round(i * sr / (m.hop_samples * fps)))
        start = c_mel - w_mel // 2
        lo, hi = max(start, 0), min(start + w_mel, m.n_frames)
        if hi > lo:
            mel_out[i, lo - start : hi - start] = mel_vals[lo:hi]
        c_wav = int(round(i * sr / fps))
        ws = c_wav - w_wav // 2
        wlo, whi = max(ws, 0), min(ws + w_wav, len(wav_vals))
        if whi > wlo:
            wav_out[i, wlo - ws : whi - ws] = wav_vals[wlo:whi]
        centers[i] = i / fps
    return AlignedWindows(
        mel_windows=mel_out,
        wave_windows=wav_out,
        centers_sec=centers,
        fps=fps,
        sample_rate=sr,
    )


def _istft_from_complex(spec: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Overlap-add inverse of _stft_power's framing (windowed, uncentered)."""
    n_frames = spec.shape[0]
    window = np.hanning(win + 1)[:-1]
    n = (n_frames - 1) * hop + win
    out = np.zeros(n)
    norm = np.zeros(n)
    frames = np.fft.irfft(spec, n=win, axis=1)
    for i in range(n_frames):
        out[i * hop : i * hop + win] += frames[i] * window
        norm[i * hop : i * hop + win] += window**2
    return out / np.maximum(norm, 1e-12)


def griffin_lim(
    m: MelSpectrogram, iters: int = 60, error_log: list | None = None
) -> Waveform:
    """Invert a log-mel spectrogram to a waveform.

    Pseudo-inverse of the mel filterbank (clamped non-negative) gives a linear
    magnitude target; iterative phase recovery then alternates STFT projections.
    The spectral-convergence error is non-increasing per iteration; pass
    error_log to collect it.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    fb = mel_filterbank(m.sample_rate, m.win_samples, m.n_mels)
    # the log floor is the silence level: subtract it so an all-floor mel
    # inverts to an exactly silent waveform
    mel_power = np.clip(np.exp(m.values) - m.log_floor, 0.0, None)
    lin_power = np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None)
    target_mag = np.sqrt(lin_power)

    x = _istft_from_complex(target_mag.astype(np.complex128), m.win_samples, m.hop_samples)
    for _ in range(iters):
        spec = np.fft.rfft(
            _frame_signal(x, m.win_samples, m.hop_samples, target_mag.shape[0]), axis=1
        )
        mag = np.abs(spec)
        if error_log is not None:
            error_log.append(float(np.linalg.norm(mag - target_mag)))
        phase = spec / np.maximum(mag, 1e-12)
        x = _istft_from_complex(target_mag * phase, m.win_samples, m.hop_samples)

    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(samples=x, sample_rate=m.sample_rate)


def _frame_signal(x: np.ndarray, win: int, hop: int, n_frames: int) -> np.ndarray:
    window = np.hanning(win + 1)[:-1]
    if len(x) < (n_frames - 1) * hop + win:
        x = np.pad(x, (0, (n_frames - 1) * hop + win - len(x)))
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx] * window[None, :]


def read_mel_dfb(path, cfg: MelParams) -> MelSpectrogram:
    """Read a DFB1 mel file, validating against the configured mel geometry."""
    arr, header = dfb.read_array(path)
    if header.get("kind") != "mel":
        raise FormatError(f"expected kind 'mel', got {header.get('kind')!r}")
    if arr.ndim != 2 or arr.shape[1] != cfg.n_mels:
        raise FormatError(
            f"mel shape {arr.shape} does not match configured n_mels={cfg.n_mels}"
        )
    meta = header.get("meta", {})
    sr = int(meta.get("sample_rate", cfg.sample_rate))
    if sr != cfg.sample_rate:
        raise FormatError(f"mel sample_rate {sr} != configured {cfg.sample_rate}")
    return MelSpectrogram(
        values=arr.astype(np.float64),
        n_mels=cfg.n_mels,
        hop_samples=int(meta.get("hop_samples", cfg.hop_samples)),
        win_samples=int(meta.get("win_samples", cfg.win_samples)),
        sample_rate=sr,
        log_floor=float(meta.get("log_floor", cfg.log_floor)),
    )


def write_mel_dfb(path, m: MelSpectrogram) -> None:
    dfb.write_array(
        path,
        m.values.astype(np.float32),
        kind="mel",
        meta={
            "sample_rate": m.sample_rate,
            "hop_samples": m.hop_samples,
            "win_samples": m.win_samples,
            "n_mels": m.n_mels,
            "log_floor": m.log_floor,
        },
    )


def ingest_tts(
    mel_path, wav_path=None, cfg: MelParams | None = None, gl_iters: int = 60
) -> tuple[MelSpectrogram, Waveform]:
    """Ingest acoustic-model output: a mel (toward the dynamic path) and a
    waveform (toward the content path), synthesizing the waveform by
    Griffin-Lim when only the mel is supplied."""
    cfg = cfg or MelParams()
    mel = read_mel_dfb(mel_path, cfg)
    if wav_path is not None:
        wave = resample(load_waveform(wav_path), cfg.sample_rate)
    else:
        wave = griffin_lim(mel, iters=gl_iters)
    return mel, wave
