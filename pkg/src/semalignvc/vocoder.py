"""Mel-to-waveform rendering.

The built-in path inverts the mel filterbank with a regularized
pseudo-inverse and recovers phase by iterative spectrogram inversion.
It sounds like a toy because it is one; its job is to produce waveforms
whose spectra track the mel input closely enough for objective checks.
A real neural vocoder plugs in through the external subprocess mode.
"""

import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .corpus import read_wav
from .features import FeatureConfig, MelSpectrogram, mel_filterbank

GRIFFIN_LIM_ITERS = 32


def _window(config: FeatureConfig) -> np.ndarray:
    return np.hanning(config.win_length + 1)[:-1]


def _stft(waveform: np.ndarray, config: FeatureConfig) -> np.ndarray:
    hop, win, n_fft = config.hop_length, config.win_length, config.n_fft
    n_frames = int(np.ceil(len(waveform) / hop))
    pad = max(0, (n_frames - 1) * hop + win - len(waveform))
    x = np.concatenate([np.asarray(waveform, dtype=np.float64), np.zeros(pad)])
    w = _window(config)
    frames = np.stack([x[t * hop : t * hop + win] * w for t in range(n_frames)])
    return np.fft.rfft(frames, n=n_fft, axis=1)


def _istft(spec: np.ndarray, config: FeatureConfig, n_samples: int) -> np.ndarray:
    hop, win, n_fft = config.hop_length, config.win_length, config.n_fft
    w = _window(config)
    frames = np.fft.irfft(spec, n=n_fft, axis=1)[:, :win]
    total = (spec.shape[0] - 1) * hop + win
    y = np.zeros(total)
    denom = np.zeros(total)
    for t in range(spec.shape[0]):
        y[t * hop : t * hop + win] += frames[t] * w
        denom[t * hop : t * hop + win] += w**2
    y /= np.maximum(denom, 1e-8)
    return y[:n_samples]


def mel_to_linear(mel_frames: np.ndarray, config: FeatureConfig, lam: float = 1e-6) -> np.ndarray:
    """Invert log-mel to linear magnitude via Tikhonov pseudo-inverse."""
    fb = mel_filterbank(config)  # [n_mels, n_freq]
    gram = fb @ fb.T
    pinv = fb.T @ np.linalg.inv(gram + lam * np.eye(gram.shape[0]))
    power = np.exp(np.asarray(mel_frames, dtype=np.float64)) - config.log_eps
    mag = np.clip(power, 0.0, None) @ pinv.T
    return np.clip(mag, 0.0, None)


def griffin_lim(magnitude: np.ndarray, config: FeatureConfig,
                iters: int = GRIFFIN_LIM_ITERS) -> np.ndarray:
    """Iterative phase reconstruction from a magnitude spectrogram.

    Phase starts from a seeded random draw, not zeros: zero phase makes
    every frame identical for steady inputs, and the overlap-add of
    identical frames is a pulse train at the frame rate, a fixpoint the
    iteration cannot leave.
    """
    n_samples = magnitude.shape[0] * config.hop_length
    phase = np.random.default_rng(0).uniform(-np.pi, np.pi, magnitude.shape)
    spec = magnitude * np.exp(1j * phase)
    for _ in range(iters):
        wave = _istft(spec, config, n_samples)
        rebuilt = _stft(wave, config)[: magnitude.shape[0]]
        phase = np.angle(rebuilt)
        spec = magnitude * np.exp(1j * phase)
    return _istft(spec, config, n_samples)


def mel_to_audio(mel, config: FeatureConfig | None = None,
                 mode: str = "pseudo_inverse_phase_recon",
                 external_command: list | None = None) -> np.ndarray:
    """Render a waveform from log-mel frames.

    mode "pseudo_inverse_phase_recon" runs the built-in inversion; mode
    "external" shells out to `external_command`, where the placeholders
    {mel_path} and {wav_path} name a .npy input and a .wav output.
    """
    config = config or FeatureConfig()
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if not np.isfinite(frames).all():
        raise ValueError("mel input contains non-finite values")
    if mode == "pseudo_inverse_phase_recon":
        mag = mel_to_linear(frames, config)
        wave = griffin_lim(mag, config)
        peak = np.abs(wave).max()
        if peak > 1.0:
            wave = wave / peak * 0.95
        return wave.astype(np.float32)
    if mode == "external":
        if not external_command:
            raise ValueError("external mode needs a command")
        return _external_vocode(frames, config, external_command)
    raise ValueError(f"unknown vocoder mode {mode!r}")


def _external_vocode(frames: np.ndarray, config: FeatureConfig, command: list) -> np.ndarray:
    with tempfile.TemporaryDirectory() as td:
        mel_path = Path(td) / "mel.npy"
        wav_path = Path(td) / "out.wav"
        np.save(mel_path, frames)
        argv = [str(a).format(mel_path=mel_path, wav_path=wav_path) for a in command]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(
                f"external vocoder {argv[0]!r} exited {proc.returncode}; "
                f"stdout: {proc.stdout.strip()!r} stderr: {proc.stderr.strip()!r}"
            )
        if not wav_path.exists():
            raise RuntimeError(f"external vocoder {argv[0]!r} wrote no output wav")
        wave, _ = read_wav(wav_path)
        return wave
