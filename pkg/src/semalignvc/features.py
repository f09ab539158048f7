"""Mel spectrogram, pitch and energy extraction, plus prosody normalization.

Pitch and energy are kept frame-synchronous with the mel analysis so
downstream modules can slice all three with one index. f0 lives on a log
scale, which turns per-utterance mean removal into transposition
invariance: shifting a speaker's register leaves the normalized track
untouched.
"""

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    win_length: int = 400  # 25 ms
    hop_length: int = 160  # 10 ms
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_eps: float = 1e-5
    f0_min: float = 50.0
    f0_max: float = 450.0
    f0_window: int = 640  # 40 ms, >= 2 periods at f0_min
    voicing_threshold: float = 0.5

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, n_mels] log magnitudes
    frame_rate: float

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("mel frames must be a non-empty [T, n_mels] matrix")
        if not np.isfinite(self.frames).all():
            raise ValueError("mel frames must be finite")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class ProsodyTrack:
    f0: np.ndarray  # [T] log-Hz, 0 where unvoiced
    voicing: np.ndarray  # [T] bool
    energy: np.ndarray  # [T] log energy

    def __post_init__(self):
        if not (len(self.f0) == len(self.voicing) == len(self.energy)):
            raise ValueError("prosody tracks must share one length")
        unvoiced = ~self.voicing.astype(bool)
        if np.any(self.f0[unvoiced] != 0.0):
            raise ValueError("f0 must be 0 exactly on unvoiced frames")
        if np.any(self.f0[~unvoiced] == 0.0):
            raise ValueError("voiced frames must carry a nonzero f0")

    def __len__(self) -> int:
        return len(self.f0)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular mel filterbank, [n_mels, n_fft//2 + 1]."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)

    pts = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    bins = np.fft.rfftfreq(config.n_fft, 1.0 / config.sample_rate)
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (bins[None, :] - lo) / np.maximum(ctr - lo, 1e-9)
    down = (hi - bins[None, :]) / np.maximum(hi - ctr, 1e-9)
    return np.maximum(np.minimum(up, down), 0.0)


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)

    pts = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    return pts[1:-1]


def _frame(waveform: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """[T, frame_length] frames starting at t*hop, zero-padded at the tail."""
    n = len(waveform)
    n_frames = int(np.ceil(n / hop))
    padded = np.zeros((n_frames - 1) * hop + frame_length, dtype=np.float64)
    padded[:n] = waveform
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def compute_mel(waveform: np.ndarray, config: FeatureConfig) -> MelSpectrogram:
    """Log-mel magnitudes with T = ceil(samples / hop) frames."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise ValueError("waveform must be mono")
    if len(waveform) < config.win_length:
        raise ValueError(
            f"waveform has {len(waveform)} samples, shorter than one "
            f"{config.win_length}-sample analysis window"
        )
    frames = _frame(waveform, config.win_length, config.hop_length)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(config.win_length) / config.win_length)
    spec = np.abs(np.fft.rfft(frames * window, n=config.n_fft, axis=1))
    mel = spec @ mel_filterbank(config).T
    return MelSpectrogram(
        frames=np.log(mel + config.log_eps).astype(np.float32),
        frame_rate=config.frame_rate,
    )


def extract_prosody(waveform: np.ndarray, config: FeatureConfig) -> ProsodyTrack:
    """Autocorrelation f0 (log-Hz) plus log frame energy, mel-synchronous."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if len(waveform) < config.win_length:
        raise ValueError("waveform shorter than one analysis window")

    energy_frames = _frame(waveform, config.win_length, config.hop_length)
    energy = np.log(np.sum(energy_frames**2, axis=1) + config.log_eps)

    frames = _frame(waveform, config.f0_window, config.hop_length)
    n_frames = frames.shape[0]
    lag_min = int(config.sample_rate / config.f0_max)
    lag_max = min(int(config.sample_rate / config.f0_min), config.f0_window - 1)

    # normalized autocorrelation via FFT, one batch for all frames
    nfft = 1
    while nfft < 2 * config.f0_window:
        nfft *= 2
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acorr = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, : lag_max + 2]
    r0 = acorr[:, 0]
    silent = r0 < 1e-8
    norm = acorr / np.maximum(r0[:, None], 1e-12)
    # unbiased estimate: the raw sum loses (window - lag) overlap terms, which
    # tilts peaks toward shorter lags and biases f0 upward at low pitch
    lags_all = np.arange(acorr.shape[1])
    norm = norm * (config.f0_window / (config.f0_window - lags_all))[None, :]

    band = norm[:, lag_min : lag_max + 1]
    peak = band.max(axis=1)
    voiced = (peak > config.voicing_threshold) & ~silent
    # Prefer the shortest-lag LOCAL MAXIMUM comparable to the global peak:
    # period multiples of a harmonic signal produce equal peaks at 2T, 3T...
    # and picking the shortest avoids octave drops. Restricting candidates
    # to local maxima keeps the 5% tolerance from biasing the lag short
    # within a single broad peak.
    left = norm[:, lag_min - 1 : lag_max]
    right = norm[:, lag_min + 1 : lag_max + 2]
    is_local_max = (band >= left) & (band >= right)
    candidate = is_local_max & (band >= np.maximum(peak[:, None] * 0.95, config.voicing_threshold))
    has_candidate = candidate.any(axis=1)
    first_lag = np.where(has_candidate, candidate.argmax(axis=1), band.argmax(axis=1)) + lag_min

    f0 = np.zeros(n_frames)
    # parabolic refinement around the chosen lag
    li = first_lag[voiced]
    can_refine = (li > lag_min) & (li < lag_max)
    idx = np.where(voiced)[0]
    if len(idx):
        y0 = norm[idx, np.maximum(li - 1, 0)]
        y1 = norm[idx, li]
        y2 = norm[idx, np.minimum(li + 1, lag_max)]
        denom = y0 - 2.0 * y1 + y2
        shift = np.where(
            can_refine & (np.abs(denom) > 1e-12),
            0.5 * (y0 - y2) / np.where(np.abs(denom) > 1e-12, denom, 1.0),
            0.0,
        )
        lags = li + np.clip(shift, -0.5, 0.5)
        f0[idx] = np.log(config.sample_rate / lags)

    voiced = voiced & (f0 != 0.0)
    f0[~voiced] = 0.0
    return ProsodyTrack(f0=f0, voicing=voiced, energy=energy)


def normalize_prosody(p: ProsodyTrack) -> ProsodyTrack:
    """Remove per-utterance means: log-f0 over voiced frames, energy overall."""
    voiced = p.voicing.astype(bool)
    f0 = np.zeros_like(p.f0)
    if voiced.any():
        f0[voiced] = p.f0[voiced] - p.f0[voiced].mean()
    energy = p.energy - p.energy.mean()
    return ProsodyTrack(f0=f0, voicing=voiced.copy(), energy=energy)


def pool_prosody(p: ProsodyTrack, stack: int) -> np.ndarray:
    """Average prosody over non-overlapping frame groups of size `stack`.

    Returns [T_tok, 3] columns (f0, voicing, energy), matching the token
    rate produced by quantizing the same utterance with the same stack.
    A group counts as voiced when at least half its frames are.
    """
    if stack < 1:
        raise ValueError("stack must be >= 1")
    t_tok = len(p) // stack
    if t_tok < 1:
        raise ValueError("utterance shorter than one token group")
    f0 = p.f0[: t_tok * stack].reshape(t_tok, stack)
    voicing = p.voicing[: t_tok * stack].reshape(t_tok, stack)
    energy = p.energy[: t_tok * stack].reshape(t_tok, stack)
    n_voiced = voicing.sum(axis=1)
    group_voiced = n_voiced * 2 >= stack
    f0_sum = (f0 * voicing).sum(axis=1)
    f0_mean = np.where(n_voiced > 0, f0_sum / np.maximum(n_voiced, 1), 0.0)
    f0_out = np.where(group_voiced & (n_voiced > 0), f0_mean, 0.0)
    return np.stack(
        [f0_out, group_voiced.astype(np.float64), energy.mean(axis=1)], axis=1
    )


# ---------------------------------------------------------------------------
# on-disk cache, one container per utterance

def save_features(path, mel: MelSpectrogram, prosody: ProsodyTrack, fingerprint: str) -> None:
    np.savez(
        path,
        mel=mel.frames,
        frame_rate=np.float64(mel.frame_rate),
        f0=prosody.f0,
        voicing=prosody.voicing,
        energy=prosody.energy,
        fingerprint=np.array(fingerprint),
    )


def load_features(path, expect_fingerprint: str | None = None) -> tuple[MelSpectrogram, ProsodyTrack]:
    with np.load(path) as z:
        fp = str(z["fingerprint"].item())
        if expect_fingerprint is not None and fp != expect_fingerprint:
            raise ValueError(
                f"{path}: feature cache fingerprint {fp} does not match "
                f"expected {expect_fingerprint}; re-run feature extraction"
            )
        mel = MelSpectrogram(frames=z["mel"], frame_rate=float(z["frame_rate"]))
        prosody = ProsodyTrack(f0=z["f0"], voicing=z["voicing"], energy=z["energy"])
    return mel, prosody
