"""Toy speech corpus: manifest I/O and a deterministic synthetic generator.

Every generated utterance factorizes into a content part (the symbol
sequence, which fixes formant targets, durations and the intonation
contour) and a speaker part (base f0, a multiplicative formant shift and
a spectral tilt). The factorization is exact by construction, which is
what lets downstream speaker/content disentanglement claims be tested
against ground truth instead of listening tests.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile

SAMPLE_RATE = 16000

# 16-symbol inventory: 4x4 grid over first/second formant targets.
_F1_GRID = (300.0, 450.0, 600.0, 750.0)
_F2_GRID = (1000.0, 1450.0, 1900.0, 2350.0)
_ACCENTS = (0.0, 2.0, -2.0, 3.0, -3.0, 1.0, -1.0, 2.5)
_SLOPES = (1.5, -1.5)

DEFAULT_ALPHABET = "abcdefghijklmnop"


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


@dataclass(frozen=True)
class ToySymbol:
    """One element of the content alphabet.

    The symbol fully determines its formant targets, its duration range
    and its pitch-accent shape, so the rendered acoustics depend on the
    speaker profile only through f0, formant shift and tilt.
    """

    symbol: str
    formant_pattern: tuple[float, ...]
    duration_range: tuple[float, float]  # [min_ms, max_ms]
    accent_semitones: float = 0.0
    accent_slope: float = 0.0

    def __post_init__(self):
        if len(self.symbol) != 1:
            raise ValueError(f"symbol must be a single character, got {self.symbol!r}")
        lo, hi = self.duration_range
        if lo < 40.0:
            raise ValueError(f"symbol {self.symbol!r}: minimum duration {lo} ms < 40 ms")
        if hi < lo:
            raise ValueError(f"symbol {self.symbol!r}: empty duration range")


@dataclass(frozen=True)
class ToySpeakerProfile:
    """Speaker identity knobs: pitch register, vocal-tract scale, tilt."""

    base_f0: float
    formant_shift: float
    spectral_tilt: float  # dB/octave, applied on top of the -6 dB/oct source
    seed: int

    def __post_init__(self):
        if not 60.0 <= self.base_f0 <= 400.0:
            raise ValueError(f"base_f0 {self.base_f0} outside [60, 400] Hz")
        if not 0.7 <= self.formant_shift <= 1.3:
            raise ValueError(f"formant_shift {self.formant_shift} outside [0.7, 1.3]")


@dataclass
class UtteranceRecord:
    """One manifest row. Audio comes from a file or from synthesis params."""

    id: str
    text: str
    speaker_id: str
    audio_path: str | None = None
    synth: dict | None = None

    def __post_init__(self):
        if not self.id:
            raise ManifestError("record id must be non-empty")
        if not self.text:
            raise ManifestError(f"record {self.id!r}: text must be non-empty")
        if not self.speaker_id:
            raise ManifestError(f"record {self.id!r}: speaker_id must be non-empty")
        if (self.audio_path is None) == (self.synth is None):
            raise ManifestError(
                f"record {self.id!r}: exactly one of audio_path or synth is required"
            )


@dataclass
class SynthResult:
    """Rendered utterance plus the ground truth used to render it."""

    waveform: np.ndarray  # float32, mono
    record: UtteranceRecord
    segments: list  # (symbol, start_sample, end_sample) per symbol
    f0_hz: np.ndarray  # per-sample f0 ground truth
    sample_rate: int = SAMPLE_RATE


def default_symbol_inventory(alphabet: str = DEFAULT_ALPHABET) -> dict[str, ToySymbol]:
    """Fixed per-corpus alphabet of at least 16 symbols."""
    if len(alphabet) < 16:
        raise ValueError("alphabet must have at least 16 symbols")
    if len(set(alphabet)) != len(alphabet):
        raise ValueError("alphabet symbols must be unique")
    inv = {}
    for i, ch in enumerate(alphabet):
        f1 = _F1_GRID[i % 4]
        f2 = _F2_GRID[(i // 4) % 4]
        f3 = 2600.0 + 55.0 * (i % 5)
        inv[ch] = ToySymbol(
            symbol=ch,
            formant_pattern=(f1, f2, f3),
            # Long holds keep symbol-boundary frames rare. Boundary frames are
            # where a linear recognition head cannot match the soft alignment
            # posterior, so they are where recognition gradient residue
            # concentrates in the semantic embeddings.
            duration_range=(90.0, 150.0),
            accent_semitones=_ACCENTS[i % len(_ACCENTS)],
            accent_slope=_SLOPES[i % len(_SLOPES)],
        )
    return inv


def symbols_from_text(text: str, inventory: dict[str, ToySymbol]) -> list[ToySymbol]:
    missing = sorted({ch for ch in text if ch not in inventory})
    if missing:
        raise ValueError(f"characters outside the symbol inventory: {missing}")
    return [inventory[ch] for ch in text]


def _formant_envelope(freqs: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Sum of Lorentzian resonance peaks, floored so no harmonic vanishes."""
    env = np.zeros_like(freqs)
    for fc in centers:
        # Narrow bandwidths keep the peaks sharp enough that a profile's
        # formant_shift moves energy across mel bins, not just within one.
        bw = 40.0 + 0.035 * fc
        env += 1.0 / (1.0 + ((freqs - fc) / bw) ** 2)
    return env + 1e-3


def synthesize_toy_utterance(
    profile: ToySpeakerProfile,
    symbols: list[ToySymbol],
    seed: int,
    sample_rate: int = SAMPLE_RATE,
) -> SynthResult:
    """Render a symbol sequence in a speaker's voice.

    Harmonic source at the profile's f0 (content-driven accent contour on
    top), filtered by per-symbol formant resonances scaled by the
    profile's formant_shift, tilted by spectral_tilt, plus low-level
    noise. Deterministic given (profile, symbols, seed).
    """
    if not symbols:
        raise ValueError("symbols must be non-empty")
    rng = np.random.default_rng([int(profile.seed) & 0x7FFFFFFF, int(seed) & 0x7FFFFFFF])

    # Content-driven durations, one draw per symbol.
    dur_ms = np.array([rng.uniform(*s.duration_range) for s in symbols])
    seg_len = np.maximum((dur_ms * sample_rate / 1000.0).round().astype(int), 1)
    bounds = np.concatenate([[0], np.cumsum(seg_len)])
    n = int(bounds[-1])

    # Per-sample f0: base register times the content accent contour.
    f0 = np.empty(n)
    amp = np.ones(n)
    segments = []
    for k, sym in enumerate(symbols):
        s, e = bounds[k], bounds[k + 1]
        u = np.linspace(-0.5, 0.5, e - s)
        semis = sym.accent_semitones + sym.accent_slope * u
        f0[s:e] = profile.base_f0 * 2.0 ** (semis / 12.0)
        seg_amp = 0.8 + 0.04 * sym.accent_semitones
        fade = min(int(0.012 * sample_rate), max((e - s) // 2, 1))
        env = np.full(e - s, seg_amp)
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, fade))
        env[:fade] *= ramp
        env[-fade:] *= ramp[::-1]
        amp[s:e] = env
        segments.append((sym.symbol, int(s), int(e)))
    # Smooth f0 across symbol boundaries (25 ms hann).
    klen = int(0.025 * sample_rate)
    kern = np.hanning(klen + 2)[1:-1]
    kern /= kern.sum()
    f0 = np.convolve(np.pad(f0, klen, mode="edge"), kern, mode="same")[klen:-klen]

    phase = 2.0 * math.pi * np.cumsum(f0) / sample_rate
    n_harm = max(int(0.45 * sample_rate / f0.max()), 1)
    harm_phase = rng.uniform(0.0, 2.0 * math.pi, n_harm)

    # Per-segment harmonic amplitudes: source slope * tilt * formant envelope.
    wave = np.zeros(n)
    k_idx = np.arange(1, n_harm + 1, dtype=float)
    for k, sym in enumerate(symbols):
        s, e = bounds[k], bounds[k + 1]
        hf = k_idx * float(np.mean(f0[s:e]))
        tilt_gain = 10.0 ** (profile.spectral_tilt * np.log2(hf / 150.0) / 20.0)
        centers = np.array(sym.formant_pattern) * profile.formant_shift
        a_k = (1.0 / k_idx) * tilt_gain * _formant_envelope(hf, centers)
        seg = (a_k[:, None] * np.sin(k_idx[:, None] * phase[None, s:e] + harm_phase[:, None])).sum(axis=0)
        wave[s:e] = seg
    wave *= amp

    peak = np.abs(wave).max()
    if peak > 0:
        wave *= 0.45 / peak
    wave += rng.normal(0.0, 0.0018, n)
    wave = np.clip(wave, -1.0, 1.0)

    text = "".join(s.symbol for s in symbols)
    record = UtteranceRecord(
        id=f"{text}-{seed}",
        text=text,
        speaker_id=f"profile-{profile.seed}",
        synth=_synth_dict(profile, text, seed),
    )
    return SynthResult(wave.astype(np.float32), record, segments, f0.astype(np.float32), sample_rate)


def _synth_dict(profile: ToySpeakerProfile, text: str, seed: int) -> dict:
    return {
        "base_f0": profile.base_f0,
        "formant_shift": profile.formant_shift,
        "spectral_tilt": profile.spectral_tilt,
        "profile_seed": int(profile.seed),
        "symbols": text,
        "seed": int(seed),
    }


def profile_from_synth(synth: dict) -> ToySpeakerProfile:
    return ToySpeakerProfile(
        base_f0=float(synth["base_f0"]),
        formant_shift=float(synth["formant_shift"]),
        spectral_tilt=float(synth["spectral_tilt"]),
        seed=int(synth["profile_seed"]),
    )


# ---------------------------------------------------------------------------
# manifests

_MANIFEST_KEYS = ("id", "audio_path", "synth", "text", "speaker_id")


def load_manifest(path) -> list[UtteranceRecord]:
    """Parse a line-delimited manifest, validating every record."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}: line {lineno}: expected an object")
            unknown = set(obj) - set(_MANIFEST_KEYS)
            if unknown:
                raise ManifestError(f"{path}: line {lineno}: unknown keys {sorted(unknown)}")
            try:
                rec = UtteranceRecord(
                    id=obj.get("id", ""),
                    text=obj.get("text", ""),
                    speaker_id=obj.get("speaker_id", ""),
                    audio_path=obj.get("audio_path"),
                    synth=obj.get("synth"),
                )
            except ManifestError as e:
                raise ManifestError(f"{path}: line {lineno}: {e}") from e
            if rec.id in seen:
                raise ManifestError(f"{path}: line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_manifest(records: list[UtteranceRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.id}
            if rec.audio_path is not None:
                obj["audio_path"] = rec.audio_path
            else:
                obj["synth"] = rec.synth
            obj["text"] = rec.text
            obj["speaker_id"] = rec.speaker_id
            fh.write(json.dumps(obj) + "\n")


def read_wav(path) -> tuple[np.ndarray, int]:
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        wave = data.astype(np.float32) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        wave = data.astype(np.float32)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return wave, int(sr)


def write_wav(path, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = (np.clip(waveform, -1.0, 1.0) * 32767.0).round().astype(np.int16)
    scipy.io.wavfile.write(path, sample_rate, pcm)


def resolve_waveform(
    record: UtteranceRecord,
    base_dir=None,
    inventory: dict[str, ToySymbol] | None = None,
) -> tuple[np.ndarray, int]:
    """Load or re-render the audio behind a manifest record."""
    if record.audio_path is not None:
        p = Path(record.audio_path)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        return read_wav(p)
    inventory = inventory or default_symbol_inventory()
    profile = profile_from_synth(record.synth)
    symbols = symbols_from_text(record.synth["symbols"], inventory)
    result = synthesize_toy_utterance(profile, symbols, int(record.synth["seed"]))
    return result.waveform, result.sample_rate


# ---------------------------------------------------------------------------
# corpus generation

@dataclass
class CorpusLayout:
    root: Path
    manifest: Path
    manifest_train: Path
    manifest_test: Path
    profiles: Path
    records: list = field(default_factory=list)


def make_speaker_profiles(n_speakers: int, seed: int) -> dict[str, ToySpeakerProfile]:
    """Spread speakers over the identity space so no two collide.

    Each axis is a distinct grid value; the grids are permuted
    independently so the axes decorrelate across speakers.
    """
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0x5EED])
    f0s = np.geomspace(88.0, 300.0, n_speakers)
    shifts = np.linspace(0.74, 1.27, n_speakers)
    tilts = np.linspace(-7.5, 3.0, n_speakers)
    rng.shuffle(shifts)
    rng.shuffle(tilts)
    profiles = {}
    for i in range(n_speakers):
        sid = f"spk{i:03d}"
        profiles[sid] = ToySpeakerProfile(
            base_f0=float(f0s[i]),
            formant_shift=float(shifts[i]),
            spectral_tilt=float(tilts[i]),
            seed=int(rng.integers(0, 2**31 - 1)),
        )
    return profiles


def generate_corpus(
    out_dir,
    n_speakers: int = 20,
    utts_per_speaker: int = 100,
    seed: int = 0,
    # Short texts keep the per-utterance mean representation noisy across
    # utterances of one speaker, which is what stops a linear speaker probe
    # from reading text statistics as identity.
    min_symbols: int = 4,
    max_symbols: int = 9,
    alphabet: str = DEFAULT_ALPHABET,
    write_audio: bool = True,
    test_fraction: float = 0.2,
) -> CorpusLayout:
    """Generate the toy corpus and write manifests plus a profile table."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    inventory = default_symbol_inventory(alphabet)
    profiles = make_speaker_profiles(n_speakers, seed)
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, 0xC0095])

    records, train, test = [], [], []
    for si, (sid, profile) in enumerate(profiles.items()):
        n_test = max(int(round(utts_per_speaker * test_fraction)), 1)
        for ui in range(utts_per_speaker):
            n_sym = int(rng.integers(min_symbols, max_symbols + 1))
            text = "".join(rng.choice(list(alphabet), size=n_sym))
            utt_seed = int(rng.integers(0, 2**31 - 1))
            uid = f"{sid}-u{ui:04d}"
            if write_audio:
                result = synthesize_toy_utterance(profile, symbols_from_text(text, inventory), utt_seed)
                rel = f"wavs/{uid}.wav"
                write_wav(out_dir / rel, result.waveform)
                rec = UtteranceRecord(id=uid, text=text, speaker_id=sid, audio_path=rel)
            else:
                rec = UtteranceRecord(
                    id=uid, text=text, speaker_id=sid,
                    synth=_synth_dict(profile, text, utt_seed),
                )
            records.append(rec)
            # tail of each speaker's list is held out for testing
            (test if ui >= utts_per_speaker - n_test else train).append(rec)

    layout = CorpusLayout(
        root=out_dir,
        manifest=out_dir / "manifest.jsonl",
        manifest_train=out_dir / "manifest_train.jsonl",
        manifest_test=out_dir / "manifest_test.jsonl",
        profiles=out_dir / "profiles.json",
        records=records,
    )
    write_manifest(records, layout.manifest)
    write_manifest(train, layout.manifest_train)
    write_manifest(test, layout.manifest_test)
    with open(layout.profiles, "w", encoding="utf-8") as fh:
        json.dump(
            {
                sid: {
                    "base_f0": p.base_f0,
                    "formant_shift": p.formant_shift,
                    "spectral_tilt": p.spectral_tilt,
                    "seed": p.seed,
                }
                for sid, p in profiles.items()
            },
            fh, indent=2,
        )
    return layout
