"""Run configuration, deterministic seeds, fingerprints, and run locking.

One YAML file configures a whole pipeline run. Every module draws its
seed from the root seed through a named substream, so two runs with the
same config are bit-identical while stages stay decoupled. Config
sections are fingerprinted; stages and checkpoints carry the
fingerprint of the config that produced them and refuse silent reuse
under a different one.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .acoustic import AcousticConfig, AcousticTrainConfig
from .features import FeatureConfig
from .semenc import EncoderConfig, SemencTrainConfig
from .semlm import LMConfig, LMTrainConfig

RUN_DIR_ENV = "SEMALIGNVC_RUN_DIR"


def substream_seed(root_seed: int, name: str) -> int:
    """Deterministic per-module seed derived from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def fingerprint_of(obj) -> str:
    """Stable 16-hex-char digest of any JSON-serializable structure."""
    blob = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


def _split(cls_a, cls_b, d: dict, where: str):
    """Split one config dict across two dataclasses by field name."""
    names_a = {f.name for f in fields(cls_a)}
    names_b = {f.name for f in fields(cls_b)}
    unknown = set(d) - names_a - names_b
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    a = cls_a(**{k: v for k, v in d.items() if k in names_a})
    b = cls_b(**{k: v for k, v in d.items() if k in names_b})
    return a, b


@dataclass
class CorpusConfig:
    speakers: int = 20
    utts_per_speaker: int = 100
    min_symbols: int = 4
    max_symbols: int = 9
    test_fraction: float = 0.2


@dataclass
class QuantizerConfig:
    vocab_size: int = 512
    code_dim: int = 16
    stack: int = 2


@dataclass
class ConvertConfig:
    pairs: int = 30  # cross-speaker conversions
    identity_pairs: int = 10  # reference = source, for consistency metrics
    sampler: str = "greedy"
    ode_steps: int = 12


@dataclass
class ProbeStageConfig:
    sources: list = field(default_factory=lambda: ["tokenizer", "qphi", "qphi_ctc_only"])
    epochs: int = 5
    lr: float = 1e-3


@dataclass
class EvalStageConfig:
    providers: list = field(default_factory=lambda: ["ltas"])


@dataclass
class PCAStageConfig:
    utterances: int = 12


@dataclass
class PipelineConfig:
    seed: int = 0
    run_dir: str = ""
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    semenc: EncoderConfig = field(default_factory=EncoderConfig)
    semenc_train: SemencTrainConfig = field(default_factory=SemencTrainConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    lm_train: LMTrainConfig = field(default_factory=LMTrainConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    acoustic_train: AcousticTrainConfig = field(default_factory=AcousticTrainConfig)
    convert: ConvertConfig = field(default_factory=ConvertConfig)
    probe: ProbeStageConfig = field(default_factory=ProbeStageConfig)
    eval: EvalStageConfig = field(default_factory=EvalStageConfig)
    pca: PCAStageConfig = field(default_factory=PCAStageConfig)

    def __post_init__(self):
        if not self.run_dir:
            self.run_dir = os.environ.get(RUN_DIR_ENV, "runs/default")
        if self.quantizer.vocab_size != self.semenc.token_vocab:
            raise ValueError("semenc token_vocab must equal quantizer vocab_size")
        if self.quantizer.vocab_size != self.lm.token_vocab:
            raise ValueError("lm token_vocab must equal quantizer vocab_size")
        if self.quantizer.vocab_size != self.acoustic.token_vocab:
            raise ValueError("acoustic token_vocab must equal quantizer vocab_size")
        if self.acoustic.stack != self.quantizer.stack:
            raise ValueError("acoustic stack must equal quantizer stack")
        if self.semenc.d != self.lm.d_sem:
            raise ValueError("lm d_sem must equal semenc d")
        if self.features.n_mels != self.lm.n_mels or self.features.n_mels != self.acoustic.n_mels:
            raise ValueError("n_mels must agree between features, lm, and acoustic")

    def seed_for(self, name: str) -> int:
        return substream_seed(self.seed, name)

    def section_dict(self, name: str) -> dict:
        return asdict(getattr(self, name))

    def stage_fingerprint(self, *sections: str) -> str:
        """Digest over the root seed plus the named config sections."""
        payload = {"seed": self.seed}
        for s in sections:
            payload[s] = self.section_dict(s)
        return fingerprint_of(payload)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_BUILDERS = {
    "corpus": lambda d: _build(CorpusConfig, d, "corpus"),
    "features": lambda d: _build(FeatureConfig, d, "features"),
    "quantizer": lambda d: _build(QuantizerConfig, d, "quantizer"),
    "semenc": lambda d: _split(EncoderConfig, SemencTrainConfig, d, "semenc"),
    "lm": lambda d: _split(LMConfig, LMTrainConfig, d, "lm"),
    "acoustic": lambda d: _split(AcousticConfig, AcousticTrainConfig, d, "acoustic"),
    "convert": lambda d: _build(ConvertConfig, d, "convert"),
    "probe": lambda d: _build(ProbeStageConfig, d, "probe"),
    "eval": lambda d: _build(EvalStageConfig, d, "eval"),
    "pca": lambda d: _build(PCAStageConfig, d, "pca"),
}


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    known = set(_SECTION_BUILDERS) | {"seed", "run_dir"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {
        "seed": int(data.get("seed", 0)),
        "run_dir": str(data.get("run_dir", "") or ""),
    }
    for name, builder in _SECTION_BUILDERS.items():
        if name not in data:
            continue
        section = data[name]
        if not isinstance(section, dict):
            raise ValueError(f"config section '{name}' must be a mapping")
        built = builder(section)
        if isinstance(built, tuple):
            kwargs[name], kwargs[f"{name}_train"] = built
        else:
            kwargs[name] = built
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    try:
        return config_from_dict(data)
    except (TypeError, ValueError) as e:
        raise ValueError(f"invalid config {path}: {e}") from e


# ---------------------------------------------------------------------------
# checkpoint bookkeeping

CHECKPOINT_FILES = {
    "quantizer": "quantizer.json",
    "semenc": "semenc.pt",
    "semenc_ablation": "semenc_ctc_only.pt",
    "encoder_h": "encoder_h.pt",
    "semlm": "semlm.pt",
    "acoustic": "acoustic.pt",
}


@dataclass
class CheckpointSet:
    """Named checkpoint paths under a run directory."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, name: str) -> Path:
        if name not in CHECKPOINT_FILES:
            raise KeyError(f"unknown checkpoint name '{name}'")
        return self.root / "checkpoints" / CHECKPOINT_FILES[name]

    def verify_fingerprint(self, name: str, stored: str, expected: str, force: bool = False):
        if stored != expected and not force:
            raise RuntimeError(
                f"checkpoint '{name}' was trained under config fingerprint {stored!r} "
                f"but the current config is {expected!r}; rerun the stage or pass --force"
            )


class RunLock:
    """Exclusive per-run-directory lock via O_EXCL file creation."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"
        self._held = False

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another stage process ({self.path}); "
                "remove the lock file if that process is gone"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True
        return self

    def __exit__(self, *exc):
        if self._held and self.path.exists():
            self.path.unlink()
        self._held = False
        return False
