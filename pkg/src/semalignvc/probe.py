"""Speaker-information probes over frozen representations.

A minimal classifier (embedding + linear for discrete streams, a single
linear layer for continuous ones) is trained on frame sequences and
scored at the utterance level by mean-pooling frame logits. Accuracy
far above chance means the representation still carries speaker
identity; accuracy near chance means it has been scrubbed.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .features import MelSpectrogram
from .quantizer import quantize


@dataclass
class ProbeSpec:
    rep_kind: str  # "discrete" or "continuous"
    rep_source: str  # provider id
    n_speakers: int
    pooling: str = "mean"
    embed_dim: int = 32
    vocab_size: int = 0  # discrete only
    input_dim: int = 0  # continuous only

    def __post_init__(self):
        if self.rep_kind not in ("discrete", "continuous"):
            raise ValueError(f"unknown rep_kind {self.rep_kind!r}")
        if self.pooling not in ("mean", "frame"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.n_speakers < 2:
            raise ValueError("need at least two speakers to probe")
        if self.rep_kind == "discrete" and self.vocab_size < 1:
            raise ValueError("discrete probes need vocab_size")
        if self.rep_kind == "continuous" and self.input_dim < 1:
            raise ValueError("continuous probes need input_dim")


class SpeakerProbe(nn.Module):
    def __init__(self, spec: ProbeSpec):
        super().__init__()
        self.spec = spec
        if spec.rep_kind == "discrete":
            self.embed = nn.Embedding(spec.vocab_size, spec.embed_dim)
            self.head = nn.Linear(spec.embed_dim, spec.n_speakers)
        else:
            self.embed = None
            self.head = nn.Linear(spec.input_dim, spec.n_speakers)

    def frame_logits(self, rep: np.ndarray) -> torch.Tensor:
        if self.spec.rep_kind == "discrete":
            x = self.embed(torch.from_numpy(np.asarray(rep, dtype=np.int64)))
        else:
            x = torch.from_numpy(np.asarray(rep, dtype=np.float32))
        return self.head(x)

    def utterance_logits(self, rep: np.ndarray) -> torch.Tensor:
        return self.frame_logits(rep).mean(dim=0)


@dataclass
class ProbeReport:
    accuracy: float
    chance: float
    per_speaker_accuracy: np.ndarray
    rep_source: str
    rep_kind: str
    n_test: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy out of range")

    def to_dict(self) -> dict:
        return {
            "rep_source": self.rep_source,
            "rep_kind": self.rep_kind,
            "accuracy": self.accuracy,
            "chance": self.chance,
            "per_speaker_accuracy": [float(a) for a in self.per_speaker_accuracy],
            "n_test": self.n_test,
        }


def render_table(reports: list[ProbeReport]) -> str:
    """Rows of (source, representation type, accuracy %), plus chance."""
    head = f"{'Model':<24}{'Type of representation':<26}{'Accuracy':>10}"
    bar = "-" * len(head)
    lines = [head, bar]
    for r in reports:
        lines.append(f"{r.rep_source:<24}{r.rep_kind:<26}{100.0 * r.accuracy:>9.2f}%")
    if reports:
        lines.append(bar)
        lines.append(f"{'chance':<24}{'':<26}{100.0 * reports[0].chance:>9.2f}%")
    return "\n".join(lines)


@dataclass
class ProbeItem:
    rep: np.ndarray  # [T] ids or [T, d] frames
    label: int
    utterance_id: str = ""


def train_probe(spec: ProbeSpec, items: list[ProbeItem], epochs: int = 5,
                lr: float = 1e-3, seed: int = 0) -> SpeakerProbe:
    """Fit the probe for a fixed epoch budget; representations stay frozen.

    The representation arrays are inputs, not parameters, so freezing
    is structural: nothing upstream is part of the optimizer.
    """
    if not items:
        raise ValueError("no probe training items")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    probe = SpeakerProbe(spec)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    probe.train()
    for _ in range(epochs):
        order = rng.permutation(len(items))
        for i in order:
            item = items[i]
            if spec.pooling == "mean":
                logits = probe.utterance_logits(item.rep)[None]
                target = torch.tensor([item.label])
            else:
                logits = probe.frame_logits(item.rep)
                target = torch.full((logits.shape[0],), item.label, dtype=torch.long)
            loss = nn.functional.cross_entropy(logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.eval()
    return probe


def report(probe: SpeakerProbe, test_items: list[ProbeItem]) -> ProbeReport:
    """Utterance-level accuracy via mean-pooled frame logits."""
    if not test_items:
        raise ValueError("empty probe test split")
    spec = probe.spec
    hits = np.zeros(spec.n_speakers)
    counts = np.zeros(spec.n_speakers)
    correct = 0
    with torch.no_grad():
        for item in test_items:
            pred = int(probe.utterance_logits(item.rep).argmax())
            counts[item.label] += 1
            if pred == item.label:
                hits[item.label] += 1
                correct += 1
    per_speaker = np.divide(hits, counts, out=np.zeros_like(hits), where=counts > 0)
    return ProbeReport(
        accuracy=correct / len(test_items),
        chance=1.0 / spec.n_speakers,
        per_speaker_accuracy=per_speaker,
        rep_source=spec.rep_source,
        rep_kind=spec.rep_kind,
        n_test=len(test_items),
    )


def make_provider(name: str, *, quantizer=None, stack: int = 2, encoder=None,
                  masked_encoder=None, extra: dict | None = None):
    """Resolve a representation provider id to (rep_kind, mel -> array).

    Built-ins: tokenizer (frozen quantizer ids), encoder_h (learned
    masked-prediction tokens), qphi (semantic encoder frames), mel (raw
    log-mel frames). `extra` maps additional ids to (kind, fn) pairs so
    external pretrained representations can plug in.
    """
    if extra and name in extra:
        return extra[name]
    try:
        if name == "tokenizer":
            if quantizer is None:
                raise ValueError("tokenizer provider needs a quantizer")
            return "discrete", lambda mel: quantize(mel, quantizer, stack).ids
        if name == "encoder_h":
            if masked_encoder is None:
                raise ValueError("encoder_h provider needs a trained masked encoder")
            return "discrete", lambda mel: masked_encoder.tokens(mel).ids
        if name == "qphi":
            if encoder is None or quantizer is None:
                raise ValueError("qphi provider needs the semantic encoder and quantizer")
            return "continuous", lambda mel: encoder.encode(quantize(mel, quantizer, stack)).numpy()
        if name == "mel":
            return "continuous", lambda mel: mel.frames
    except ValueError as e:
        raise ValueError(f"provider '{name}': {e}") from None
    raise ValueError(f"unknown representation provider '{name}'")
