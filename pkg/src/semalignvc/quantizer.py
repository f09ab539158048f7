"""Frozen random-projection audio tokenizer, plus an optional learned encoder.

The default token source never trains: a seeded random projection of
stacked, per-utterance-standardized mel frames, snapped to the nearest
row of a seeded unit-norm codebook. Tokens therefore entangle content
and speaker exactly the way a learned codec would, which is the premise
the rest of the pipeline exists to untangle. A small masked-prediction
conformer can optionally be trained against the same targets as a
learned drop-in token source.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .features import MelSpectrogram
from .nn_blocks import ConformerBlock, sinusoidal_positions


@dataclass
class TokenSequence:
    ids: np.ndarray  # [T_tok] int64
    frame_rate: float

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ValueError("token ids must be a vector")

    def __len__(self) -> int:
        return len(self.ids)


class RandomQuantizer:
    """Frozen projection + codebook, reproducible from (seed, dims)."""

    def __init__(self, seed: int, stacked_feature_dim: int, code_dim: int, vocab_size: int):
        if stacked_feature_dim <= 0 or code_dim <= 0:
            raise ValueError("dimensions must be positive")
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        rng = np.random.default_rng(seed)
        projection = rng.normal(0.0, 1.0 / np.sqrt(stacked_feature_dim), (stacked_feature_dim, code_dim))
        codebook = rng.normal(0.0, 1.0, (vocab_size, code_dim))
        codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)
        projection.setflags(write=False)
        codebook.setflags(write=False)
        self.seed = int(seed)
        self.projection = projection
        self.codebook = codebook

    @property
    def vocab_size(self) -> int:
        return self.codebook.shape[0]

    @property
    def code_dim(self) -> int:
        return self.codebook.shape[1]

    @property
    def stacked_feature_dim(self) -> int:
        return self.projection.shape[0]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stacked_feature_dim": self.stacked_feature_dim,
            "code_dim": self.code_dim,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomQuantizer":
        return cls(d["seed"], d["stacked_feature_dim"], d["code_dim"], d["vocab_size"])


def build_quantizer(seed: int, stacked_feature_dim: int, code_dim: int, vocab_size: int) -> RandomQuantizer:
    return RandomQuantizer(seed, stacked_feature_dim, code_dim, vocab_size)


def standardize_frames(frames: np.ndarray) -> np.ndarray:
    """Per-utterance, per-dimension z-scoring."""
    x = np.asarray(frames, dtype=np.float64)
    mean = x.mean(axis=0, keepdims=True)
    std = x.std(axis=0, keepdims=True)
    return (x - mean) / (std + 1e-8)


def quantize(mel: MelSpectrogram, q: RandomQuantizer, stack: int = 2) -> TokenSequence:
    """Snap stacked mel frames to nearest-codebook-row token ids."""
    t_audio = len(mel)
    if t_audio < stack:
        raise ValueError(f"need at least {stack} frames to form one token, got {t_audio}")
    x = standardize_frames(mel.frames)
    t_tok = t_audio // stack
    stacked = x[: t_tok * stack].reshape(t_tok, -1)
    if stacked.shape[1] != q.stacked_feature_dim:
        raise ValueError(
            f"stacked feature dim {stacked.shape[1]} does not match quantizer "
            f"({q.stacked_feature_dim}); check n_mels and stack"
        )
    proj = stacked @ q.projection
    proj /= np.linalg.norm(proj, axis=1, keepdims=True) + 1e-12
    # rows are unit norm, so argmin L2 distance == argmax dot product
    ids = np.argmax(proj @ q.codebook.T, axis=1)
    return TokenSequence(ids=ids, frame_rate=mel.frame_rate / stack)


# ---------------------------------------------------------------------------
# optional masked-prediction encoder over mel frames

@dataclass
class MaskedEncoderConfig:
    layers: int = 2
    d: int = 64
    heads: int = 2
    conv_kernel: int = 7
    dropout: float = 0.0
    mask_prob: float = 0.06  # per-token span start probability
    mask_span: int = 4  # tokens
    steps: int = 300
    batch_size: int = 8
    lr: float = 2e-3


class MaskedTokenEncoder(nn.Module):
    """Conformer over mel frames predicting token ids at the token rate."""

    def __init__(self, n_mels: int, stack: int, vocab_size: int, cfg: MaskedEncoderConfig):
        super().__init__()
        self.stack = stack
        self.cfg = cfg
        self.input_proj = nn.Linear(n_mels * stack, cfg.d)
        self.mask_embed = nn.Parameter(torch.zeros(cfg.d))
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d, cfg.heads, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.layers)
        )
        self.head = nn.Linear(cfg.d, vocab_size)

    def forward(self, stacked: torch.Tensor, masked: torch.Tensor | None = None) -> torch.Tensor:
        """stacked: [B, T_tok, n_mels*stack]; masked: [B, T_tok] bool."""
        h = self.input_proj(stacked)
        if masked is not None:
            h = torch.where(masked[..., None], self.mask_embed.expand_as(h), h)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.device, h.dtype)
        for block in self.blocks:
            h = block(h)
        return self.head(h)

    def tokens(self, mel: MelSpectrogram) -> TokenSequence:
        x = standardize_frames(mel.frames)
        t_tok = len(mel) // self.stack
        stacked = torch.from_numpy(x[: t_tok * self.stack].reshape(1, t_tok, -1)).float()
        self.eval()
        with torch.no_grad():
            ids = self.forward(stacked).argmax(dim=-1)[0].numpy()
        return TokenSequence(ids=ids, frame_rate=mel.frame_rate / self.stack)


def masked_prediction_loss(
    model: MaskedTokenEncoder,
    stacked: torch.Tensor,
    targets: torch.Tensor,
    masked: torch.Tensor,
) -> torch.Tensor:
    """Cross entropy at masked token positions; zero when nothing is masked."""
    logits = model(stacked, masked)
    if not bool(masked.any()):
        return logits.sum() * 0.0
    return nn.functional.cross_entropy(logits[masked], targets[masked])


def sample_token_mask(t_tok: int, cfg: MaskedEncoderConfig, rng: np.random.Generator) -> np.ndarray:
    starts = rng.random(t_tok) < cfg.mask_prob
    mask = np.zeros(t_tok, dtype=bool)
    for s in np.where(starts)[0]:
        mask[s : s + cfg.mask_span] = True
    return mask


def train_masked_encoder(
    utterances: list[tuple[MelSpectrogram, TokenSequence]],
    q: RandomQuantizer,
    stack: int,
    cfg: MaskedEncoderConfig,
    seed: int = 0,
) -> MaskedTokenEncoder:
    """Train the optional learned token source against frozen quantizer targets.

    `utterances` pairs each mel with its quantize() tokens; the quantizer
    itself is only consulted for the vocabulary size and stays frozen.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    n_mels = utterances[0][0].frames.shape[1]
    model = MaskedTokenEncoder(n_mels, stack, q.vocab_size, cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    model.train()

    for step in range(cfg.steps):
        picks = rng.integers(0, len(utterances), cfg.batch_size)
        items = []
        for i in picks:
            mel, toks = utterances[i]
            x = standardize_frames(mel.frames)
            t_tok = len(toks)
            stacked = x[: t_tok * stack].reshape(t_tok, -1)
            mask = sample_token_mask(t_tok, cfg, rng)
            items.append((stacked, toks.ids, mask))
        t_max = max(len(m) for _, m, _ in items)
        xb = torch.zeros(len(items), t_max, n_mels * stack)
        yb = torch.zeros(len(items), t_max, dtype=torch.long)
        mb = torch.zeros(len(items), t_max, dtype=torch.bool)
        for bi, (stacked, ids, mask) in enumerate(items):
            xb[bi, : len(ids)] = torch.from_numpy(stacked).float()
            yb[bi, : len(ids)] = torch.from_numpy(ids)
            mb[bi, : len(ids)] = torch.from_numpy(mask)
        loss = masked_prediction_loss(model, xb, yb, mb)
        if not torch.isfinite(loss):
            raise RuntimeError(f"masked encoder diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model
