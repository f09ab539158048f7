"""Semantic encoder: audio tokens in, speaker-free semantic frames out.

The encoder itself is a small conformer over token embeddings. What
makes its output speaker-free is the training objective: a recognition
(CTC) loss, a forward-sum alignment likelihood, and an MSE pulling each
output frame onto the duration-upsampled text embedding chosen by
monotonic alignment search. Timbre has no place to hide in any of the
three targets, so it gets squeezed out of the representation.
"""

import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .align import (
    beta_binomial_prior,
    forward_sum_loss,
    mas,
    semalign_loss,
    similarity_logits,
    upsample_by_durations,
)
from .nn_blocks import ConformerBlock, sinusoidal_positions
from .quantizer import TokenSequence
from .textref import TextEmbeddingSequence, TextTokenIds


@dataclass
class SemanticSequence:
    frames: object  # [T, d] ndarray or torch tensor
    source: str  # "encoder_output" or "upsampled_text"

    def __post_init__(self):
        if self.source not in ("encoder_output", "upsampled_text"):
            raise ValueError(f"unknown source {self.source!r}")
        if len(self.frames.shape) != 2 or self.frames.shape[0] == 0:
            raise ValueError("frames must be a non-empty [T, d] matrix")

    def numpy(self) -> np.ndarray:
        f = self.frames
        if isinstance(f, torch.Tensor):
            return f.detach().cpu().numpy()
        return np.asarray(f)

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class EncoderConfig:
    layers: int = 4
    d: int = 128
    heads: int = 4
    conv_kernel: int = 7
    token_vocab: int = 512
    text_vocab: int = 17  # symbols + blank 0
    d_text: int = 64
    omega: float = 1.0
    # Dropout smooths out per-speaker quirks in the embeddings and measurably
    # lowers speaker-probe accuracy on the trained encoder; token corruption
    # did not, so it ships disabled.
    dropout: float = 0.15
    token_dropout: float = 0.0
    lambda_ctc: float = 0.5
    lambda_sem: float = 1.0
    lambda_fs: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")


class SemanticEncoder(nn.Module):
    """Conformer Q over token ids, with CTC head and text projection.

    The CTC head and the text-to-semantic projection are training
    apparatus; downstream consumers only call encode().
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.token_vocab, cfg.d)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d, cfg.heads, cfg.conv_kernel, dropout=cfg.dropout)
            for _ in range(cfg.layers)
        )
        self.ctc_head = nn.Linear(cfg.d, cfg.text_vocab)
        self.text_proj = nn.Linear(cfg.d_text, cfg.d)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids: [T] int64 -> frames [T, d]. Length-preserving."""
        if self.training and self.cfg.token_dropout > 0:
            # Corrupt a fraction of input ids so the encoder cannot memorize
            # voice-specific token patterns; it must read content from context.
            drop = torch.rand(ids.shape) < self.cfg.token_dropout
            noise = torch.randint(0, self.cfg.token_vocab, ids.shape)
            ids = torch.where(drop, noise, ids)
        h = self.token_embed(ids)[None]
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.device, h.dtype)
        for block in self.blocks:
            h = block(h)
        return h[0]

    def encode(self, z_a: TokenSequence) -> SemanticSequence:
        if len(z_a) == 0:
            raise ValueError("cannot encode an empty token sequence")
        self.eval()
        with torch.no_grad():
            frames = self.forward(torch.from_numpy(z_a.ids))
        return SemanticSequence(frames=frames.numpy(), source="encoder_output")

    def encoder_parameters(self):
        """Parameters belonging to Q proper (embedding + conformer stack)."""
        yield from self.token_embed.parameters()
        for block in self.blocks:
            yield from block.parameters()


def ctc_required_length(ids: np.ndarray) -> int:
    """Minimum frame count for a feasible CTC alignment of this target."""
    repeats = int((ids[1:] == ids[:-1]).sum())
    return len(ids) + repeats


def ctc_loss(model: SemanticEncoder, a_hat: torch.Tensor, targets: TextTokenIds) -> torch.Tensor:
    """Recognition negative log-likelihood through the model's CTC head."""
    t = a_hat.shape[0]
    need = ctc_required_length(targets.ids)
    if t < need:
        raise ValueError(
            f"target {targets.text!r} needs at least {need} frames for a CTC path, got {t}"
        )
    log_probs = torch.log_softmax(model.ctc_head(a_hat), dim=-1)
    return nn.functional.ctc_loss(
        log_probs[:, None, :],
        torch.from_numpy(targets.ids)[None],
        torch.tensor([t]),
        torch.tensor([len(targets)]),
        blank=0,
        reduction="mean",
        zero_infinity=False,
    )


@dataclass
class SemencExample:
    utterance_id: str
    tokens: TokenSequence
    text_ids: TextTokenIds
    text_embeddings: TextEmbeddingSequence


def training_step(model: SemanticEncoder, batch: list[SemencExample]) -> dict:
    """One forward pass over a batch; returns loss components.

    total = lambda_ctc*ctc + lambda_sem*sem + lambda_fs*forward_sum.
    Alignment search runs per item on detached scores; the forward-sum
    and MSE terms carry the gradient back into the encoder.
    """
    cfg = model.cfg
    parts = {"ctc": 0.0, "sem": 0.0, "forward_sum": 0.0}
    total = None
    for ex in batch:
        a_hat = model.forward(torch.from_numpy(ex.tokens.ids))
        if not torch.isfinite(a_hat).all():
            raise RuntimeError(f"non-finite encoder output on {ex.utterance_id}; training diverged")
        t, text_len = a_hat.shape[0], len(ex.text_embeddings)
        if text_len > t:
            raise ValueError(
                f"{ex.utterance_id}: {text_len} symbols cannot align onto {t} token frames"
            )
        txt = torch.as_tensor(ex.text_embeddings.embeddings, dtype=a_hat.dtype)
        projected = model.text_proj(txt)
        prior = beta_binomial_prior(text_len, t, cfg.omega)
        sim = similarity_logits(a_hat, projected, prior)
        path = mas(sim)  # detaches internally: path choice is not a gradient route
        loss_fs = forward_sum_loss(sim) / t
        upsampled = upsample_by_durations(ex.text_embeddings.embeddings, path)
        loss_sem = semalign_loss(a_hat, upsampled, model.text_proj)
        loss_ctc = ctc_loss(model, a_hat, ex.text_ids)
        item_total = cfg.lambda_ctc * loss_ctc + cfg.lambda_sem * loss_sem + cfg.lambda_fs * loss_fs
        total = item_total if total is None else total + item_total
        parts["ctc"] += float(loss_ctc.detach())
        parts["sem"] += float(loss_sem.detach())
        parts["forward_sum"] += float(loss_fs.detach())
    n = len(batch)
    total = total / n
    if not torch.isfinite(total):
        ids = [ex.utterance_id for ex in batch]
        raise RuntimeError(
            f"non-finite semantic-encoder loss {float(total.detach())} on batch {ids}; "
            f"components per-item sums: {parts}"
        )
    parts = {k: v / n for k, v in parts.items()}
    parts["total"] = float(total.detach())
    parts["_total_tensor"] = total
    return parts


def warmup_decay_lr(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to `peak`, then linear decay to 10% of peak."""
    if step < warmup:
        return peak * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return peak * (1.0 - 0.9 * min(1.0, frac))


def atomic_torch_save(obj, path) -> None:
    """Write via a sibling temp file then rename, so readers never see a partial file."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(obj, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_encoder(model: SemanticEncoder, path, step: int, provider: dict | None = None,
                 fingerprint: str = "") -> None:
    atomic_torch_save(
        {
            "state_dict": model.state_dict(),
            "config": asdict(model.cfg),
            "provider": provider or {},
            "step": step,
            "fingerprint": fingerprint,
        },
        path,
    )


def load_encoder(path) -> tuple[SemanticEncoder, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = SemanticEncoder(EncoderConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


@dataclass
class SemencTrainConfig:
    steps: int = 2500
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup: int = 80
    weight_decay: float = 0.01
    # The recognition head trains faster than the trunk and carries its own
    # decay setting: the closer the head fits the current encoder output, the
    # less of the recognition gradient leaks into the encoder output itself.
    head_lr_mult: float = 8.0
    head_weight_decay: float = 0.0
    # Budget for the recognition-only comparison encoder. Each leg trains to
    # its own convergence: the recognition loss alone plateaus early, and
    # pushing that encoder far past its plateau slowly squeezes speaker
    # information out of it too, which blurs the very contrast the speaker
    # probes are there to show.
    ablation_steps: int = 1000
    seed: int = 0
    log_every: int = 100


def train_semantic_encoder(
    examples: list[SemencExample],
    cfg: EncoderConfig,
    train_cfg: SemencTrainConfig,
    checkpoint_path=None,
    fingerprint: str = "",
    provider: dict | None = None,
    log=print,
) -> SemanticEncoder:
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = SemanticEncoder(cfg)
    head_ids = {id(p) for p in model.ctc_head.parameters()}
    trunk = [p for p in model.parameters() if id(p) not in head_ids]
    opt = torch.optim.AdamW(
        [
            {"params": trunk, "weight_decay": train_cfg.weight_decay, "lr_scale": 1.0},
            {"params": list(model.ctc_head.parameters()),
             "weight_decay": train_cfg.head_weight_decay,
             "lr_scale": train_cfg.head_lr_mult},
        ],
        lr=train_cfg.peak_lr,
    )
    model.train()
    history = []
    for step in range(train_cfg.steps):
        lr = warmup_decay_lr(step, train_cfg.peak_lr, train_cfg.warmup, train_cfg.steps)
        for group in opt.param_groups:
            group["lr"] = lr * group["lr_scale"]
        picks = rng.integers(0, len(examples), train_cfg.batch_size)
        batch = [examples[i] for i in picks]
        parts = training_step(model, batch)
        opt.zero_grad()
        parts["_total_tensor"].backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        history.append(parts["total"])
        if log and (step + 1) % train_cfg.log_every == 0:
            log(
                f"semenc step {step + 1}/{train_cfg.steps} "
                f"total {parts['total']:.4f} ctc {parts['ctc']:.4f} "
                f"sem {parts['sem']:.4f} fs {parts['forward_sum']:.4f}"
            )
    model.eval()
    model.loss_history = history
    if checkpoint_path is not None:
        save_encoder(model, checkpoint_path, train_cfg.steps, provider, fingerprint)
    return model
