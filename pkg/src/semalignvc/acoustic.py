"""Flow-matching mel infiller and the end-to-end conversion assembly.

The acoustic model learns the conditional field that transports noise
to mel frames inside a masked span, given the surrounding context mel
(the timbre reference) and frame-rate audio tokens (the content).
Sampling integrates that field with the classic midpoint method, two
field evaluations per step.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .features import FeatureConfig, MelSpectrogram, compute_mel, extract_prosody, normalize_prosody, pool_prosody
from .nn_blocks import TransformerBlock, sinusoidal_positions
from .quantizer import RandomQuantizer, TokenSequence, quantize
from .semenc import atomic_torch_save, warmup_decay_lr


@dataclass
class SpanMask:
    mask: np.ndarray  # [T] bool, True = to generate
    spans: list  # list of (start, end) half-open

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        t = len(self.mask)
        rebuilt = np.zeros(t, dtype=bool)
        prev_end = 0
        for start, end in self.spans:
            if not (0 <= start < end <= t):
                raise ValueError(f"span ({start}, {end}) outside [0, {t})")
            if start < prev_end:
                raise ValueError("spans must be disjoint and ordered")
            rebuilt[start:end] = True
            prev_end = end
        if not np.array_equal(rebuilt, self.mask):
            raise ValueError("mask inconsistent with spans")


def sample_span_mask(t: int, rng: np.random.Generator) -> SpanMask:
    """One contiguous span, length ratio ~ U(0.7, 1.0); 10% chance full mask."""
    if t < 4:
        raise ValueError("sequence too short to mask")
    if rng.random() < 0.1:
        return SpanMask(mask=np.ones(t, dtype=bool), spans=[(0, t)])
    ratio = rng.uniform(0.7, 1.0)
    length = min(t, max(1, int(round(ratio * t))))
    start = int(rng.integers(0, t - length + 1))
    mask = np.zeros(t, dtype=bool)
    mask[start : start + length] = True
    return SpanMask(mask=mask, spans=[(start, start + length)])


@dataclass
class FlowBatch:
    """One training item in normalized mel space."""

    x1: torch.Tensor  # [T, n_mels] target
    x0: torch.Tensor  # [T, n_mels] noise
    t: torch.Tensor  # scalar in [0, 1]
    ctx: torch.Tensor  # [T, n_mels], masked region zeroed
    tokens: torch.Tensor  # [T] int64, upsampled to the frame rate
    mask: SpanMask

    def __post_init__(self):
        if not (self.x1.shape == self.x0.shape == self.ctx.shape):
            raise ValueError("x1/x0/ctx shapes disagree")
        if self.tokens.shape[0] != self.x1.shape[0] or len(self.mask.mask) != self.x1.shape[0]:
            raise ValueError("tokens/mask length disagrees with mel length")
        tv = float(self.t)
        if not 0.0 <= tv <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {tv}")


@dataclass
class AcousticConfig:
    layers: int = 4
    d: int = 128
    heads: int = 4
    n_mels: int = 80
    token_vocab: int = 512
    d_token: int = 64
    stack: int = 2
    sigma_min: float = 1e-4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")


def time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a scalar flow time, shape [dim]."""
    half = torch.arange(dim // 2, device=t.device, dtype=t.dtype)
    freq = torch.exp(-math.log(10000.0) * half / (dim // 2))
    angles = t * 1000.0 * freq
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class FlowField(nn.Module):
    """Bidirectional transformer predicting the transport field u(x_t)."""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.token_vocab, cfg.d_token)
        self.in_proj = nn.Linear(2 * cfg.n_mels + 1 + cfg.d_token, cfg.d)
        self.time_proj = nn.Linear(cfg.d, cfg.d)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.heads, causal=False) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.d)
        self.out_proj = nn.Linear(cfg.d, cfg.n_mels)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor,
                tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """x_t, ctx: [T, n_mels]; t scalar tensor; tokens: [T]; mask: [T] bool."""
        dtype = self.in_proj.weight.dtype
        tok = self.token_embed(tokens).to(dtype)
        feats = torch.cat(
            [x_t.to(dtype), ctx.to(dtype), mask.to(dtype)[:, None], tok], dim=1
        )
        h = self.in_proj(feats)[None]
        h = h + sinusoidal_positions(h.shape[1], self.cfg.d, h.device, dtype)
        h = h + self.time_proj(time_embedding(t.to(dtype), self.cfg.d))[None, None, :]
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.norm(h))[0]


def cfm_loss(model: FlowField, batch: FlowBatch) -> torch.Tensor:
    """Masked-frames MSE between the predicted and target transport field.

    x_t = (1 - (1 - sigma_min) t) x0 + t x1, u = x1 - (1 - sigma_min) x0.
    Context frames never contribute: the loss is averaged over masked
    frames only.
    """
    s = model.cfg.sigma_min
    t = batch.t
    x_t = (1.0 - (1.0 - s) * t) * batch.x0 + t * batch.x1
    u = batch.x1 - (1.0 - s) * batch.x0
    mask_t = torch.from_numpy(batch.mask.mask)
    pred = model(x_t, t, batch.ctx, batch.tokens, mask_t)
    if not bool(mask_t.any()):
        raise ValueError("flow batch with nothing masked")
    loss = torch.mean((pred[mask_t] - u[mask_t]) ** 2)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite flow-matching loss {float(loss.detach())}")
    return loss


def midpoint_solve(field, x0, steps: int, t0: float = 0.0, t1: float = 1.0):
    """Integrate dx/dt = field(t, x) from t0 to t1 by the midpoint method.

    x <- x + h * field(t + h/2, x + (h/2) * field(t, x)); exactly
    2*steps field evaluations. Works on numpy arrays or torch tensors.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h = (t1 - t0) / steps
    x = x0
    t = t0
    for _ in range(steps):
        k1 = field(t, x)
        k2 = field(t + h / 2.0, x + (h / 2.0) * k1)
        x = x + h * k2
        t += h
    return x


def infill(model: FlowField, mel_ctx: np.ndarray, mask: SpanMask, tokens: np.ndarray,
           stats: tuple, steps: int = 12, seed: int = 0) -> np.ndarray:
    """Generate mel frames at masked positions; copy the rest through.

    mel_ctx: [T, n_mels] in mel units (masked rows may hold anything;
    they are ignored). stats = (mean, std) per mel bin from training.
    Unmasked rows of the output are the input rows, untouched.
    """
    mean, std = stats
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    t_len = mel_ctx.shape[0]
    m = mask.mask
    ctx_norm = (mel_ctx.astype(np.float32) - mean) / std
    ctx_norm[m] = 0.0
    ctx_t = torch.from_numpy(ctx_norm)
    tokens_t = torch.from_numpy(np.asarray(tokens, dtype=np.int64))
    mask_t = torch.from_numpy(m)
    rng = np.random.default_rng(seed)
    x_masked = torch.from_numpy(rng.standard_normal((int(m.sum()), mel_ctx.shape[1])).astype(np.float32))

    model.eval()

    def field(t, x):
        full = ctx_t.clone()
        full[mask_t] = x
        with torch.no_grad():
            out = model(full, torch.tensor(float(t)), ctx_t, tokens_t, mask_t)
        return out[mask_t]

    x1 = midpoint_solve(field, x_masked, steps)
    out = mel_ctx.copy()
    out[m] = (x1.numpy() * std + mean)[: int(m.sum())]
    return out


def upsample_tokens(ids: np.ndarray, stack: int) -> np.ndarray:
    return np.repeat(np.asarray(ids, dtype=np.int64), stack)


# ---------------------------------------------------------------------------
# training

@dataclass
class AcousticExample:
    utterance_id: str
    mel: np.ndarray  # [T_tok*stack, n_mels]
    tokens: np.ndarray  # [T_tok]


@dataclass
class AcousticTrainConfig:
    steps: int = 900
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100


def mel_stats(examples: list[AcousticExample]) -> tuple:
    stacked = np.concatenate([ex.mel for ex in examples], axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0) + 1e-6


def train_acoustic(examples: list[AcousticExample], cfg: AcousticConfig,
                   train_cfg: AcousticTrainConfig, checkpoint_path=None,
                   fingerprint: str = "", log=print) -> tuple[FlowField, tuple]:
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = FlowField(cfg)
    stats = mel_stats(examples)
    mean, std = stats
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.peak_lr,
                            weight_decay=train_cfg.weight_decay)
    model.train()
    history = []
    for step in range(train_cfg.steps):
        lr = warmup_decay_lr(step, train_cfg.peak_lr, train_cfg.warmup, train_cfg.steps)
        for group in opt.param_groups:
            group["lr"] = lr
        picks = rng.integers(0, len(examples), train_cfg.batch_size)
        total = None
        for i in picks:
            ex = examples[i]
            t_len = ex.mel.shape[0]
            norm = ((ex.mel - mean) / std).astype(np.float32)
            span = sample_span_mask(t_len, rng)
            ctx = norm.copy()
            ctx[span.mask] = 0.0
            batch = FlowBatch(
                x1=torch.from_numpy(norm),
                x0=torch.from_numpy(rng.standard_normal(norm.shape).astype(np.float32)),
                t=torch.tensor(float(rng.uniform(0.0, 1.0))),
                ctx=torch.from_numpy(ctx),
                tokens=torch.from_numpy(upsample_tokens(ex.tokens, cfg.stack)),
                mask=span,
            )
            loss = cfm_loss(model, batch)
            total = loss if total is None else total + loss
        total = total / len(picks)
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if log and (step + 1) % train_cfg.log_every == 0:
            log(f"acoustic step {step + 1}/{train_cfg.steps} loss {history[-1]:.4f}")
    model.eval()
    model.loss_history = history
    if checkpoint_path is not None:
        atomic_torch_save(
            {"state_dict": model.state_dict(), "config": asdict(cfg),
             "mel_mean": stats[0], "mel_std": stats[1],
             "step": train_cfg.steps, "fingerprint": fingerprint},
            checkpoint_path,
        )
    return model, stats


def load_acoustic(path) -> tuple[FlowField, tuple, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = FlowField(AcousticConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, (blob["mel_mean"], blob["mel_std"]), blob


# ---------------------------------------------------------------------------
# end-to-end conversion

@dataclass
class VCModels:
    quantizer: RandomQuantizer
    encoder: object  # SemanticEncoder
    lm: object  # SemanticLM
    flow: FlowField
    flow_stats: tuple
    feature_config: FeatureConfig
    stack: int = 2


@dataclass
class ConversionResult:
    mel: np.ndarray  # generated region only, [len(z_hat)*stack, n_mels]
    tokens: TokenSequence
    truncated: bool


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise RuntimeError(f"conversion failed at stage '{name}': {e}") from e


def vc_infer(source_wav: np.ndarray, reference_wav: np.ndarray, models: VCModels,
             sampler: str = "greedy", steps: int = 12, seed: int = 0) -> ConversionResult:
    """Convert source content onto the reference speaker's timbre.

    Tokens of the source are encoded to speaker-free semantic frames,
    the LM re-tokenizes them under the reference's timbre prompt, and
    the flow model renders mel for the new tokens with the reference
    as context. Returns the generated region only.
    """
    from .semlm import generate, segment_reference

    fc = models.feature_config
    stack = models.stack

    def prep(wav):
        mel = compute_mel(wav, fc)
        prosody = extract_prosody(wav, fc)
        toks = quantize(mel, models.quantizer, stack)
        return mel, prosody, toks

    src_mel, src_prosody, src_tokens = _stage("features(source)", prep, source_wav)
    ref_mel, _, ref_tokens = _stage("features(reference)", prep, reference_wav)

    a_hat = _stage("semantic_encode", models.encoder.encode, src_tokens).numpy()
    src_norm = normalize_prosody(src_prosody)
    pooled = pool_prosody(src_norm, stack)[: len(src_tokens)]

    # reference prompt: the tail quarter, matching the eval-mode split
    ref_mel_tok = ref_mel.frames[: len(ref_tokens) * stack].reshape(len(ref_tokens), stack, -1)
    _, ref_part, _ = _stage(
        "segment_reference", segment_reference,
        {"mel": ref_mel_tok, "tokens": ref_tokens.ids}, False,
    )
    mu_ref = ref_part["mel"].reshape(-1, fc.n_mels)

    gen = _stage(
        "lm_generate", generate, models.lm, a_hat, pooled, mu_ref,
        sampler, 10, 0.8, 16, seed, src_tokens.frame_rate,
    )
    z_hat = gen.tokens
    if len(z_hat) == 0:
        raise RuntimeError("conversion failed at stage 'lm_generate': empty token output")

    ref_frames = ref_mel.frames[: len(ref_tokens) * stack]
    gen_len = len(z_hat) * stack
    total = ref_frames.shape[0] + gen_len
    ctx = np.zeros((total, fc.n_mels), dtype=ref_frames.dtype)
    ctx[: ref_frames.shape[0]] = ref_frames
    mask = np.zeros(total, dtype=bool)
    mask[ref_frames.shape[0] :] = True
    span = SpanMask(mask=mask, spans=[(ref_frames.shape[0], total)])
    tokens_full = upsample_tokens(np.concatenate([ref_tokens.ids, z_hat.ids]), stack)

    full = _stage(
        "acoustic_infill", infill, models.flow, ctx, span, tokens_full,
        models.flow_stats, steps, seed,
    )
    return ConversionResult(mel=full[ref_frames.shape[0] :], tokens=z_hat,
                            truncated=gen.truncated)
