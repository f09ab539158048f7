"""Decoder-only LM over audio tokens, prompted with semantic frames.

Prompt layout per utterance:

    [SOS, semantic frames, SEP, reference mel, SEP, audio tokens, EOS]

Cross entropy is computed only where the targets are audio tokens or
the EOS; semantic frames enter through a gradient barrier so the LM
can never push timbre back into the semantic encoder. The reference
mel excerpt (about a quarter of the utterance) is the only timbre
source the model sees.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .nn_blocks import TransformerBlock, sinusoidal_positions
from .quantizer import TokenSequence
from .semenc import atomic_torch_save, warmup_decay_lr

ROLE_ORDER = ("SOS", "SEMANTIC", "SEP", "REF_MEL", "SEP", "TOKENS", "EOS")


@dataclass
class LMConfig:
    layers: int = 4
    d: int = 128
    heads: int = 4
    token_vocab: int = 512  # audio-token ids 0..V-1
    d_sem: int = 128
    n_prosody: int = 3
    n_mels: int = 80
    max_len: int = 1024

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")

    @property
    def vocab(self) -> int:
        return self.token_vocab + 3  # + EOS, SOS, SEP

    @property
    def eos_id(self) -> int:
        return self.token_vocab

    @property
    def sos_id(self) -> int:
        return self.token_vocab + 1

    @property
    def sep_id(self) -> int:
        return self.token_vocab + 2


@dataclass
class PromptSequence:
    """Embedded prompt plus supervision bookkeeping.

    segments: (role, embedded payload [len, d]) in ROLE_ORDER; empty
    payloads are allowed only for TOKENS and EOS (generation mode).
    loss_mask[p] is true when the input at p is a supervised target,
    i.e. cross entropy applies to logits at p-1 predicting target_ids[p].
    """

    segments: list
    embedded: torch.Tensor  # [N, d]
    loss_mask: np.ndarray  # [N] bool
    target_ids: np.ndarray  # [N] int64, -1 where unsupervised

    def __post_init__(self):
        roles = tuple(role for role, _ in self.segments)
        if roles != ROLE_ORDER:
            raise ValueError(f"prompt roles must be {ROLE_ORDER}, got {roles}")
        n = sum(len(payload) for _, payload in self.segments)
        if self.embedded.shape[0] != n or len(self.loss_mask) != n or len(self.target_ids) != n:
            raise ValueError("segment payloads inconsistent with flattened length")
        offset = 0
        for role, payload in self.segments:
            span = self.loss_mask[offset : offset + len(payload)]
            if role not in ("TOKENS", "EOS") and span.any():
                raise ValueError(f"loss mask set on {role} positions")
            offset += len(payload)
        if self.loss_mask[0]:
            raise ValueError("position 0 has no preceding logits to supervise")

    def __len__(self) -> int:
        return self.embedded.shape[0]


class SemanticLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.sem_proj = nn.Linear(cfg.d_sem + cfg.n_prosody, cfg.d)
        self.ref_proj = nn.Linear(cfg.n_mels, cfg.d)
        self.token_embed = nn.Embedding(cfg.vocab, cfg.d)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d, cfg.heads, causal=True) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.d)
        self.head = nn.Linear(cfg.d, cfg.vocab)

    def forward(self, embedded: torch.Tensor) -> torch.Tensor:
        """embedded: [N, d] prompt rows -> logits [N, vocab]."""
        if embedded.shape[0] > self.cfg.max_len:
            raise ValueError(f"prompt length {embedded.shape[0]} exceeds max_len {self.cfg.max_len}")
        h = embedded[None] + sinusoidal_positions(
            embedded.shape[0], embedded.shape[1], embedded.device, embedded.dtype
        )
        for block in self.blocks:
            h = block(h)
        return self.head(self.norm(h))[0]

    def build_prompt(self, a_hat, prosody, ref_mel, tokens=None) -> PromptSequence:
        """Assemble and embed one prompt.

        a_hat: [T, d_sem] (tensor or array; detached here so LM loss
        cannot reach the encoder), prosody: [T, 3] aligned with a_hat,
        ref_mel: [R, n_mels], tokens: [M] target ids for training, or
        None for a generation prompt (empty TOKENS and EOS segments).
        """
        cfg = self.cfg
        if isinstance(a_hat, torch.Tensor):
            a_hat = a_hat.detach()  # the gradient barrier
        else:
            a_hat = torch.as_tensor(np.asarray(a_hat), dtype=torch.float32)
        pro = torch.as_tensor(np.asarray(prosody), dtype=a_hat.dtype)
        if pro.shape[0] != a_hat.shape[0]:
            raise ValueError(
                f"semantic/prosody length mismatch: {a_hat.shape[0]} vs {pro.shape[0]}"
            )
        ref = torch.as_tensor(np.asarray(ref_mel), dtype=a_hat.dtype)

        dev = next(self.parameters()).device
        sem = self.sem_proj(torch.cat([a_hat, pro], dim=1).to(dev).float())
        refe = self.ref_proj(ref.to(dev).float())
        special = lambda tid: self.token_embed(torch.tensor([tid], device=dev))
        sos, sep, eos = special(cfg.sos_id), special(cfg.sep_id), special(cfg.eos_id)

        if tokens is not None:
            ids = np.asarray(tokens.ids if isinstance(tokens, TokenSequence) else tokens,
                             dtype=np.int64)
            if (ids < 0).any() or (ids >= cfg.token_vocab).any():
                raise ValueError("token ids outside the audio vocabulary")
            tok = self.token_embed(torch.from_numpy(ids).to(dev))
            eos_seg = eos
        else:
            ids = np.zeros(0, dtype=np.int64)
            tok = sos[:0]  # empty [0, d]
            eos_seg = eos[:0]

        segments = [
            ("SOS", sos),
            ("SEMANTIC", sem),
            ("SEP", sep),
            ("REF_MEL", refe),
            ("SEP", sep),
            ("TOKENS", tok),
            ("EOS", eos_seg),
        ]
        embedded = torch.cat([payload for _, payload in segments], dim=0)
        n = embedded.shape[0]
        loss_mask = np.zeros(n, dtype=bool)
        target_ids = np.full(n, -1, dtype=np.int64)
        if tokens is not None:
            start = n - len(ids) - 1
            loss_mask[start:] = True
            target_ids[start : start + len(ids)] = ids
            target_ids[-1] = cfg.eos_id
        return PromptSequence(segments=segments, embedded=embedded,
                              loss_mask=loss_mask, target_ids=target_ids)


def lm_loss(model: SemanticLM, prompt: PromptSequence) -> torch.Tensor:
    """Mean cross entropy at supervised positions (audio tokens + EOS)."""
    if not prompt.loss_mask.any():
        raise ValueError("generation-mode prompt has nothing to supervise")
    logits = model(prompt.embedded)
    mask = torch.from_numpy(prompt.loss_mask)
    targets = torch.from_numpy(prompt.target_ids[prompt.loss_mask])
    # logits at p-1 predict the input at p
    pred = logits[:-1][mask[1:]]
    return nn.functional.cross_entropy(pred, targets)


def segment_reference(arrays: dict, train: bool, rng: np.random.Generator | None = None,
                      ratio: float = 0.25, min_len: int = 16):
    """Split aligned per-utterance arrays into (main, reference) parts.

    All values in `arrays` share leading length T. The reference is a
    contiguous excerpt of round(ratio*T) positions: uniform random
    offset when train=True (rng required), the tail otherwise. The main
    part is everything else, in order. Returns (main, ref, (start, length)).
    """
    lengths = {k: len(v) for k, v in arrays.items()}
    t = next(iter(lengths.values()))
    if any(n != t for n in lengths.values()):
        raise ValueError(f"arrays must share leading length, got {lengths}")
    if t < min_len:
        raise ValueError(f"utterance too short to segment: {t} < {min_len}")
    ref_len = int(round(ratio * t))
    ref_len = max(1, min(ref_len, t - 1))
    if train:
        if rng is None:
            raise ValueError("training-mode segmentation needs an rng")
        start = int(rng.integers(0, t - ref_len + 1))
    else:
        start = t - ref_len
    main = {k: np.concatenate([v[:start], v[start + ref_len :]], axis=0)
            for k, v in arrays.items()}
    ref = {k: v[start : start + ref_len] for k, v in arrays.items()}
    return main, ref, (start, ref_len)


@dataclass
class GenerationResult:
    tokens: TokenSequence
    truncated: bool


def generate(model: SemanticLM, a_hat, prosody, ref_mel, sampler: str = "greedy",
             top_k: int = 10, temperature: float = 0.8, extra: int = 16,
             seed: int = 0, frame_rate: float = 50.0) -> GenerationResult:
    """Autoregressive decoding until EOS or len(a_hat) + extra tokens.

    sampler "greedy" is deterministic; "topk" draws from the top-k
    renormalized distribution at the given temperature with a seeded
    generator. Special ids are never emitted into the result.
    """
    if sampler not in ("greedy", "topk"):
        raise ValueError(f"unknown sampler {sampler!r}")
    cfg = model.cfg
    model.eval()
    prompt = model.build_prompt(a_hat, prosody, ref_mel, tokens=None)
    cap = len(np.asarray(a_hat)) + extra
    gen = torch.Generator().manual_seed(seed)
    out: list[int] = []
    truncated = False
    with torch.no_grad():
        embedded = prompt.embedded
        while True:
            logits = model(embedded)[-1]
            if sampler == "greedy":
                # specials other than EOS are structural, never sampled
                logits = logits.clone()
                logits[cfg.sos_id] = -torch.inf
                logits[cfg.sep_id] = -torch.inf
                nxt = int(torch.argmax(logits))
            else:
                logits = logits.clone()
                logits[cfg.sos_id] = -torch.inf
                logits[cfg.sep_id] = -torch.inf
                vals, idx = torch.topk(logits / temperature, top_k)
                probs = torch.softmax(vals, dim=0)
                nxt = int(idx[torch.multinomial(probs, 1, generator=gen)])
            if nxt == cfg.eos_id:
                break
            out.append(nxt)
            if len(out) >= cap:
                truncated = True
                break
            embedded = torch.cat(
                [embedded, model.token_embed(torch.tensor([nxt], device=embedded.device))],
                dim=0,
            )
    return GenerationResult(
        tokens=TokenSequence(ids=np.array(out, dtype=np.int64), frame_rate=frame_rate),
        truncated=truncated,
    )


@dataclass
class LMExample:
    """Per-utterance training material at the token rate.

    tokens: [T_tok] ids; mel: [T_tok*stack, n_mels]; prosody: [T_tok, 3]
    pooled to the token rate. Semantic frames are recomputed per split
    from the main-part tokens by the frozen encoder.
    """

    utterance_id: str
    tokens: np.ndarray
    mel: np.ndarray
    prosody: np.ndarray
    stack: int

    def __post_init__(self):
        t = len(self.tokens)
        if self.mel.shape[0] != t * self.stack or self.prosody.shape[0] != t:
            raise ValueError(f"{self.utterance_id}: token/mel/prosody lengths disagree")


def split_example(ex: LMExample, encoder, train: bool, rng=None):
    """Segment one utterance and encode the main part.

    Returns (a_hat [T_main, d_sem], prosody [T_main, 3], ref_mel, main
    token ids). Mel rides along at token granularity so the reference
    mel stays frame-aligned with its tokens.
    """
    mel_by_token = ex.mel.reshape(len(ex.tokens), ex.stack, -1)
    main, ref, _ = segment_reference(
        {"tokens": ex.tokens, "mel": mel_by_token, "prosody": ex.prosody}, train, rng
    )
    main_tokens = TokenSequence(ids=main["tokens"], frame_rate=50.0)
    a_hat = encoder.encode(main_tokens).numpy()
    ref_mel = ref["mel"].reshape(-1, ex.mel.shape[1])
    return a_hat, main["prosody"], ref_mel, main["tokens"]


@dataclass
class LMTrainConfig:
    steps: int = 1200
    batch_size: int = 8
    peak_lr: float = 1e-4
    warmup: int = 200
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100


def train_lm(examples: list[LMExample], encoder, cfg: LMConfig, train_cfg: LMTrainConfig,
             checkpoint_path=None, fingerprint: str = "", log=print) -> SemanticLM:
    """Teacher-forced training over random reference splits.

    The encoder is frozen; prompts detach its output anyway, so even a
    shared graph could not update it.
    """
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = SemanticLM(cfg)
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
            a_hat, prosody, ref_mel, main_ids = split_example(examples[i], encoder, True, rng)
            prompt = model.build_prompt(a_hat, prosody, ref_mel, tokens=main_ids)
            loss = lm_loss(model, prompt)
            total = loss if total is None else total + loss
        total = total / len(picks)
        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite LM loss at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if log and (step + 1) % train_cfg.log_every == 0:
            log(f"lm step {step + 1}/{train_cfg.steps} loss {history[-1]:.4f}")
    model.eval()
    model.loss_history = history
    if checkpoint_path is not None:
        atomic_torch_save(
            {"state_dict": model.state_dict(), "config": asdict(cfg),
             "step": train_cfg.steps, "fingerprint": fingerprint},
            checkpoint_path,
        )
    return model


def load_lm(path) -> tuple[SemanticLM, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = SemanticLM(LMConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
