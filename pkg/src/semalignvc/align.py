"""Monotonic text-to-audio alignment and the losses built on it.

The pieces: a beta-binomial prior that softly pins text index i to the
expected position at frame j, a hard monotonic-alignment-search DP, a
differentiable forward-sum loss over all monotonic paths, repeat
upsampling of text embeddings by searched durations, and the MSE that
pulls semantic frames onto the upsampled, speaker-free text targets.

Alignment search runs on detached scores; gradients reach the encoder
only through forward_sum_loss and semalign_loss.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import betabinom

NEG_INF = -1e9  # finite stand-in for -inf; keeps logaddexp gradients NaN-free


def _as_numpy(logp) -> np.ndarray:
    if isinstance(logp, SimilarityMatrix):
        logp = logp.logp
    if isinstance(logp, torch.Tensor):
        logp = logp.detach().cpu().numpy()
    return np.asarray(logp, dtype=np.float64)


def _as_torch(logp) -> torch.Tensor:
    if isinstance(logp, SimilarityMatrix):
        logp = logp.logp
    if isinstance(logp, torch.Tensor):
        return logp
    return torch.as_tensor(np.asarray(logp, dtype=np.float64))


@dataclass
class SimilarityMatrix:
    """Log alignment scores, text index i by frame j."""

    logp: object  # [L, T] ndarray or torch tensor

    def __post_init__(self):
        shape = self.logp.shape
        if len(shape) != 2:
            raise ValueError("similarity matrix must be [L, T]")

    @property
    def shape(self):
        return self.logp.shape


@dataclass
class AlignmentPath:
    assignment: np.ndarray  # [T], text index per frame
    durations: np.ndarray  # [L], frames per text index

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.validate()

    def validate(self):
        a, d = self.assignment, self.durations
        if a.ndim != 1 or d.ndim != 1:
            raise ValueError("assignment and durations must be vectors")
        if len(a) == 0:
            raise ValueError("empty path")
        if a[0] != 0 or a[-1] != len(d) - 1:
            raise ValueError("path must start at the first symbol and end at the last")
        if (np.diff(a) < 0).any() or (np.diff(a) > 1).any():
            raise ValueError("assignment must advance by 0 or 1 per frame")
        if (d < 1).any():
            raise ValueError("every symbol needs at least one frame")
        if d.sum() != len(a):
            raise ValueError("durations must sum to the frame count")
        if not np.array_equal(np.repeat(np.arange(len(d)), d), a):
            raise ValueError("durations inconsistent with assignment")

    @property
    def n_frames(self) -> int:
        return len(self.assignment)

    @property
    def n_symbols(self) -> int:
        return len(self.durations)


def beta_binomial_prior(text_len: int, n_frames: int, omega: float = 1.0) -> np.ndarray:
    """Log prior [L, T]: column j is BetaBinom(L-1, w(j+1), w(T-j)) over i."""
    if text_len < 1 or n_frames < 1:
        raise ValueError("lengths must be positive")
    if omega <= 0:
        raise ValueError("omega must be positive")
    i = np.arange(text_len)
    out = np.empty((text_len, n_frames), dtype=np.float64)
    for j in range(n_frames):
        out[:, j] = betabinom.logpmf(i, text_len - 1, omega * (j + 1), omega * (n_frames - j))
    return out


def similarity_logits(a_hat, projected_text, prior: np.ndarray | None = None) -> SimilarityMatrix:
    """Distance-softmax log scores of text rows against semantic frames.

    a_hat: [T, d]; projected_text: [L, d], already mapped into the
    semantic space. Columns are log-softmax over text indices; an
    optional log prior is added afterwards. Torch in, torch out (with
    gradient); numpy in, numpy out.
    """
    torch_mode = isinstance(a_hat, torch.Tensor) or isinstance(projected_text, torch.Tensor)
    if torch_mode:
        a = a_hat if isinstance(a_hat, torch.Tensor) else torch.as_tensor(a_hat)
        txt = (
            projected_text
            if isinstance(projected_text, torch.Tensor)
            else torch.as_tensor(projected_text, dtype=a.dtype)
        )
        d2 = torch.cdist(txt[None], a[None])[0] ** 2  # [L, T]
        logp = torch.log_softmax(-d2, dim=0)
        if prior is not None:
            logp = logp + torch.as_tensor(prior, dtype=logp.dtype, device=logp.device)
        return SimilarityMatrix(logp=logp)
    a = np.asarray(a_hat, dtype=np.float64)
    txt = np.asarray(projected_text, dtype=np.float64)
    d2 = ((txt[:, None, :] - a[None, :, :]) ** 2).sum(axis=2)
    neg = -d2
    neg -= neg.max(axis=0, keepdims=True)
    logp = neg - np.log(np.exp(neg).sum(axis=0, keepdims=True))
    if prior is not None:
        logp = logp + prior
    return SimilarityMatrix(logp=logp)


def mas(logp) -> AlignmentPath:
    """Best monotonic surjective text-to-frame path by dynamic programming.

    Q[i, j] = logp[i, j] + max(Q[i-1, j-1], Q[i, j-1]); ties prefer
    staying on the current symbol. Scores are treated as constants:
    inputs are detached/copied before the search.
    """
    lp = _as_numpy(logp)
    text_len, n_frames = lp.shape
    if text_len > n_frames:
        raise ValueError(f"no monotonic surjective path with L={text_len} > T={n_frames}")
    if not np.isfinite(lp).all():
        raise ValueError("alignment scores must be finite; got NaN or inf in the similarity matrix")

    q = np.full((text_len, n_frames), -np.inf)
    advanced = np.zeros((text_len, n_frames), dtype=bool)  # True: came from (i-1, j-1)
    q[0, 0] = lp[0, 0]
    for j in range(1, n_frames):
        stay = q[:, j - 1]
        diag = np.concatenate(([-np.inf], q[:-1, j - 1]))
        take_diag = diag > stay  # strict: ties stay on the current symbol
        q[:, j] = lp[:, j] + np.where(take_diag, diag, stay)
        advanced[:, j] = take_diag

    assignment = np.empty(n_frames, dtype=np.int64)
    i = text_len - 1
    for j in range(n_frames - 1, -1, -1):
        assignment[j] = i
        if advanced[i, j]:
            i -= 1
    durations = np.bincount(assignment, minlength=text_len)
    return AlignmentPath(assignment=assignment, durations=durations)


def mas_path_score(logp, path: AlignmentPath) -> float:
    lp = _as_numpy(logp)
    return float(lp[path.assignment, np.arange(path.n_frames)].sum())


def forward_sum_loss(logp) -> torch.Tensor:
    """Negative log of the summed likelihood over all monotonic paths.

    alpha[i, j] = logp[i, j] + logaddexp(alpha[i-1, j-1], alpha[i, j-1]),
    answer at (L-1, T-1). Differentiable in logp when given a tensor.
    """
    lp = _as_torch(logp)
    text_len, n_frames = lp.shape
    if text_len > n_frames:
        raise ValueError(f"no monotonic surjective path with L={text_len} > T={n_frames}")
    neg = torch.full((1,), NEG_INF, dtype=lp.dtype, device=lp.device)
    alpha = torch.full((text_len,), NEG_INF, dtype=lp.dtype, device=lp.device)
    alpha = alpha.clone()
    alpha[0] = lp[0, 0]
    for j in range(1, n_frames):
        shifted = torch.cat([neg, alpha[:-1]])
        alpha = lp[:, j] + torch.logaddexp(alpha, shifted)
    return -alpha[-1]


def upsample_by_durations(text_embeddings, path: AlignmentPath):
    """Repeat text row i durations[i] times; output row j = text[assignment[j]]."""
    n = len(text_embeddings)
    if n != path.n_symbols:
        raise ValueError(f"{n} text rows but path covers {path.n_symbols} symbols")
    if isinstance(text_embeddings, torch.Tensor):
        return text_embeddings[torch.from_numpy(path.assignment)]
    return np.asarray(text_embeddings)[path.assignment]


def semalign_loss(a_hat: torch.Tensor, upsampled_text, projection) -> torch.Tensor:
    """MSE between semantic frames and projected upsampled text targets.

    The projection maps the text embedding width onto the semantic
    width; it is applied on the text side so a_hat stays in its native
    space. Gradients flow into a_hat and the projection.
    """
    target = upsampled_text
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(np.asarray(target), dtype=a_hat.dtype, device=a_hat.device)
    projected = projection(target.to(a_hat.dtype))
    if projected.shape[0] != a_hat.shape[0]:
        raise ValueError(
            f"frame count mismatch: a_hat has {a_hat.shape[0]}, target has {projected.shape[0]}"
        )
    return torch.mean((a_hat - projected) ** 2)


def dump_alignment(logp, path: AlignmentPath, out_path) -> Path:
    """Write the score matrix and searched path for offline inspection.

    Saves <out>.npz always and a <out>.png heatmap when matplotlib is
    importable. Returns the npz path.
    """
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lp = _as_numpy(logp)
    npz_path = out.with_suffix(".npz")
    np.savez(npz_path, logp=lp, assignment=path.assignment, durations=path.durations)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return npz_path
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.imshow(lp, aspect="auto", origin="lower", interpolation="nearest")
    ax.plot(np.arange(path.n_frames), path.assignment, color="red", linewidth=1.0)
    ax.set_xlabel("frame")
    ax.set_ylabel("text index")
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), dpi=100)
    plt.close(fig)
    return npz_path
