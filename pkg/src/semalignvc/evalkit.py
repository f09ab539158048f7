"""Objective evaluation: f0 consistency, speaker similarity, PCA overlap.

FPC correlates voiced f0 between two tracks after linear-interpolation
resampling. Speaker similarity is cosine between embeddings from a
pluggable provider; the built-in provider is a long-term average
spectrum, which is enough to tell the toy speakers apart. The PCA
comparison projects semantic frames and their text targets into a
shared 2-D space and scores per-frame direction agreement.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureConfig, ProsodyTrack, compute_mel

MIN_JOINT_VOICED = 8


def _track_parts(track) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(track, ProsodyTrack):
        return track.f0, track.voicing
    f0 = np.asarray(track, dtype=np.float64)
    return f0, f0 != 0.0


def _resample_track(f0: np.ndarray, voicing: np.ndarray, n: int):
    """Linear interpolation of the f0 curve onto n uniformly spaced points."""
    t = len(f0)
    if t == n:
        return f0, voicing
    src = np.linspace(0.0, 1.0, t)
    dst = np.linspace(0.0, 1.0, n)
    f0_r = np.interp(dst, src, f0)
    voiced_r = np.interp(dst, src, voicing.astype(np.float64)) >= 0.5
    return f0_r, voiced_r


def fpc(track_a, track_b) -> float | None:
    """Pearson correlation of voiced log-f0; None when overlap is too thin.

    The shorter track is resampled to the longer one's length first.
    Frames count only when both tracks are voiced there; fewer than
    MIN_JOINT_VOICED such frames makes the metric undefined (None),
    never silently zero. Plain arrays are read in ProsodyTrack units
    (log-f0, 0 marking unvoiced frames).
    """
    f0_a, v_a = _track_parts(track_a)
    f0_b, v_b = _track_parts(track_b)
    n = max(len(f0_a), len(f0_b))
    f0_a, v_a = _resample_track(f0_a, v_a, n)
    f0_b, v_b = _resample_track(f0_b, v_b, n)
    joint = v_a & v_b
    if int(joint.sum()) < MIN_JOINT_VOICED:
        return None
    x = f0_a[joint]
    y = f0_b[joint]
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


# ---------------------------------------------------------------------------
# speaker similarity

def ltas_embedding(waveform: np.ndarray, config: FeatureConfig | None = None) -> np.ndarray:
    """Long-term average log-mel spectrum, a cheap timbre signature."""
    config = config or FeatureConfig()
    mel = compute_mel(waveform, config)
    return mel.frames.mean(axis=0)


_SIMILARITY_PROVIDERS = {"ltas": ltas_embedding}


def register_similarity_provider(name: str, fn) -> None:
    """Plug in an external embedding (waveform -> vector)."""
    _SIMILARITY_PROVIDERS[name] = fn


def speaker_similarity(wav_a: np.ndarray, wav_b: np.ndarray, provider: str = "ltas") -> float:
    """Cosine of L2-normalized provider embeddings."""
    if provider not in _SIMILARITY_PROVIDERS:
        raise ValueError(f"unknown similarity provider '{provider}'")
    fn = _SIMILARITY_PROVIDERS[provider]
    try:
        e_a = np.asarray(fn(wav_a), dtype=np.float64)
        e_b = np.asarray(fn(wav_b), dtype=np.float64)
    except Exception as e:
        raise RuntimeError(f"similarity provider '{provider}' failed: {e}") from e
    e_a = e_a / np.linalg.norm(e_a)
    e_b = e_b / np.linalg.norm(e_b)
    return float(np.dot(e_a, e_b))


# ---------------------------------------------------------------------------
# PCA comparison

@dataclass
class PCAComparison:
    proj_a: np.ndarray  # [T, 2]
    proj_b: np.ndarray  # [T, 2]
    pca_alignment: float
    explained: np.ndarray  # variance ratios of the two components


def pca_compare(a_hat: np.ndarray, projected_text: np.ndarray,
                plot_path=None) -> PCAComparison:
    """Project both sequences into a shared top-2 PCA space.

    The basis is fit on the concatenation of both sequences, with a
    deterministic sign convention (the largest-magnitude loading of
    each component is positive). pca_alignment is the mean per-frame
    cosine between the paired 2-D projections.
    """
    a = np.asarray(a_hat, dtype=np.float64)
    b = np.asarray(projected_text, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"sequence shapes disagree: {a.shape} vs {b.shape}")
    if a.shape[1] < 2:
        raise ValueError("need at least two feature dimensions for 2-D PCA")
    both = np.concatenate([a, b], axis=0)
    center = both.mean(axis=0)
    both_c = both - center
    _, s, vt = np.linalg.svd(both_c, full_matrices=False)
    if len(s) < 2 or s[1] < 1e-12:
        raise ValueError("input rank below 2; PCA comparison undefined")
    comps = vt[:2]
    for k in range(2):
        j = np.argmax(np.abs(comps[k]))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    proj_a = (a - center) @ comps.T
    proj_b = (b - center) @ comps.T
    norms_a = np.linalg.norm(proj_a, axis=1)
    norms_b = np.linalg.norm(proj_b, axis=1)
    ok = (norms_a > 1e-12) & (norms_b > 1e-12)
    cosines = np.zeros(len(proj_a))
    cosines[ok] = (proj_a[ok] * proj_b[ok]).sum(axis=1) / (norms_a[ok] * norms_b[ok])
    cosines[~ok] = 1.0  # both at the origin: direction agreement is vacuous
    explained = (s[:2] ** 2) / (s**2).sum()
    comparison = PCAComparison(
        proj_a=proj_a, proj_b=proj_b,
        pca_alignment=float(cosines.mean()), explained=explained,
    )
    if plot_path is not None:
        _render_pca_plot(comparison, plot_path)
    return comparison


def _render_pca_plot(cmp: PCAComparison, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(cmp.proj_a[:, 0], cmp.proj_a[:, 1], "o-", ms=2, lw=0.7,
            label="semantic frames", alpha=0.8)
    ax.plot(cmp.proj_b[:, 0], cmp.proj_b[:, 1], "s--", ms=2, lw=0.7,
            label="projected text", alpha=0.8)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend()
    ax.set_title(f"alignment {cmp.pca_alignment:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# report assembly

@dataclass
class EvalReport:
    fpc: float | None
    similarity: dict
    pca_alignment: float | None = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        for name, value in self.similarity.items():
            if not np.isfinite(value):
                raise ValueError(f"non-finite similarity for provider '{name}'")
        if self.fpc is not None and not np.isfinite(self.fpc):
            raise ValueError("non-finite FPC")

    def to_dict(self) -> dict:
        return {
            "fpc": self.fpc,
            "similarity": {k: float(v) for k, v in self.similarity.items()},
            "pca_alignment": self.pca_alignment,
            "notes": list(self.notes),
        }


def render_eval_table(rows: list[tuple[str, EvalReport]], naturalness: dict | None = None) -> str:
    """Similarity and consistency columns per pair; naturalness only
    when an external scorer supplied values."""
    providers: list[str] = []
    for _, rep in rows:
        for p in rep.similarity:
            if p not in providers:
                providers.append(p)
    headers = ["Pair"]
    if naturalness:
        headers.append("Naturalness")
    headers += [f"Sim({p})" for p in providers] + ["FPC"]
    widths = [max(18, len(h) + 2) for h in headers]
    def fmt_row(cells):
        return "".join(str(c).ljust(w) for c, w in zip(cells, widths))
    lines = [fmt_row(headers), "-" * sum(widths)]
    for name, rep in rows:
        cells = [name]
        if naturalness:
            cells.append(f"{naturalness.get(name, float('nan')):.2f}")
        for p in providers:
            v = rep.similarity.get(p)
            cells.append("-" if v is None else f"{v:.3f}")
        cells.append("undef" if rep.fpc is None else f"{rep.fpc:.3f}")
        lines.append(fmt_row(cells))
    return "\n".join(lines)
