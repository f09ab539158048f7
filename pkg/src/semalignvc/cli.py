"""Command-line entry points.

Two layers: pipeline stage commands (`semalignvc <stage> --config FILE`)
that orchestrate a run directory, and direct subcommands (`corpus synth`,
`lm generate`, `vc convert`, `probe run`, `eval run`) that work on
explicit files using the checkpoints of a run.
"""

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .pipeline import STAGES, MissingUpstreamError, run_stage


def _load_cfg(config_path) -> PipelineConfig:
    if config_path is None:
        return PipelineConfig()
    try:
        return load_config(config_path)
    except ValueError as e:
        raise click.ClickException(str(e))


def _run_stage_cmd(stage, config_path, force):
    cfg = _load_cfg(config_path)
    try:
        result = run_stage(stage, cfg, force=force)
    except (MissingUpstreamError, RuntimeError, ValueError) as e:
        raise click.ClickException(str(e))
    click.echo(f"{stage}: {result.status}")


def _stage_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="pipeline config YAML")(fn)
    fn = click.option("--force", is_flag=True, help="redo the stage even if up to date")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Desk-scale zero-shot voice conversion pipeline."""


# --- plain stage commands ---------------------------------------------------

def _register_plain_stage(stage):
    @main.command(name=stage, help=f"Run the '{stage}' pipeline stage.")
    @_stage_options
    def _cmd(config_path, force):
        _run_stage_cmd(stage, config_path, force)


for _stage in ("tokenize", "semenc-train", "lm-train", "acoustic-train", "convert", "pca"):
    _register_plain_stage(_stage)


# --- corpus: stage + direct synthesis ----------------------------------------

@main.group(invoke_without_command=True)
@_stage_options
@click.pass_context
def corpus(ctx, config_path, force):
    """Corpus stage, or `corpus synth` for direct generation."""
    if ctx.invoked_subcommand is None:
        _run_stage_cmd("corpus", config_path, force)


@corpus.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--speakers", default=20, show_default=True)
@click.option("--utts-per-speaker", default=24, show_default=True)
@click.option("--seed", default=0, show_default=True)
def corpus_synth(out_dir, speakers, utts_per_speaker, seed):
    """Generate a synthetic corpus into a directory."""
    from .corpus import generate_corpus

    layout = generate_corpus(out_dir, n_speakers=speakers,
                             utts_per_speaker=utts_per_speaker, seed=seed)
    click.echo(f"wrote {len(layout.records)} utterances to {layout.root}")


# --- lm: stage alias + generation --------------------------------------------

@main.group()
def lm():
    """Semantic language model commands."""


@lm.command("train")
@_stage_options
def lm_train_cmd(config_path, force):
    """Train the LM (same as the lm-train stage)."""
    _run_stage_cmd("lm-train", config_path, force)


@lm.command("generate")
@click.option("--src", "src_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--sampler", type=click.Choice(["greedy", "topk"]), default="greedy",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
def lm_generate_cmd(src_path, ref_path, out_path, config_path, sampler, seed):
    """Generate converted audio tokens for a source/reference wav pair."""
    from .corpus import read_wav
    from .features import compute_mel, extract_prosody, normalize_prosody, pool_prosody
    from .pipeline import load_quantizer, load_semenc
    from .quantizer import quantize
    from .semlm import generate, load_lm, segment_reference
    from .config import CheckpointSet

    cfg = _load_cfg(config_path)
    run_dir = Path(cfg.run_dir)
    try:
        q = load_quantizer(run_dir)
        encoder = load_semenc(cfg, run_dir)
        lm_path = CheckpointSet(run_dir).path("semlm")
        if not lm_path.exists():
            raise MissingUpstreamError(f"missing LM checkpoint {lm_path}; run lm-train first")
        model, _ = load_lm(lm_path)

        stack = cfg.quantizer.stack
        src_wave, _ = read_wav(src_path)
        ref_wave, _ = read_wav(ref_path)
        src_mel = compute_mel(src_wave, cfg.features)
        src_tokens = quantize(src_mel, q, stack)
        a_hat = encoder.encode(src_tokens).numpy()
        pooled = pool_prosody(normalize_prosody(extract_prosody(src_wave, cfg.features)),
                              stack)[: len(src_tokens)]
        ref_mel = compute_mel(ref_wave, cfg.features)
        ref_tokens = quantize(ref_mel, q, stack)
        ref_by_tok = ref_mel.frames[: len(ref_tokens) * stack].reshape(len(ref_tokens), stack, -1)
        _, ref_part, _ = segment_reference({"mel": ref_by_tok}, train=False)
        mu_ref = ref_part["mel"].reshape(-1, cfg.features.n_mels)

        result = generate(model, a_hat, pooled, mu_ref, sampler=sampler, seed=seed,
                          frame_rate=src_tokens.frame_rate)
    except (MissingUpstreamError, RuntimeError, ValueError) as e:
        raise click.ClickException(str(e))
    payload = {
        "ids": [int(t) for t in result.tokens.ids],
        "frame_rate": result.tokens.frame_rate,
        "truncated": result.truncated,
    }
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(payload, f)
    click.echo(f"wrote {len(result.tokens)} tokens to {out_path}")


# --- acoustic: stage alias ----------------------------------------------------

@main.group()
def acoustic():
    """Acoustic model commands."""


@acoustic.command("train")
@_stage_options
def acoustic_train_cmd(config_path, force):
    """Train the flow-matching acoustic model (same as acoustic-train)."""
    _run_stage_cmd("acoustic-train", config_path, force)


# --- vc: direct single-pair conversion ----------------------------------------

@main.group()
def vc():
    """Voice conversion commands."""


@vc.command("convert")
@click.option("--src", "src_path", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", default=0, show_default=True)
def vc_convert_cmd(src_path, ref_path, out_path, config_path, seed):
    """Convert one source wav onto one reference speaker's timbre."""
    from .acoustic import vc_infer
    from .corpus import read_wav, write_wav
    from .pipeline import load_vc_models
    from .vocoder import mel_to_audio

    cfg = _load_cfg(config_path)
    try:
        models = load_vc_models(cfg, Path(cfg.run_dir))
        src_wave, _ = read_wav(src_path)
        ref_wave, _ = read_wav(ref_path)
        result = vc_infer(src_wave, ref_wave, models, sampler=cfg.convert.sampler,
                          steps=cfg.convert.ode_steps, seed=seed)
        wave = mel_to_audio(result.mel, cfg.features)
    except (MissingUpstreamError, RuntimeError, ValueError) as e:
        raise click.ClickException(str(e))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_wav(out_path, wave, cfg.features.sample_rate)
    click.echo(f"wrote {out_path} ({len(wave) / cfg.features.sample_rate:.2f} s)")


# --- probe: stage + direct run -------------------------------------------------

@main.group(invoke_without_command=True)
@_stage_options
@click.pass_context
def probe(ctx, config_path, force):
    """Probe stage, or `probe run` against an explicit manifest."""
    if ctx.invoked_subcommand is None:
        _run_stage_cmd("probe", config_path, force)


@probe.command("run")
@click.option("--source", required=True,
              type=click.Choice(["tokenizer", "qphi", "encoder"]))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def probe_run_cmd(source, manifest_path, report_path, config_path):
    """Train and score a speaker probe on utterances from a manifest."""
    from . import probe as pb
    from .corpus import load_manifest, resolve_waveform
    from .features import compute_mel
    from .pipeline import _ensure_masked_encoder, load_quantizer, load_semenc

    cfg = _load_cfg(config_path)
    run_dir = Path(cfg.run_dir)
    source_id = {"encoder": "encoder_h"}.get(source, source)
    try:
        q = load_quantizer(run_dir)
        encoder = load_semenc(cfg, run_dir) if source_id == "qphi" else None
        masked = (_ensure_masked_encoder(cfg, run_dir, q, click.echo)
                  if source_id == "encoder_h" else None)
        kind, fn = pb.make_provider(source_id, quantizer=q, stack=cfg.quantizer.stack,
                                    encoder=encoder, masked_encoder=masked)
        records = load_manifest(manifest_path)
        base = Path(manifest_path).parent
        labels = {s: i for i, s in enumerate(sorted({r.speaker_id for r in records}))}
        if len(labels) < 2:
            raise ValueError("need at least two speakers in the manifest")
        by_speaker = {}
        for rec in records:
            by_speaker.setdefault(rec.speaker_id, []).append(rec)
        train_items, test_items = [], []
        for recs in by_speaker.values():
            n_test = max(1, int(round(0.2 * len(recs))))
            for i, rec in enumerate(recs):
                wave, _ = resolve_waveform(rec, base)
                rep = fn(compute_mel(wave, cfg.features))
                item = pb.ProbeItem(rep=rep, label=labels[rec.speaker_id], utterance_id=rec.id)
                (test_items if i >= len(recs) - n_test else train_items).append(item)
        sample = train_items[0].rep
        spec = pb.ProbeSpec(
            rep_kind=kind, rep_source=source_id, n_speakers=len(labels),
            vocab_size=cfg.quantizer.vocab_size if kind == "discrete" else 0,
            input_dim=int(sample.shape[1]) if kind == "continuous" else 0,
        )
        trained = pb.train_probe(spec, train_items, cfg.probe.epochs, cfg.probe.lr,
                                 seed=cfg.seed_for(f"probe:{source_id}"))
        rep = pb.report(trained, test_items)
    except (MissingUpstreamError, RuntimeError, ValueError) as e:
        raise click.ClickException(str(e))
    Path(report_path).parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w") as f:
        json.dump(rep.to_dict(), f, indent=1)
    click.echo(pb.render_table([rep]))


# --- eval: stage + direct run ----------------------------------------------------

@main.group(name="eval", invoke_without_command=True)
@_stage_options
@click.pass_context
def eval_group(ctx, config_path, force):
    """Eval stage, or `eval run` against an explicit pairs manifest."""
    if ctx.invoked_subcommand is None:
        _run_stage_cmd("eval", config_path, force)


@eval_group.command("run")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True),
              help="JSONL with src_wav, ref_wav, out_wav per line")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def eval_run_cmd(pairs_path, report_path, config_path):
    """Score converted wavs: FPC against sources, similarity to references."""
    from . import evalkit as ev
    from .corpus import read_wav
    from .features import extract_prosody

    cfg = _load_cfg(config_path)
    base = Path(pairs_path).parent
    rows = []
    try:
        with open(pairs_path) as f:
            for k, line in enumerate(f):
                if not line.strip():
                    continue
                entry = json.loads(line)
                missing = {"src_wav", "ref_wav", "out_wav"} - set(entry)
                if missing:
                    raise ValueError(f"pairs line {k + 1}: missing keys {sorted(missing)}")
                src, _ = read_wav(base / entry["src_wav"])
                ref, _ = read_wav(base / entry["ref_wav"])
                out, _ = read_wav(base / entry["out_wav"])
                similarity = {p: ev.speaker_similarity(out, ref, p)
                              for p in cfg.eval.providers}
                fpc_val = ev.fpc(extract_prosody(src, cfg.features),
                                 extract_prosody(out, cfg.features))
                name = entry.get("name", f"pair{k:03d}")
                rows.append((name, ev.EvalReport(fpc=fpc_val, similarity=similarity)))
    except (RuntimeError, ValueError) as e:
        raise click.ClickException(str(e))
    Path(report_path).parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w") as f:
        json.dump([{"name": n, **r.to_dict()} for n, r in rows], f, indent=1)
    click.echo(ev.render_eval_table(rows))


if __name__ == "__main__":
    sys.exit(main())
