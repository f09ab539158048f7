"""Stage orchestration over a run directory.

Each stage reads upstream artifacts, writes its own under run_dir, and
records a stage manifest with the config fingerprint that produced it.
Rerunning a completed stage with an unchanged fingerprint is a no-op;
--force redoes it. A lock file keeps two stage processes out of the
same run directory.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import acoustic as ac
from . import corpus as cp
from . import evalkit as ev
from . import features as ft
from . import probe as pb
from . import semenc as se
from . import semlm as slm
from .config import CheckpointSet, PipelineConfig, RunLock, fingerprint_of
from .quantizer import RandomQuantizer, TokenSequence, quantize
from .textref import ToyTextProvider
from .vocoder import mel_to_audio

STAGES = (
    "corpus", "tokenize", "semenc-train", "lm-train", "acoustic-train",
    "convert", "probe", "eval", "pca",
)

# config sections whose values feed each stage, fingerprinted cumulatively
_STAGE_SECTIONS = {
    "corpus": ["corpus"],
    "tokenize": ["corpus", "features", "quantizer"],
    "semenc-train": ["corpus", "features", "quantizer", "semenc", "semenc_train"],
    "lm-train": ["corpus", "features", "quantizer", "semenc", "semenc_train", "lm", "lm_train"],
    "acoustic-train": ["corpus", "features", "quantizer", "acoustic", "acoustic_train"],
    "convert": ["corpus", "features", "quantizer", "semenc", "semenc_train",
                 "lm", "lm_train", "acoustic", "acoustic_train", "convert"],
    "probe": ["corpus", "features", "quantizer", "semenc", "semenc_train", "probe"],
    "eval": ["corpus", "features", "quantizer", "semenc", "semenc_train", "lm", "lm_train",
              "acoustic", "acoustic_train", "convert", "eval"],
    "pca": ["corpus", "features", "quantizer", "semenc", "semenc_train", "pca"],
}

_STAGE_UPSTREAM = {
    "corpus": [],
    "tokenize": ["corpus"],
    "semenc-train": ["tokenize"],
    "lm-train": ["semenc-train"],
    "acoustic-train": ["tokenize"],
    "convert": ["semenc-train", "lm-train", "acoustic-train"],
    "probe": ["semenc-train"],
    "eval": ["convert"],
    "pca": ["semenc-train"],
}


@dataclass
class StageResult:
    stage: str
    status: str  # "completed" or "cached"
    outputs: list = field(default_factory=list)


class MissingUpstreamError(RuntimeError):
    pass


def _stage_record_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "stages" / f"{stage}.json"


def _read_stage_record(run_dir: Path, stage: str) -> dict | None:
    path = _stage_record_path(run_dir, stage)
    if not path.exists():
        return None
    with open(path) as f:
        return json.load(f)


def _write_stage_record(run_dir: Path, stage: str, fingerprint: str, outputs: list) -> None:
    path = _stage_record_path(run_dir, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w") as f:
        json.dump(
            {"stage": stage, "fingerprint": fingerprint,
             "outputs": [str(o) for o in outputs], "completed": True},
            f, indent=1,
        )
    tmp.replace(path)


def _require_upstream(cfg: PipelineConfig, run_dir: Path, stage: str) -> None:
    for dep in _STAGE_UPSTREAM[stage]:
        record = _read_stage_record(run_dir, dep)
        if record is None or not record.get("completed"):
            raise MissingUpstreamError(
                f"stage '{stage}' needs artifacts from stage '{dep}', which has not "
                f"completed in {run_dir}; run `semalignvc {dep} --config ...` first"
            )
        expected = cfg.stage_fingerprint(*_STAGE_SECTIONS[dep])
        if record.get("fingerprint") != expected:
            raise MissingUpstreamError(
                f"stage '{stage}' found stale artifacts from '{dep}' "
                f"(fingerprint {record.get('fingerprint')!r}, config wants {expected!r}); "
                f"rerun '{dep}'"
            )


def run_stage(stage: str, cfg: PipelineConfig, force: bool = False, log=print) -> StageResult:
    if stage not in STAGES:
        raise ValueError(f"unknown stage '{stage}'; choose from {STAGES}")
    torch.set_num_threads(1)  # keep runs bit-reproducible regardless of host cores
    run_dir = Path(cfg.run_dir)
    fingerprint = cfg.stage_fingerprint(*_STAGE_SECTIONS[stage])
    with RunLock(run_dir):
        record = _read_stage_record(run_dir, stage)
        if record and record.get("completed") and record.get("fingerprint") == fingerprint and not force:
            if log:
                log(f"stage '{stage}' is up to date (fingerprint {fingerprint}); skipping")
            return StageResult(stage=stage, status="cached", outputs=record.get("outputs", []))
        _require_upstream(cfg, run_dir, stage)
        outputs = _STAGE_FNS[stage](cfg, run_dir, log or (lambda *_: None))
        _write_stage_record(run_dir, stage, fingerprint, outputs)
    return StageResult(stage=stage, status="completed", outputs=[str(o) for o in outputs])


# ---------------------------------------------------------------------------
# shared artifact access

def corpus_dir(run_dir: Path) -> Path:
    return run_dir / "corpus"


def _load_split(run_dir: Path, which: str) -> list[cp.UtteranceRecord]:
    path = corpus_dir(run_dir) / f"manifest_{which}.jsonl"
    if not path.exists():
        raise MissingUpstreamError(f"missing corpus manifest {path}; run the corpus stage")
    return cp.load_manifest(path)


def _speaker_labels(records: list[cp.UtteranceRecord]) -> dict[str, int]:
    speakers = sorted({r.speaker_id for r in records})
    return {s: i for i, s in enumerate(speakers)}


def _features_path(run_dir: Path, utt_id: str) -> Path:
    return run_dir / "features" / f"{utt_id}.npz"


def load_quantizer(run_dir: Path) -> RandomQuantizer:
    path = CheckpointSet(run_dir).path("quantizer")
    if not path.exists():
        raise MissingUpstreamError(f"missing quantizer checkpoint {path}; run the tokenize stage")
    with open(path) as f:
        return RandomQuantizer.from_dict(json.load(f))


def load_tokens(run_dir: Path) -> dict[str, np.ndarray]:
    path = run_dir / "tokens.npz"
    if not path.exists():
        raise MissingUpstreamError(f"missing token archive {path}; run the tokenize stage")
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def _utterance_bundle(cfg: PipelineConfig, run_dir: Path, utt_id: str, tokens: np.ndarray):
    """(mel trimmed to token coverage, pooled normalized prosody, tokens)."""
    mel, prosody = ft.load_features(_features_path(run_dir, utt_id), cfg.features.fingerprint())
    stack = cfg.quantizer.stack
    t_tok = len(tokens)
    mel_frames = mel.frames[: t_tok * stack]
    pooled = ft.pool_prosody(ft.normalize_prosody(prosody), stack)[:t_tok]
    return mel_frames, pooled, tokens


def _token_sequence(cfg: PipelineConfig, ids: np.ndarray) -> TokenSequence:
    rate = cfg.features.frame_rate / cfg.quantizer.stack
    return TokenSequence(ids=ids, frame_rate=rate)


def _text_provider(cfg: PipelineConfig) -> ToyTextProvider:
    return ToyTextProvider(d_text=cfg.semenc.d_text, seed=cfg.seed_for("textref"))


def load_semenc(cfg: PipelineConfig, run_dir: Path, name: str = "semenc",
                force: bool = False) -> se.SemanticEncoder:
    ckpts = CheckpointSet(run_dir)
    path = ckpts.path(name)
    if not path.exists():
        raise MissingUpstreamError(f"missing encoder checkpoint {path}; run the semenc-train stage")
    model, blob = se.load_encoder(path)
    expected = cfg.stage_fingerprint(*_STAGE_SECTIONS["semenc-train"])
    ckpts.verify_fingerprint(name, blob.get("fingerprint", ""), expected, force)
    return model


# ---------------------------------------------------------------------------
# stages

def _stage_corpus(cfg: PipelineConfig, run_dir: Path, log) -> list:
    c = cfg.corpus
    layout = cp.generate_corpus(
        corpus_dir(run_dir),
        n_speakers=c.speakers,
        utts_per_speaker=c.utts_per_speaker,
        seed=cfg.seed_for("corpus"),
        min_symbols=c.min_symbols,
        max_symbols=c.max_symbols,
        test_fraction=c.test_fraction,
    )
    log(f"corpus: {len(layout.records)} utterances, {c.speakers} speakers -> {layout.root}")
    return [layout.manifest, layout.manifest_train, layout.manifest_test, layout.profiles]


def _stage_tokenize(cfg: PipelineConfig, run_dir: Path, log) -> list:
    records = _load_split(run_dir, "train") + _load_split(run_dir, "test")
    fc = cfg.features
    qc = cfg.quantizer
    q = RandomQuantizer(cfg.seed_for("quantizer"), fc.n_mels * qc.stack, qc.code_dim, qc.vocab_size)
    token_arrays = {}
    feat_dir = run_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        wave, _ = cp.resolve_waveform(rec, corpus_dir(run_dir))
        mel = ft.compute_mel(wave, fc)
        prosody = ft.extract_prosody(wave, fc)
        ft.save_features(_features_path(run_dir, rec.id), mel, prosody, fc.fingerprint())
        token_arrays[rec.id] = quantize(mel, q, qc.stack).ids
    tokens_path = run_dir / "tokens.npz"
    np.savez(tokens_path, **token_arrays)
    ckpts = CheckpointSet(run_dir)
    qpath = ckpts.path("quantizer")
    qpath.parent.mkdir(parents=True, exist_ok=True)
    with open(qpath, "w") as f:
        json.dump(q.to_dict(), f, indent=1)
    log(f"tokenize: {len(records)} utterances -> {tokens_path}")
    return [tokens_path, qpath]


def _semenc_examples(cfg: PipelineConfig, run_dir: Path, which: str) -> list[se.SemencExample]:
    provider = _text_provider(cfg)
    tokens = load_tokens(run_dir)
    out = []
    for rec in _load_split(run_dir, which):
        out.append(
            se.SemencExample(
                utterance_id=rec.id,
                tokens=_token_sequence(cfg, tokens[rec.id]),
                text_ids=provider.encode_ids(rec.text),
                text_embeddings=provider.embed(rec.text),
            )
        )
    return out


def _train_seed(cfg: PipelineConfig, name: str, section_seed: int) -> int:
    """Trainer seeds fold the section seed into a root-seed substream, so
    bumping either the root seed or the section seed moves the run."""
    return cfg.seed_for(f"{name}:{section_seed}")


def _stage_semenc_train(cfg: PipelineConfig, run_dir: Path, log) -> list:
    from dataclasses import replace

    examples = _semenc_examples(cfg, run_dir, "train")
    fingerprint = cfg.stage_fingerprint(*_STAGE_SECTIONS["semenc-train"])
    ckpts = CheckpointSet(run_dir)
    provider_info = {"text_provider": "toy", "d_text": cfg.semenc.d_text}

    train_cfg = replace(cfg.semenc_train,
                        seed=_train_seed(cfg, "semenc_train", cfg.semenc_train.seed))
    main_path = ckpts.path("semenc")
    log(f"semenc-train: {len(examples)} utterances, {train_cfg.steps} steps")
    se.train_semantic_encoder(examples, cfg.semenc, train_cfg, main_path,
                              fingerprint, provider_info, log)

    # recognition-only ablation: alignment losses switched off, own budget
    abl_cfg = replace(cfg.semenc, lambda_sem=0.0, lambda_fs=0.0)
    abl_train = replace(train_cfg,
                        steps=cfg.semenc_train.ablation_steps,
                        seed=_train_seed(cfg, "semenc_ablation", cfg.semenc_train.seed))
    abl_path = ckpts.path("semenc_ablation")
    log(f"semenc-train: recognition-only ablation, {abl_train.steps} steps")
    se.train_semantic_encoder(examples, abl_cfg, abl_train, abl_path,
                              fingerprint, provider_info, log)
    return [main_path, abl_path]


def _lm_examples(cfg: PipelineConfig, run_dir: Path, which: str) -> list[slm.LMExample]:
    tokens = load_tokens(run_dir)
    out = []
    for rec in _load_split(run_dir, which):
        mel_frames, pooled, ids = _utterance_bundle(cfg, run_dir, rec.id, tokens[rec.id])
        out.append(
            slm.LMExample(
                utterance_id=rec.id, tokens=ids, mel=mel_frames,
                prosody=pooled, stack=cfg.quantizer.stack,
            )
        )
    return out


def _stage_lm_train(cfg: PipelineConfig, run_dir: Path, log) -> list:
    from dataclasses import replace

    encoder = load_semenc(cfg, run_dir)
    examples = _lm_examples(cfg, run_dir, "train")
    fingerprint = cfg.stage_fingerprint(*_STAGE_SECTIONS["lm-train"])
    path = CheckpointSet(run_dir).path("semlm")
    train_cfg = replace(cfg.lm_train, seed=_train_seed(cfg, "lm_train", cfg.lm_train.seed))
    log(f"lm-train: {len(examples)} utterances, {train_cfg.steps} steps")
    slm.train_lm(examples, encoder, cfg.lm, train_cfg, path, fingerprint, log)
    return [path]


def _stage_acoustic_train(cfg: PipelineConfig, run_dir: Path, log) -> list:
    from dataclasses import replace

    tokens = load_tokens(run_dir)
    examples = []
    for rec in _load_split(run_dir, "train"):
        mel_frames, _, ids = _utterance_bundle(cfg, run_dir, rec.id, tokens[rec.id])
        examples.append(ac.AcousticExample(utterance_id=rec.id, mel=mel_frames, tokens=ids))
    fingerprint = cfg.stage_fingerprint(*_STAGE_SECTIONS["acoustic-train"])
    path = CheckpointSet(run_dir).path("acoustic")
    train_cfg = replace(cfg.acoustic_train,
                        seed=_train_seed(cfg, "acoustic_train", cfg.acoustic_train.seed))
    log(f"acoustic-train: {len(examples)} utterances, {train_cfg.steps} steps")
    ac.train_acoustic(examples, cfg.acoustic, train_cfg, path, fingerprint, log)
    return [path]


def load_vc_models(cfg: PipelineConfig, run_dir: Path, force: bool = False) -> ac.VCModels:
    ckpts = CheckpointSet(run_dir)
    encoder = load_semenc(cfg, run_dir, force=force)
    lm_path = ckpts.path("semlm")
    if not lm_path.exists():
        raise MissingUpstreamError(f"missing LM checkpoint {lm_path}; run the lm-train stage")
    lm, lm_blob = slm.load_lm(lm_path)
    ckpts.verify_fingerprint("semlm", lm_blob.get("fingerprint", ""),
                             cfg.stage_fingerprint(*_STAGE_SECTIONS["lm-train"]), force)
    ac_path = ckpts.path("acoustic")
    if not ac_path.exists():
        raise MissingUpstreamError(f"missing acoustic checkpoint {ac_path}; run the acoustic-train stage")
    flow, stats, ac_blob = ac.load_acoustic(ac_path)
    ckpts.verify_fingerprint("acoustic", ac_blob.get("fingerprint", ""),
                             cfg.stage_fingerprint(*_STAGE_SECTIONS["acoustic-train"]), force)
    return ac.VCModels(
        quantizer=load_quantizer(run_dir), encoder=encoder, lm=lm, flow=flow,
        flow_stats=stats, feature_config=cfg.features, stack=cfg.quantizer.stack,
    )


def _stage_convert(cfg: PipelineConfig, run_dir: Path, log) -> list:
    models = load_vc_models(cfg, run_dir)
    test = _load_split(run_dir, "test")
    rng = np.random.default_rng(cfg.seed_for("convert"))
    by_speaker: dict[str, list] = {}
    for rec in test:
        by_speaker.setdefault(rec.speaker_id, []).append(rec)
    speakers = sorted(by_speaker)

    out_dir = run_dir / "convert"
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    cc = cfg.convert
    for k in range(cc.pairs):
        src_spk, ref_spk = rng.choice(speakers, size=2, replace=False)
        src = by_speaker[src_spk][int(rng.integers(len(by_speaker[src_spk])))]
        ref = by_speaker[ref_spk][int(rng.integers(len(by_speaker[ref_spk])))]
        pairs.append(("cross", src, ref))
    for k in range(cc.identity_pairs):
        spk = speakers[int(rng.integers(len(speakers)))]
        src = by_speaker[spk][int(rng.integers(len(by_speaker[spk])))]
        pairs.append(("identity", src, src))

    outputs = []
    entries = []
    for n, (kind, src, ref) in enumerate(pairs):
        src_wave, _ = cp.resolve_waveform(src, corpus_dir(run_dir))
        ref_wave, _ = cp.resolve_waveform(ref, corpus_dir(run_dir))
        result = ac.vc_infer(src_wave, ref_wave, models, sampler=cc.sampler,
                             steps=cc.ode_steps, seed=cfg.seed_for(f"convert:{n}"))
        name = f"{n:03d}_{kind}"
        mel_path = out_dir / f"{name}_mel.npz"
        np.savez(mel_path, mel=result.mel, tokens=result.tokens.ids)
        wave = mel_to_audio(result.mel, cfg.features)
        wav_path = out_dir / f"{name}.wav"
        cp.write_wav(wav_path, wave, cfg.features.sample_rate)
        entries.append({
            "name": name, "kind": kind, "src_id": src.id, "ref_id": ref.id,
            "src_speaker": src.speaker_id, "ref_speaker": ref.speaker_id,
            "mel": mel_path.name, "wav": wav_path.name,
            "tokens": [int(t) for t in result.tokens.ids],
            "truncated": bool(result.truncated),
        })
        outputs.extend([mel_path, wav_path])
        if (n + 1) % 10 == 0:
            log(f"convert: {n + 1}/{len(pairs)} pairs done")
    pairs_path = out_dir / "pairs.jsonl"
    with open(pairs_path, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry) + "\n")
    outputs.append(pairs_path)
    return outputs


def _probe_items(cfg: PipelineConfig, run_dir: Path, provider_fn, which: str,
                 labels: dict[str, int]) -> list[pb.ProbeItem]:
    items = []
    for rec in _load_split(run_dir, which):
        mel, _ = ft.load_features(_features_path(run_dir, rec.id), cfg.features.fingerprint())
        items.append(pb.ProbeItem(rep=provider_fn(mel), label=labels[rec.speaker_id],
                                  utterance_id=rec.id))
    return items


def _resolve_probe_source(cfg: PipelineConfig, run_dir: Path, source: str, log):
    """Map a probe source id to (kind, mel -> representation)."""
    q = load_quantizer(run_dir)
    stack = cfg.quantizer.stack
    if source == "qphi_ctc_only":
        encoder = load_semenc(cfg, run_dir, "semenc_ablation")
        return pb.make_provider("qphi", quantizer=q, stack=stack, encoder=encoder)
    if source == "encoder_h":
        me = _ensure_masked_encoder(cfg, run_dir, q, log)
        return pb.make_provider("encoder_h", masked_encoder=me)
    encoder = load_semenc(cfg, run_dir) if source == "qphi" else None
    return pb.make_provider(source, quantizer=q, stack=stack, encoder=encoder)


def _ensure_masked_encoder(cfg: PipelineConfig, run_dir: Path, q: RandomQuantizer, log):
    """Train the learned token source on demand and cache it."""
    from .quantizer import MaskedEncoderConfig, MaskedTokenEncoder, train_masked_encoder

    path = CheckpointSet(run_dir).path("encoder_h")
    me_cfg = MaskedEncoderConfig()
    if path.exists():
        blob = torch.load(path, map_location="cpu", weights_only=False)
        model = MaskedTokenEncoder(cfg.features.n_mels, cfg.quantizer.stack,
                                   q.vocab_size, MaskedEncoderConfig(**blob["config"]))
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return model
    tokens = load_tokens(run_dir)
    pairs = []
    for rec in _load_split(run_dir, "train"):
        mel, _ = ft.load_features(_features_path(run_dir, rec.id), cfg.features.fingerprint())
        pairs.append((mel, _token_sequence(cfg, tokens[rec.id])))
    log(f"probe: training masked-prediction token encoder ({me_cfg.steps} steps)")
    model = train_masked_encoder(pairs, q, cfg.quantizer.stack, me_cfg,
                                 seed=cfg.seed_for("encoder_h"))
    from dataclasses import asdict

    se.atomic_torch_save({"state_dict": model.state_dict(), "config": asdict(me_cfg)}, path)
    return model


def _stage_probe(cfg: PipelineConfig, run_dir: Path, log) -> list:
    train_recs = _load_split(run_dir, "train")
    labels = _speaker_labels(train_recs + _load_split(run_dir, "test"))
    reports = []
    for source in cfg.probe.sources:
        kind, fn = _resolve_probe_source(cfg, run_dir, source, log)
        train_items = _probe_items(cfg, run_dir, fn, "train", labels)
        test_items = _probe_items(cfg, run_dir, fn, "test", labels)
        sample = train_items[0].rep
        spec = pb.ProbeSpec(
            rep_kind=kind, rep_source=source, n_speakers=len(labels),
            vocab_size=cfg.quantizer.vocab_size if kind == "discrete" else 0,
            input_dim=int(sample.shape[1]) if kind == "continuous" else 0,
        )
        probe = pb.train_probe(spec, train_items, cfg.probe.epochs, cfg.probe.lr,
                               seed=cfg.seed_for(f"probe:{source}"))
        rep = pb.report(probe, test_items)
        reports.append(rep)
        log(f"probe[{source}]: accuracy {rep.accuracy:.3f} (chance {rep.chance:.3f})")
    out_dir = run_dir / "probe"
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump([r.to_dict() for r in reports], f, indent=1)
    table_path = out_dir / "table.txt"
    table_path.write_text(pb.render_table(reports) + "\n")
    log(pb.render_table(reports))
    return [report_path, table_path]


def _stage_eval(cfg: PipelineConfig, run_dir: Path, log) -> list:
    conv_dir = run_dir / "convert"
    pairs_path = conv_dir / "pairs.jsonl"
    if not pairs_path.exists():
        raise MissingUpstreamError(f"missing conversion manifest {pairs_path}; run the convert stage")
    entries = [json.loads(line) for line in pairs_path.read_text().splitlines() if line.strip()]

    # speaker classifier on real mel frames, applied to converted mels
    labels = _speaker_labels(_load_split(run_dir, "train") + _load_split(run_dir, "test"))
    kind, fn = pb.make_provider("mel")
    train_items = _probe_items(cfg, run_dir, fn, "train", labels)
    spec = pb.ProbeSpec(rep_kind=kind, rep_source="mel", n_speakers=len(labels),
                        input_dim=cfg.features.n_mels)
    mel_probe = pb.train_probe(spec, train_items, cfg.probe.epochs, cfg.probe.lr,
                               seed=cfg.seed_for("probe:eval_mel"))

    rows = []
    cross_hits = 0
    cross_total = 0
    identity_fpcs = []
    for entry in entries:
        with np.load(conv_dir / entry["mel"]) as z:
            out_mel = z["mel"]
        src_rec = next(r for r in _load_split(run_dir, "test") if r.id == entry["src_id"])
        src_wave, _ = cp.resolve_waveform(src_rec, corpus_dir(run_dir))
        out_wave, _ = cp.read_wav(conv_dir / entry["wav"])
        similarity = {}
        for provider in cfg.eval.providers:
            ref_rec = next(r for r in _load_split(run_dir, "test") if r.id == entry["ref_id"])
            ref_wave, _ = cp.resolve_waveform(ref_rec, corpus_dir(run_dir))
            similarity[provider] = ev.speaker_similarity(out_wave, ref_wave, provider)
        fpc_val = ev.fpc(
            ft.extract_prosody(src_wave, cfg.features),
            ft.extract_prosody(out_wave, cfg.features),
        )
        notes = []
        with torch.no_grad():
            pred = int(mel_probe.utterance_logits(out_mel).argmax())
        if entry["kind"] == "cross":
            cross_total += 1
            if pred == labels[entry["ref_speaker"]]:
                cross_hits += 1
            notes.append(f"probe says speaker {pred}, reference is {labels[entry['ref_speaker']]}")
        else:
            if fpc_val is not None:
                identity_fpcs.append(fpc_val)
        rows.append((entry["name"], ev.EvalReport(fpc=fpc_val, similarity=similarity, notes=notes)))

    summary = {
        "cross_probe_accuracy": (cross_hits / cross_total) if cross_total else None,
        "identity_fpc_mean": float(np.mean(identity_fpcs)) if identity_fpcs else None,
        "identity_fpc_values": [float(v) for v in identity_fpcs],
        "pairs": [
            {"name": name, **rep.to_dict()} for name, rep in rows
        ],
    }
    out_dir = run_dir / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump(summary, f, indent=1)
    table_path = out_dir / "table.txt"
    table_path.write_text(ev.render_eval_table(rows) + "\n")
    log(f"eval: cross-probe accuracy {summary['cross_probe_accuracy']}, "
        f"identity FPC mean {summary['identity_fpc_mean']}")
    return [report_path, table_path]


def _stage_pca(cfg: PipelineConfig, run_dir: Path, log) -> list:
    from .align import beta_binomial_prior, mas, similarity_logits, upsample_by_durations

    encoder = load_semenc(cfg, run_dir)
    provider = _text_provider(cfg)
    tokens = load_tokens(run_dir)
    test = _load_split(run_dir, "test")
    rng = np.random.default_rng(cfg.seed_for("pca"))
    picks = rng.permutation(len(test))[: cfg.pca.utterances]

    out_dir = run_dir / "pca"
    out_dir.mkdir(parents=True, exist_ok=True)
    scores = []
    outputs = []
    with torch.no_grad():
        proj_w = encoder.text_proj
        for i in picks:
            rec = test[int(i)]
            a_hat = encoder.encode(_token_sequence(cfg, tokens[rec.id])).numpy()
            emb = provider.embed(rec.text)
            projected_rows = proj_w(torch.as_tensor(emb.embeddings, dtype=torch.float32)).numpy()
            prior = beta_binomial_prior(len(emb), a_hat.shape[0], cfg.semenc.omega)
            path = mas(similarity_logits(a_hat, projected_rows, prior))
            upsampled = upsample_by_durations(projected_rows, path)
            plot = out_dir / f"{rec.id}.png"
            cmp = ev.pca_compare(a_hat, upsampled, plot_path=plot)
            scores.append({"id": rec.id, "pca_alignment": cmp.pca_alignment})
            outputs.append(plot)
    mean_alignment = float(np.mean([s["pca_alignment"] for s in scores]))
    scores_path = out_dir / "scores.json"
    with open(scores_path, "w") as f:
        json.dump({"mean_pca_alignment": mean_alignment, "utterances": scores}, f, indent=1)
    log(f"pca: mean alignment {mean_alignment:.3f} over {len(scores)} test utterances")
    outputs.append(scores_path)
    return outputs


_STAGE_FNS = {
    "corpus": _stage_corpus,
    "tokenize": _stage_tokenize,
    "semenc-train": _stage_semenc_train,
    "lm-train": _stage_lm_train,
    "acoustic-train": _stage_acoustic_train,
    "convert": _stage_convert,
    "probe": _stage_probe,
    "eval": _stage_eval,
    "pca": _stage_pca,
}
