"""Stage orchestration on a micro corpus: caching, staleness, determinism."""

import json

import numpy as np
import pytest
from conftest import micro_config

from semalignvc.pipeline import (
    STAGES,
    MissingUpstreamError,
    load_semenc,
    load_tokens,
    run_stage,
)


def run_all(cfg):
    return {stage: run_stage(stage, cfg, log=None) for stage in STAGES}


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("micro_run")
    cfg = micro_config(run_dir)
    results = run_all(cfg)
    return cfg, run_dir, results


class TestOrchestration:
    def test_unknown_stage(self, tmp_path):
        with pytest.raises(ValueError, match="unknown stage"):
            run_stage("train-everything", micro_config(tmp_path), log=None)

    def test_missing_upstream_is_loud(self, tmp_path):
        cfg = micro_config(tmp_path)
        with pytest.raises(MissingUpstreamError, match="needs artifacts from stage 'corpus'"):
            run_stage("tokenize", cfg, log=None)

    def test_stage_caching_and_force(self, tmp_path):
        cfg = micro_config(tmp_path)
        first = run_stage("corpus", cfg, log=None)
        assert first.status == "completed"
        again = run_stage("corpus", cfg, log=None)
        assert again.status == "cached"
        assert again.outputs == [str(o) for o in first.outputs]
        forced = run_stage("corpus", cfg, force=True, log=None)
        assert forced.status == "completed"

    def test_stale_upstream_detected(self, tmp_path):
        cfg_a = micro_config(tmp_path)
        run_stage("corpus", cfg_a, log=None)
        run_stage("tokenize", cfg_a, log=None)
        cfg_b = micro_config(tmp_path, corpus={"speakers": 3})
        with pytest.raises(MissingUpstreamError, match="stale artifacts.*rerun 'corpus'"):
            run_stage("tokenize", cfg_b, log=None)

    def test_config_change_invalidates_cache(self, tmp_path):
        cfg_a = micro_config(tmp_path)
        run_stage("corpus", cfg_a, log=None)
        cfg_b = micro_config(tmp_path, corpus={"max_symbols": 8})
        assert run_stage("corpus", cfg_b, log=None).status == "completed"

    def test_lock_excludes_second_process(self, tmp_path):
        cfg = micro_config(tmp_path)
        (tmp_path / ".lock").write_text("12345")
        with pytest.raises(RuntimeError, match="locked by another stage"):
            run_stage("corpus", cfg, log=None)


class TestArtifacts:
    def test_all_stages_complete(self, micro_run):
        _, _, results = micro_run
        assert all(r.status == "completed" for r in results.values())

    def test_corpus_layout(self, micro_run):
        _, run_dir, _ = micro_run
        assert (run_dir / "corpus" / "manifest_train.jsonl").exists()
        assert (run_dir / "corpus" / "profiles.json").exists()

    def test_tokens_cover_all_utterances(self, micro_run):
        _, run_dir, _ = micro_run
        tokens = load_tokens(run_dir)
        manifests = (run_dir / "corpus" / "manifest.jsonl").read_text().splitlines()
        assert len(tokens) == len(manifests) == 8
        assert all(arr.ndim == 1 and len(arr) > 0 for arr in tokens.values())

    def test_probe_report_structure(self, micro_run):
        _, run_dir, _ = micro_run
        reports = json.loads((run_dir / "probe" / "report.json").read_text())
        assert [r["rep_source"] for r in reports] == ["tokenizer", "qphi", "qphi_ctc_only"]
        for r in reports:
            assert r["chance"] == pytest.approx(0.5)
            assert 0.0 <= r["accuracy"] <= 1.0
        table = (run_dir / "probe" / "table.txt").read_text()
        assert "tokenizer" in table

    def test_convert_outputs(self, micro_run):
        _, run_dir, _ = micro_run
        entries = [json.loads(l) for l in
                   (run_dir / "convert" / "pairs.jsonl").read_text().splitlines()]
        assert [e["kind"] for e in entries] == ["cross", "cross", "identity"]
        for e in entries:
            assert (run_dir / "convert" / e["wav"]).exists()
            with np.load(run_dir / "convert" / e["mel"]) as z:
                assert z["mel"].shape[1] == 24
                assert np.isfinite(z["mel"]).all()
        ident = entries[-1]
        assert ident["src_id"] == ident["ref_id"]

    def test_eval_report_structure(self, micro_run):
        _, run_dir, _ = micro_run
        summary = json.loads((run_dir / "eval" / "report.json").read_text())
        assert "cross_probe_accuracy" in summary
        assert len(summary["pairs"]) == 3
        for pair in summary["pairs"]:
            assert "ltas" in pair["similarity"]

    def test_pca_scores(self, micro_run):
        _, run_dir, _ = micro_run
        scores = json.loads((run_dir / "pca" / "scores.json").read_text())
        assert len(scores["utterances"]) == 2
        assert -1.0 <= scores["mean_pca_alignment"] <= 1.0
        for s in scores["utterances"]:
            assert (run_dir / "pca" / f"{s['id']}.png").exists()

    def test_checkpoint_fingerprint_guard(self, micro_run, tmp_path):
        cfg, run_dir, _ = micro_run
        stale = micro_config(run_dir, semenc={"steps": 7})
        with pytest.raises(RuntimeError, match="fingerprint"):
            load_semenc(stale, run_dir)
        model = load_semenc(stale, run_dir, force=True)
        assert model is not None


class TestDeterminism:
    def test_identical_config_reproduces_reports(self, micro_run, tmp_path_factory):
        cfg_a, dir_a, _ = micro_run
        dir_b = tmp_path_factory.mktemp("micro_twin")
        cfg_b = micro_config(dir_b)
        run_all(cfg_b)

        probe_a = json.loads((dir_a / "probe" / "report.json").read_text())
        probe_b = json.loads((dir_b / "probe" / "report.json").read_text())
        assert probe_a == probe_b

        pairs_a = (dir_a / "convert" / "pairs.jsonl").read_text()
        pairs_b = (dir_b / "convert" / "pairs.jsonl").read_text()
        assert pairs_a == pairs_b

        toks_a = load_tokens(dir_a)
        toks_b = load_tokens(dir_b)
        assert set(toks_a) == set(toks_b)
        for k in toks_a:
            np.testing.assert_array_equal(toks_a[k], toks_b[k])

    def test_root_seed_moves_the_run(self, tmp_path):
        cfg0 = micro_config(tmp_path / "s0", seed=0)
        cfg1 = micro_config(tmp_path / "s1", seed=1)
        for cfg in (cfg0, cfg1):
            run_stage("corpus", cfg, log=None)
            run_stage("tokenize", cfg, log=None)
        toks0 = load_tokens(tmp_path / "s0")
        toks1 = load_tokens(tmp_path / "s1")
        assert set(toks0) == set(toks1)  # same naming scheme
        assert any(not np.array_equal(toks0[k], toks1[k]) for k in toks0)
