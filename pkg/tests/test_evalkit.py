"""Evaluation metrics: FPC, speaker similarity, PCA overlap, report tables."""

import json

import numpy as np
import pytest
import scipy.stats

from semalignvc.corpus import (
    ToySpeakerProfile,
    default_symbol_inventory,
    symbols_from_text,
    synthesize_toy_utterance,
)
from semalignvc.evalkit import (
    MIN_JOINT_VOICED,
    EvalReport,
    PCAComparison,
    fpc,
    ltas_embedding,
    pca_compare,
    register_similarity_provider,
    render_eval_table,
    speaker_similarity,
)
from semalignvc.features import ProsodyTrack


def make_track(f0, voiced=None):
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = f0 != 0.0 if voiced is None else np.asarray(voiced, dtype=bool)
    f0 = np.where(voiced, f0, 0.0)
    return ProsodyTrack(f0=f0, voicing=voiced, energy=np.zeros(len(f0)))


class TestFPC:
    def test_self_correlation(self):
        rng = np.random.default_rng(0)
        t = make_track(rng.uniform(4.0, 6.0, 50))
        assert fpc(t, t) == pytest.approx(1.0, abs=1e-12)

    def test_matches_textbook_pearson(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(4.0, 6.0, 64)
        b = 0.8 * a + rng.normal(0, 0.3, 64)
        voiced = rng.random(64) < 0.8
        got = fpc(make_track(a, voiced), make_track(b, voiced))
        want = scipy.stats.pearsonr(a[voiced], b[voiced]).statistic
        assert got == pytest.approx(want, abs=1e-12)

    def test_transposition_invariance(self):
        # A pitch transposition adds a constant in the log-f0 domain;
        # Pearson is exactly invariant to that.
        rng = np.random.default_rng(2)
        a = rng.uniform(4.0, 6.0, 40)
        assert fpc(make_track(a), make_track(a + np.log(2.0))) == pytest.approx(1.0, abs=1e-12)
        assert fpc(make_track(a), make_track(-0.5 * a + 9.0)) == pytest.approx(-1.0, abs=1e-12)

    def test_plain_arrays_accepted(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(4.0, 6.0, 30)
        b = a.copy()
        b[:5] = 0.0  # unvoiced by the zero convention
        got = fpc(a, b)
        want = scipy.stats.pearsonr(a[5:], b[5:]).statistic
        assert got == pytest.approx(want, abs=1e-12)

    def test_length_mismatch_resamples(self):
        # The short track is linearly interpolated; an affine ramp
        # survives interpolation exactly, so correlation stays 1.
        long = np.linspace(4.0, 6.0, 61)
        short = np.linspace(4.0, 6.0, 31)
        assert fpc(make_track(short), make_track(long)) == pytest.approx(1.0, abs=1e-12)

    def test_thin_voiced_overlap_is_none(self):
        f0 = np.full(40, 5.0)
        f0 += np.arange(40) * 0.01
        voiced_a = np.zeros(40, dtype=bool)
        voiced_a[: MIN_JOINT_VOICED - 1] = True
        assert fpc(make_track(f0, voiced_a), make_track(f0)) is None
        assert fpc(make_track(f0, np.zeros(40, dtype=bool)), make_track(f0)) is None

    def test_constant_track_is_none(self):
        flat = make_track(np.full(20, 5.0))
        assert fpc(flat, flat) is None

    def test_synthesized_speech_self_fpc(self):
        profile = ToySpeakerProfile(base_f0=150.0, formant_shift=1.0,
                                    spectral_tilt=0.0, seed=5)
        symbols = symbols_from_text("abcabc", default_symbol_inventory())
        result = synthesize_toy_utterance(profile, symbols, seed=1)
        track = np.log(result.f0_hz[:: 160])
        assert fpc(track, track) == pytest.approx(1.0, abs=1e-12)


class TestSpeakerSimilarity:
    def _wave(self, base_f0, shift, seed):
        profile = ToySpeakerProfile(base_f0=base_f0, formant_shift=shift,
                                    spectral_tilt=0.0, seed=seed)
        symbols = symbols_from_text("abcdef", default_symbol_inventory())
        return synthesize_toy_utterance(profile, symbols, seed=seed).waveform

    def test_ltas_shape(self):
        emb = ltas_embedding(self._wave(150.0, 1.0, 0))
        assert emb.shape == (80,)
        assert np.isfinite(emb).all()

    def test_self_similarity_is_one(self):
        w = self._wave(150.0, 1.0, 0)
        assert speaker_similarity(w, w) == pytest.approx(1.0, abs=1e-12)

    def test_same_speaker_beats_cross_speaker(self):
        a1 = self._wave(90.0, 0.75, 1)
        a2 = self._wave(90.0, 0.75, 2)
        b1 = self._wave(290.0, 1.25, 3)
        assert speaker_similarity(a1, a2) > speaker_similarity(a1, b1)

    def test_unknown_provider(self):
        w = self._wave(150.0, 1.0, 0)
        with pytest.raises(ValueError, match="unknown similarity provider"):
            speaker_similarity(w, w, provider="ecapa")

    def test_registered_provider_used(self):
        register_similarity_provider("first4", lambda w: w[:4])
        try:
            a = np.array([1.0, 0.0, 0.0, 0.0, 9.9])
            b = np.array([0.0, 1.0, 0.0, 0.0, -3.3])
            assert speaker_similarity(a, b, provider="first4") == pytest.approx(0.0, abs=1e-12)
        finally:
            from semalignvc import evalkit

            del evalkit._SIMILARITY_PROVIDERS["first4"]

    def test_provider_failure_is_wrapped(self):
        def boom(w):
            raise RuntimeError("no model file")

        register_similarity_provider("broken", boom)
        try:
            with pytest.raises(RuntimeError, match="provider 'broken' failed"):
                speaker_similarity(np.zeros(10), np.zeros(10), provider="broken")
        finally:
            from semalignvc import evalkit

            del evalkit._SIMILARITY_PROVIDERS["broken"]


class TestPCACompare:
    def _pair(self, t=30, d=8, noise=0.0, seed=0):
        rng = np.random.default_rng(seed)
        b = rng.normal(0, 1, (t, d))
        a = b + rng.normal(0, noise, (t, d))
        return a, b

    def test_identical_sequences_align_perfectly(self):
        a, _ = self._pair(seed=1)
        cmp = pca_compare(a, a.copy())
        assert cmp.pca_alignment == pytest.approx(1.0, abs=1e-9)
        assert cmp.proj_a.shape == (30, 2)
        np.testing.assert_allclose(cmp.proj_a, cmp.proj_b, atol=1e-9)

    def test_negated_sequences_anti_align(self):
        a, _ = self._pair(seed=2)
        assert pca_compare(a, -a).pca_alignment == pytest.approx(-1.0, abs=1e-9)

    def test_noise_degrades_alignment_monotonically(self):
        a0, b0 = self._pair(noise=0.1, seed=3)
        a1, b1 = self._pair(noise=2.0, seed=3)
        assert pca_compare(a0, b0).pca_alignment > pca_compare(a1, b1).pca_alignment

    def test_rotation_invariance(self):
        # A shared orthogonal change of feature basis rotates the fitted
        # components with it; pairwise cosines in the plane are unchanged.
        a, b = self._pair(noise=0.5, seed=4)
        q, _ = np.linalg.qr(np.random.default_rng(5).normal(0, 1, (8, 8)))
        base = pca_compare(a, b).pca_alignment
        rotated = pca_compare(a @ q, b @ q).pca_alignment
        assert rotated == pytest.approx(base, abs=1e-9)

    def test_explained_variance_of_planar_data(self):
        rng = np.random.default_rng(6)
        coords = rng.normal(0, 1, (40, 2))
        basis = rng.normal(0, 1, (2, 8))
        a = coords @ basis
        cmp = pca_compare(a, a + 0.0)
        assert cmp.explained.sum() == pytest.approx(1.0, abs=1e-9)

    def test_origin_frames_count_as_agreement(self):
        # Frames sitting exactly at the shared center have no direction;
        # they must not drag the score down.
        r = np.array([1.0, 2.0, 3.0])
        u = np.array([0.5, -1.0, 0.25])
        w = np.array([-0.2, 0.4, 1.0])
        a = np.stack([r, r + u, r - u, r + w, r - w])
        cmp = pca_compare(a, a.copy())
        assert cmp.pca_alignment == pytest.approx(1.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes disagree"):
            pca_compare(np.zeros((5, 4)), np.zeros((6, 4)))

    def test_needs_two_feature_dims(self):
        with pytest.raises(ValueError, match="two feature dimensions"):
            pca_compare(np.zeros((5, 1)), np.zeros((5, 1)))

    def test_rank_deficient_input_is_loud(self):
        flat = np.ones((10, 4))
        with pytest.raises(ValueError, match="rank below 2"):
            pca_compare(flat, flat)

    def test_plot_written(self, tmp_path):
        a, b = self._pair(noise=0.3, seed=7)
        out = tmp_path / "plots" / "cmp.png"
        pca_compare(a, b, plot_path=out)
        assert out.exists() and out.stat().st_size > 0


class TestEvalReport:
    def test_round_trip(self):
        rep = EvalReport(fpc=0.72, similarity={"ltas": 0.91}, pca_alignment=0.8,
                         notes=["greedy sampler"])
        parsed = json.loads(json.dumps(rep.to_dict()))
        assert parsed["fpc"] == pytest.approx(0.72)
        assert parsed["similarity"]["ltas"] == pytest.approx(0.91)

    def test_none_fpc_allowed(self):
        rep = EvalReport(fpc=None, similarity={"ltas": 0.5})
        assert rep.to_dict()["fpc"] is None

    def test_non_finite_values_rejected(self):
        with pytest.raises(ValueError, match="non-finite similarity"):
            EvalReport(fpc=0.5, similarity={"ltas": float("nan")})
        with pytest.raises(ValueError, match="non-finite FPC"):
            EvalReport(fpc=float("inf"), similarity={"ltas": 0.5})

    def test_render_table(self):
        rows = [
            ("src->ref", EvalReport(fpc=0.68, similarity={"ltas": 0.83})),
            ("src->src", EvalReport(fpc=None, similarity={"ltas": 0.99})),
        ]
        table = render_eval_table(rows)
        assert "Sim(ltas)" in table and "FPC" in table
        assert "0.830" in table and "undef" in table
        assert "Naturalness" not in table
        with_nat = render_eval_table(rows, naturalness={"src->ref": 3.4})
        assert "Naturalness" in with_nat and "3.40" in with_nat
