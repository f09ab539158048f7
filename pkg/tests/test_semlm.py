"""Token LM: prompt layout, loss masking, gradient barrier, generation."""

import numpy as np
import pytest
import torch
from torch import nn

from semalignvc.quantizer import TokenSequence
from semalignvc.semenc import EncoderConfig, SemanticEncoder
from semalignvc.semlm import (
    ROLE_ORDER,
    GenerationResult,
    LMConfig,
    LMExample,
    LMTrainConfig,
    PromptSequence,
    SemanticLM,
    generate,
    lm_loss,
    load_lm,
    segment_reference,
    split_example,
    train_lm,
)

torch.set_num_threads(1)

CFG = LMConfig(layers=1, d=32, heads=2, token_vocab=8, d_sem=8, n_mels=6, max_len=256)


def make_lm(seed=0, cfg=CFG):
    torch.manual_seed(seed)
    return SemanticLM(cfg)


def prompt_parts(t=5, r=3, m=4, seed=0):
    rng = np.random.default_rng(seed)
    a_hat = rng.normal(0.0, 1.0, (t, CFG.d_sem)).astype(np.float32)
    prosody = rng.normal(0.0, 1.0, (t, CFG.n_prosody)).astype(np.float32)
    ref = rng.normal(0.0, 1.0, (r, CFG.n_mels)).astype(np.float32)
    ids = rng.integers(0, CFG.token_vocab, m).astype(np.int64)
    return a_hat, prosody, ref, ids


class TestSpecialIds:
    def test_vocab_extends_tokens_by_three(self):
        assert CFG.vocab == CFG.token_vocab + 3
        assert {CFG.eos_id, CFG.sos_id, CFG.sep_id} == {8, 9, 10}

    def test_heads_must_divide_d(self):
        with pytest.raises(ValueError, match="divisible"):
            LMConfig(d=30, heads=4)


class TestPromptLayout:
    def test_role_order_and_lengths(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts(t=5, r=3, m=4)
        p = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        assert tuple(role for role, _ in p.segments) == ROLE_ORDER
        lens = [len(payload) for _, payload in p.segments]
        assert lens == [1, 5, 1, 3, 1, 4, 1]
        assert len(p) == 16

    def test_loss_mask_covers_exactly_tokens_and_eos(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts(t=5, r=3, m=4)
        p = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        want = np.zeros(16, dtype=bool)
        want[-5:] = True  # 4 token rows + EOS
        np.testing.assert_array_equal(p.loss_mask, want)
        np.testing.assert_array_equal(p.target_ids[-5:-1], ids)
        assert p.target_ids[-1] == CFG.eos_id
        assert (p.target_ids[:-5] == -1).all()

    def test_generation_prompt_has_empty_targets(self):
        model = make_lm()
        a_hat, prosody, ref, _ = prompt_parts()
        p = model.build_prompt(a_hat, prosody, ref, tokens=None)
        assert not p.loss_mask.any()
        assert len(p) == 1 + 5 + 1 + 3 + 1
        with pytest.raises(ValueError, match="nothing to supervise"):
            lm_loss(make_lm(), p)

    def test_token_sequence_accepted(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts()
        seq = TokenSequence(ids=ids, frame_rate=50.0)
        p1 = model.build_prompt(a_hat, prosody, ref, tokens=seq)
        p2 = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        assert torch.equal(p1.embedded, p2.embedded)

    def test_rejects_out_of_vocab_tokens(self):
        model = make_lm()
        a_hat, prosody, ref, _ = prompt_parts()
        with pytest.raises(ValueError, match="outside the audio vocabulary"):
            model.build_prompt(a_hat, prosody, ref, tokens=np.array([0, CFG.token_vocab]))

    def test_rejects_misaligned_prosody(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts(t=5)
        with pytest.raises(ValueError, match="length mismatch"):
            model.build_prompt(a_hat, prosody[:3], ref, tokens=ids)

    def test_prompt_validation_guards(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts()
        p = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        bad_mask = p.loss_mask.copy()
        bad_mask[2] = True  # a SEMANTIC position
        with pytest.raises(ValueError, match="loss mask set on SEMANTIC"):
            PromptSequence(segments=p.segments, embedded=p.embedded,
                           loss_mask=bad_mask, target_ids=p.target_ids)
        with pytest.raises(ValueError, match="roles"):
            PromptSequence(segments=p.segments[::-1], embedded=p.embedded,
                           loss_mask=p.loss_mask, target_ids=p.target_ids)
        with pytest.raises(ValueError, match="inconsistent"):
            PromptSequence(segments=p.segments, embedded=p.embedded[:-1],
                           loss_mask=p.loss_mask, target_ids=p.target_ids)

    def test_max_len_enforced(self):
        model = make_lm()
        with pytest.raises(ValueError, match="max_len"):
            model(torch.zeros(CFG.max_len + 1, CFG.d))


class TestGradientBarrier:
    def test_lm_loss_never_reaches_semantic_input(self):
        # the prompt detaches a_hat, so timbre pressure cannot flow upstream
        model = make_lm()
        a_hat = torch.randn(6, CFG.d_sem, requires_grad=True)
        _, prosody, ref, ids = prompt_parts(t=6)
        p = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        loss = lm_loss(model, p)
        loss.backward()
        assert a_hat.grad is None

    def test_encoder_parameters_get_exactly_zero(self):
        # end to end through a real encoder: every gradient is structurally absent
        torch.manual_seed(0)
        enc = SemanticEncoder(EncoderConfig(layers=1, d=CFG.d_sem, heads=2, conv_kernel=3,
                                            token_vocab=8, text_vocab=5, d_text=8,
                                            dropout=0.0, token_dropout=0.0))
        model = make_lm()
        ids = np.arange(10) % 8
        a_hat = enc.forward(torch.from_numpy(ids))  # grad-carrying tensor
        _, prosody, ref, toks = prompt_parts(t=10)
        p = model.build_prompt(a_hat, prosody, ref, tokens=toks)
        lm_loss(model, p).backward()
        assert all(q.grad is None for q in enc.parameters())


class TestLossMaskInvariance:
    def test_loss_reads_only_supervised_logit_rows(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts(t=5, r=3, m=4)
        p = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        with torch.no_grad():
            logits = model(p.embedded)
        mask = torch.from_numpy(p.loss_mask)
        targets = torch.from_numpy(p.target_ids[p.loss_mask])

        def manual(lg):
            return nn.functional.cross_entropy(lg[:-1][mask[1:]], targets)

        base = manual(logits)
        assert float(lm_loss(model, p).detach()) == pytest.approx(float(base), abs=1e-6)
        # clobber every logit row that does not predict a token or the EOS
        pred_rows = (torch.nonzero(mask)[:, 0] - 1).tolist()
        noisy = logits.clone()
        for row in range(noisy.shape[0]):
            if row not in pred_rows:
                noisy[row] += torch.randn(noisy.shape[1]) * 100.0
        assert torch.equal(manual(noisy), base)


class TestCausality:
    def test_prefix_logits_independent_of_suffix(self):
        model = make_lm()
        a_hat, prosody, ref, ids = prompt_parts(t=5, r=3, m=4)
        p = model.build_prompt(a_hat, prosody, ref, tokens=ids)
        with torch.no_grad():
            full = model(p.embedded)
            half = model(p.embedded[:9])
        assert torch.allclose(full[:9], half, atol=1e-5)


class TestSegmentReference:
    def _arrays(self, t=20):
        return {"x": np.arange(t), "y": np.arange(t * 2).reshape(t, 2)}

    def test_eval_mode_takes_tail(self):
        main, ref, (start, ref_len) = segment_reference(self._arrays(20), train=False)
        assert ref_len == 5 and start == 15
        np.testing.assert_array_equal(ref["x"], np.arange(15, 20))
        np.testing.assert_array_equal(main["x"], np.arange(15))

    def test_partition_is_exact_and_ordered(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = int(rng.integers(16, 60))
            main, ref, (start, ref_len) = segment_reference(self._arrays(t), train=True, rng=rng)
            assert 0 <= start <= t - ref_len
            rebuilt = np.concatenate([main["x"][:start], ref["x"], main["x"][start:]])
            np.testing.assert_array_equal(rebuilt, np.arange(t))
            assert len(main["y"]) + len(ref["y"]) == t

    def test_errors(self):
        with pytest.raises(ValueError, match="share leading length"):
            segment_reference({"x": np.arange(20), "y": np.arange(19)}, train=False)
        with pytest.raises(ValueError, match="too short"):
            segment_reference({"x": np.arange(8)}, train=False)
        with pytest.raises(ValueError, match="needs an rng"):
            segment_reference({"x": np.arange(20)}, train=True)

    def test_ratio_rounding(self):
        _, ref, (_, ref_len) = segment_reference({"x": np.arange(18)}, train=False)
        assert ref_len == round(0.25 * 18) == len(ref["x"])


class TestSplitExample:
    def _example(self, t=24, stack=2):
        rng = np.random.default_rng(1)
        return LMExample(
            utterance_id="u0",
            tokens=rng.integers(0, 8, t).astype(np.int64),
            mel=rng.normal(0.0, 1.0, (t * stack, CFG.n_mels)).astype(np.float32),
            prosody=rng.normal(0.0, 1.0, (t, 3)).astype(np.float32),
            stack=stack,
        )

    def test_length_validation(self):
        with pytest.raises(ValueError, match="disagree"):
            LMExample(utterance_id="u", tokens=np.zeros(4, dtype=np.int64),
                      mel=np.zeros((6, CFG.n_mels)), prosody=np.zeros((4, 3)), stack=2)

    def test_shapes_consistent(self):
        torch.manual_seed(0)
        enc = SemanticEncoder(EncoderConfig(layers=1, d=CFG.d_sem, heads=2, conv_kernel=3,
                                            token_vocab=8, text_vocab=5, d_text=8,
                                            dropout=0.0, token_dropout=0.0))
        ex = self._example(t=24, stack=2)
        a_hat, prosody, ref_mel, main_ids = split_example(ex, enc, train=False)
        ref_len = round(0.25 * 24)
        assert a_hat.shape == (24 - ref_len, CFG.d_sem)
        assert prosody.shape == (24 - ref_len, 3)
        assert ref_mel.shape == (ref_len * 2, CFG.n_mels)
        assert len(main_ids) == 24 - ref_len
        # reference mel rows are the tail of the utterance, kept frame-aligned
        np.testing.assert_array_equal(ref_mel, ex.mel[-ref_len * 2 :])


class TestGeneration:
    def test_greedy_is_deterministic(self):
        model = make_lm(seed=3)
        a_hat, prosody, ref, _ = prompt_parts(t=6)
        r1 = generate(model, a_hat, prosody, ref, sampler="greedy")
        r2 = generate(model, a_hat, prosody, ref, sampler="greedy")
        assert isinstance(r1, GenerationResult)
        np.testing.assert_array_equal(r1.tokens.ids, r2.tokens.ids)

    def test_cap_and_truncation_flag(self):
        model = make_lm(seed=3)
        with torch.no_grad():
            model.head.bias[CFG.eos_id] = -1e9  # EOS unreachable
        a_hat, prosody, ref, _ = prompt_parts(t=6)
        r = generate(model, a_hat, prosody, ref, extra=4)
        assert r.truncated
        assert len(r.tokens.ids) == 6 + 4

    def test_immediate_eos_gives_empty_result(self):
        model = make_lm(seed=3)
        with torch.no_grad():
            model.head.bias[CFG.eos_id] = 1e9
        a_hat, prosody, ref, _ = prompt_parts(t=6)
        r = generate(model, a_hat, prosody, ref)
        assert not r.truncated
        assert len(r.tokens.ids) == 0

    def test_specials_never_emitted(self):
        model = make_lm(seed=4)
        with torch.no_grad():
            model.head.bias[CFG.sos_id] = 1e9
            model.head.bias[CFG.sep_id] = 1e9
            model.head.bias[CFG.eos_id] = -1e9
        a_hat, prosody, ref, _ = prompt_parts(t=5)
        r = generate(model, a_hat, prosody, ref, extra=0)
        assert r.tokens.ids.max() < CFG.token_vocab

    def test_topk_seeded(self):
        model = make_lm(seed=5)
        a_hat, prosody, ref, _ = prompt_parts(t=6)
        r1 = generate(model, a_hat, prosody, ref, sampler="topk", seed=9)
        r2 = generate(model, a_hat, prosody, ref, sampler="topk", seed=9)
        np.testing.assert_array_equal(r1.tokens.ids, r2.tokens.ids)

    def test_unknown_sampler(self):
        model = make_lm()
        a_hat, prosody, ref, _ = prompt_parts()
        with pytest.raises(ValueError, match="sampler"):
            generate(model, a_hat, prosody, ref, sampler="beam")


class TestTrainer:
    def _examples(self, n=4, t=24):
        rng = np.random.default_rng(7)
        out = []
        for u in range(n):
            # content-coded tokens: a repeated motif the LM can latch onto
            motif = rng.integers(0, 8, 6)
            toks = np.tile(motif, t // 6 + 1)[:t].astype(np.int64)
            mel = np.repeat(toks[:, None], 2, axis=0).astype(np.float32)
            mel = np.repeat(mel, CFG.n_mels, axis=1) / 8.0
            prosody = np.zeros((t, 3), dtype=np.float32)
            out.append(LMExample(f"u{u}", toks, mel, prosody, stack=2))
        return out

    def test_loss_decreases_and_checkpoints(self, tmp_path):
        torch.manual_seed(0)
        enc = SemanticEncoder(EncoderConfig(layers=1, d=CFG.d_sem, heads=2, conv_kernel=3,
                                            token_vocab=8, text_vocab=5, d_text=8,
                                            dropout=0.0, token_dropout=0.0))
        tc = LMTrainConfig(steps=30, batch_size=2, peak_lr=1e-3, warmup=5, seed=0)
        p = tmp_path / "lm.pt"
        model = train_lm(self._examples(), enc, CFG, tc, checkpoint_path=p,
                         fingerprint="fp9", log=None)
        hist = model.loss_history
        assert len(hist) == 30
        assert np.mean(hist[-5:]) < np.mean(hist[:5])
        loaded, blob = load_lm(p)
        assert blob["fingerprint"] == "fp9"
        assert loaded.cfg == CFG
        for k, v in model.state_dict().items():
            assert torch.equal(v, loaded.state_dict()[k])
