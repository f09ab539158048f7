"""Alignment module tests against brute-force oracles.

The DP implementations (MAS, forward-sum) are checked exactly against
path enumeration on small instances, then for invariants on larger
random ones.
"""

import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semalignvc.align import (
    AlignmentPath,
    beta_binomial_prior,
    forward_sum_loss,
    mas,
    mas_path_score,
    semalign_loss,
    similarity_logits,
    upsample_by_durations,
)


def enumerate_paths(text_len: int, n_frames: int):
    """Every monotonic surjective assignment as a duration composition."""
    # durations >= 1 summing to n_frames, one per symbol
    for cuts in itertools.combinations(range(1, n_frames), text_len - 1):
        bounds = (0,) + cuts + (n_frames,)
        durations = [bounds[k + 1] - bounds[k] for k in range(text_len)]
        assignment = np.repeat(np.arange(text_len), durations)
        yield assignment


def brute_force_best(logp: np.ndarray):
    best, best_path = -np.inf, None
    text_len, n_frames = logp.shape
    for assignment in enumerate_paths(text_len, n_frames):
        score = logp[assignment, np.arange(n_frames)].sum()
        if score > best:
            best, best_path = score, assignment
    return best, best_path


def brute_force_logsum(logp: np.ndarray) -> float:
    text_len, n_frames = logp.shape
    scores = [
        logp[assignment, np.arange(n_frames)].sum()
        for assignment in enumerate_paths(text_len, n_frames)
    ]
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


class TestMAS:
    def test_matches_brute_force_on_small_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            text_len = rng.integers(1, 4)
            n_frames = rng.integers(text_len, 7)
            logp = rng.normal(0.0, 2.0, (text_len, n_frames))
            path = mas(logp)
            got = mas_path_score(logp, path)
            want, _ = brute_force_best(logp)
            assert got == pytest.approx(want, abs=1e-12)

    def test_path_invariants_on_larger_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            text_len = rng.integers(1, 12)
            n_frames = rng.integers(text_len, 40)
            path = mas(rng.normal(0.0, 3.0, (text_len, n_frames)))
            # AlignmentPath.validate runs in the constructor; re-check the
            # core facts here so the test does not depend on it.
            a = path.assignment
            assert a[0] == 0 and a[-1] == text_len - 1
            steps = np.diff(a)
            assert set(np.unique(steps)).issubset({0, 1})
            assert path.durations.sum() == n_frames
            assert (path.durations >= 1).all()

    def test_infeasible_when_more_symbols_than_frames(self):
        with pytest.raises(ValueError, match="monotonic"):
            mas(np.zeros((4, 3)))

    def test_rejects_non_finite_scores(self):
        logp = np.zeros((2, 4))
        logp[1, 2] = np.nan
        with pytest.raises(ValueError, match="finite"):
            mas(logp)

    def test_single_symbol_aligns_everywhere(self):
        path = mas(np.random.default_rng(2).normal(size=(1, 5)))
        assert (path.assignment == 0).all()
        assert path.durations.tolist() == [5]

    def test_accepts_torch_input_and_detaches(self):
        logp = torch.randn(3, 8, requires_grad=True)
        path = mas(logp)
        assert isinstance(path.assignment, np.ndarray)
        # the search must not be part of any graph
        assert logp.grad is None


class TestForwardSum:
    def test_matches_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            text_len = rng.integers(1, 4)
            n_frames = rng.integers(text_len, 7)
            logp = rng.normal(0.0, 1.5, (text_len, n_frames))
            loss = forward_sum_loss(torch.from_numpy(logp))
            want = -brute_force_logsum(logp)
            assert float(loss) == pytest.approx(want, abs=1e-6)

    def test_upper_bounds_best_path(self):
        # sum over paths >= best path, so -logsum <= -best
        rng = np.random.default_rng(4)
        logp = rng.normal(0.0, 1.0, (3, 6))
        loss = float(forward_sum_loss(torch.from_numpy(logp)))
        best, _ = brute_force_best(logp)
        assert loss <= -best + 1e-9

    def test_gradient_flows_and_is_finite(self):
        logp = torch.randn(3, 7, dtype=torch.float64, requires_grad=True)
        loss = forward_sum_loss(torch.log_softmax(logp, dim=0))
        loss.backward()
        assert logp.grad is not None
        assert torch.isfinite(logp.grad).all()

    def test_gradcheck_finite_differences(self):
        torch.manual_seed(0)
        base = torch.randn(3, 6, dtype=torch.float64)

        def f(x):
            return forward_sum_loss(x)

        assert torch.autograd.gradcheck(f, (base.requires_grad_(True),), eps=1e-6, atol=1e-4)


class TestBetaBinomialPrior:
    @staticmethod
    def _oracle_pmf(i: int, n: int, a: float, b: float) -> float:
        """Beta-binomial pmf straight from the beta-function definition."""
        log_comb = math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1)
        log_beta_num = math.lgamma(i + a) + math.lgamma(n - i + b) - math.lgamma(n + a + b)
        log_beta_den = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
        return math.exp(log_comb + log_beta_num - log_beta_den)

    def test_matches_beta_function_definition(self):
        for text_len, n_frames in [(1, 1), (2, 5), (4, 9), (7, 23)]:
            prior = beta_binomial_prior(text_len, n_frames, omega=1.0)
            assert prior.shape == (text_len, n_frames)
            for j in range(n_frames):
                a = 1.0 * (j + 1)
                b = 1.0 * (n_frames - j)
                for i in range(text_len):
                    want = self._oracle_pmf(i, text_len - 1, a, b)
                    assert math.exp(prior[i, j]) == pytest.approx(want, rel=1e-9)

    def test_columns_are_normalized_distributions(self):
        prior = beta_binomial_prior(5, 12, omega=1.0)
        col_mass = np.exp(prior).sum(axis=0)
        np.testing.assert_allclose(col_mass, 1.0, atol=1e-12)

    def test_prior_concentrates_diagonally(self):
        prior = beta_binomial_prior(4, 40, omega=1.0)
        assert prior[:, 0].argmax() == 0
        assert prior[:, -1].argmax() == 3

    def test_omega_sharpens(self):
        flat = beta_binomial_prior(3, 15, omega=0.2)
        sharp = beta_binomial_prior(3, 15, omega=4.0)
        # entropy of the middle column shrinks as omega grows
        def entropy(col):
            p = np.exp(col)
            return -(p * col).sum()
        assert entropy(sharp[:, 7]) < entropy(flat[:, 7])


class TestSimilarityLogits:
    def test_columns_normalized_over_text(self):
        rng = np.random.default_rng(5)
        a_hat = rng.normal(size=(9, 6))
        txt = rng.normal(size=(3, 6))
        sim = similarity_logits(a_hat, txt)
        np.testing.assert_allclose(np.exp(sim.logp).sum(axis=0), 1.0, atol=1e-9)

    def test_nearest_text_vector_wins(self):
        txt = np.eye(3) * 4.0
        a_hat = np.stack([txt[0], txt[1], txt[1], txt[2]])
        sim = similarity_logits(a_hat, txt)
        assert sim.logp.argmax(axis=0).tolist() == [0, 1, 1, 2]

    def test_torch_and_numpy_paths_agree(self):
        rng = np.random.default_rng(6)
        a_hat = rng.normal(size=(7, 5))
        txt = rng.normal(size=(2, 5))
        prior = beta_binomial_prior(2, 7)
        via_np = similarity_logits(a_hat, txt, prior=prior).logp
        via_t = similarity_logits(
            torch.from_numpy(a_hat), torch.from_numpy(txt), prior=prior
        ).logp.detach().numpy()
        np.testing.assert_allclose(via_np, via_t, atol=1e-8)


class TestUpsample:
    def test_matches_np_repeat(self):
        rng = np.random.default_rng(7)
        txt = rng.normal(size=(3, 4))
        path = mas(rng.normal(size=(3, 10)))
        ups = upsample_by_durations(txt, path)
        np.testing.assert_array_equal(ups, np.repeat(txt, path.durations, axis=0))

    def test_torch_passthrough_keeps_grad(self):
        txt = torch.randn(2, 3, requires_grad=True)
        path = mas(np.random.default_rng(8).normal(size=(2, 6)))
        ups = upsample_by_durations(txt, path)
        ups.sum().backward()
        assert txt.grad is not None
        np.testing.assert_array_equal(
            txt.grad.numpy(), np.array([[path.durations[0]] * 3, [path.durations[1]] * 3])
        )

    def test_length_equals_frames(self):
        path = mas(np.random.default_rng(9).normal(size=(4, 17)))
        ups = upsample_by_durations(np.random.default_rng(10).normal(size=(4, 2)), path)
        assert ups.shape == (17, 2)


class TestSemalignLoss:
    def test_zero_when_output_equals_projected_target(self):
        proj = torch.nn.Linear(4, 4)
        ups = torch.randn(6, 4)
        with torch.no_grad():
            target = proj(ups)
        loss = semalign_loss(target, ups, proj)
        assert float(loss.detach()) == pytest.approx(0.0, abs=1e-12)

    def test_matches_manual_mse(self):
        torch.manual_seed(1)
        proj = torch.nn.Linear(3, 5).double()
        a_hat = torch.randn(7, 5, dtype=torch.float64)
        ups = torch.randn(7, 3, dtype=torch.float64)
        loss = semalign_loss(a_hat, ups, proj)
        want = ((a_hat - proj(ups)) ** 2).mean()
        assert float(loss) == pytest.approx(float(want), rel=1e-12)

    def test_gradcheck(self):
        proj = torch.nn.Linear(3, 4).double()
        ups = torch.randn(5, 3, dtype=torch.float64)

        def f(a):
            return semalign_loss(a, ups, proj)

        a = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(f, (a,), eps=1e-6, atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(
    text_len=st.integers(1, 6),
    extra=st.integers(0, 20),
    seed=st.integers(0, 10_000),
)
def test_mas_path_always_valid(text_len, extra, seed):
    n_frames = text_len + extra
    rng = np.random.default_rng(seed)
    path = mas(rng.normal(0.0, 2.0, (text_len, n_frames)))
    # constructor validation plus an independent re-check
    assert isinstance(path, AlignmentPath)
    assert len(path.assignment) == n_frames
    assert path.durations.sum() == n_frames


@settings(max_examples=30, deadline=None)
@given(text_len=st.integers(1, 3), extra=st.integers(0, 3), seed=st.integers(0, 9999))
def test_mas_never_beaten_by_any_path(text_len, extra, seed):
    n_frames = text_len + extra
    rng = np.random.default_rng(seed)
    logp = rng.normal(0.0, 2.0, (text_len, n_frames))
    best = mas_path_score(logp, mas(logp))
    for assignment in enumerate_paths(text_len, n_frames):
        assert best >= logp[assignment, np.arange(n_frames)].sum() - 1e-12
