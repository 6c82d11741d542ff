"""Attack tests: estimator arithmetic against the defining formulas,
a hand-traced extraction run, soundness/cardinality/ordering properties,
and the enumeration oracle for the random-guess baseline."""

import itertools

import numpy as np
import pytest

from llg_lab.attack import (
    AttackParams,
    NoNegativeGradients,
    estimate_impact_shared,
    estimate_params_auxiliary,
    estimate_params_whitebox,
    gradient_row_sums,
    llg_extract,
    random_guess,
    uniform_params,
)
from llg_lab.data import SyntheticSpec, synth_generate
from llg_lab.fl import BatchSpec, local_train_fedsgd, make_batch
from llg_lab.labels import LabelMultiset
from llg_lab.metrics import attack_success_rate
from llg_lab.nn import LastLayerGradient, mlp, small_cnn


@pytest.fixture(scope="module")
def world():
    train, test = synth_generate(SyntheticSpec(seed=20))
    return train, test


def last_from_g(g, sample_count):
    """LastLayerGradient whose row sums equal g (one column)."""
    g = np.asarray(g, dtype=np.float64)
    return LastLayerGradient.from_matrix(g[:, None], sample_count)


class TestImpactFromSharedGradients:
    def test_matches_direct_arithmetic(self):
        g = np.array([-0.5, 0.2, -0.3, 0.1, 0.0, 0.05, 0.0, 0.0, 0.0, 0.0])
        m = estimate_impact_shared(last_from_g(g, 8), 10)
        assert m == pytest.approx((1.0 / 8.0) * (-0.8) * 1.1, rel=1e-12)
        assert m == pytest.approx(-0.11, rel=1e-12)

    def test_all_non_negative_raises(self):
        with pytest.raises(NoNegativeGradients):
            estimate_impact_shared(last_from_g([0.1, 0.0, 0.2], 4), 3)

    def test_within_factor_two_of_activation_based_value(self, world):
        # oracle: the per-occurrence impact is -(per-sample activation sum,
        # averaged over the batch)/B, read straight out of the forward cache
        train, _ = world
        for trial in range(20):
            rng = np.random.default_rng(500 + trial)
            net = mlp(64, 10, seed=600 + trial)
            xs, ys = make_batch(train, BatchSpec(8, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            _, cache = net.forward(xs)
            true_impact = -float(cache.penultimate.sum(axis=1).mean()) / 8.0
            estimated = estimate_impact_shared(update.last_layer(), 10)
            ratio = estimated / true_impact  # both negative
            assert 0.5 <= ratio <= 2.0

    def test_estimated_impact_is_negative_on_untrained_models(self, world):
        train, _ = world
        for trial in range(50):
            rng = np.random.default_rng(800 + trial)
            net = mlp(64, 10, seed=900 + trial)
            xs, ys = make_batch(train, BatchSpec(32, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            assert estimate_impact_shared(update.last_layer(), 10) < 0


class TestWhiteBoxEstimation:
    def test_symmetric_head_gives_equal_offsets(self):
        # identical head rows force a uniform softmax on any input, and zero
        # dummies make every probe batch identical, so the offsets collapse
        net = mlp(16, 10, seed=30)
        net.head.W[:] = net.head.W[0]
        net.head.b[:] = net.head.b[0]
        params = estimate_params_whitebox(net, 8, 8, dummy_kind="zeros")
        assert params.offsets == pytest.approx(np.full(10, params.offsets[0]), rel=1e-9)

    def test_offsets_reduce_the_model_residual(self, world):
        # estimated offsets must shrink mean |g - lambda*m - s| vs s = 0
        train, test = world
        with_s, without_s = [], []
        for trial in range(100):
            rng = np.random.default_rng(1200 + trial)
            net = mlp(64, 10, seed=1300 + trial)
            xs, ys = make_batch(train, BatchSpec(8, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            params = estimate_params_whitebox(net, 8, 8, dummy_kind="zeros", rng=rng)
            lam = LabelMultiset.from_labels(ys, 10).counts
            g = update.last_layer().g
            with_s.append(np.abs(g - lam * params.impact - params.offsets).mean())
            without_s.append(np.abs(g - lam * params.impact).mean())
        assert np.mean(with_s) < np.mean(without_s)

    def test_impact_averages_over_classes_and_batch(self):
        # the estimate must follow mean(gbar) * (1 + 1/n) / B for the g
        # values observed on single-label probe batches
        net = mlp(16, 4, seed=31)
        batch_size = 8
        observed = []
        dummy = np.zeros((batch_size, 16))
        for label in range(1, 5):
            observed.append(gradient_row_sums(net, dummy, np.full(batch_size, label))[label - 1])
        expected = sum(observed) * (1.0 + 1.0 / 4.0) / (4 * batch_size)
        params = estimate_params_whitebox(net, batch_size, batch_size, dummy_kind="zeros")
        assert params.impact == pytest.approx(expected, rel=1e-12)

    def test_unknown_dummy_kind_rejected(self):
        net = mlp(16, 4, seed=32)
        with pytest.raises(ValueError, match="dummy kind"):
            estimate_params_whitebox(net, 4, 4, dummy_kind="noise")


class TestAuxiliaryEstimation:
    def test_missing_class_rejected(self, world):
        train, test = world
        partial = test.subset(np.flatnonzero(test.ys != 3))
        net = mlp(64, 10, seed=33)
        with pytest.raises(ValueError, match="no samples of class 3"):
            estimate_params_auxiliary(net, partial, 8, 8, np.random.default_rng(0))

    @pytest.mark.parametrize("batch_size", [2, 8, 32, 128])
    def test_calibrated_gradients_track_label_counts(self, world, batch_size):
        # pooled Pearson correlation between g - s and the label counts
        train, test = world
        from llg_lab.metrics import pearson
        calibrated, lam = [], []
        for trial in range(60):
            rng = np.random.default_rng(2000 + trial)
            net = mlp(64, 10, seed=2100 + trial)
            xs, ys = make_batch(train, BatchSpec(batch_size, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            params = estimate_params_auxiliary(net, test, batch_size, batch_size, rng)
            calibrated.extend(update.last_layer().g - params.offsets)
            lam.extend(LabelMultiset.from_labels(ys, 10).counts)
        rho = pearson(np.array(calibrated), np.array(lam, dtype=float))
        assert abs(rho) > 0.95

    def test_auxiliary_beats_shared_only_on_paired_trials(self, world):
        train, test = world
        aux_scores, shared_scores = [], []
        for trial in range(100):
            rng = np.random.default_rng(3000 + trial)
            net = mlp(64, 10, seed=3100 + trial)
            xs, ys = make_batch(train, BatchSpec(32, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            truth = LabelMultiset.from_labels(ys, 10)
            last = update.last_layer()
            plus = estimate_params_auxiliary(net, test, 32, 32, rng)
            aux_scores.append(attack_success_rate(llg_extract(last, plus), truth))
            try:
                base = AttackParams(estimate_impact_shared(last, 10), np.zeros(10), 32)
            except NoNegativeGradients:
                base = uniform_params(10, 32)
            shared_scores.append(attack_success_rate(llg_extract(last, base), truth))
        assert np.mean(aux_scores) >= np.mean(shared_scores)


class TestExtraction:
    def test_hand_traced_run(self):
        # g = [-0.4, 0.1, 0.2], impact -0.5, offsets 0, |D| = 2:
        # step 1 takes label 1 and bumps g_1 to 0.1; the argmin over
        # [0.1, 0.1, 0.2] ties and resolves to label 1 again
        last = last_from_g([-0.4, 0.1, 0.2], 2)
        params = AttackParams(-0.5, np.zeros(3), 2)
        extracted = llg_extract(last, params)
        assert extracted == LabelMultiset(np.array([2, 0, 0]))

    def test_negative_count_equal_to_sample_count_saturates_step_one(self):
        last = last_from_g([-0.3, 0.4, -0.2, 0.9], 2)
        params = AttackParams(-1.0, np.zeros(4), 2)
        assert llg_extract(last, params) == LabelMultiset(np.array([1, 0, 1, 0]))

    def test_offsets_shift_the_argmin(self):
        last = last_from_g([0.5, 0.4, 0.45], 1)
        params = AttackParams(-1.0, np.array([0.0, 0.0, 0.3]), 1)
        # calibrated g = [0.5, 0.4, 0.15] so label 3 wins
        assert llg_extract(last, params) == LabelMultiset(np.array([0, 0, 1]))

    def test_sample_count_mismatch_rejected(self):
        last = last_from_g([-0.1, 0.1], 4)
        with pytest.raises(ValueError, match=r"\|D\|"):
            llg_extract(last, AttackParams(-1.0, np.zeros(2), 3))

    def test_non_finite_gradient_rejected(self):
        matrix = np.array([[np.inf], [0.0]])
        last = LastLayerGradient(matrix, matrix.sum(axis=1), 1)
        with pytest.raises(ValueError, match="non-finite"):
            llg_extract(last, AttackParams(-1.0, np.zeros(2), 1))

    def test_output_cardinality_always_matches_sample_count(self):
        rng = np.random.default_rng(40)
        for _ in range(200):
            n = int(rng.integers(2, 12))
            d = int(rng.integers(1, 40))
            g = rng.normal(size=n)
            params = AttackParams(-abs(rng.normal()) - 1e-6, rng.normal(size=n) * 0.1, d)
            assert llg_extract(last_from_g(g, d), params).total == d

    def test_scale_equivariance(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            n = int(rng.integers(2, 10))
            d = int(rng.integers(1, 20))
            g = rng.normal(size=n)
            m = -abs(rng.normal()) - 1e-6
            s = rng.normal(size=n) * 0.2
            factor = float(rng.uniform(0.1, 50.0))
            base = llg_extract(last_from_g(g, d), AttackParams(m, s, d))
            scaled = llg_extract(last_from_g(g * factor, d),
                                 AttackParams(m * factor, s * factor, d))
            assert base == scaled

    def test_step_one_only_emits_present_labels(self, world):
        # zero violations allowed: a negative row sum proves membership
        train, _ = world
        checked = 0
        for trial in range(250):
            rng = np.random.default_rng(5000 + trial)
            if trial % 2 == 0:
                net = mlp(64, 10, seed=5100 + trial)
            else:
                net = small_cnn((8, 8), 10, seed=5100 + trial)
            batch_size = (2, 8, 32, 128)[trial % 4]
            xs, ys = make_batch(train, BatchSpec(batch_size, "balanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            counts = LabelMultiset.from_labels(ys, 10).counts
            g = update.last_layer().g
            for i in np.flatnonzero(g < 0):
                checked += 1
                assert counts[i] > 0
        assert checked > 100

    def test_end_to_end_recovers_small_batches(self, world):
        train, test = world
        exact = 0
        for trial in range(100):
            rng = np.random.default_rng(6000 + trial)
            net = mlp(64, 10, seed=6100 + trial)
            xs, ys = make_batch(train, BatchSpec(8, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            truth = LabelMultiset.from_labels(ys, 10)
            params = estimate_params_auxiliary(net, test, 8, 8, rng)
            if llg_extract(update.last_layer(), params) == truth:
                exact += 1
        assert exact >= 95


class TestRandomGuess:
    def test_single_class_always_succeeds(self):
        guess = random_guess(1, 5, np.random.default_rng(0))
        assert guess == LabelMultiset(np.array([5]))

    def test_total_always_matches(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            d = int(rng.integers(1, 200))
            assert random_guess(n, d, rng).total == d

    def test_monte_carlo_matches_enumeration(self):
        # exhaustive oracle for n=3, |D|=2: expected overlap of two
        # independent uniform label pairs
        n, d = 3, 2
        total = 0.0
        combos = 0
        for truth in itertools.product(range(1, n + 1), repeat=d):
            t = LabelMultiset.from_labels(np.array(truth), n)
            for guess in itertools.product(range(1, n + 1), repeat=d):
                gm = LabelMultiset.from_labels(np.array(guess), n)
                total += attack_success_rate(gm, t)
                combos += 1
        expected = total / combos
        rng = np.random.default_rng(2)
        observed = np.mean([
            attack_success_rate(random_guess(n, d, rng), random_guess(n, d, rng))
            for _ in range(10_000)
        ])
        assert observed == pytest.approx(expected, abs=0.02)


class TestAttackOrdering:
    def test_more_knowledge_never_hurts_on_average(self, world):
        train, test = world
        scores = {"llg_plus": [], "llg": [], "random": []}
        for trial in range(100):
            rng = np.random.default_rng(7000 + trial)
            net = mlp(64, 10, seed=7100 + trial)
            xs, ys = make_batch(train, BatchSpec(32, "unbalanced"), rng)
            update = local_train_fedsgd(net, xs, ys)
            truth = LabelMultiset.from_labels(ys, 10)
            last = update.last_layer()
            plus = estimate_params_auxiliary(net, test, 32, 32, rng)
            scores["llg_plus"].append(attack_success_rate(llg_extract(last, plus), truth))
            try:
                base = AttackParams(estimate_impact_shared(last, 10), np.zeros(10), 32)
            except NoNegativeGradients:
                base = uniform_params(10, 32)
            scores["llg"].append(attack_success_rate(llg_extract(last, base), truth))
            scores["random"].append(attack_success_rate(random_guess(10, 32, rng), truth))
        assert np.mean(scores["llg_plus"]) >= np.mean(scores["llg"]) + 0.05
        assert np.mean(scores["llg"]) >= np.mean(scores["random"]) + 0.05


class TestParams:
    def test_uniform_fallback_shape(self):
        params = uniform_params(10, 4)
        assert params.impact == pytest.approx(-0.25)
        assert params.offsets == pytest.approx(np.zeros(10))

    def test_non_finite_params_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            AttackParams(float("nan"), np.zeros(3), 1)
        with pytest.raises(ValueError, match="finite"):
            AttackParams(-1.0, np.array([0.0, np.inf]), 1)
