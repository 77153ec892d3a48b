import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canmdtc import tensor as T
from canmdtc.networks import CanModel, ContractError, ModelSpec
from canmdtc.objectives import (
    PROB_FLOOR, Batch, combined_objective, entropy, entropy_weight, j_c, j_d_entropy, nll_class, nll_domain,
    nll_rows,
)
from canmdtc.tensor import Tensor, make_rng

SMALL = dict(input_dim=6, hidden_dims=[5], shared_dim=4, private_dim=3)


def zero_model(n_domains, **kw):
    model = CanModel(ModelSpec(n_domains=n_domains, **{**SMALL, **kw}), seed=None)
    model.eval()
    return model


def random_model(n_domains=3, seed=0, **kw):
    model = CanModel(ModelSpec(n_domains=n_domains, **{**SMALL, **kw}), seed=seed)
    model.eval()
    return model


def batches(n_domains, n=4, seed=0, labeled=True):
    rng = make_rng(seed)
    return [Batch(rng.poisson(1.0, (n, 6)).astype(float), d, rng.integers(0, 2, size=n) if labeled else None)
            for d in range(n_domains)]


class TestNll:
    def test_class_examples(self):
        assert nll_class((1.0, 0.0), 1) == 0.0
        assert nll_class((0.5, 0.5), 1) == pytest.approx(0.693147, abs=1e-6)
        assert nll_class((0.5, 0.5), 2) == pytest.approx(0.693147, abs=1e-6)
        assert nll_class((0.25, 0.75), 2) == pytest.approx(0.287682, abs=1e-6)

    def test_class_label_range(self):
        with pytest.raises(ContractError):
            nll_class((0.5, 0.5), 0)

    def test_domain_examples(self):
        assert nll_domain(np.full(4, 0.25), 1) == pytest.approx(1.386294, abs=1e-6)
        assert nll_domain(np.eye(4)[2], 2) == 0.0
        # third domain, 0-based index 2
        assert nll_domain((0.1, 0.2, 0.3, 0.4), 2) == pytest.approx(1.203973, abs=1e-6)
        with pytest.raises(ContractError):
            nll_domain((0.5, 0.5), 2)

    def test_clamp_counted(self):
        losses, n = nll_rows(Tensor(np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])), np.array([1, 0, 0]))
        assert n == 2
        np.testing.assert_allclose(losses.data, [-math.log(PROB_FLOOR), math.log(2), -math.log(PROB_FLOOR)])
        assert np.all(np.isfinite(losses.data))


class TestEntropy:
    def test_examples(self):
        assert entropy((1.0, 0.0)) == 0.0
        assert entropy((0.5, 0.5)) == pytest.approx(math.log(2), abs=1e-15)
        assert entropy((0.9, 0.1)) == pytest.approx(0.325083, abs=1e-6)

    def test_weight_examples(self):
        assert entropy_weight((1.0, 0.0)) == 2.0
        assert entropy_weight((0.5, 0.5)) == 1.5
        assert entropy_weight((0.9, 0.1)) == pytest.approx(1.72247, abs=1e-5)

    @given(st.floats(0.0, 1.0))
    def test_weight_range_and_monotone(self, p):
        c = (p, 1.0 - p)
        w = entropy_weight(c)
        assert 1.5 - 1e-15 <= w <= 2.0
        assert 0.0 <= entropy(c) <= math.log(2) + 1e-15
        # closer to uniform means higher entropy, lower weight
        q = 0.5 + 0.5 * (p - 0.5)
        assert entropy_weight((q, 1 - q)) <= w + 1e-15

    def test_vectorised_rows(self):
        c = np.array([[1.0, 0.0], [0.5, 0.5]])
        np.testing.assert_array_equal(entropy_weight(c), [2.0, 1.5])


class TestJc:
    def test_zero_model_gives_m_ln2(self):
        for m in (1, 3, 5):
            assert j_c(zero_model(m), batches(m)).item() == pytest.approx(m * math.log(2), abs=1e-14)

    def test_perfect_predictions(self):
        model = zero_model(2)
        model.classifier.out.bias.data[...] = [-50.0, 50.0]
        b = [Batch(np.zeros((3, 6)), d, np.ones(3, dtype=int)) for d in range(2)]
        assert j_c(model, b).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_summation(self):
        model = zero_model(2)
        model.classifier.out.bias.data[...] = [math.log(0.25), math.log(0.75)]
        b = [Batch(np.zeros((2, 6)), 0, np.array([0, 1])), Batch(np.zeros((2, 6)), 1, np.array([1, 1]))]
        expected = (-math.log(0.25) - math.log(0.75)) / 2 + (-math.log(0.75) - math.log(0.75)) / 2
        assert j_c(model, b).item() == pytest.approx(expected, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            j_c(zero_model(1), [Batch(np.zeros((0, 6)), 0, np.zeros(0, dtype=int))])

    def test_unlabeled_rejected(self):
        with pytest.raises(ContractError):
            j_c(zero_model(2), batches(2, labeled=False))

    def test_no_gradient_on_discriminator(self):
        model = random_model()
        j_c(model, batches(3)).value.backward()
        for p in model.discriminator_parameters():
            np.testing.assert_array_equal(p.grad, 0.0)


class TestJde:
    def test_uniform_weighted(self):
        assert j_d_entropy(zero_model(4), batches(4)).item() == pytest.approx(4 * 1.5 * math.log(4), abs=1e-12)
        assert 4 * 1.5 * math.log(4) == pytest.approx(8.317766, abs=1e-6)

    def test_uniform_unweighted(self):
        value = j_d_entropy(zero_model(4), batches(4), entropy_weighting=False).item()
        assert value == pytest.approx(4 * math.log(4), abs=1e-12)
        assert value == pytest.approx(5.545177, abs=1e-6)

    def test_uniform_predictions_scale_by_one_and_a_half(self):
        model = random_model(3)
        for head in (model.classifier,):
            head.out.weight.data[...] = 0.0
            head.out.bias.data[...] = 0.0
        b = batches(3, seed=2)
        weighted = j_d_entropy(model, b, entropy_weighting=True).item()
        plain = j_d_entropy(model, b, entropy_weighting=False).item()
        assert weighted == pytest.approx(1.5 * plain, rel=1e-15)

    def test_correct_discriminator_gives_zero(self):
        model = zero_model(2)
        b = batches(2, labeled=False)
        # a discriminator that reads a domain marker planted in the first input feature
        model.shared.hidden[0].weight.data[0, 0] = 1.0
        model.shared.out.weight.data[0, 0] = 1.0
        model.discriminator.hidden.weight.data[0, 0] = 1.0
        model.discriminator.out.weight.data[0, :] = [-200.0, 200.0]
        model.discriminator.out.bias.data[...] = [100.0, -100.0]
        b[0].x[:, 0] = 0.0
        b[1].x[:, 0] = 1.0
        assert j_d_entropy(model, b).item() == pytest.approx(0.0, abs=1e-12)

    def test_labeled_and_unlabeled_of_a_domain_form_one_mean(self):
        model = random_model(2, seed=3)
        lab, unl = batches(2, n=3, seed=4), batches(2, n=5, seed=5, labeled=False)
        together = j_d_entropy(model, lab + unl).item()
        merged = [Batch(np.vstack([a.x, b.x]), a.domain) for a, b in zip(lab, unl)]
        assert together == pytest.approx(j_d_entropy(model, merged).item(), abs=1e-12)

    def test_no_gradient_on_classifier_or_private(self):
        model = random_model()
        j_d_entropy(model, batches(3)).value.backward()
        for p in model.classifier.parameters() + [t for e in model.private for t in e.parameters()]:
            np.testing.assert_array_equal(p.grad, 0.0)
        assert any(np.any(p.grad != 0) for p in model.shared.parameters())

    def test_weights_are_constants(self):
        # entropy weighting changes the value but adds no gradient path to the classifier
        model = random_model(seed=8)
        j_d_entropy(model, batches(3), entropy_weighting=True).value.backward()
        assert all(np.all(p.grad == 0) for p in model.classifier.parameters())

    def test_reversal_flips_shared_gradient_only(self):
        model = random_model(seed=9)
        b = batches(3, seed=1)
        j_d_entropy(model, b).value.backward()
        plain_s = [p.grad.copy() for p in model.shared.parameters()]
        plain_d = [p.grad.copy() for p in model.discriminator_parameters()]
        model.zero_grad()
        j_d_entropy(model, b, reverse_coeff=1.0).value.backward()
        for a, p in zip(plain_s, model.shared.parameters()):
            np.testing.assert_allclose(p.grad, -a, atol=1e-15)
        for a, p in zip(plain_d, model.discriminator_parameters()):
            np.testing.assert_allclose(p.grad, a, atol=1e-15)

    def test_detached_features_leave_extractor_untouched(self):
        model = random_model(seed=10)
        j_d_entropy(model, batches(3), detach_features=True).value.backward()
        assert all(np.all(p.grad == 0) for p in model.shared.parameters())
        assert any(np.any(p.grad != 0) for p in model.discriminator_parameters())

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_losses_nonnegative_finite(self, seed):
        model = random_model(3, seed=seed % 1000)
        b = batches(3, seed=seed)
        for v in (j_c(model, b).item(), j_d_entropy(model, b).item()):
            assert v >= 0 and math.isfinite(v)


class TestCombined:
    def scalar(self, v):
        return type("L", (), {"value": Tensor(np.array(v))})()

    def test_lambda_zero_is_jc(self):
        jc = self.scalar(2.0)
        assert combined_objective(jc, self.scalar(3.0), 0.0) is jc.value

    def test_lambda_one(self):
        assert combined_objective(self.scalar(2.0), self.scalar(3.0), 1.0).item() == 5.0

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            combined_objective(self.scalar(2.0), self.scalar(3.0), -0.1)

    def test_gradient_is_linear(self):
        model = random_model(seed=12)
        b = batches(3, seed=6)
        lam = 0.7

        def grads(fn):
            model.zero_grad()
            fn().backward()
            return [p.grad.copy() for p in model.shared.parameters()]

        gc = grads(lambda: j_c(model, b).value)
        gd = grads(lambda: j_d_entropy(model, b).value)
        both = grads(lambda: combined_objective(j_c(model, b), j_d_entropy(model, b), lam))
        for a, d, g in zip(gc, gd, both):
            np.testing.assert_allclose(g, a + lam * d, atol=1e-10)
