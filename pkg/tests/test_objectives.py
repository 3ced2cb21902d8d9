import math
from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest

from app.errors import ValidationError
from app.services.differentiable_prompt import (
    assemble_prompt,
    batch_class_scores,
    build_prompt_spec,
    init_prompt_embeddings,
)
from app.services.objectives import (
    batch_fluency_loss,
    binary_cross_entropy_positive,
    class_discrimination_loss,
    fluency_loss,
    make_fluency_sample,
    total_loss,
)
from app.services.random_streams import named_rng
from app.services.tensor_engine import Tensor, backward, default_dtype, numerical_gradient
from conftest import make_tiny_model


class TestClassDiscrimination:
    def test_certain_correct_prediction(self):
        assert class_discrimination_loss(Tensor([1.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-7)

    def test_certain_wrong_prediction_is_floored(self):
        loss = class_discrimination_loss(Tensor([1.0, 0.0]), 1).item()
        assert math.isfinite(loss)
        assert loss == pytest.approx(-math.log(1e-12), rel=1e-4)

    def test_uniform_scores(self):
        assert class_discrimination_loss(Tensor([0.5, 0.5]), 1).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_batch_mean(self):
        scores = Tensor([[0.9, 0.1], [0.3, 0.7]])
        batch = class_discrimination_loss(scores, [0, 0]).item()
        single = [class_discrimination_loss(Tensor(row), 0).item() for row in ([0.9, 0.1], [0.3, 0.7])]
        assert batch == pytest.approx(np.mean(single), abs=1e-6)

    @pytest.mark.parametrize('gold', [2, -1])
    def test_gold_out_of_range(self, gold):
        with pytest.raises(IndexError):
            class_discrimination_loss(Tensor([0.5, 0.5]), gold)


class TestFluencySample:
    def test_single_token_input_is_always_the_target(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        sample = make_fluency_sample([7], 1, spec, named_rng(0, 'masking'), 24)
        assert sample.target_id == 7
        assert sample.target_position == 1
        assert sample.gold_label_slot_id == spec.label_slot_ids[1]

    def test_prompt_mask_slot_holds_the_gold_label(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        sample = make_fluency_sample([5, 6, 7], 0, spec, named_rng(0, 'masking'), 24)
        mask_position = assemble_prompt([5, 6, 7], spec, 24).mask_position
        assert sample.x_prime[mask_position] == spec.label_slot_ids[0]
        assert sample.x_prime.count(tiny_vocab.mask_id) == 1
        assert sample.x_prime[sample.target_position] == tiny_vocab.mask_id

    def test_empty_input(self, tiny_vocab):
        with pytest.raises(ValidationError):
            make_fluency_sample([], 0, build_prompt_spec(tiny_vocab, 2, 2), named_rng(0, 'masking'), 24)

    def test_target_is_uniform_over_input_tokens(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        rng = named_rng(0, 'masking')
        counts = Counter(make_fluency_sample([5, 6, 7, 8], 0, spec, rng, 24).target_id for _ in range(10000))
        assert set(counts) == {5, 6, 7, 8}
        for count in counts.values():
            assert abs(count - 2500) <= 150


class TestFluencyLoss:
    def test_closed_forms(self):
        assert binary_cross_entropy_positive(Tensor(0.5)).item() == pytest.approx(math.log(2), rel=1e-6)
        assert binary_cross_entropy_positive(Tensor(1.0)).item() == pytest.approx(0.0, abs=1e-7)

    def test_batch_is_mean_of_samples(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        rng = named_rng(0, 'masking')
        samples = [make_fluency_sample(x, 0, spec, rng, 24) for x in ([5, 6, 7], [8, 9])]
        batch = batch_fluency_loss(tiny_model, samples).item()
        single = [fluency_loss(tiny_model, s).item() for s in samples]
        assert batch == pytest.approx(np.mean(single), rel=1e-5)


class TestTotalLoss:
    def test_zero_lambda_returns_class_loss(self):
        lc, lf = Tensor(1.0), Tensor(2.0)
        assert total_loss(lc, lf, 0) is lc

    def test_weighted_sum(self):
        assert total_loss(Tensor(1.0), Tensor(2.0), 0.5).item() == pytest.approx(2.0)


def test_prompt_phase_gradients_touch_only_slot_rows(tiny_model):
    spec = build_prompt_spec(tiny_model.vocab, 3, 2)
    init_prompt_embeddings(tiny_model, spec, base_template=[5, 6, 7], base_labels=[[8], [9]])
    registry = tiny_model.registry
    registry.restrict_rows('embeddings.word', spec.trainable_ids)
    registry.zero_grad()

    batch = [([5, 6, 7], 0), ([9, 10], 1)]
    prompts = [assemble_prompt(x, spec, 24) for x, _ in batch]
    lc = class_discrimination_loss(batch_class_scores(tiny_model, prompts, spec), [y for _, y in batch])
    rng = named_rng(0, 'masking')
    lf = batch_fluency_loss(tiny_model, [make_fluency_sample(x, y, spec, rng, 24) for x, y in batch])
    backward(total_loss(lc, lf, 1.0))

    for name, param in registry:
        if name == 'embeddings.word':
            touched = set(np.flatnonzero(np.abs(param.grad).sum(axis=1)))
            assert touched and touched <= set(spec.trainable_ids)
        else:
            npt.assert_array_equal(param.grad, 0.0, err_msg=name)


def prompt_losses(model, spec, batch, seed=0):
    """Class and fluency losses of `batch` as fresh graphs."""
    prompts = [assemble_prompt(x, spec, 24) for x, _ in batch]
    lc = class_discrimination_loss(batch_class_scores(model, prompts, spec), [y for _, y in batch])
    rng = named_rng(seed, 'masking')
    lf = batch_fluency_loss(model, [make_fluency_sample(x, y, spec, rng, 24) for x, y in batch])
    return lc, lf


def gradients(model, loss):
    model.registry.zero_grad()
    backward(loss)
    return {name: param.grad.copy() for name, param in model.registry}


@pytest.mark.parametrize('lam', [0.0, 0.5, 1.0])
def test_total_gradient_is_the_weighted_sum(tiny_vocab, lam):
    batch = [([5, 6, 7], 0), ([9, 10], 1), ([11, 12, 13], 1)]
    with default_dtype(np.float64):
        model = make_tiny_model(tiny_vocab, seed=4)
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        init_prompt_embeddings(model, spec, base_template=[5, 6], base_labels=[[8], [9]])
        class_grads = gradients(model, prompt_losses(model, spec, batch)[0])
        fluency_grads = gradients(model, prompt_losses(model, spec, batch)[1])
        total_grads = gradients(model, total_loss(*prompt_losses(model, spec, batch), lam))
    for name, grad in total_grads.items():
        if lam == 0:
            npt.assert_array_equal(grad, class_grads[name], err_msg=name)
        else:
            npt.assert_allclose(grad, class_grads[name] + lam * fluency_grads[name], atol=1e-6, err_msg=name)


def test_fluency_loss_trains_the_gold_label_row(tiny_vocab):
    with default_dtype(np.float64):
        model = make_tiny_model(tiny_vocab, seed=4)
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        init_prompt_embeddings(model, spec, base_template=[5, 6], base_labels=[[8], [9]])
        sample = make_fluency_sample([5, 6, 7], 1, spec, named_rng(0, 'masking'), 24)
        table = model.word_embeddings

        def loss_fn():
            return fluency_loss(model, sample)

        model.registry.zero_grad()
        backward(loss_fn())
        row = sample.gold_label_slot_id
        assert np.abs(table.grad[row]).max() > 0
        d = table.shape[1]
        entries = list(range(row * d, (row + 1) * d))
        numeric = numerical_gradient(loss_fn, table, step=1e-5, indices=entries)
        npt.assert_allclose(table.grad[row], numeric[row], rtol=1e-3, atol=1e-8)
