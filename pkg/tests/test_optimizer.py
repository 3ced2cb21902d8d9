import numpy as np
import numpy.testing as npt
import pytest

from app.errors import ContractError, ValidationError
from app.services.optimizer import AdamW, LinearWarmupDecay, ParameterRegistry, clip_grad_norm
from app.services.random_streams import named_rng


def registry_with(**params):
    registry = ParameterRegistry()
    for name, value in params.items():
        registry.register(name, np.asarray(value, dtype=np.float64))
    return registry


class TestAdamW:
    def test_first_step_moves_by_learning_rate(self):
        registry = registry_with(p=[1.0])
        registry['p'].grad = np.array([1.0], dtype=np.float32)
        AdamW(registry, lr=0.1, weight_decay=0.0, max_grad_norm=None).step()
        npt.assert_allclose(registry['p'].data, [0.9], rtol=1e-6)

    def test_zero_gradient_without_decay_is_a_no_op(self):
        registry = registry_with(p=[1.0, -2.0])
        registry.zero_grad()
        AdamW(registry, lr=0.1, weight_decay=0.0).step()
        npt.assert_array_equal(registry['p'].data, [1.0, -2.0])

    def test_frozen_parameter_is_unchanged(self):
        registry = registry_with(live=[1.0], frozen=[1.0])
        registry.set_trainable(False, names=['frozen'])
        for _, param in registry:
            param.grad = np.array([0.5], dtype=np.float32)
        AdamW(registry, lr=0.1).step()
        npt.assert_array_equal(registry['frozen'].data, [1.0])
        assert registry['live'].data[0] < 1.0

    def test_missing_gradient(self):
        registry = registry_with(p=[1.0])
        with pytest.raises(ContractError, match="'p'"):
            AdamW(registry, lr=0.1).step()

    def test_weight_decay_is_decoupled_and_skips_exempt_parameters(self):
        registry = ParameterRegistry()
        registry.register('weight', np.array([1.0]))
        registry.register('bias', np.array([1.0]), decay_exempt=True)
        registry.zero_grad()
        AdamW(registry, lr=0.1, weight_decay=0.1).step()
        npt.assert_allclose(registry['weight'].data, [0.99], rtol=1e-6)
        npt.assert_array_equal(registry['bias'].data, [1.0])

    def test_row_restriction_masks_the_whole_update(self):
        registry = registry_with(table=np.ones((4, 2)), other=[1.0])
        registry.restrict_rows('table', [2])
        registry.zero_grad()
        registry['table'].grad = np.ones((4, 2), dtype=np.float32)
        AdamW(registry, lr=0.1, weight_decay=0.1).step()
        npt.assert_array_equal(registry['table'].data[[0, 1, 3]], 1.0)
        assert np.all(registry['table'].data[2] < 1.0)
        npt.assert_array_equal(registry['other'].data, [1.0])

    def test_schedule_scales_learning_rate(self):
        registry = registry_with(p=[1.0])
        optimizer = AdamW(registry, lr=0.1, schedule=LinearWarmupDecay(total_steps=10, warmup_ratio=0.2))
        assert optimizer.current_lr(1) == pytest.approx(0.05)
        assert optimizer.current_lr(2) == pytest.approx(0.1)
        assert optimizer.current_lr(10) == pytest.approx(0.1 / 9)


class TestSchedule:
    def test_warmup_then_linear_decay(self):
        schedule = LinearWarmupDecay(total_steps=10, warmup_ratio=0.1)
        assert schedule.warmup_steps == 1
        assert schedule.factor(1) == pytest.approx(1.0)
        assert schedule.factor(5) == pytest.approx(0.6)
        assert schedule.factor(11) == 0.0
        assert schedule.factor(12) == 0.0

    def test_final_update_still_moves(self):
        schedule = LinearWarmupDecay(total_steps=10, warmup_ratio=0.1)
        assert schedule.factor(10) == pytest.approx(0.1)
        registry = registry_with(p=[1.0])
        optimizer = AdamW(registry, lr=0.1, weight_decay=0.0, schedule=schedule)
        optimizer.state.step = 9
        registry['p'].grad = np.array([1.0], dtype=np.float32)
        optimizer.step()
        assert registry['p'].data[0] < 1.0


def test_clip_grad_norm():
    registry = registry_with(a=[0.0], b=[0.0])
    registry['a'].grad = np.array([3.0])
    registry['b'].grad = np.array([4.0])
    norm = clip_grad_norm(registry.values(), 1.0)
    assert norm == pytest.approx(5.0)
    clipped = np.hypot(registry['a'].grad[0], registry['b'].grad[0])
    assert clipped == pytest.approx(1.0, rel=1e-5)


class TestParameterRegistry:
    def test_duplicate_registration(self):
        registry = registry_with(p=[1.0])
        with pytest.raises(ValidationError):
            registry.register('p', np.zeros(1))

    def test_state_dict_round_trip(self):
        registry = registry_with(p=[1.0, 2.0])
        state = registry.state_dict()
        registry['p'].data[...] = 0.0
        registry.load_state_dict(state)
        npt.assert_array_equal(registry['p'].data, [1.0, 2.0])

    def test_strict_load_rejects_missing_names(self):
        registry = registry_with(p=[1.0], q=[2.0])
        with pytest.raises(ValidationError, match='missing'):
            registry.load_state_dict({'p': np.ones(1)})

    def test_checksum_ignores_excluded_rows(self):
        registry = registry_with(table=np.zeros((3, 2)))
        before = registry.checksum(exclude_rows={'table': [1]})
        registry['table'].data[1] = 5.0
        assert registry.checksum(exclude_rows={'table': [1]}) == before
        registry['table'].data[0] = 5.0
        assert registry.checksum(exclude_rows={'table': [1]}) != before


class TestNamedStreams:
    def test_same_key_same_draws(self):
        npt.assert_array_equal(named_rng(13, 'sampling').random(5), named_rng(13, 'sampling').random(5))

    def test_streams_are_independent(self):
        assert not np.array_equal(named_rng(13, 'sampling').random(5), named_rng(13, 'masking').random(5))
        assert not np.array_equal(named_rng(13, 'batches', 0, 1).random(5),
                                  named_rng(13, 'batches', 0, 2).random(5))


class TestFreezeRows:
    def test_frozen_rows_of_a_vector_stay_put(self):
        registry = registry_with(bias=[1.0, 1.0, 1.0, 1.0], other=[1.0])
        registry.freeze_rows('bias', [1, 3])
        registry['bias'].grad = np.ones(4)
        registry['other'].grad = np.ones(1)
        AdamW(registry, lr=0.1).step()
        npt.assert_array_equal(registry['bias'].data[[1, 3]], 1.0)
        assert np.all(registry['bias'].data[[0, 2]] < 1.0)
        assert registry['other'].data[0] < 1.0

    def test_composes_with_an_existing_mask(self):
        registry = registry_with(table=np.ones((4, 2)))
        registry.restrict_rows('table', [0, 1])
        registry.freeze_rows('table', [1])
        npt.assert_array_equal(registry['table'].grad_mask.ravel(), [1.0, 0.0, 0.0, 0.0])
        assert registry['table'].requires_grad
