import numpy as np
import numpy.testing as npt
import pytest

from app.errors import ArtifactMismatchError, CapacityError, LengthError, ValidationError
from app.services.differentiable_prompt import (
    PromptSpec,
    assemble_prompt,
    batch_class_scores,
    build_prompt_spec,
    class_scores,
    fixed_prompt_spec,
    init_prompt_embeddings,
    label_token_probabilities,
    with_fixed_segments,
)
from app.services.tensor_engine import op_softmax_rows
from app.services.toy_mlm import Corpus, PretrainConfig, pretrain
from conftest import make_tiny_model

CLS, SEP, MASK = 1, 2, 3


class TestPromptSpec:
    def test_slot_layout(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 3, 2)
        assert spec.template_slot_ids == (14, 15, 16)
        assert spec.label_slot_ids == (17, 18)
        assert spec.mask_index_in_template == 3
        assert spec.trainable_ids == [14, 15, 16, 17, 18]

    def test_empty_template(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 0, 2)
        assert spec.template_slot_ids == ()
        assert spec.label_slot_ids == (14, 15)

    def test_capacity(self, tiny_vocab):
        with pytest.raises(CapacityError, match='9'):
            build_prompt_spec(tiny_vocab, 7, 2)

    def test_single_class(self, tiny_vocab):
        with pytest.raises(ValidationError):
            build_prompt_spec(tiny_vocab, 2, 1)

    def test_dict_round_trip(self, tiny_vocab):
        spec = with_fixed_segments(build_prompt_spec(tiny_vocab, 2, 2, mask_index=1), label_words=['a', 'b'])
        assert PromptSpec.from_dict(spec.to_dict(), tiny_vocab) == spec

    def test_foreign_layout(self, tiny_vocab):
        data = build_prompt_spec(tiny_vocab, 2, 2).to_dict()
        data['layout'] = 'prefix-only'
        with pytest.raises(ArtifactMismatchError):
            PromptSpec.from_dict(data, tiny_vocab)

    def test_fixed_segments(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 3, 2)
        no_template = with_fixed_segments(spec, template_words=['c', 'd', 'e'])
        assert no_template.trainable_ids == [17, 18]
        no_label = with_fixed_segments(spec, label_words=['a', 'b'])
        assert no_label.trainable_ids == [14, 15, 16]
        assert no_label.label_slot_ids == (5, 6)

    def test_fixed_prompt_rejects_unknown_words(self, tiny_vocab):
        with pytest.raises(ValidationError, match='zebra'):
            fixed_prompt_spec(tiny_vocab, ['a'], ['b', 'zebra'], 1)


class TestAssemble:
    def test_direct_construction(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        prompt = assemble_prompt([5, 6], spec, max_len=24)
        assert prompt.ids == (CLS, 5, 6, SEP, 14, 15, MASK, SEP)
        assert prompt.mask_position == 6
        assert prompt.input_span == (1, 3)

    def test_empty_template(self, tiny_vocab):
        prompt = assemble_prompt([5, 6], build_prompt_spec(tiny_vocab, 0, 2), max_len=24)
        assert prompt.ids == (CLS, 5, 6, SEP, MASK, SEP)

    def test_mask_inside_template(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 3, 2, mask_index=1)
        prompt = assemble_prompt([5], spec, max_len=24)
        assert prompt.ids == (CLS, 5, SEP, 14, MASK, 15, 16, SEP)
        assert prompt.ids[prompt.mask_position] == MASK

    def test_long_input_is_truncated_not_the_template(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        prompt = assemble_prompt(list(range(4, 14)), spec, max_len=10)
        assert len(prompt.ids) == 10
        assert prompt.ids[1:5] == (4, 5, 6, 7)
        assert prompt.ids[-4:] == (14, 15, MASK, SEP)
        assert prompt.ids.count(MASK) == 1

    def test_template_longer_than_model(self, tiny_vocab):
        with pytest.raises(LengthError):
            assemble_prompt([5], build_prompt_spec(tiny_vocab, 4, 2), max_len=7)

    def test_fill_id_replaces_mask(self, tiny_vocab):
        spec = build_prompt_spec(tiny_vocab, 2, 2)
        prompt = assemble_prompt([5], spec, max_len=24, fill_id=17)
        assert MASK not in prompt.ids
        assert prompt.ids[prompt.mask_position] == 17


class TestInitEmbeddings:
    def test_copies_base_rows(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 3, 2)
        table = tiny_model.word_embeddings.data
        before = table.copy()
        init_prompt_embeddings(tiny_model, spec, base_template=[5, 6, 7], base_labels=[[8], [9, 10]])
        npt.assert_array_equal(table[[14, 15, 16]], before[[5, 6, 7]])
        npt.assert_array_equal(table[17], before[8])
        npt.assert_allclose(table[18], before[[9, 10]].mean(axis=0), rtol=1e-6)
        untouched = [i for i in range(table.shape[0]) if i not in spec.trainable_ids]
        npt.assert_array_equal(table[untouched], before[untouched])

    def test_slot_bias_follows_its_base(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        bias = tiny_model.decoder_bias.data
        bias[[5, 6, 8, 9, 10]] = [0.1, 0.2, 0.3, 0.4, 0.8]
        init_prompt_embeddings(tiny_model, spec, base_template=[5, 6], base_labels=[[8], [9, 10]])
        npt.assert_allclose(bias[[14, 15, 16]], [0.1, 0.2, 0.3], rtol=1e-6)
        assert bias[17] == pytest.approx(0.6, rel=1e-6)

    def test_random_draw_zeroes_the_slot_bias(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        tiny_model.decoder_bias.data[spec.trainable_ids] = 1.0
        init_prompt_embeddings(tiny_model, spec, seed=3)
        npt.assert_array_equal(tiny_model.decoder_bias.data[spec.trainable_ids], 0.0)

    def test_random_draw_is_seeded(self, tiny_vocab):
        first, second = make_tiny_model(tiny_vocab), make_tiny_model(tiny_vocab)
        spec = build_prompt_spec(tiny_vocab, 3, 2)
        init_prompt_embeddings(first, spec, seed=7, std=0.5)
        init_prompt_embeddings(second, spec, seed=7, std=0.5)
        npt.assert_array_equal(first.word_embeddings.data, second.word_embeddings.data)
        norms = np.linalg.norm(first.word_embeddings.data[spec.trainable_ids], axis=1)
        assert 0.2 < norms.mean() < 2.5

    def test_fixed_segments_are_not_written(self, tiny_model):
        spec = with_fixed_segments(build_prompt_spec(tiny_model.vocab, 2, 2), label_words=['a', 'b'])
        before = tiny_model.word_embeddings.data.copy()
        init_prompt_embeddings(tiny_model, spec, base_template=[7, 8], base_labels=[[9], [10]])
        npt.assert_array_equal(tiny_model.word_embeddings.data[[5, 6]], before[[5, 6]])

    def test_base_length_mismatch(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 3, 2)
        with pytest.raises(ValidationError):
            init_prompt_embeddings(tiny_model, spec, base_template=[5, 6])


class TestClassScores:
    def test_distribution_over_classes(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 3)
        scores = class_scores(tiny_model, assemble_prompt([5, 6, 7], spec, 24), spec)
        assert scores.shape == (3,)
        assert scores.data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_raw_score_is_the_label_token_probability(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        prompt = assemble_prompt([5, 6], spec, 24)
        raw = label_token_probabilities(tiny_model, [prompt], spec).data[0]
        full = op_softmax_rows(tiny_model.forward_logits(prompt.ids)[prompt.mask_position]).data
        npt.assert_allclose(raw, full[list(spec.label_slot_ids)], rtol=1e-5)

    def test_swapping_label_rows_swaps_probabilities(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        init_prompt_embeddings(tiny_model, spec, seed=1, std=0.5)
        prompt = assemble_prompt([5, 6, 7], spec, 24)
        before = class_scores(tiny_model, prompt, spec).data.copy()
        table = tiny_model.word_embeddings.data
        table[[17, 18]] = table[[18, 17]]
        after = class_scores(tiny_model, prompt, spec).data
        npt.assert_allclose(after, before[::-1], atol=1e-6)

    def test_multi_token_verbalizer_sums_probabilities(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        prompt = assemble_prompt([5, 6], spec, 24)
        full = op_softmax_rows(tiny_model.forward_logits(prompt.ids)[prompt.mask_position]).data
        raw = label_token_probabilities(tiny_model, [prompt], spec, verbalizer=[[5, 6], [7]]).data[0]
        npt.assert_allclose(raw, [full[5] + full[6], full[7]], rtol=1e-5)

    def test_batch_rows_match_single_prompts(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 2)
        prompts = [assemble_prompt(x, spec, 24) for x in ([5, 6, 7, 8], [9])]
        batch = batch_class_scores(tiny_model, prompts, spec).data
        for row, prompt in zip(batch, prompts):
            npt.assert_allclose(row, class_scores(tiny_model, prompt, spec).data, atol=1e-6)


def briefly_pretrained(vocab):
    model = make_tiny_model(vocab)
    corpus = Corpus([[5, 6, 7, 8], [9, 10, 11], [12, 13, 5]] * 10)
    pretrain(model, corpus, PretrainConfig(steps=20, batch_size=4, lr=1e-2, seed=0, log_every=0))
    return model


class TestSlotRelabeling:
    def test_scores_do_not_depend_on_which_reserved_ids_are_used(self, tiny_vocab):
        model = briefly_pretrained(tiny_vocab)
        twin = model.clone()
        first = build_prompt_spec(tiny_vocab, 2, 2)
        second = PromptSpec(m=2, n=2, template_slot_ids=(18, 19), label_slot_ids=(20, 21),
                            mask_index_in_template=2, vocab=tiny_vocab)
        for net, spec in ((model, first), (twin, second)):
            init_prompt_embeddings(net, spec, base_template=[5, 6], base_labels=[[8], [9, 10]])
        for x_in in ([5, 6, 7], [9, 10, 11, 12], [13]):
            npt.assert_allclose(class_scores(model, assemble_prompt(x_in, first, 24), first).data,
                                class_scores(twin, assemble_prompt(x_in, second, 24), second).data,
                                atol=1e-6)

    def test_permuting_label_slots_permutes_scores(self, tiny_vocab):
        model = briefly_pretrained(tiny_vocab)
        spec = build_prompt_spec(tiny_vocab, 2, 3)
        init_prompt_embeddings(model, spec, base_template=[5, 6], base_labels=[[7], [8], [9]])
        permuted = PromptSpec(m=2, n=3, template_slot_ids=spec.template_slot_ids,
                              label_slot_ids=tuple(spec.label_slot_ids[i] for i in (2, 0, 1)),
                              mask_index_in_template=2, vocab=tiny_vocab)
        prompts = [assemble_prompt(x, spec, 24) for x in ([5, 6, 7], [9, 10], [11, 12, 13])]
        scores = batch_class_scores(model, prompts, spec).data
        npt.assert_allclose(batch_class_scores(model, prompts, permuted).data, scores[:, [2, 0, 1]], atol=1e-6)

    def test_renormalising_keeps_the_predicted_class(self, tiny_model):
        spec = build_prompt_spec(tiny_model.vocab, 2, 3)
        init_prompt_embeddings(tiny_model, spec, seed=5, std=0.5)
        prompts = [assemble_prompt(x, spec, 24) for x in ([5, 6, 7], [8], [9, 10, 11, 12], [13, 5])]
        raw = label_token_probabilities(tiny_model, prompts, spec).data
        scores = batch_class_scores(tiny_model, prompts, spec).data
        npt.assert_array_equal(scores.argmax(axis=1), raw.argmax(axis=1))
        npt.assert_allclose(scores, raw / raw.sum(axis=1, keepdims=True), rtol=1e-5)
