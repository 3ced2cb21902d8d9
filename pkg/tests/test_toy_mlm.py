import numpy as np
import numpy.testing as npt
import pytest

from app.errors import ConfigError, LengthError, ValidationError
from app.services.random_streams import named_rng
from app.services.tensor_engine import op_softmax_rows
from app.services.toy_mlm import (
    Corpus,
    MlmConfig,
    PretrainConfig,
    ToyMlmModel,
    build_vocab,
    detokenize,
    encode,
    mask_sentences,
    pad_batch,
    pretrain,
)
from conftest import TINY_WORDS, make_tiny_model


class TestVocabulary:
    def test_layout(self, tiny_vocab):
        assert tiny_vocab.size == 22
        assert tiny_vocab.reserved_range == (14, 22)
        assert tiny_vocab.natural_range == (4, 14)
        assert tiny_vocab.tokens[:4] == ('[PAD]', '[CLS]', '[SEP]', '[MASK]')
        assert tiny_vocab.tokens[14] == '[unused1]'
        assert tiny_vocab.is_reserved(21) and not tiny_vocab.is_reserved(13)

    def test_reserved_slots_are_required(self):
        with pytest.raises(ValidationError):
            build_vocab(TINY_WORDS, 0)

    def test_duplicate_natural_token(self):
        with pytest.raises(ValidationError, match="'a'"):
            build_vocab(['a', 'b', 'a'], 4)

    def test_dict_round_trip(self, tiny_vocab):
        assert type(tiny_vocab).from_dict(tiny_vocab.to_dict()) == tiny_vocab


class TestEncode:
    def test_repeated_words(self, tiny_vocab):
        assert encode(tiny_vocab, 'a b a') == [5, 6, 5]

    def test_empty_text(self, tiny_vocab):
        assert encode(tiny_vocab, '') == []

    def test_unknown_word_maps_to_unk(self, tiny_vocab):
        assert encode(tiny_vocab, 'a zebra') == [5, tiny_vocab.unk_id]

    def test_reserved_names_are_not_natural(self, tiny_vocab):
        assert encode(tiny_vocab, '[unused1]') == [tiny_vocab.unk_id]

    def test_detokenize_inverts_encode(self, tiny_vocab):
        text = 'c a b i'
        assert detokenize(tiny_vocab, encode(tiny_vocab, text)) == text


def test_pad_batch():
    ids, mask = pad_batch([[5, 6, 7], [8]], pad_id=0)
    npt.assert_array_equal(ids, [[5, 6, 7], [8, 0, 0]])
    npt.assert_array_equal(mask, [[True, True, True], [True, False, False]])


class TestModel:
    def test_logits_shape_and_normalization(self, tiny_model):
        logits = tiny_model.forward_logits([1, 5, 6, 3, 2])
        assert logits.shape == (5, 22)
        npt.assert_allclose(op_softmax_rows(logits).data.sum(axis=-1), 1.0, atol=1e-6)

    def test_over_length(self, tiny_model):
        with pytest.raises(LengthError):
            tiny_model.forward_logits([5] * 25)

    def test_masked_tail_is_ignored(self, tiny_model):
        ids = [1, 5, 6, 3, 2]
        mask = [[True] * 5 + [False, False]]
        first = tiny_model.hidden_states([ids + [7, 8]], mask).data[0, :5]
        swapped = tiny_model.hidden_states([ids + [8, 7]], mask).data[0, :5]
        unpadded = tiny_model.hidden_states([ids]).data[0]
        npt.assert_allclose(first, swapped, atol=1e-5)
        npt.assert_allclose(first, unpadded, atol=1e-5)

    def test_decoder_is_tied_to_word_embeddings(self, tiny_model):
        ids = [1, 5, 6, 3, 2]
        hidden = tiny_model.hidden_states([ids]).data[0]
        table = tiny_model.word_embeddings.data
        expected = hidden @ table.T + tiny_model.decoder_bias.data
        npt.assert_allclose(tiny_model.forward_logits(ids).data, expected, rtol=1e-5, atol=1e-6)
        assert 'decoder.weight' not in tiny_model.registry

    def test_same_seed_same_parameters(self, tiny_vocab):
        first, second = make_tiny_model(tiny_vocab, seed=4), make_tiny_model(tiny_vocab, seed=4)
        assert first.registry.checksum() == second.registry.checksum()
        assert make_tiny_model(tiny_vocab, seed=5).registry.checksum() != first.registry.checksum()

    def test_clone_is_independent(self, tiny_model):
        twin = tiny_model.clone()
        assert twin.registry.checksum() == tiny_model.registry.checksum()
        twin.word_embeddings.data[5] += 1.0
        assert twin.registry.checksum() != tiny_model.registry.checksum()

    def test_config_checks(self, tiny_vocab):
        with pytest.raises(ConfigError, match='n_heads'):
            MlmConfig(vocab_size=22, d_model=10, n_heads=4)
        with pytest.raises(ConfigError, match='vocab_size'):
            ToyMlmModel(MlmConfig(vocab_size=30, d_model=8, n_heads=2), tiny_vocab)


def test_masking_hides_at_least_one_natural_token_per_sentence(tiny_vocab):
    sentences = [[5, 6], [7, 8, 9, 10]]
    inputs, positions, targets = mask_sentences(tiny_vocab, sentences, 0.0, named_rng(0, 'm'))
    assert sorted(row for row, _ in positions) == [0, 1]
    for (row, col), target in zip(positions, targets):
        assert inputs[row][col] == tiny_vocab.mask_id
        assert target == ([1] + sentences[row] + [2])[col]


def test_corpus_file_splits_segments(tiny_vocab, tmp_path):
    path = tmp_path / 'corpus.txt'
    path.write_text('a b [SEP] c\n\nd\n', encoding='utf-8')
    corpus = Corpus.from_file(path, tiny_vocab)
    assert corpus.sentences == [[5, 6, 2, 7], [8]]


class TestPretrain:
    def test_zero_steps_leave_model_unchanged(self, tiny_model):
        before = tiny_model.registry.checksum()
        result = pretrain(tiny_model, Corpus([[5, 6, 7]] * 4), PretrainConfig(steps=0))
        assert result.losses == []
        assert tiny_model.registry.checksum() == before

    def test_empty_corpus(self, tiny_model):
        with pytest.raises(ValidationError):
            pretrain(tiny_model, Corpus([]), PretrainConfig(steps=1))

    def test_reports_every_step(self, tiny_model):
        seen = []
        corpus = Corpus([[5, 6, 7, 8], [9, 10, 11]] * 5)
        result = pretrain(tiny_model, corpus, PretrainConfig(steps=3, batch_size=4, log_every=0),
                          on_step=lambda step, loss: seen.append(step))
        assert seen == [1, 2, 3]
        assert len(result.losses) == 3
        assert all(np.isfinite(result.losses))

    def test_runs_are_deterministic(self, tiny_vocab):
        corpus = Corpus([[5, 6, 7, 8], [9, 10, 11]] * 5)
        config = PretrainConfig(steps=3, batch_size=4, seed=2, log_every=0)
        first, second = make_tiny_model(tiny_vocab), make_tiny_model(tiny_vocab)
        assert pretrain(first, corpus, config).losses == pretrain(second, corpus, config).losses
        assert first.registry.checksum() == second.registry.checksum()


class TestReservedRows:
    def test_blank_at_construction(self, tiny_model):
        reserved = tiny_model.vocab.reserved_ids()
        npt.assert_array_equal(tiny_model.word_embeddings.data[reserved], 0.0)
        npt.assert_array_equal(tiny_model.decoder_bias.data[reserved], 0.0)

    def test_untouched_by_pretraining(self, tiny_model):
        reserved = tiny_model.vocab.reserved_ids()
        natural = tiny_model.word_embeddings.data[5].copy()
        corpus = Corpus([[5, 6, 7, 8], [9, 10, 11]] * 5)
        pretrain(tiny_model, corpus, PretrainConfig(steps=5, batch_size=4, lr=1e-2, log_every=0))
        npt.assert_array_equal(tiny_model.word_embeddings.data[reserved], 0.0)
        npt.assert_array_equal(tiny_model.decoder_bias.data[reserved], 0.0)
        assert not np.array_equal(tiny_model.word_embeddings.data[5], natural)
