"""Toy masked language model: vocabulary, whitespace tokenizer, tied-embedding
transformer encoder and the synthetic-corpus pre-training routine."""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from app.errors import ConfigError, LengthError, NumericError, ValidationError
from app.services.optimizer import AdamW, LinearWarmupDecay, ParameterRegistry
from app.services.random_streams import named_rng
from app.services.tensor_engine import (
    backward,
    no_grad,
    op_embedding_gather,
    op_gelu,
    op_layer_norm,
    op_log_softmax_rows,
    op_softmax_rows,
)

logger = logging.getLogger(__name__)

PAD, CLS, SEP, MASK = '[PAD]', '[CLS]', '[SEP]', '[MASK]'
SPECIAL_TOKENS = (PAD, CLS, SEP, MASK)
UNK = '[UNK]'
NEG_INF = -1e9


@dataclass(frozen=True)
class Vocabulary:
    """Dense token <-> id map: specials first, natural tokens next, reserved tokens last."""

    tokens: tuple
    reserved_count: int
    token_to_id: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'token_to_id', {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return 0

    @property
    def cls_id(self):
        return 1

    @property
    def sep_id(self):
        return 2

    @property
    def mask_id(self):
        return 3

    @property
    def special_ids(self):
        return (0, 1, 2, 3)

    @property
    def unk_id(self):
        return self.token_to_id.get(UNK)

    @property
    def natural_range(self):
        return (len(SPECIAL_TOKENS), self.size - self.reserved_count)

    @property
    def reserved_range(self):
        return (self.size - self.reserved_count, self.size)

    def reserved_ids(self):
        return list(range(*self.reserved_range))

    def natural_ids(self):
        return list(range(*self.natural_range))

    def is_natural(self, token_id):
        start, end = self.natural_range
        return start <= token_id < end

    def is_reserved(self, token_id):
        start, end = self.reserved_range
        return start <= token_id < end

    def id_of(self, token):
        try:
            return self.token_to_id[token]
        except KeyError:
            raise ValidationError(f"unknown token {token!r}") from None

    def natural_tokens(self):
        start, end = self.natural_range
        return list(self.tokens[start:end])

    def to_dict(self):
        return {'natural_tokens': self.natural_tokens(), 'reserved_count': self.reserved_count}

    @classmethod
    def from_dict(cls, data):
        return build_vocab(data['natural_tokens'], data['reserved_count'])


def build_vocab(natural_tokens, reserved_count):
    """
    Build a vocabulary with layout [PAD]=0, [CLS]=1, [SEP]=2, [MASK]=3,
    natural tokens next and `reserved_count` unused tokens at the end.

    Args:
        natural_tokens (list): Unique natural tokens
        reserved_count (int): Number of reserved ("unused") slots, at least 1

    Returns:
        Vocabulary: The built vocabulary
    """
    if reserved_count < 1:
        raise ValidationError(f"reserved_count must be >= 1, got {reserved_count}")
    natural_tokens = list(natural_tokens)
    seen = set()
    for token in natural_tokens:
        if token in seen:
            raise ValidationError(f"duplicate natural token {token!r}")
        if token in SPECIAL_TOKENS or token.startswith('[unused'):
            raise ValidationError(f"natural token {token!r} collides with a special or reserved name")
        seen.add(token)
    reserved = [f'[unused{i}]' for i in range(1, reserved_count + 1)]
    return Vocabulary(tokens=tuple(SPECIAL_TOKENS) + tuple(natural_tokens) + tuple(reserved),
                      reserved_count=reserved_count)


def encode(vocab, text):
    """Whitespace-split, lowercase and map words to ids ([UNK] for unknown words)."""
    ids = []
    for word in text.lower().split():
        token_id = vocab.token_to_id.get(word)
        if token_id is None or not vocab.is_natural(token_id):
            if vocab.unk_id is None:
                logger.debug("dropping unknown word %r (vocabulary has no [UNK])", word)
                continue
            token_id = vocab.unk_id
        ids.append(token_id)
    return ids


def detokenize(vocab, ids):
    return ' '.join(vocab.tokens[i] for i in ids)


def pad_batch(sequences, pad_id):
    """
    Right-pad id sequences into a matrix.

    Returns:
        tuple: (ids int64 [B, L], attention mask bool [B, L])
    """
    length = max((len(seq) for seq in sequences), default=0)
    ids = np.full((len(sequences), length), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    return ids, mask


@dataclass(frozen=True)
class MlmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}",
                              field='n_heads')
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}", field='ln_eps')

    def to_dict(self):
        return asdict(self)


class ToyMlmModel:
    """
    Post-LN transformer encoder with learned absolute positions and a decoder
    tied to the word-embedding table: logits = H @ E^T + decoder bias.
    """

    def __init__(self, config, vocab, seed=0):
        if config.vocab_size != vocab.size:
            raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}",
                              field='vocab_size')
        self.config = config
        self.vocab = vocab
        self.registry = ParameterRegistry()
        rng = named_rng(seed, 'init')
        d, std = config.d_model, config.init_std

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        reg = self.registry.register
        self.word_embeddings = reg('embeddings.word', normal(config.vocab_size, d))
        self.position_embeddings = reg('embeddings.position', normal(config.max_len, d))
        self.embedding_norm = (
            reg('embeddings.norm.gain', np.ones(d), decay_exempt=True),
            reg('embeddings.norm.bias', np.zeros(d), decay_exempt=True),
        )
        self.layers = []
        for i in range(config.n_layers):
            prefix = f'encoder.{i}'
            layer = {}
            for proj in ('query', 'key', 'value', 'output'):
                layer[f'{proj}.weight'] = reg(f'{prefix}.attention.{proj}.weight', normal(d, d))
                layer[f'{proj}.bias'] = reg(f'{prefix}.attention.{proj}.bias', np.zeros(d), decay_exempt=True)
            layer['norm1.gain'] = reg(f'{prefix}.norm1.gain', np.ones(d), decay_exempt=True)
            layer['norm1.bias'] = reg(f'{prefix}.norm1.bias', np.zeros(d), decay_exempt=True)
            layer['ff_in.weight'] = reg(f'{prefix}.ff_in.weight', normal(d, config.d_ff))
            layer['ff_in.bias'] = reg(f'{prefix}.ff_in.bias', np.zeros(config.d_ff), decay_exempt=True)
            layer['ff_out.weight'] = reg(f'{prefix}.ff_out.weight', normal(config.d_ff, d))
            layer['ff_out.bias'] = reg(f'{prefix}.ff_out.bias', np.zeros(d), decay_exempt=True)
            layer['norm2.gain'] = reg(f'{prefix}.norm2.gain', np.ones(d), decay_exempt=True)
            layer['norm2.bias'] = reg(f'{prefix}.norm2.bias', np.zeros(d), decay_exempt=True)
            self.layers.append(layer)
        self.decoder_bias = reg('decoder.bias', np.zeros(config.vocab_size), decay_exempt=True)
        # unused ids stay blank until a prompt claims them
        self.word_embeddings.data[vocab.reserved_ids()] = 0.0

    def clone(self):
        """Independent copy with identical parameters (extra registered parameters included)."""
        twin = ToyMlmModel(self.config, self.vocab)
        for name, param in self.registry:
            if name not in twin.registry:
                twin.registry.register(name, param.data, decay_exempt=param.decay_exempt)
        twin.registry.load_state_dict(self.registry.state_dict())
        return twin

    def _attention(self, x, layer, key_mask):
        batch, length, d = x.shape
        heads = self.config.n_heads
        head_dim = d // heads

        def split(proj):
            out = x @ layer[f'{proj}.weight'] + layer[f'{proj}.bias']
            return out.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

        query, key, value = split('query'), split('key'), split('value')
        scores = (query @ key.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim)) + key_mask
        context = op_softmax_rows(scores) @ value
        context = context.transpose(0, 2, 1, 3).reshape(batch, length, d)
        return context @ layer['output.weight'] + layer['output.bias']

    def hidden_states(self, ids, attention_mask=None):
        """
        Final encoder-layer states.

        Args:
            ids (array-like): [B, L] token ids
            attention_mask (array-like): [B, L] bool, False marks padding

        Returns:
            Tensor: [B, L, d]
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        batch, length = ids.shape
        if length > self.config.max_len:
            raise LengthError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        if attention_mask is None:
            attention_mask = ids != self.vocab.pad_id
        attention_mask = np.asarray(attention_mask, dtype=bool)
        key_mask = np.where(attention_mask, 0.0, NEG_INF).astype(self.word_embeddings.data.dtype)[:, None, None, :]

        eps = self.config.ln_eps
        x = op_embedding_gather(self.word_embeddings, ids)
        x = x + op_embedding_gather(self.position_embeddings, np.arange(length))
        x = op_layer_norm(x, *self.embedding_norm, eps=eps)
        for layer in self.layers:
            x = op_layer_norm(x + self._attention(x, layer, key_mask),
                              layer['norm1.gain'], layer['norm1.bias'], eps=eps)
            ff = op_gelu(x @ layer['ff_in.weight'] + layer['ff_in.bias'])
            ff = ff @ layer['ff_out.weight'] + layer['ff_out.bias']
            x = op_layer_norm(x + ff, layer['norm2.gain'], layer['norm2.bias'], eps=eps)
        return x

    def decode(self, hidden):
        """Tied decoder: vocabulary scores for hidden states [..., d] -> [..., V]."""
        return hidden @ self.word_embeddings.T + self.decoder_bias

    def forward_logits(self, ids):
        """Vocabulary scores at every position of one sequence: [L, V]."""
        ids = list(ids)
        if len(ids) > self.config.max_len:
            raise LengthError(f"sequence length {len(ids)} exceeds max_len {self.config.max_len}")
        hidden = self.hidden_states(np.asarray([ids], dtype=np.int64))
        return self.decode(hidden)[0]


@dataclass
class Corpus:
    """Token-id sentences used for pre-training (no [CLS]/outer [SEP])."""

    sentences: list
    source: str = 'synthetic'

    def validate(self, vocab, max_len):
        for n, sentence in enumerate(self.sentences):
            if any(not 0 <= t < vocab.size for t in sentence):
                raise ValidationError(f"sentence {n} holds an id outside [0, {vocab.size})")
            if len(sentence) > max_len - 2:
                raise ValidationError(f"sentence {n} longer than max_len - 2 ({max_len - 2})")

    @classmethod
    def from_file(cls, path, vocab):
        """One sentence per line; a literal [SEP] splits segments."""
        sentences = []
        for line in Path(path).read_text(encoding='utf-8').splitlines():
            if not line.strip():
                continue
            ids = []
            for segment_no, segment in enumerate(line.split(SEP)):
                if segment_no:
                    ids.append(vocab.sep_id)
                ids.extend(encode(vocab, segment))
            sentences.append(ids)
        return cls(sentences=sentences, source=str(path))

    def split(self, heldout_fraction=0.1):
        cut = len(self.sentences) - max(1, int(len(self.sentences) * heldout_fraction))
        if cut <= 0:
            return list(self.sentences), list(self.sentences)
        return self.sentences[:cut], self.sentences[cut:]


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15
    weight_decay: float = 0.01
    seed: int = 0
    heldout_fraction: float = 0.1
    log_every: int = 100


@dataclass
class PretrainResult:
    losses: list
    heldout_loss_initial: float
    heldout_loss_final: float


def mask_sentences(vocab, sentences, mask_prob, rng):
    """
    Wrap sentences as [CLS] s [SEP] and replace a random subset of natural
    tokens by [MASK] (at least one per sentence).

    Returns:
        tuple: (inputs list, positions [(row, col)], target ids)
    """
    inputs, positions, targets = [], [], []
    for row, sentence in enumerate(sentences):
        seq = [vocab.cls_id] + list(sentence) + [vocab.sep_id]
        candidates = [t for t in range(1, len(seq) - 1) if vocab.is_natural(seq[t])]
        if not candidates:
            inputs.append(seq)
            continue
        chosen = [t for t in candidates if rng.random() < mask_prob]
        if not chosen:
            chosen = [candidates[int(rng.integers(len(candidates)))]]
        for t in chosen:
            positions.append((row, t))
            targets.append(seq[t])
            seq[t] = vocab.mask_id
        inputs.append(seq)
    return inputs, positions, targets


def masked_lm_loss(model, inputs, positions, targets):
    ids, attention = pad_batch(inputs, model.vocab.pad_id)
    hidden = model.hidden_states(ids, attention)
    rows = np.asarray([p[0] for p in positions], dtype=np.int64)
    cols = np.asarray([p[1] for p in positions], dtype=np.int64)
    log_probs = op_log_softmax_rows(model.decode(hidden[rows, cols]))
    picked = log_probs[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]
    return -picked.mean(), log_probs


def masked_token_accuracy(model, sentences, mask_prob=0.15, seed=0):
    """Fraction of masked tokens whose argmax prediction is the original token."""
    rng = named_rng(seed, 'heldout')
    inputs, positions, targets = mask_sentences(model.vocab, sentences, mask_prob, rng)
    if not targets:
        return 0.0
    with no_grad():
        _, log_probs = masked_lm_loss(model, inputs, positions, targets)
    predictions = log_probs.data.argmax(axis=-1)
    return float(np.mean(predictions == np.asarray(targets)))


def heldout_loss(model, sentences, mask_prob, seed):
    rng = named_rng(seed, 'heldout')
    inputs, positions, targets = mask_sentences(model.vocab, sentences, mask_prob, rng)
    if not targets:
        return float('nan')
    with no_grad():
        loss, _ = masked_lm_loss(model, inputs, positions, targets)
    return loss.item()


def pretrain(model, corpus, config, on_step=None):
    """
    Masked-language-model pre-training on `corpus`.

    Reserved ids keep their embedding rows and decoder bias untouched, so
    every unused slot is interchangeable when a prompt later claims it.

    Args:
        model (ToyMlmModel): Model to train in place
        corpus (Corpus): Training sentences
        config (PretrainConfig): Steps, batch size, learning rate, mask probability
        on_step (callable): Optional callback(step, loss)

    Returns:
        PretrainResult: Per-step losses plus held-out loss before and after
    """
    if not corpus.sentences:
        raise ValidationError("pre-training corpus is empty")
    corpus.validate(model.vocab, model.config.max_len)
    train_sentences, heldout = corpus.split(config.heldout_fraction)

    if config.steps <= 0:
        return PretrainResult(losses=[], heldout_loss_initial=float('nan'), heldout_loss_final=float('nan'))

    initial = heldout_loss(model, heldout, config.mask_prob, config.seed)
    model.registry.set_trainable(True)
    reserved = model.vocab.reserved_ids()
    model.registry.freeze_rows('embeddings.word', reserved)
    model.registry.freeze_rows('decoder.bias', reserved)
    optimizer = AdamW(model.registry, lr=config.lr, weight_decay=config.weight_decay,
                      schedule=LinearWarmupDecay(config.steps))
    batch_rng = named_rng(config.seed, 'pretrain-batches')
    mask_rng = named_rng(config.seed, 'pretrain-masking')

    losses = []
    for step in range(1, config.steps + 1):
        picks = batch_rng.integers(len(train_sentences), size=min(config.batch_size, len(train_sentences)))
        batch = [train_sentences[i] for i in picks]
        inputs, positions, targets = mask_sentences(model.vocab, batch, config.mask_prob, mask_rng)
        if not targets:
            continue
        model.registry.zero_grad()
        loss, _ = masked_lm_loss(model, inputs, positions, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite pre-training loss at step {step}")
        backward(loss)
        optimizer.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if config.log_every and step % config.log_every == 0:
            recent = losses[-config.log_every:]
            logger.info("pretrain step %d/%d loss %.4f", step, config.steps, sum(recent) / len(recent))

    final = heldout_loss(model, heldout, config.mask_prob, config.seed)
    logger.info("pretrain held-out loss %.4f -> %.4f", initial, final)
    return PretrainResult(losses=losses, heldout_loss_initial=initial, heldout_loss_final=final)
