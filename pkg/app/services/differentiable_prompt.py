"""Prompt construction and class scoring through the [MASK] position.

Template pseudo tokens and continuous label tokens live in reserved vocabulary
rows of the (tied) word-embedding table, so tuning them adds no parameters.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from app.errors import ArtifactMismatchError, CapacityError, LengthError, ValidationError
from app.services.random_streams import named_rng
from app.services.tensor_engine import Tensor, op_softmax_rows
from app.services.toy_mlm import pad_batch

logger = logging.getLogger(__name__)

LAYOUT = 'cls-input-sep-template-sep'


@dataclass(frozen=True)
class PromptSpec:
    """
    Template of m tokens (with [MASK] inserted at `mask_index_in_template`) and
    one label token per class.

    Differentiable segments use reserved ids; a segment may instead hold fixed
    natural tokens (fixed-prompt baseline and ablation arms).
    """

    m: int
    n: int
    template_slot_ids: tuple
    label_slot_ids: tuple
    mask_index_in_template: int
    vocab: object = field(compare=False, repr=False)
    template_differentiable: bool = True
    label_differentiable: bool = True
    layout: str = LAYOUT

    def __post_init__(self):
        if self.n < 2:
            raise ValidationError(f"a prompt needs at least 2 classes, got {self.n}")
        if len(self.template_slot_ids) != self.m or len(self.label_slot_ids) != self.n:
            raise ValidationError("slot id counts must equal m and n")
        if not 0 <= self.mask_index_in_template <= self.m:
            raise ValidationError(f"mask index {self.mask_index_in_template} outside [0, {self.m}]")
        if set(self.template_slot_ids) & set(self.label_slot_ids):
            raise ValidationError("template and label slots overlap")
        for ids, differentiable, what in ((self.template_slot_ids, self.template_differentiable, 'template'),
                                          (self.label_slot_ids, self.label_differentiable, 'label')):
            check = self.vocab.is_reserved if differentiable else self.vocab.is_natural
            bad = [i for i in ids if not check(i)]
            if bad:
                kind = 'reserved' if differentiable else 'natural'
                raise ValidationError(f"{what} ids {bad} are not {kind} tokens")

    @property
    def trainable_ids(self):
        """Embedding rows tuned in the prompt phase."""
        ids = []
        if self.template_differentiable:
            ids.extend(self.template_slot_ids)
        if self.label_differentiable:
            ids.extend(self.label_slot_ids)
        return ids

    @property
    def prompt_length(self):
        """Tokens added around the input: [CLS] [SEP] template [MASK] [SEP]."""
        return self.m + 4

    def template_with(self, token_id):
        ids = list(self.template_slot_ids)
        ids.insert(self.mask_index_in_template, token_id)
        return ids

    def to_dict(self):
        return {
            'm': self.m,
            'n': self.n,
            'template_slot_ids': list(self.template_slot_ids),
            'label_slot_ids': list(self.label_slot_ids),
            'mask_index_in_template': self.mask_index_in_template,
            'template_differentiable': self.template_differentiable,
            'label_differentiable': self.label_differentiable,
            'layout': self.layout,
        }

    @classmethod
    def from_dict(cls, data, vocab):
        if data.get('layout', LAYOUT) != LAYOUT:
            raise ArtifactMismatchError(f"unsupported prompt layout {data.get('layout')!r}")
        try:
            return cls(
                m=data['m'],
                n=data['n'],
                template_slot_ids=tuple(data['template_slot_ids']),
                label_slot_ids=tuple(data['label_slot_ids']),
                mask_index_in_template=data['mask_index_in_template'],
                vocab=vocab,
                template_differentiable=data.get('template_differentiable', True),
                label_differentiable=data.get('label_differentiable', True),
            )
        except ValidationError as e:
            raise ArtifactMismatchError(f"prompt spec does not fit the vocabulary: {e}") from e


@dataclass(frozen=True)
class EncodedPrompt:
    ids: tuple
    mask_position: int
    input_span: tuple


def build_prompt_spec(vocab, m, n, mask_index=None):
    """
    Assign the first m reserved ids to template slots and the next n to labels.

    Args:
        vocab (Vocabulary): Vocabulary with a reserved range
        m (int): Template length (pseudo tokens, [MASK] excluded)
        n (int): Number of classes
        mask_index (int): Position of [MASK] among template tokens (default: end)

    Returns:
        PromptSpec: Fully differentiable prompt
    """
    reserved = vocab.reserved_ids()
    if m + n > len(reserved):
        raise CapacityError(f"prompt needs m+n = {m + n} reserved ids, vocabulary has {len(reserved)}")
    return PromptSpec(
        m=m,
        n=n,
        template_slot_ids=tuple(reserved[:m]),
        label_slot_ids=tuple(reserved[m:m + n]),
        mask_index_in_template=m if mask_index is None else mask_index,
        vocab=vocab,
    )


def with_fixed_segments(spec, template_words=None, label_words=None):
    """
    Replace the template and/or label segment of `spec` with natural tokens.

    Args:
        spec (PromptSpec): Differentiable spec to derive from
        template_words (list): m natural words, or None to keep pseudo tokens
        label_words (list): n natural words, or None to keep continuous labels

    Returns:
        PromptSpec: Derived spec
    """
    vocab = spec.vocab
    template_ids, template_diff = spec.template_slot_ids, spec.template_differentiable
    label_ids, label_diff = spec.label_slot_ids, spec.label_differentiable
    if template_words is not None:
        if len(template_words) != spec.m:
            raise ValidationError(f"expected {spec.m} template words, got {len(template_words)}")
        template_ids, template_diff = tuple(vocab.id_of(w) for w in template_words), False
    if label_words is not None:
        if len(label_words) != spec.n:
            raise ValidationError(f"expected {spec.n} label words, got {len(label_words)}")
        label_ids, label_diff = tuple(vocab.id_of(w) for w in label_words), False
    return PromptSpec(m=spec.m, n=spec.n, template_slot_ids=template_ids, label_slot_ids=label_ids,
                      mask_index_in_template=spec.mask_index_in_template, vocab=vocab,
                      template_differentiable=template_diff, label_differentiable=label_diff)


def fixed_prompt_spec(vocab, template_words, label_words, mask_index):
    """A prompt made only of natural tokens."""
    template_ids = tuple(vocab.id_of(w) for w in template_words)
    label_ids = tuple(vocab.id_of(w) for w in label_words)
    return PromptSpec(m=len(template_ids), n=len(label_ids), template_slot_ids=template_ids,
                      label_slot_ids=label_ids, mask_index_in_template=mask_index, vocab=vocab,
                      template_differentiable=False, label_differentiable=False)


def assemble_prompt(x_in, spec, max_len, fill_id=None):
    """
    Build [CLS] x_in [SEP] T [SEP] with [MASK] inside the template.

    Inputs too long for `max_len` are truncated from the right; the template
    is never cut.

    Args:
        x_in (list): Input token ids
        spec (PromptSpec): Prompt layout
        max_len (int): Model length limit
        fill_id (int): Token placed at the [MASK] slot instead of [MASK]

    Returns:
        EncodedPrompt: ids, mask position and input span
    """
    vocab = spec.vocab
    budget = max_len - spec.prompt_length
    if budget < 0:
        raise LengthError(f"template of {spec.m} tokens does not fit max_len {max_len}")
    x_in = list(x_in)[:budget]
    prefix = [vocab.cls_id] + x_in + [vocab.sep_id]
    slot = vocab.mask_id if fill_id is None else fill_id
    ids = prefix + spec.template_with(slot) + [vocab.sep_id]
    return EncodedPrompt(ids=tuple(ids), mask_position=len(prefix) + spec.mask_index_in_template,
                         input_span=(1, 1 + len(x_in)))


def _base_rows(model, vocab, base, count, what):
    """(embedding row, decoder bias) per base entry; multi-token entries are averaged."""
    if len(base) != count:
        raise ValidationError(f"base {what} has {len(base)} entries, expected {count}")
    rows = []
    for entry in base:
        group = [entry] if isinstance(entry, (int, np.integer)) else list(entry)
        if not group:
            raise ValidationError(f"empty base {what} entry")
        for token_id in group:
            if not 0 <= token_id < vocab.size:
                raise IndexError(f"token id {token_id} out of range [0, {vocab.size})")
        rows.append((model.word_embeddings.data[group].mean(axis=0),
                     float(model.decoder_bias.data[group].mean())))
    return rows


def init_prompt_embeddings(model, spec, base_template=None, base_labels=None, seed=0, std=0.02):
    """
    Initialise the reserved rows of the template and label slots.

    Rows are copied from the base tokens' embeddings when bases are given
    (a multi-token base entry is averaged), otherwise drawn from N(0, std^2).
    The slot's decoder bias is copied along with its row (zero for a random
    draw), so scores never depend on which reserved ids a prompt uses.
    Only differentiable slot rows are written.

    Args:
        model (ToyMlmModel): Model whose embedding table is mutated
        spec (PromptSpec): Prompt layout
        base_template (list): m token ids, or None
        base_labels (list): n token ids (or id groups), or None
        seed (int): Seed for the random draw
        std (float): Standard deviation of the random draw
    """
    table = model.word_embeddings.data
    bias = model.decoder_bias.data
    vocab = spec.vocab
    rng = named_rng(seed, 'prompt-init')
    d = table.shape[1]
    random_template = [(row, 0.0) for row in rng.normal(0.0, std, size=(spec.m, d))]
    random_labels = [(row, 0.0) for row in rng.normal(0.0, std, size=(spec.n, d))]

    template_rows = (_base_rows(model, vocab, base_template, spec.m, 'template')
                     if base_template is not None else random_template)
    label_rows = (_base_rows(model, vocab, base_labels, spec.n, 'labels')
                  if base_labels is not None else random_labels)

    segments = []
    if spec.template_differentiable:
        segments.append((spec.template_slot_ids, template_rows))
    if spec.label_differentiable:
        segments.append((spec.label_slot_ids, label_rows))
    for slots, rows in segments:
        for slot, (row, slot_bias) in zip(slots, rows):
            table[slot] = row
            bias[slot] = slot_bias


def _verbalizer_matrix(groups, dtype):
    """0/1 matrix summing gathered token probabilities into class scores."""
    columns = [token for group in groups for token in group]
    assign = np.zeros((len(columns), len(groups)), dtype=dtype)
    k = 0
    for j, group in enumerate(groups):
        for _ in group:
            assign[k, j] = 1.0
            k += 1
    return columns, assign


def mask_hidden_states(model, prompts):
    """[MASK]-position final-layer states for a list of EncodedPrompts: [B, d]."""
    ids, attention = pad_batch([p.ids for p in prompts], model.vocab.pad_id)
    hidden = model.hidden_states(ids, attention)
    positions = np.asarray([p.mask_position for p in prompts], dtype=np.int64)
    return hidden[np.arange(len(prompts)), positions]


def label_token_probabilities(model, prompts, spec, verbalizer=None):
    """
    Pre-normalisation class scores p(y|x) = sum over the class's tokens of
    p([MASK]=w|x), the softmax taken over the full vocabulary.

    Args:
        model (ToyMlmModel): Model
        prompts (list): EncodedPrompts
        spec (PromptSpec): Prompt layout (one label token per class)
        verbalizer (list): Optional per-class token-id groups overriding the label slots

    Returns:
        Tensor: [B, n]
    """
    groups = verbalizer if verbalizer is not None else [[i] for i in spec.label_slot_ids]
    if len(groups) != spec.n:
        raise ValidationError(f"verbalizer has {len(groups)} classes, spec has {spec.n}")
    probs = op_softmax_rows(model.decode(mask_hidden_states(model, prompts)))
    if all(len(group) == 1 for group in groups):
        return probs[:, np.asarray([group[0] for group in groups], dtype=np.int64)]
    columns, assign = _verbalizer_matrix(groups, probs.data.dtype)
    return probs[:, np.asarray(columns, dtype=np.int64)] @ Tensor(assign)


def renormalize(raw_scores):
    return raw_scores / raw_scores.sum(axis=-1, keepdims=True)


def batch_class_scores(model, prompts, spec, verbalizer=None):
    """Class distributions [B, n]: label-token probabilities renormalised over classes."""
    return renormalize(label_token_probabilities(model, prompts, spec, verbalizer))


def class_scores(model, prompt, spec, verbalizer=None):
    """Class distribution [n] for one prompt."""
    return batch_class_scores(model, [prompt], spec, verbalizer)[0]
