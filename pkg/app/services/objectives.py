"""Training objectives: class discrimination, fluency constraint and their sum."""
from dataclasses import dataclass

import numpy as np

from app.errors import ValidationError
from app.services.differentiable_prompt import assemble_prompt
from app.services.tensor_engine import as_tensor, op_log, op_softmax_rows
from app.services.toy_mlm import pad_batch

PROBABILITY_FLOOR = 1e-12


def class_discrimination_loss(scores, gold):
    """
    Cross-entropy on a class distribution: -log scores[gold].

    Args:
        scores (Tensor): [n] probabilities, or [B, n] for a batch
        gold (int | list): Gold class index (one per row for a batch)

    Returns:
        Tensor: Scalar loss (batch mean for [B, n])
    """
    if scores.ndim == 1:
        if not 0 <= gold < scores.shape[0]:
            raise IndexError(f"gold class {gold} out of range [0, {scores.shape[0]})")
        return -op_log(scores[gold], floor=PROBABILITY_FLOOR)
    gold = np.asarray(gold, dtype=np.int64)
    if gold.size and (gold.min() < 0 or gold.max() >= scores.shape[1]):
        bad = int(gold[(gold < 0) | (gold >= scores.shape[1])][0])
        raise IndexError(f"gold class {bad} out of range [0, {scores.shape[1]})")
    picked = scores[np.arange(scores.shape[0]), gold]
    return -op_log(picked, floor=PROBABILITY_FLOOR).mean()


@dataclass(frozen=True)
class FluencySample:
    """
    Input with one natural token replaced by [MASK]; the prompt's [MASK] slot
    holds the gold class's label token instead.
    """

    x_prime: tuple
    target_id: int
    target_position: int
    gold_label_slot_id: int


def make_fluency_sample(x_in, gold, spec, rng, max_len):
    """
    Mask one uniformly chosen natural token of `x_in`.

    Args:
        x_in (list): Input token ids
        gold (int): Gold class index
        spec (PromptSpec): Prompt layout
        rng (numpy.random.Generator): Masking stream
        max_len (int): Model length limit

    Returns:
        FluencySample: Sample whose only [MASK] is the fluency target
    """
    vocab = spec.vocab
    label_id = spec.label_slot_ids[gold]
    prompt = assemble_prompt(x_in, spec, max_len, fill_id=label_id)
    start, end = prompt.input_span
    candidates = [t for t in range(start, end) if vocab.is_natural(prompt.ids[t])]
    if not candidates:
        raise ValidationError("fluency sample needs at least one natural input token")
    position = candidates[int(rng.integers(len(candidates)))]
    ids = list(prompt.ids)
    target = ids[position]
    ids[position] = vocab.mask_id
    return FluencySample(x_prime=tuple(ids), target_id=target, target_position=position,
                         gold_label_slot_id=label_id)


def fluency_probabilities(model, samples):
    """h(x^m | x', y): softmax over the vocabulary at each target position, read at the target [B]."""
    ids, attention = pad_batch([s.x_prime for s in samples], model.vocab.pad_id)
    hidden = model.hidden_states(ids, attention)
    rows = np.arange(len(samples))
    positions = np.asarray([s.target_position for s in samples], dtype=np.int64)
    probs = op_softmax_rows(model.decode(hidden[rows, positions]))
    targets = np.asarray([s.target_id for s in samples], dtype=np.int64)
    return probs[rows, targets]


def binary_cross_entropy_positive(probability):
    """BCE against target 1: -log p (floored)."""
    return -op_log(probability, floor=PROBABILITY_FLOOR)


def fluency_loss(model, sample):
    """Single-positive BCE of the masked input token for one sample (scalar)."""
    return batch_fluency_loss(model, [sample])


def batch_fluency_loss(model, samples):
    return binary_cross_entropy_positive(fluency_probabilities(model, samples)).mean()


def total_loss(lc, lf, lam):
    """L = L_C + lambda * L_F; returns `lc` itself when lambda is 0."""
    if lam == 0:
        return lc
    return as_tensor(lc) + as_tensor(lf) * float(lam)
