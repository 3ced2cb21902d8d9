"""Evaluation metrics and report statistics."""
from functools import partial

import numpy as np


def accuracy(predictions, golds):
    predictions, golds = np.asarray(predictions), np.asarray(golds)
    if golds.size == 0:
        return 0.0
    return float(np.mean(predictions == golds))


def micro_f1(predictions, golds, negative_label=None):
    """
    Micro-averaged F1. With `negative_label` set (a "no relation" class),
    predictions and golds of that class do not count as positives; without
    it micro-F1 equals accuracy.
    """
    predictions, golds = np.asarray(predictions), np.asarray(golds)
    if negative_label is None:
        return accuracy(predictions, golds)
    predicted_pos = predictions != negative_label
    gold_pos = golds != negative_label
    correct = np.sum((predictions == golds) & predicted_pos)
    precision = correct / max(int(np.sum(predicted_pos)), 1)
    recall = correct / max(int(np.sum(gold_pos)), 1)
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def metric_for(name, negative_label=None):
    if name == 'accuracy':
        return accuracy
    if name == 'micro_f1':
        return partial(micro_f1, negative_label=negative_label)
    raise ValueError(f"unknown metric {name!r}")


def mean_std(values):
    """Mean and population standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0, 0.0
    return float(values.mean()), float(values.std(ddof=0))
