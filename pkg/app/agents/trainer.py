"""Trainer Agent - DART joint prompt optimisation, full fine-tuning and the
[CLS]-head baseline, all under dev-set early stopping."""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from app.errors import ArtifactMismatchError, ConfigError, NumericError, ValidationError
from app.services.differentiable_prompt import assemble_prompt, batch_class_scores
from app.services.metrics import accuracy
from app.services.objectives import (
    batch_fluency_loss,
    class_discrimination_loss,
    make_fluency_sample,
    total_loss,
)
from app.services.optimizer import AdamW, LinearWarmupDecay
from app.services.random_streams import named_rng
from app.services.tensor_engine import backward, no_grad, op_log, op_log_softmax_rows, op_tanh
from app.services.toy_mlm import pad_batch

logger = logging.getLogger(__name__)

JOINT, FULL = 'JOINT', 'FULL'
PHASE_POLICIES = {
    'JOINT_THEN_FULL': (JOINT, FULL),
    'JOINT_ONLY': (JOINT,),
    'FULL_ONLY': (FULL,),
}
HISTORY_COLUMNS = ('phase', 'epoch', 'step', 'train_loss', 'fluency_loss', 'dev_loss', 'dev_metric')


@dataclass
class TrainConfig:
    lam: float = 1.0
    epochs: int = 20
    batch_size: int = 8
    prompt_lr: float = 5e-3
    full_lr: float = 5e-4
    weight_decay: float = 0.01
    phase_policy: str = 'JOINT_THEN_FULL'
    fluency: bool = True
    seed: int = 0
    grad_accumulation_steps: int = 1
    patience: int = 5
    warmup_ratio: float = 0.1
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}", field='lam')
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}", field='batch_size')
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", field='epochs')
        if self.grad_accumulation_steps < 1:
            raise ConfigError("grad_accumulation_steps must be >= 1", field='grad_accumulation_steps')
        if self.phase_policy not in PHASE_POLICIES:
            raise ConfigError(f"unknown phase policy {self.phase_policy!r}", field='phase_policy')

    @property
    def phases(self):
        return PHASE_POLICIES[self.phase_policy]

    @property
    def uses_fluency(self):
        return self.fluency and self.lam > 0

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass
class HistoryRow:
    phase: str
    epoch: int
    step: int
    train_loss: float
    fluency_loss: float
    dev_loss: float
    dev_metric: float


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)
    phase_steps: dict = field(default_factory=dict)

    def add(self, row):
        self.rows.append(row)

    def column(self, name):
        return [getattr(row, name) for row in self.rows]

    def as_dicts(self):
        return [asdict(row) for row in self.rows]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(HISTORY_COLUMNS)
            for row in self.rows:
                writer.writerow([row.phase, row.epoch, row.step, f'{row.train_loss:.9g}',
                                 f'{row.fluency_loss:.9g}', f'{row.dev_loss:.9g}', f'{row.dev_metric:.9g}'])
        return path


@dataclass
class TrainResult:
    model: object
    history: TrainingHistory
    best_dev_metric: float
    best_dev_loss: float


class _EarlyStoppingTrainer:
    """Phase loop shared by the prompt trainer and the head baseline."""

    def __init__(self, model, config, metric_fn=accuracy, callbacks=()):
        self.model = model
        self.config = config
        self.metric_fn = metric_fn
        self.callbacks = list(callbacks)
        self.global_step = 0
        self.history = TrainingHistory()
        self._best = None

    # Subclass hooks
    def _phases(self):
        raise NotImplementedError

    def _configure_phase(self, phase):
        """Set trainability flags; return the phase learning rate."""
        raise NotImplementedError

    def _batch_loss(self, batch, mask_rng):
        """Return (total loss Tensor, fluency loss float)."""
        raise NotImplementedError

    def _log_probs(self, batch):
        """Class log-probabilities [B, n] used for evaluation."""
        raise NotImplementedError

    def evaluate(self, dataset):
        """
        Class-discrimination loss and metric on `dataset`.

        Returns:
            tuple: (mean loss, metric, predictions)
        """
        if not dataset:
            return float('nan'), 0.0, []
        losses, predictions = [], []
        with no_grad():
            for start in range(0, len(dataset), 32):
                batch = dataset[start:start + 32]
                log_probs = self._log_probs(batch).data
                golds = np.asarray([label for _, label in batch])
                losses.extend(-log_probs[np.arange(len(batch)), golds])
                predictions.extend(int(p) for p in log_probs.argmax(axis=-1))
        golds = [label for _, label in dataset]
        return float(np.mean(losses)), float(self.metric_fn(predictions, golds)), predictions

    def predict(self, dataset):
        return self.evaluate(dataset)[2]

    def fit(self, train_set, dev_set):
        if not train_set:
            raise ValidationError("training set is empty")
        for phase_no, phase in enumerate(self._phases()):
            self._run_phase(phase_no, phase, train_set, dev_set)
        if self._best is not None:
            self.model.registry.load_state_dict(self._best['state'])
        for callback in self.callbacks:
            if hasattr(callback, 'on_train_end'):
                callback.on_train_end(self)
        best = self._best or {'metric': float('nan'), 'loss': float('nan')}
        return TrainResult(self.model, self.history, best['metric'], best['loss'])

    def _run_phase(self, phase_no, phase, train_set, dev_set):
        cfg = self.config
        registry = self.model.registry
        lr = self._configure_phase(phase)
        batches_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
        updates_per_epoch = math.ceil(batches_per_epoch / cfg.grad_accumulation_steps)
        optimizer = AdamW(registry, lr=lr, weight_decay=cfg.weight_decay,
                          max_grad_norm=cfg.max_grad_norm,
                          schedule=LinearWarmupDecay(updates_per_epoch * cfg.epochs, cfg.warmup_ratio))
        phase_best_loss = math.inf
        stale_epochs = 0
        phase_steps = 0

        for epoch in range(1, cfg.epochs + 1):
            order = named_rng(cfg.seed, 'batches', phase_no, epoch).permutation(len(train_set))
            mask_rng = named_rng(cfg.seed, 'masking', phase_no, epoch)
            registry.zero_grad()
            epoch_losses, epoch_fluency = [], []
            for b in range(batches_per_epoch):
                batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                loss, fluency_value = self._batch_loss(batch, mask_rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss in {phase} phase at step {self.global_step + 1}")
                epoch_losses.append(value)
                epoch_fluency.append(fluency_value)
                backward(loss * (1.0 / cfg.grad_accumulation_steps))
                if (b + 1) % cfg.grad_accumulation_steps == 0 or b + 1 == batches_per_epoch:
                    optimizer.step()
                    registry.zero_grad()
                    self.global_step += 1
                    phase_steps += 1
                    for callback in self.callbacks:
                        callback.on_step(self, self.global_step)

            dev_loss, dev_metric, _ = self.evaluate(dev_set)
            row = HistoryRow(phase, epoch, self.global_step, float(np.mean(epoch_losses)),
                             float(np.mean(epoch_fluency)), dev_loss, dev_metric)
            self.history.add(row)
            logger.info("%s epoch %d step %d train_loss %.4f fluency %.4f dev_loss %.4f dev_metric %.4f",
                        phase, epoch, self.global_step, row.train_loss, row.fluency_loss, dev_loss, dev_metric)
            self._maybe_snapshot(dev_metric, dev_loss)

            if not dev_set:
                continue
            if dev_loss < phase_best_loss - 1e-7:
                phase_best_loss = dev_loss
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= cfg.patience:
                    logger.info("%s phase early stop after epoch %d", phase, epoch)
                    break

        self.history.phase_steps[phase] = phase_steps
        if self._best is not None:
            registry.load_state_dict(self._best['state'])

    def _maybe_snapshot(self, metric, loss):
        best = self._best
        loss_key = loss if math.isfinite(loss) else math.inf
        if best is None or metric > best['metric'] or (metric == best['metric'] and loss_key < best['loss']):
            self._best = {'metric': metric, 'loss': loss_key, 'state': self.model.registry.state_dict()}


class DartTrainer(_EarlyStoppingTrainer):
    """
    Differentiable prompt training.

    JOINT phase: only the PromptSpec's differentiable embedding rows are trainable,
    optimising L_C + lambda * L_F at the prompt learning rate. FULL phase:
    every parameter is trainable at the full learning rate.
    """

    def __init__(self, model, spec, config, metric_fn=accuracy, callbacks=()):
        if spec.vocab != model.vocab:
            raise ArtifactMismatchError("prompt spec was built for a different vocabulary")
        super().__init__(model, config, metric_fn, callbacks)
        self.spec = spec
        self.max_len = model.config.max_len

    def _phases(self):
        phases = list(self.config.phases)
        if JOINT in phases and not self.spec.trainable_ids:
            logger.info("prompt has no differentiable slots; skipping the JOINT phase")
            phases.remove(JOINT)
        return phases

    def _configure_phase(self, phase):
        registry = self.model.registry
        if phase == JOINT:
            registry.restrict_rows('embeddings.word', self.spec.trainable_ids)
            return self.config.prompt_lr
        registry.set_trainable(True)
        return self.config.full_lr

    def prompts(self, batch):
        return [assemble_prompt(ids, self.spec, self.max_len) for ids, _ in batch]

    def _batch_loss(self, batch, mask_rng):
        golds = [label for _, label in batch]
        lc = class_discrimination_loss(batch_class_scores(self.model, self.prompts(batch), self.spec), golds)
        if not self.config.uses_fluency:
            return lc, 0.0
        samples = []
        for ids, label in batch:
            try:
                samples.append(make_fluency_sample(ids, label, self.spec, mask_rng, self.max_len))
            except ValidationError:
                continue
        if not samples:
            return lc, 0.0
        lf = batch_fluency_loss(self.model, samples)
        return total_loss(lc, lf, self.config.lam), lf.item()

    def _log_probs(self, batch):
        scores = batch_class_scores(self.model, self.prompts(batch), self.spec)
        return op_log(scores, floor=1e-12)


class HeadTrainer(_EarlyStoppingTrainer):
    """Conventional fine-tuning: tanh-dense + linear head over the [CLS] state, all parameters trainable."""

    HEAD_PREFIX = 'head.'

    def __init__(self, model, num_classes, config, metric_fn=accuracy, callbacks=()):
        super().__init__(model, config, metric_fn, callbacks)
        d = model.config.d_model
        rng = named_rng(config.seed, 'head-init')
        registry = model.registry

        def reg(name, init, decay_exempt=False):
            if name in registry:
                return registry[name]
            return registry.register(name, init, decay_exempt=decay_exempt)

        self.dense_weight = reg('head.dense.weight', rng.normal(0.0, 0.02, size=(d, d)))
        self.dense_bias = reg('head.dense.bias', np.zeros(d), decay_exempt=True)
        self.out_weight = reg('head.out.weight', rng.normal(0.0, 0.02, size=(d, num_classes)))
        self.out_bias = reg('head.out.bias', np.zeros(num_classes), decay_exempt=True)

    def _phases(self):
        return [FULL]

    def _configure_phase(self, phase):
        self.model.registry.set_trainable(True)
        return self.config.full_lr

    def _log_probs(self, batch):
        vocab = self.model.vocab
        budget = self.model.config.max_len - 2
        sequences = [[vocab.cls_id] + list(x)[:budget] + [vocab.sep_id] for x, _ in batch]
        ids, attention = pad_batch(sequences, vocab.pad_id)
        cls_states = self.model.hidden_states(ids, attention)[:, 0, :]
        pooled = op_tanh(cls_states @ self.dense_weight + self.dense_bias)
        return op_log_softmax_rows(pooled @ self.out_weight + self.out_bias)

    def _batch_loss(self, batch, mask_rng):
        log_probs = self._log_probs(batch)
        golds = np.asarray([label for _, label in batch], dtype=np.int64)
        return -log_probs[np.arange(len(batch)), golds].mean(), 0.0


def train_dart(model, spec, train_set, dev_set, config, callbacks=(), metric_fn=accuracy):
    """
    Run DART training with early stopping and return the best-dev model.

    Args:
        model (ToyMlmModel): Pre-trained model, updated in place
        spec (PromptSpec): Prompt layout built on the model's vocabulary
        train_set (list): (token ids, label) pairs
        dev_set (list): (token ids, label) pairs
        config (TrainConfig): Hyper-parameters and phase policy
        callbacks (list): Objects with on_step(trainer, step) / on_train_end(trainer)
        metric_fn (callable): metric(predictions, golds)

    Returns:
        tuple: (trained model, TrainingHistory)
    """
    trainer = DartTrainer(model, spec, config, metric_fn=metric_fn, callbacks=callbacks)
    result = trainer.fit(train_set, dev_set)
    return result.model, result.history
