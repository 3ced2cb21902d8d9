"""Parameter registry and the AdamW optimizer with warmup/decay schedule."""
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from app.errors import ContractError, ValidationError
from app.services.tensor_engine import Parameter

logger = logging.getLogger(__name__)


class ParameterRegistry:
    """Ordered name -> Parameter map; every parameter is registered exactly once."""

    def __init__(self):
        self._params = OrderedDict()

    def register(self, name, data, decay_exempt=False):
        if name in self._params:
            raise ValidationError(f"parameter {name!r} registered twice")
        param = Parameter(data, name=name, decay_exempt=decay_exempt)
        self._params[name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def values(self):
        return list(self._params.values())

    def trainable(self):
        return [(name, p) for name, p in self._params.items() if p.requires_grad]

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def set_trainable(self, trainable=True, names=None):
        """Set the trainability flag on `names` (all parameters when None) and clear row masks."""
        for name, param in self._params.items():
            if names is None or name in names:
                param.requires_grad = trainable
                param.grad_mask = None

    def restrict_rows(self, name, rows):
        """Make only `rows` of a 2-D parameter trainable; every other parameter is frozen."""
        self.set_trainable(False)
        param = self._params[name]
        mask = np.zeros((param.shape[0], 1), dtype=param.data.dtype)
        mask[list(rows)] = 1.0
        param.requires_grad = True
        param.grad_mask = mask

    def freeze_rows(self, name, rows):
        """Hold `rows` (first axis) of one parameter fixed; other rows and parameters keep their flags."""
        param = self._params[name]
        mask = np.ones((param.shape[0],) + (1,) * (param.data.ndim - 1), dtype=param.data.dtype)
        mask[list(rows)] = 0.0
        param.grad_mask = mask if param.grad_mask is None else param.grad_mask * mask

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_state_dict(self, state, strict=True):
        if strict:
            missing = set(self._params) - set(state)
            unexpected = set(state) - set(self._params)
            if missing or unexpected:
                raise ValidationError(
                    f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
                )
        for name, values in state.items():
            if name not in self._params:
                continue
            param = self._params[name]
            if tuple(values.shape) != param.shape:
                raise ValidationError(f"shape mismatch for {name}: {values.shape} vs {param.shape}")
            param.data[...] = values

    def checksum(self, exclude_rows=None):
        """
        SHA-256 over parameter bytes.

        Args:
            exclude_rows (dict): Optional {name: row ids} left out of the digest

        Returns:
            str: Hex digest
        """
        digest = hashlib.sha256()
        exclude_rows = exclude_rows or {}
        for name, param in self._params.items():
            data = param.data
            if name in exclude_rows:
                keep = np.setdiff1d(np.arange(data.shape[0]), np.asarray(list(exclude_rows[name])))
                data = data[keep]
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(data).tobytes())
        return digest.hexdigest()


class LinearWarmupDecay:
    """Linear warmup over the first `warmup_ratio` of updates, then linear decay that reaches zero one step past the end."""

    def __init__(self, total_steps, warmup_ratio=0.1):
        self.total_steps = max(int(total_steps), 1)
        self.warmup_steps = max(int(np.ceil(warmup_ratio * self.total_steps)), 1)

    def factor(self, step):
        if step <= self.warmup_steps:
            return step / self.warmup_steps
        remaining = self.total_steps + 1 - step
        return max(0.0, remaining / (self.total_steps + 1 - self.warmup_steps))


def global_grad_norm(params):
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float(np.sum(param.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm):
    """
    Scale gradients in place so their global norm is at most `max_norm`.

    Returns:
        float: Norm before clipping
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for param in params:
            if param.grad is not None:
                param.grad *= param.grad.dtype.type(scale)
    return norm


@dataclass
class AdamWState:
    lr: float
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class AdamW:
    """
    AdamW with decoupled weight decay.

    Only parameters whose trainability flag is set are updated. Parameters
    marked `decay_exempt` (biases, layer-norm gains) skip weight decay, and a
    parameter's `grad_mask` restricts the whole update (decay included) to its
    unmasked rows.
    """

    def __init__(self, registry, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8,
                 max_grad_norm=1.0, schedule=None):
        self.registry = registry
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        self.max_grad_norm = max_grad_norm
        self.schedule = schedule

    def current_lr(self, step=None):
        step = self.state.step if step is None else step
        if self.schedule is None:
            return self.state.lr
        return self.state.lr * self.schedule.factor(step)

    def step(self):
        """
        Apply one update.

        Returns:
            float: Gradient norm before clipping
        """
        trainable = self.registry.trainable()
        for name, param in trainable:
            if param.grad is None:
                raise ContractError(f"missing gradient for trainable parameter {name!r}")

        params = [param for _, param in trainable]
        norm = global_grad_norm(params)
        if self.max_grad_norm is not None:
            clip_grad_norm(params, self.max_grad_norm)

        state = self.state
        state.step += 1
        lr = self.current_lr()
        correction1 = 1.0 - state.beta1 ** state.step
        correction2 = 1.0 - state.beta2 ** state.step

        for name, param in trainable:
            grad = param.grad
            exp_avg = state.exp_avg.setdefault(name, np.zeros_like(param.data))
            exp_avg_sq = state.exp_avg_sq.setdefault(name, np.zeros_like(param.data))
            exp_avg *= state.beta1
            exp_avg += (1.0 - state.beta1) * grad
            exp_avg_sq *= state.beta2
            exp_avg_sq += (1.0 - state.beta2) * grad * grad

            update = lr * (exp_avg / correction1) / (np.sqrt(exp_avg_sq / correction2) + state.eps)
            if state.weight_decay and not param.decay_exempt:
                update = update + lr * state.weight_decay * param.data
            if param.grad_mask is not None:
                update = update * param.grad_mask
            param.data -= update.astype(param.data.dtype)
        return norm
