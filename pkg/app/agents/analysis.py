"""Analysis Agent - intra/inter-class distance ratio of [MASK] states, captures
during training, nearest-vocabulary projection of label embeddings and exports."""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from app.errors import NumericError, ValidationError
from app.services.differentiable_prompt import assemble_prompt, mask_hidden_states
from app.services.tensor_engine import no_grad

logger = logging.getLogger(__name__)


@dataclass
class LabeledStates:
    """[MASK]-position hidden states with their gold classes, tagged by training step."""

    vectors: np.ndarray
    labels: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValidationError(f"states must be a [N, d] matrix, got shape {self.vectors.shape}")
        if len(self.labels) != len(self.vectors):
            raise ValidationError(f"{len(self.vectors)} vectors but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.vectors.shape[1]


def rd_ratio(states):
    """
    Ratio of the mean intra-class to the mean inter-class Euclidean distance.

    Each class's pairwise double sum (i == j terms included) is normalised by
    N_c^2 and each ordered class pair's cross sum by N_c1 * N_c2.

    Args:
        states (LabeledStates): At least two classes

    Returns:
        float: D_intra / D_inter
    """
    vectors = np.asarray(states.vectors, dtype=np.float64)
    classes = np.unique(states.labels)
    if len(classes) < 2:
        raise ValidationError("inter-class distance is undefined for fewer than 2 classes")
    groups = [vectors[states.labels == c] for c in classes]
    intra = np.mean([cdist(g, g).sum() / len(g) ** 2 for g in groups])
    inter = np.mean([
        cdist(a, b).sum() / (len(a) * len(b))
        for i, a in enumerate(groups)
        for j, b in enumerate(groups)
        if i != j
    ])
    if inter == 0:
        raise NumericError("mean inter-class distance is zero")
    return float(intra / inter)


def collect_mask_states(model, spec, dataset, step=0, batch_size=32):
    """Final-layer [MASK] states of (ids, label) pairs under the model's current parameters."""
    max_len = model.config.max_len
    blocks = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            prompts = [assemble_prompt(ids, spec, max_len) for ids, _ in dataset[start:start + batch_size]]
            blocks.append(mask_hidden_states(model, prompts).data)
    vectors = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, model.config.d_model))
    return LabeledStates(vectors, [label for _, label in dataset], step)


class StateCapture:
    """
    Training callback recording [MASK] states of a capture set at chosen
    global steps. It only runs gradient-free inference.
    """

    def __init__(self, model, spec, dataset, at_steps):
        at_steps = list(at_steps)
        if at_steps != sorted(at_steps):
            raise ValidationError(f"capture steps must be sorted ascending, got {at_steps}")
        self.model = model
        self.spec = spec
        self.dataset = dataset
        self.at_steps = at_steps
        self.captured = {}

    def on_step(self, trainer, step):
        if step in self.at_steps and step not in self.captured:
            self.captured[step] = collect_mask_states(self.model, self.spec, self.dataset, step)

    def on_train_end(self, trainer):
        skipped = [s for s in self.at_steps if s not in self.captured]
        if skipped:
            logger.warning("capture steps %s beyond training length (%d steps); skipped",
                           skipped, trainer.global_step)

    def states(self):
        return [self.captured[s] for s in self.at_steps if s in self.captured]


def capture_mask_states(model, spec, dataset, at_steps):
    """Callback for `train_dart` capturing [MASK] states of `dataset` at `at_steps`."""
    return StateCapture(model, spec, dataset, at_steps)


def rd_curve(states_list):
    """(step, R_D) for each captured set."""
    return [(s.step, rd_ratio(s)) for s in states_list]


def train_with_capture(harness, arm, episode, at_steps, config=None):
    """
    Train one arm on an episode without early stopping and capture dev-set
    [MASK] states at `at_steps`.

    Returns:
        StateCapture: The filled callback
    """
    if config is None:
        config = harness.arm_config(arm, seed=episode.seed)
    trainer = harness.build_trainer(arm, config.replace(patience=config.epochs))
    capture = StateCapture(trainer.model, trainer.spec, episode.dev, at_steps)
    trainer.callbacks.append(capture)
    trainer.fit(episode.train, episode.dev)
    return capture


def write_rd_curve_csv(rows, path):
    """Rows of (method, step, rd_ratio)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(('method', 'step', 'rd_ratio'))
        for method, step, value in rows:
            writer.writerow((method, step, f'{value:.9g}'))
    return path


@dataclass
class SlotNeighbors:
    slot_id: int
    class_index: int
    neighbors: list = field(default_factory=list)
    degenerate: bool = False


@dataclass
class NeighborReport:
    k: int
    slots: list = field(default_factory=list)

    def to_dict(self):
        return {'k': self.k, 'slots': [asdict(slot) for slot in self.slots]}

    def to_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def nearest_tokens(model, token_id, k):
    """
    Natural tokens ranked by cosine similarity to one embedding row.

    Returns:
        tuple: (list of (token, similarity), degenerate flag)
    """
    table = np.asarray(model.word_embeddings.data, dtype=np.float64)
    query = table[token_id]
    if not np.any(query):
        return [], True
    candidates = np.asarray(model.vocab.natural_ids(), dtype=np.int64)
    candidates = candidates[np.linalg.norm(table[candidates], axis=1) > 0]
    similarity = 1.0 - cdist(query[None, :], table[candidates], metric='cosine')[0]
    order = np.lexsort((candidates, -similarity))[:k]
    return [(model.vocab.tokens[candidates[i]], float(similarity[i])) for i in order], False


def nearest_labels(model, spec, k=3):
    """
    Project every label slot onto its top-k natural tokens by cosine similarity.

    Ties are broken by token id. A zero label vector yields an empty list
    flagged as degenerate.

    Args:
        model (ToyMlmModel): Model holding the label rows
        spec (PromptSpec): Prompt layout naming the label slots
        k (int): Neighbours per slot (truncated to the natural vocabulary size)

    Returns:
        NeighborReport: Ranked neighbours per label slot
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    report = NeighborReport(k=k)
    for class_index, slot_id in enumerate(spec.label_slot_ids):
        neighbors, degenerate = nearest_tokens(model, slot_id, k)
        if degenerate:
            logger.warning("label slot %d has a zero embedding; no neighbours reported", slot_id)
        report.slots.append(SlotNeighbors(slot_id, class_index, neighbors, degenerate))
    return report


def export_states_csv(states, path):
    """
    Write states as CSV: step, class, then one column per hidden dimension.

    Args:
        states (LabeledStates | list): One set or several (e.g. one per step)
        path (str | Path): Output file

    Returns:
        Path: Written file
    """
    if isinstance(states, LabeledStates):
        states = [states]
    dim = states[0].dim if states else 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['step', 'class'] + [f'h{i}' for i in range(dim)])
        for block in states:
            for vector, label in zip(block.vectors, block.labels):
                writer.writerow([block.step, int(label)] + [f'{v:.9g}' for v in vector])
    return path


def read_states_csv(path):
    """Parse a file written by `export_states_csv` back into per-step LabeledStates."""
    with open(path, newline='') as handle:
        reader = csv.reader(handle)
        header = next(reader)
        dim = len(header) - 2
        rows = {}
        for row in reader:
            block = rows.setdefault(int(row[0]), ([], []))
            block[0].append([float(v) for v in row[2:]])
            block[1].append(int(row[1]))
    return [LabeledStates(np.asarray(v, dtype=np.float64).reshape(-1, dim), labels, step)
            for step, (v, labels) in sorted(rows.items())]
