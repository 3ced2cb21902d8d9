"""Few-Shot Harness Agent - K-shot episodes over a fixed seed set, grid search on
D_dev, DART and baseline arms, ablations and mean (std) reporting."""
import csv
import hashlib
import itertools
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from app.agents.trainer import DartTrainer, HeadTrainer, TrainConfig
from app.errors import CapacityError, ConfigError, ProtocolError, ValidationError
from app.services.differentiable_prompt import (
    build_prompt_spec,
    fixed_prompt_spec,
    init_prompt_embeddings,
    with_fixed_segments,
)
from app.services.metrics import mean_std, metric_for
from app.services.random_streams import named_rng
from app.services.synthetic_data import base_template, encode_examples

logger = logging.getLogger(__name__)

DART = 'DART'
FT_HEAD = 'FT_HEAD'
FIXED_PROMPT = 'FIXED_PROMPT'
DART_NO_FLUENCY = 'DART-fluency'
DART_NO_TEMPLATE = 'DART-template'
DART_NO_LABEL = 'DART-label'
DEFAULT_TEMPLATE_LENGTH = 3
TEMPLATE_LENGTHS = (1, 2, 3, 5, 10)
REPORT_COLUMNS = ('method', 'task', 'K', 'seed', 'metric', 'config_json')


@dataclass
class EpisodeDataset:
    """K-shot train/dev splits of one seed plus the untouched test set."""

    task_name: str
    k: int
    seed: int
    train: list
    dev: list
    test: list = field(repr=False)
    test_reads: Counter = field(default_factory=Counter, repr=False)

    @property
    def split_checksum(self):
        digest = hashlib.sha256()
        for name, split in (('train', self.train), ('dev', self.dev)):
            digest.update(name.encode('utf-8'))
            for ids, label in split:
                digest.update(json.dumps([list(ids), label]).encode('utf-8'))
        return digest.hexdigest()

    def read_test(self, method):
        """Hand out the test set; each method may read it once per episode."""
        if self.test_reads[method]:
            raise ProtocolError(f"test set of seed {self.seed} already read for {method}")
        self.test_reads[method] += 1
        return self.test

    def check_protocol(self, method):
        reads = self.test_reads[method]
        if reads != 1:
            raise ProtocolError(f"{method} read the test set {reads} times on seed {self.seed}, expected 1")


def sample_k_shot(task, vocab, k, seed):
    """
    Sample K training and K dev examples per class without replacement.

    Args:
        task (TaskData): Task holding the sampling pool and test set
        vocab (Vocabulary): Vocabulary used to encode texts
        k (int): Shots per class
        seed (int): Episode seed

    Returns:
        EpisodeDataset: Disjoint train/dev splits, test set untouched
    """
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}", field='k')
    by_class = {label: [] for label in range(task.num_classes)}
    for example in task.train_pool:
        by_class[example.label].append(example)
    rng = named_rng(seed, 'sampling')
    train, dev = [], []
    for label, examples in by_class.items():
        if len(examples) < 2 * k:
            raise CapacityError(
                f"class {task.label_names[label]} has {len(examples)} examples, needs 2K = {2 * k}"
            )
        order = rng.permutation(len(examples))
        train.extend(examples[i] for i in order[:k])
        dev.extend(examples[i] for i in order[k:2 * k])
    return EpisodeDataset(
        task_name=task.name,
        k=k,
        seed=seed,
        train=encode_examples(vocab, train),
        dev=encode_examples(vocab, dev),
        test=encode_examples(vocab, task.test_set),
    )


_GRID_AXES = {f.name for f in fields(TrainConfig)} - {'seed', 'phase_policy', 'fluency'}


@dataclass(frozen=True)
class GridSpace:
    """Named candidate lists; points enumerate their Cartesian product in axis order."""

    axes: tuple

    @classmethod
    def from_dict(cls, grid):
        if not grid:
            raise ConfigError("grid is empty", field='grid')
        axes = []
        for name, values in grid.items():
            if name not in _GRID_AXES:
                raise ConfigError(f"unknown grid axis {name!r}", field=name)
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"grid axis {name!r} needs a non-empty list", field=name)
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise ConfigError(f"grid axis {name!r} takes numbers only", field=name)
            axes.append((name, tuple(values)))
        return cls(axes=tuple(axes))

    @classmethod
    def single(cls):
        return cls(axes=())

    def points(self):
        names = [name for name, _ in self.axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.axes))]

    def __len__(self):
        return len(self.points())

    def to_dict(self):
        return {name: list(values) for name, values in self.axes}


@dataclass(frozen=True)
class Arm:
    """One method configuration of the harness."""

    method: str
    kind: str = 'prompt'
    fluency: bool = True
    fixed_template: bool = False
    fixed_label: bool = False
    template_length: int = DEFAULT_TEMPLATE_LENGTH
    label_words: tuple = None
    phase_policy: str = None


def dart_arm(method=DART, template_length=DEFAULT_TEMPLATE_LENGTH, fluency=True,
             fixed_template=False, fixed_label=False):
    return Arm(method=method, fluency=fluency, fixed_template=fixed_template,
               fixed_label=fixed_label, template_length=template_length)


def fixed_prompt_arm(label_words=None, method=FIXED_PROMPT, template_length=DEFAULT_TEMPLATE_LENGTH):
    return Arm(method=method, fluency=False, fixed_template=True, fixed_label=True,
               template_length=template_length, label_words=tuple(label_words) if label_words else None,
               phase_policy='FULL_ONLY')


HEAD_ARM = Arm(method=FT_HEAD, kind='head', fluency=False, phase_policy='FULL_ONLY')
ABLATION_ARMS = (
    dart_arm(),
    dart_arm(DART_NO_FLUENCY, fluency=False),
    dart_arm(DART_NO_TEMPLATE, fixed_template=True),
    dart_arm(DART_NO_LABEL, fixed_label=True),
)


@dataclass
class RunEntry:
    method: str
    task: str
    k: int
    seed: int
    metric: float
    dev_metric: float
    config: dict
    split_checksum: str
    model: object = field(default=None, repr=False, compare=False)
    spec: object = field(default=None, repr=False, compare=False)
    history: object = field(default=None, repr=False, compare=False)
    trials: list = field(default=None, repr=False, compare=False)

    def csv_row(self):
        return [self.method, self.task, self.k, self.seed, f'{self.metric:.9g}',
                json.dumps(self.config, sort_keys=True)]


@dataclass
class RunReport:
    entries: list = field(default_factory=list)

    def extend(self, entries):
        self.entries.extend(entries)

    def groups(self):
        grouped = {}
        for entry in self.entries:
            grouped.setdefault((entry.method, entry.task, entry.k), []).append(entry)
        return grouped

    def aggregate(self):
        """Mean and population std of the test metric per (method, task, K)."""
        rows = []
        for (method, task, k), entries in self.groups().items():
            mean, std = mean_std([e.metric for e in entries])
            rows.append({
                'method': method,
                'task': task,
                'K': k,
                'seeds': [e.seed for e in entries],
                'mean': mean,
                'std': std,
                'display': format_mean_std(mean, std),
            })
        return rows

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(REPORT_COLUMNS)
            for entry in self.entries:
                writer.writerow(entry.csv_row())
        return path

    def to_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.aggregate(), indent=2, sort_keys=True))
        return path


def format_mean_std(mean, std):
    """Percent display such as '93.5 (0.5)'."""
    return f'{100 * mean:.1f} ({100 * std:.1f})'


@dataclass
class GridResult:
    config: TrainConfig
    dev_metric: float
    trainer: object
    trials: list


class FewShotHarness:
    """
    Runs methods over K-shot episodes of one task, starting every run from a
    fresh copy of the same pre-trained model.
    """

    def __init__(self, base_model, task, train_config=None, grid=None):
        self.base_model = base_model
        self.vocab = base_model.vocab
        self.task = task
        self.train_config = train_config or TrainConfig()
        self.grid = grid or GridSpace.single()
        self.metric_fn = metric_for(task.metric, task.negative_label)

    def episode(self, k, seed):
        return sample_k_shot(self.task, self.vocab, k, seed)

    # Prompt construction
    def prompt_for(self, arm):
        """
        Build the PromptSpec and initialisation bases of a prompt arm.

        Returns:
            tuple: (PromptSpec, base template ids, base label id groups)
        """
        words, mask_index = base_template(arm.template_length)
        base_ids = [self.vocab.id_of(w) for w in words]
        base_labels = [[self.vocab.id_of(w) for w in group] for group in self.task.base_label_words]
        label_words = arm.label_words or self.task.fixed_label_words
        if arm.fixed_template and arm.fixed_label:
            spec = fixed_prompt_spec(self.vocab, words, label_words, mask_index)
        else:
            spec = build_prompt_spec(self.vocab, len(words), self.task.num_classes, mask_index)
            spec = with_fixed_segments(spec,
                                       template_words=words if arm.fixed_template else None,
                                       label_words=label_words if arm.fixed_label else None)
        return spec, base_ids, base_labels

    def arm_config(self, arm, overrides=None, seed=0):
        changes = dict(overrides or {})
        changes['seed'] = seed
        if not arm.fluency:
            changes['fluency'] = False
        if arm.phase_policy:
            changes['phase_policy'] = arm.phase_policy
        return self.train_config.replace(**changes)

    def build_trainer(self, arm, config, callbacks=()):
        """Fresh model copy wrapped in the arm's trainer."""
        model = self.base_model.clone()
        if arm.kind == 'head':
            return HeadTrainer(model, self.task.num_classes, config, self.metric_fn, callbacks)
        spec, base_ids, base_labels = self.prompt_for(arm)
        init_prompt_embeddings(model, spec, base_template=base_ids, base_labels=base_labels, seed=config.seed)
        return DartTrainer(model, spec, config, self.metric_fn, callbacks)

    def train_arm(self, arm, episode, config, callbacks=()):
        trainer = self.build_trainer(arm, config, callbacks)
        result = trainer.fit(episode.train, episode.dev)
        return trainer, result

    # Selection and evaluation
    def grid_search(self, space, episode, arm):
        """
        Train one run per grid point and keep the best dev metric.

        Ties keep the earliest point in enumeration order.

        Returns:
            GridResult: Selected config, its dev metric, trained trainer and all trials
        """
        points = space.points()
        if not points:
            raise ConfigError("grid is empty", field='grid')
        best = None
        trials = []
        for point in points:
            config = self.arm_config(arm, point, seed=episode.seed)
            trainer, result = self.train_arm(arm, episode, config)
            trials.append({'config': point, 'dev_metric': result.best_dev_metric})
            logger.info("%s seed %d grid point %s dev %.4f", arm.method, episode.seed, point,
                        result.best_dev_metric)
            if best is None or result.best_dev_metric > best.dev_metric:
                best = GridResult(config, result.best_dev_metric, trainer, trials)
        best.trials = trials
        return best

    def run_arm(self, arm, episode, grid=None):
        """Select on dev, then read the test set exactly once."""
        selected = self.grid_search(grid or self.grid, episode, arm)
        trainer = selected.trainer
        _, test_metric, _ = trainer.evaluate(episode.read_test(arm.method))
        episode.check_protocol(arm.method)
        logger.info("%s task %s K=%d seed %d test %.4f", arm.method, self.task.name, episode.k,
                    episode.seed, test_metric)
        return RunEntry(
            method=arm.method,
            task=self.task.name,
            k=episode.k,
            seed=episode.seed,
            metric=test_metric,
            dev_metric=selected.dev_metric,
            config=selected.config.to_dict(),
            split_checksum=episode.split_checksum,
            model=trainer.model,
            spec=getattr(trainer, 'spec', None),
            history=trainer.history,
            trials=selected.trials,
        )

    def run_dart(self, episode, grid=None, fluency=True, fixed_template=False, fixed_label=False,
                 template_length=DEFAULT_TEMPLATE_LENGTH, method=DART):
        arm = dart_arm(method, template_length, fluency, fixed_template, fixed_label)
        return self.run_arm(arm, episode, grid)

    def run_baseline_head(self, episode, grid=None):
        return self.run_arm(HEAD_ARM, episode, grid)

    def run_fixed_prompt(self, episode, label_words=None, grid=None, method=FIXED_PROMPT,
                         template_length=DEFAULT_TEMPLATE_LENGTH):
        return self.run_arm(fixed_prompt_arm(label_words, method, template_length), episode, grid)

    def run_ablation_suite(self, episode, grid=None):
        """Full DART plus the no-fluency, fixed-template and fixed-label arms on one episode."""
        return [self.run_arm(arm, episode, grid) for arm in ABLATION_ARMS]

    # Protocol over seeds
    def run_protocol(self, arms, k, seeds, grid=None, jobs=1):
        """
        Run every arm on the episode of every seed.

        Args:
            arms (list): Arms to run; all share each seed's episode
            k (int): Shots per class
            seeds (list): Episode seeds
            grid (GridSpace): Hyper-parameter grid (defaults to the harness grid)
            jobs (int): Worker processes; seeds run in parallel when > 1

        Returns:
            RunReport: Per-seed entries in seed order
        """
        arms = list(arms)
        grid = grid or self.grid
        report = RunReport()
        if jobs > 1 and len(seeds) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for entries in pool.map(_run_seed, itertools.repeat(self), itertools.repeat(arms),
                                        itertools.repeat(k), seeds, itertools.repeat(grid)):
                    report.extend(entries)
        else:
            for seed in seeds:
                report.extend(_run_seed(self, arms, k, seed, grid))
        return report

    def template_length_sweep(self, k, seeds, lengths=TEMPLATE_LENGTHS, grid=None, jobs=1):
        arms = [dart_arm(f'{DART}-m{length}', template_length=length) for length in lengths]
        return self.run_protocol(arms, k, seeds, grid, jobs)

    def label_word_study(self, k, seeds, pairs=None, grid=None, jobs=1):
        """DART against fixed prompts using each (negative, positive) label-word pair."""
        if self.task.num_classes != 2:
            raise ValidationError("the label-word study needs a binary task")
        pairs = pairs or self.task.label_word_pairs
        arms = [dart_arm()]
        arms.extend(fixed_prompt_arm(pair, method=f'{FIXED_PROMPT}-{pair[1]}/{pair[0]}') for pair in pairs)
        return self.run_protocol(arms, k, seeds, grid, jobs)


def _run_seed(harness, arms, k, seed, grid):
    episode = harness.episode(k, seed)
    return [harness.run_arm(arm, episode, grid) for arm in arms]
