"""Seeded sentiment grammar: the pre-training corpus and the EASY / HARD / MANY
few-shot tasks built on the same words.

Reviews are clauses like ``the plot was very dull .``; the corpus also pairs
reviews with a verbalised judgement after a [SEP] (``... [SEP] i think it was
terrible .``) so the pre-trained model learns what fills ``it was [MASK] .``.
"""
import logging
from dataclasses import dataclass, field

from app.errors import ValidationError
from app.services.random_streams import named_rng
from app.services.toy_mlm import UNK, Corpus, build_vocab, encode

logger = logging.getLogger(__name__)

TOPIC_SUBJECTS = {
    'movie': ('movie', 'film', 'plot', 'acting', 'story', 'ending', 'script', 'soundtrack'),
    'food': ('meal', 'dish', 'dessert', 'soup', 'pasta', 'pizza', 'menu', 'coffee'),
    'hotel': ('hotel', 'room', 'staff', 'bed', 'pool', 'lobby', 'view', 'breakfast'),
    'tech': ('phone', 'camera', 'battery', 'screen', 'laptop', 'keyboard', 'charger', 'app'),
}
TOPICS = tuple(TOPIC_SUBJECTS)
ARTICLES = ('the', 'this', 'that')
VERBS = ('was', 'is', 'seemed', 'felt', 'looked')
INTENSIFIERS = ('very', 'really', 'quite', 'so', 'truly', 'rather')
POSITIVE_WORDS = ('great', 'good', 'excellent', 'wonderful', 'amazing', 'brilliant',
                  'fantastic', 'superb', 'lovely', 'enjoyable', 'pleasant', 'solid')
NEGATIVE_WORDS = ('terrible', 'bad', 'awful', 'boring', 'horrible', 'dull',
                  'poor', 'weak', 'dreadful', 'bland', 'mediocre', 'disappointing')
# (negative, positive) pairs, most frequent verbaliser first
LABEL_WORD_PAIRS = (('terrible', 'great'), ('awful', 'fantastic'), ('horrible', 'amazing'), ('bad', 'good'))
LABEL_WORD_WEIGHTS = (0.4, 0.25, 0.2, 0.15)
TOPIC_VERBALIZERS = {
    'movie': ('flop', 'masterpiece'),
    'food': ('disgusting', 'delicious'),
    'hotel': ('filthy', 'comfortable'),
    'tech': ('broken', 'reliable'),
}
PROMPT_PREFIX = ('to', 'be', 'honest', 'overall', 'i', 'really', 'think', 'that', 'it', 'was')
FILLER_SENTENCES = (
    ('we', 'went', 'there', 'on', 'friday', 'with', 'friends', '.'),
    ('my', 'family', 'went', 'there', 'again', 'last', 'week', '.'),
    ('we', 'tried', 'it', 'at', 'night', 'with', 'my', 'family', '.'),
    ('i', 'went', 'there', 'yesterday', 'with', 'friends', '.'),
)
CONNECTIVES = ('not', 'but', 'and', ',', '.')

NEGATIVE, POSITIVE = 0, 1


def grammar_words():
    """Every natural token the grammar can emit, in a stable order."""
    words = [UNK]
    groups = [ARTICLES, VERBS, INTENSIFIERS, POSITIVE_WORDS, NEGATIVE_WORDS, CONNECTIVES, PROMPT_PREFIX]
    groups.extend(TOPIC_SUBJECTS.values())
    groups.extend(TOPIC_VERBALIZERS.values())
    groups.extend(FILLER_SENTENCES)
    for group in groups:
        for word in group:
            if word not in words:
                words.append(word)
    return words


def build_task_vocab(reserved_count=64):
    return build_vocab(grammar_words(), reserved_count)


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def _adjective(rng, polarity):
    return _pick(rng, POSITIVE_WORDS if polarity == POSITIVE else NEGATIVE_WORDS)


def simple_clause(rng, polarity, topic=None):
    topic = topic or _pick(rng, TOPICS)
    words = [_pick(rng, ARTICLES), _pick(rng, TOPIC_SUBJECTS[topic]), _pick(rng, VERBS)]
    if rng.random() < 0.4:
        words.append(_pick(rng, INTENSIFIERS))
    words.append(_adjective(rng, polarity))
    return words


def negated_clause(rng, polarity, topic=None):
    """A clause whose effective polarity is `polarity`, expressed through 'not'."""
    topic = topic or _pick(rng, TOPICS)
    return [_pick(rng, ARTICLES), _pick(rng, TOPIC_SUBJECTS[topic]), _pick(rng, VERBS),
            'not', _adjective(rng, 1 - polarity)]


def contrast_clause(rng, polarity, topic=None):
    """'<opposite clause> but <clause>': the part after 'but' decides."""
    topic = topic or _pick(rng, TOPICS)
    return simple_clause(rng, 1 - polarity, topic) + ['but'] + simple_clause(rng, polarity, topic)


def review(rng, polarity, style, topic=None):
    builders = {'simple': simple_clause, 'negated': negated_clause, 'contrast': contrast_clause}
    return builders[style](rng, polarity, topic) + ['.']


def verbalized_prompt(rng, label_word):
    prefix_len = int(rng.integers(2, len(PROMPT_PREFIX) + 1))
    return list(PROMPT_PREFIX[-prefix_len:]) + [label_word, '.']


def generate_corpus(vocab, n_sentences, seed=0):
    """
    Sample pre-training sentences from the grammar.

    Args:
        vocab (Vocabulary): Vocabulary built by `build_task_vocab`
        n_sentences (int): Number of sentences
        seed (int): Grammar seed

    Returns:
        Corpus: Token-id sentences
    """
    rng = named_rng(seed, 'grammar')
    sentences = []
    for _ in range(n_sentences):
        polarity = int(rng.integers(2))
        topic = _pick(rng, TOPICS)
        style = _pick(rng, ('simple', 'simple', 'negated', 'contrast'))
        words = review(rng, polarity, style, topic)
        kind = rng.random()
        if kind < 0.55:
            pair = LABEL_WORD_PAIRS[int(rng.choice(len(LABEL_WORD_PAIRS), p=LABEL_WORD_WEIGHTS))]
            words = words + ['[SEP]'] + verbalized_prompt(rng, pair[polarity])
        elif kind < 0.75:
            words = words + ['[SEP]'] + verbalized_prompt(rng, TOPIC_VERBALIZERS[topic][polarity])
        elif kind < 0.85:
            words = list(_pick(rng, FILLER_SENTENCES))
        ids = []
        for word in words:
            ids.append(vocab.sep_id if word == '[SEP]' else vocab.id_of(word))
        sentences.append(ids)
    return Corpus(sentences=sentences, source=f'grammar(seed={seed})')


@dataclass(frozen=True)
class Example:
    text: str
    label: int


@dataclass
class TaskData:
    """A labelled task: sampling pool, held-out test set and its base prompt."""

    name: str
    label_names: tuple
    train_pool: list
    test_set: list
    base_template: tuple = ('it', 'was', '.')
    base_mask_index: int = 2
    base_label_words: tuple = ()
    fixed_label_words: tuple = ()
    metric: str = 'accuracy'
    negative_label: int = None
    label_word_pairs: tuple = field(default=LABEL_WORD_PAIRS)

    @property
    def num_classes(self):
        return len(self.label_names)


def base_template(length):
    """
    Base template of `length` tokens ending in '.', with [MASK] placed before
    the final '.' ("... it was [MASK] .").

    Returns:
        tuple: (template words, mask index)
    """
    if not 1 <= length <= len(PROMPT_PREFIX) + 1:
        raise ValidationError(f"template length must be in [1, {len(PROMPT_PREFIX) + 1}], got {length}")
    words = PROMPT_PREFIX[len(PROMPT_PREFIX) - (length - 1):] if length > 1 else ()
    return tuple(words) + ('.',), length - 1


def _sentiment_examples(rng, n_per_class, styles):
    examples = []
    for label in (NEGATIVE, POSITIVE):
        for _ in range(n_per_class):
            examples.append(Example(' '.join(review(rng, label, _pick(rng, styles))), label))
    return examples


def _topic_examples(rng, n_per_class):
    examples = []
    for t, topic in enumerate(TOPICS):
        for polarity in (NEGATIVE, POSITIVE):
            for _ in range(n_per_class):
                words = review(rng, polarity, 'simple', topic)
                examples.append(Example(' '.join(words), 2 * t + polarity))
    return examples


def make_task(name, seed=0, pool_per_class=64, test_per_class=100):
    """
    Build one of the shipped tasks.

    EASY: the adjective's polarity decides the label.
    HARD: negation and 'but'-contrast decide, so word identity alone misleads.
    MANY: 8 classes, topic x polarity, with composite label names.

    Args:
        name (str): 'easy', 'hard' or 'many'
        seed (int): Task seed (pool and test use separate streams)
        pool_per_class (int): Examples per class available to the K-shot sampler
        test_per_class (int): Test examples per class

    Returns:
        TaskData: The task
    """
    name = name.lower()
    pool_rng = named_rng(seed, f'task-{name}-pool')
    test_rng = named_rng(seed, f'task-{name}-test')
    if name in ('easy', 'hard'):
        styles = ('simple',) if name == 'easy' else ('negated', 'contrast')
        return TaskData(
            name=name,
            label_names=('negative', 'positive'),
            train_pool=_sentiment_examples(pool_rng, pool_per_class, styles),
            test_set=_sentiment_examples(test_rng, test_per_class, styles),
            base_label_words=(('terrible',), ('great',)),
            fixed_label_words=('terrible', 'great'),
        )
    if name == 'many':
        label_names = tuple(f'{topic}_{pol}' for topic in TOPICS for pol in ('negative', 'positive'))
        base_labels = tuple(
            (TOPIC_SUBJECTS[topic][0], LABEL_WORD_PAIRS[0][pol]) for topic in TOPICS for pol in (0, 1)
        )
        fixed = tuple(TOPIC_VERBALIZERS[topic][pol] for topic in TOPICS for pol in (0, 1))
        return TaskData(
            name=name,
            label_names=label_names,
            train_pool=_topic_examples(pool_rng, pool_per_class),
            test_set=_topic_examples(test_rng, test_per_class),
            base_label_words=base_labels,
            fixed_label_words=fixed,
            metric='micro_f1',
        )
    raise ValidationError(f"unknown task {name!r} (expected easy, hard or many)")


def encode_examples(vocab, examples):
    """Encode example texts to token ids, keeping labels."""
    return [(tuple(encode(vocab, ex.text)), ex.label) for ex in examples]
