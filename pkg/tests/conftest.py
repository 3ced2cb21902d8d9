"""Shared fixtures: tiny vocabularies and models, a small task episode and the Flask app."""
import numpy as np
import pytest

from app import create_app
from app.agents.fewshot_harness import sample_k_shot
from app.agents.trainer import TrainConfig
from app.models import db
from app.services.synthetic_data import build_task_vocab, make_task
from app.services.toy_mlm import UNK, MlmConfig, ToyMlmModel, build_vocab

TINY_WORDS = [UNK, 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i']


@pytest.fixture
def tiny_vocab():
    """10 natural tokens and 8 reserved ones: V = 22, reserved ids [14, 22)."""
    return build_vocab(TINY_WORDS, 8)


def make_tiny_model(vocab, seed=0, d_model=8, n_layers=1, max_len=24):
    config = MlmConfig(vocab_size=vocab.size, d_model=d_model, n_layers=n_layers, n_heads=2,
                       d_ff=2 * d_model, max_len=max_len)
    return ToyMlmModel(config, vocab, seed=seed)


@pytest.fixture
def tiny_model(tiny_vocab):
    return make_tiny_model(tiny_vocab)


@pytest.fixture(scope='session')
def task_vocab():
    return build_task_vocab(reserved_count=16)


def make_task_model(vocab, seed=0):
    config = MlmConfig(vocab_size=vocab.size, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=48)
    return ToyMlmModel(config, vocab, seed=seed)


@pytest.fixture
def task_model(task_vocab):
    return make_task_model(task_vocab)


@pytest.fixture(scope='session')
def easy_task():
    return make_task('easy', seed=0, pool_per_class=16, test_per_class=6)


@pytest.fixture
def episode(easy_task, task_vocab):
    """K = 4 per class: 8 train and 8 dev examples."""
    return sample_k_shot(easy_task, task_vocab, 4, 13)


@pytest.fixture
def quick_config():
    return TrainConfig(epochs=2, batch_size=4, patience=5, prompt_lr=1e-2, full_lr=1e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def app():
    """Create application for testing."""
    app = create_app('testing')
    yield app
    with app.app_context():
        db.session.remove()
        db.drop_all()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
