"""Configuration settings for the DART prompt engine."""
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _int_env(name, default):
    """Integer environment value, or `default` when unset or malformed."""
    try:
        return int(os.getenv(name, default))
    except (TypeError, ValueError):
        return default


class Config:
    """Base configuration class."""

    # Database settings (run registry)
    SQLALCHEMY_DATABASE_URI = os.getenv('DATABASE_URL', 'sqlite:///dart_runs.db')
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    # Logging and output
    LOG_LEVEL = os.getenv('DART_LOG_LEVEL', 'INFO').upper()
    OUTPUT_DIR = os.getenv('DART_OUTPUT_DIR', 'runs')
    DEFAULT_JOBS = _int_env('DART_JOBS', 1)

    # Seed override; None means "use the run config's seed"
    SEED_OVERRIDE = os.getenv('DART_SEED')

    # Few-shot protocol: fixed seed set and default shots per class
    DEFAULT_SEEDS = [13, 21, 42, 87, 100]
    DEFAULT_K = 16
    SUPPORTED_K = [8, 16, 32]

    # Steps at which [MASK] representations are captured for analysis
    DEFAULT_CAPTURE_STEPS = [10, 30, 50, 70]

    # Training defaults (toy-scale learning rates)
    TRAIN_DEFAULTS = {
        'lam': 1.0,
        'epochs': 20,
        'batch_size': 8,
        'prompt_lr': 5e-3,
        'full_lr': 5e-4,
        'weight_decay': 0.01,
        'patience': 5,
        'grad_accumulation_steps': 1,
    }

    # Grid searched on D_dev by `sweep` when no grid file is given
    DEFAULT_GRID = {
        'full_lr': [1e-4, 5e-4, 1e-3],
        'lam': [0.1, 0.5, 1.0],
    }

    @staticmethod
    def validate_config():
        """Validate environment-provided values."""
        problems = []

        seed = os.getenv('DART_SEED')
        if seed is not None:
            try:
                int(seed)
            except ValueError:
                problems.append('DART_SEED')

        jobs = os.getenv('DART_JOBS')
        if jobs is not None and (not jobs.isdigit() or int(jobs) < 1):
            problems.append('DART_JOBS')

        if problems:
            return False, problems
        return True, []


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True


class TestingConfig(Config):
    """Configuration used by the test suite."""
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite:///:memory:'


class ProductionConfig(Config):
    """Production configuration."""
    DEBUG = False


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}
