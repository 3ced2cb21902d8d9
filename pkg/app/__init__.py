"""Flask application initialization."""
import logging

from flask import Flask
from config import config

__version__ = '0.3.0'


def create_app(config_name='default'):
    """
    Create and configure the Flask application.

    Args:
        config_name (str): Configuration name (default, development, testing, production)

    Returns:
        Flask: Configured Flask application
    """
    app = Flask(__name__)

    # Load configuration
    config_obj = config.get(config_name, config['default'])
    app.config.from_object(config_obj)

    # Logging
    logging.basicConfig(
        level=app.config['LOG_LEVEL'],
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    app.logger.setLevel(app.config['LOG_LEVEL'])

    # Validate environment
    is_valid, problems = config_obj.validate_config()
    if not is_valid:
        app.logger.warning(f"Ignoring invalid environment values: {', '.join(problems)}")
        if 'DART_SEED' in problems:
            app.config['SEED_OVERRIDE'] = None
        if 'DART_JOBS' in problems:
            app.config['DEFAULT_JOBS'] = 1

    # Initialize database
    from app.models import db
    db.init_app(app)

    # Create tables
    with app.app_context():
        db.create_all()

    # Register CLI commands
    from app import commands
    app.register_blueprint(commands.bp)

    return app
